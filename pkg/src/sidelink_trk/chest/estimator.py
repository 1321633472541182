"""Spatial-augmentation CPD channel estimator.

The URA tensor (n_z, n_x, S) is re-indexed so that the first few
subcarrier shifts are folded into the spatial modes::

    aug[nz*(Lz+1) + p, nx*(Lx+1) + q, v] = Y[nz, nx, p + q + v]

which turns each path into the rank-1 term
``(a_z kron d[:Lz+1]) o (a_x kron d[:Lx+1]) o d[:V]`` with
``V = S - Lz - Lx``. A CP decomposition of the augmented tensor gives one
factor triplet per path, from which delay (phase slope of the frequency
factor), elevation and azimuth (1-D searches) and gain (least squares on the
raw tensor) follow.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

from ..crlb import jacobian
from ..scene import PathParams
from ..waveform import ArrayConfig, ObservationTensor, OfdmConfig, delay_steering, \
    steering_x, steering_z
from . import kernels


class IllConditionedGram(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SaConfig:
    n_x_aug: int = 2
    n_z_aug: int = 2
    max_rank: int = 6
    als_max_iters: int = 200
    als_tol: float = 1e-8
    angle_grid_step: float = np.deg2rad(0.5)
    restarts: int = 5
    ridge: float = 1e-10
    rank_improvement: float = 0.05
    floor_db: float = 6.0
    refine_delay: bool = True
    noise_sigmas: float = 3.0
    ml_refine: bool = True
    ml_max_nfev: int = 50

    def __post_init__(self):
        if self.n_x_aug < 0 or self.n_z_aug < 0:
            raise ValueError("augmentation orders must be non-negative")
        if self.max_rank < 1:
            raise ValueError("max_rank must be at least 1")
        if self.restarts < 1 or self.als_max_iters < 1:
            raise ValueError("need at least one restart and one iteration")

    def n_freq(self, n_subcarriers: int) -> int:
        return n_subcarriers - self.n_x_aug - self.n_z_aug


@dataclass
class PathEstimateSet:
    paths: list = field(default_factory=list)
    rank_used: int = 0
    residual: float = 1.0
    energies: np.ndarray = field(default_factory=lambda: np.zeros(0))
    boundary_flags: list = field(default_factory=list)
    residual_by_rank: list = field(default_factory=list)

    def __len__(self):
        return len(self.paths)

    def __iter__(self):
        return iter(self.paths)

    def __getitem__(self, i):
        return self.paths[i]

    @property
    def toas(self) -> np.ndarray:
        return np.array([p.toa for p in self.paths])


@dataclass
class CpdResult:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    residual: float
    history: np.ndarray
    n_ill: int = 0

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def factors(self):
        return self.A, self.B, self.C


def augment_index(shape, cfg: SaConfig):
    """Flat source index (into the C-ordered input) for every augmented entry."""
    nz, nx, S = shape
    Lz, Lx = cfg.n_z_aug, cfg.n_x_aug
    V = S - Lz - Lx
    iz, p, ix, q, v = np.ix_(np.arange(nz), np.arange(Lz + 1), np.arange(nx),
                             np.arange(Lx + 1), np.arange(V))
    src = (iz * nx + ix) * S + (p + q + v)
    return src.reshape(nz * (Lz + 1), nx * (Lx + 1), V)


def augment(tensor, cfg: SaConfig) -> np.ndarray:
    """Spatially augmented tensor, shape (n_z(Lz+1), n_x(Lx+1), V)."""
    Y = tensor.data if isinstance(tensor, ObservationTensor) else np.asarray(tensor)
    if Y.ndim != 3:
        raise ValueError("expected a 3-D tensor")
    if cfg.n_freq(Y.shape[2]) < 2:
        raise ValueError("augmentation leaves fewer than two frequency samples")
    return Y.reshape(-1)[augment_index(Y.shape, cfg)]


def _random_factor(rng, n, R):
    X = rng.standard_normal((n, R)) + 1j * rng.standard_normal((n, R))
    return X / np.linalg.norm(X, axis=0)


def _reduce_frequency_mode(Y):
    """Project the frequency mode onto the row space of the (IJ, K) unfolding.

    Every ALS update of the frequency factor is a combination of rows of the
    unfolding, so running the sweeps on ``Y2 @ V`` with ``C~ = V^T C`` gives
    the same iterates as the full problem (exact, not an approximation) for
    any frequency start inside that row space.
    Returns ``(Y_reduced, V)``; ``V`` is None when no reduction applies.
    """
    I, J, K = Y.shape
    if K <= I * J:
        return Y, None
    Y2 = Y.reshape(I * J, K)
    _, _, Vh = np.linalg.svd(Y2, full_matrices=False)
    V = Vh.conj().T                                      # (K, IJ)
    return np.ascontiguousarray((Y2 @ V).reshape(I, J, -1)), V


def _mode_bases(Y):
    """Left singular vectors and singular values of the three unfoldings."""
    out = []
    for m in range(3):
        U, sv, _ = np.linalg.svd(np.moveaxis(Y, m, 0).reshape(Y.shape[m], -1),
                                 full_matrices=False)
        out.append((U, sv))
    return out


def _gevd_init(Y, R, bases=None):
    """Algebraic CPD starting point from a generalized eigendecomposition.

    The two largest modes are compressed to R dimensions and the smallest
    to two slices; with ``G_k = A D_k B^T`` the eigenvectors of
    ``G_1 G_2^{-1}`` give A, and B and the third factor follow by least
    squares. Returns None when the mode sizes do not allow it. ``bases``
    are the unfolding SVDs from ``_mode_bases``, shared across ranks.
    """
    dims = Y.shape
    s, q, p = np.argsort(dims, kind="stable")
    if dims[q] < R or dims[s] < 2:
        return None
    X = np.transpose(Y, (p, q, s))
    P, Q, S = X.shape
    if bases is None:
        bases = _mode_bases(Y)
    Up = bases[p][0][:, :R]
    Uq = bases[q][0][:, :R]
    Us = bases[s][0][:, :2]
    G = np.einsum("pqs,pa,qb,sc->abc", X, Up.conj(), Uq.conj(), Us.conj())
    try:
        M = np.linalg.solve(G[:, :, 1].T, G[:, :, 0].T).T
        _, Ac = np.linalg.eig(M)
        Bt = np.linalg.solve(Ac, G[:, :, 0])
    except np.linalg.LinAlgError:
        return None
    Fp = Up @ Ac
    Fq = Uq @ Bt.T
    Fp /= np.maximum(np.linalg.norm(Fp, axis=0), 1e-300)
    Fq /= np.maximum(np.linalg.norm(Fq, axis=0), 1e-300)
    kr = (Fp[:, None, :] * Fq[None, :, :]).reshape(P * Q, R)
    Fs = np.linalg.lstsq(kr, np.moveaxis(X, 2, 0).reshape(S, -1).T, rcond=None)[0].T
    out = {p: Fp, q: Fq, s: Fs}
    factors = [np.ascontiguousarray(out[m]) for m in range(3)]
    if not all(np.all(np.isfinite(f)) for f in factors):
        return None
    return factors


def _numerical_mode_rank(bases, tol=1e-9):
    out = []
    for _, sv in bases:
        out.append(int(np.sum(sv > tol * sv[0])) if sv.size and sv[0] > 0 else 0)
    return min(out)


def _prune_excess(Y, best, rank, cfg, seed, backend, reduced):
    """Replace an over-parameterised exact fit by a lower-rank one plus zeros.

    An exact rank-R fit of data whose CP rank is lower is not unique: the
    surplus component can be smeared across the others. When some unfolding
    is rank-deficient (so the data may be of lower rank) and a rank-(R-1)
    fit does as well, that fit is returned with a zero-energy component
    appended, which makes the surplus explicit. Noisy data never triggers
    this since noise makes every unfolding full rank. The frequency-mode
    reduction keeps the unfolding singular values, so the ranks come from
    the cached bases of the reduced tensor.
    """
    if rank < 2 or _numerical_mode_rank(reduced[2]) >= rank:
        return best
    lower = cpd_als(Y, rank - 1, cfg, seed=seed, backend=backend, _reduced=reduced)
    if lower.residual > best.residual + 1e-9:
        return best
    pad = [np.hstack([f, np.zeros((f.shape[0], 1), dtype=f.dtype)])
           for f in (lower.A, lower.B, lower.C)]
    for f in pad[:2]:
        f[0, -1] = 1.0
    return CpdResult(*pad, lower.residual, lower.history, lower.n_ill)


def cpd_als(aug_tensor: np.ndarray, rank: int, cfg: SaConfig, seed=None,
            backend: str | None = None, _reduced=None) -> CpdResult:
    """Best of ``cfg.restarts`` ALS runs.

    The first run starts from an algebraic (GEVD) initialisation when the
    mode sizes allow it; the others start from random factors.

    Restarts stop early once two runs land on the same residual (relative
    agreement 1e-9): that minimum has then been found twice and further
    restarts almost never beat it.
    """
    if rank > cfg.max_rank:
        raise ValueError(f"rank {rank} exceeds max_rank {cfg.max_rank}")
    Y = np.ascontiguousarray(aug_tensor, dtype=complex)
    I, J, K = Y.shape
    if _reduced is None:
        Yr, V = _reduce_frequency_mode(Y)
        bases = _mode_bases(Yr)
    else:
        Yr, V, bases = _reduced
    rng = np.random.default_rng(seed)
    best = None
    seen = []
    total_ill = 0
    algebraic = _gevd_init(Yr, rank, bases)
    for i in range(cfg.restarts):
        if i == 0 and algebraic is not None:
            A0, B0, C0 = algebraic
        else:
            A0 = _random_factor(rng, I, rank)
            B0 = _random_factor(rng, J, rank)
            C0 = _random_factor(rng, K, rank)
            if V is not None:
                C0 = V.T @ C0
        A, B, C, hist, n_ill = kernels.als_run(Yr, A0, B0, C0, cfg.als_max_iters,
                                               cfg.als_tol, cfg.ridge, backend)
        r = float(hist[-1]) if len(hist) else 1.0
        total_ill += n_ill
        if best is None or r < best.residual:
            best = CpdResult(A, B, C, r, hist, n_ill)
        if r < 1e-12 or any(abs(r - q) <= 1e-9 * max(r, q) for q in seen):
            break
        seen.append(r)
    if V is not None:
        best.C = V.conj() @ best.C
    best = _prune_excess(Y, best, rank, cfg, seed, backend, (Yr, V, bases))
    if total_ill:
        warnings.warn(f"ill-conditioned Gram matrix in ALS at rank {rank}; "
                      f"ridge {cfg.ridge:g} applied", IllConditionedGram, stacklevel=2)
    # exact residual of the returned model
    Yhat = np.einsum("ir,jr,kr->ijk", best.A, best.B, best.C)
    nrm = np.linalg.norm(Y)
    best.residual = float(np.linalg.norm(Y - Yhat) / nrm) if nrm > 0 else 0.0
    return best


# --- parameter extraction -------------------------------------------------

def phase_slope_delay(freq_factor: np.ndarray, subcarrier_spacing: float) -> float:
    """Delay from the angle of the lag-one autocorrelation of a frequency factor."""
    acc = np.vdot(freq_factor[:-1], freq_factor[1:])
    return float(-np.angle(acc) / (2 * np.pi * subcarrier_spacing))


def _refine_delay(c, tau0, df, resolution):
    # 1-D periodogram peak around the phase-slope estimate
    k = np.arange(len(c))

    def cost(t):
        return -abs(np.vdot(np.exp(-2j * np.pi * df * k * t), c)) ** 2

    half = 0.25 * resolution
    out = minimize_scalar(cost, bounds=(tau0 - half, tau0 + half), method="bounded",
                          options={"xatol": 1e-7 * resolution})
    return float(out.x)


def _search_angle(score, lo, hi, step):
    """Grid search then bounded refinement of a 1-D score; returns (angle, at_boundary)."""
    grid = np.arange(lo, hi + step / 2, step)
    grid[-1] = min(grid[-1], hi)
    vals = score(grid)
    i = int(np.argmax(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    out = minimize_scalar(lambda t: -float(score(np.array([t]))[0]), bounds=(a, b),
                          method="bounded", options={"xatol": 1e-10})
    theta = float(out.x)
    at_boundary = bool(theta - lo < 1e-6 or hi - theta < 1e-6)
    return float(np.clip(theta, lo, hi)), at_boundary


def _aug_delay_block(ofdm, tau, L):
    return delay_steering(ofdm, tau, L + 1)


def estimate_angles(az_factor, el_factor, tau, array: ArrayConfig, ofdm: OfdmConfig,
                    cfg: SaConfig):
    """Elevation first, then azimuth with elevation fixed."""
    dz = _aug_delay_block(ofdm, tau, cfg.n_z_aug)
    dx = _aug_delay_block(ofdm, tau, cfg.n_x_aug)
    kz = 2 * np.pi / array.wavelength * array.d_z * np.arange(array.n_z)
    kx = 2 * np.pi / array.wavelength * array.d_x * np.arange(array.n_x)
    half = np.pi / 2

    def el_score(els):
        az_ = np.exp(1j * np.outer(np.sin(els), kz))                    # (G, n_z)
        cand = (az_[:, :, None] * dz[None, None, :]).reshape(len(els), -1)
        return np.abs(cand.conj() @ el_factor) ** 2

    el, flag_el = _search_angle(el_score, -half, half, cfg.angle_grid_step)

    def az_score(azs):
        ax_ = np.exp(1j * np.outer(np.cos(el) * np.sin(azs), kx))
        cand = (ax_[:, :, None] * dx[None, None, :]).reshape(len(azs), -1)
        return np.abs(cand.conj() @ az_factor) ** 2

    az, flag_az = _search_angle(az_score, -half, half, cfg.angle_grid_step)
    return az, el, flag_az or flag_el


def _basis(params, array, ofdm):
    cols = [
        np.einsum("i,j,k->ijk", steering_z(array, az, el), steering_x(array, az, el),
                  delay_steering(ofdm, tau)).ravel()
        for tau, az, el in params
    ]
    return np.stack(cols, axis=1) if cols else np.zeros((array.size * ofdm.n_subcarriers, 0))


def gain_floor(noise_variance: float, n_entries: int, floor_db: float) -> float:
    """Power floor ``floor_db`` above the LS gain variance of a unit-modulus column."""
    std = np.sqrt(noise_variance / n_entries)
    return float((10 ** (floor_db / 20) * std) ** 2)


def canonical_angles(az: float, el: float) -> tuple[float, float]:
    """Equivalent (az, el) with both in [-pi/2, pi/2].

    The URA response depends on ``cos(el) sin(az)`` and ``sin(el)`` only, so
    ``(az, el)`` and ``(-az, +-pi - el)`` as well as ``(az, el)`` and
    ``(pi - az, el)`` are indistinguishable.
    """
    el = (el + np.pi) % (2 * np.pi) - np.pi
    if el > np.pi / 2:
        az, el = -az, np.pi - el
    elif el < -np.pi / 2:
        az, el = -az, -np.pi - el
    az = (az + np.pi) % (2 * np.pi) - np.pi
    if az > np.pi / 2:
        az = np.pi - az
    elif az < -np.pi / 2:
        az = -np.pi - az
    return float(az), float(el)


def ml_refine(params, gains, y, array: ArrayConfig, ofdm: OfdmConfig,
              with_angles: bool = True, max_nfev: int = 50):
    """Structured least-squares polish of (ToA, AoA, gain) on the raw tensor.

    The CPD factors are unconstrained, so with closely spaced paths they
    absorb noise that the parametric model cannot; fitting the parametric
    model directly (Levenberg-Marquardt from the CPD estimates) is the local
    maximum-likelihood estimate under white Gaussian noise. The result is
    kept only if the fit improves and no delay moves by more than one
    resolution cell; otherwise the inputs come back unchanged.
    """
    L = len(params)
    res = ofdm.delay_resolution
    gs = max(float(np.abs(gains).max()), 1e-300)
    per = [0, 1, 2, 3, 4] if with_angles else [0, 3, 4]
    cols = [5 * i + k for i in range(L) for k in per]
    unit = np.tile(np.array([res, 1.0, 1.0, gs, gs])[per], L)

    def paths_of(x):
        v = x.reshape(L, len(per)) * unit.reshape(L, len(per))
        out = []
        for row in v:
            tau, re, im = row[0], row[-2], row[-1]
            az, el = (row[1], row[2]) if with_angles else (0.0, 0.0)
            out.append(PathParams(complex(re, im), tau, az, el))
        return out

    def fun(x):
        ps = paths_of(x)
        r = _basis([(p.toa, p.aoa_az, p.aoa_el) for p in ps], array, ofdm) @ \
            np.array([p.gain for p in ps]) - y
        return np.concatenate([r.real, r.imag])

    def jac(x):
        J = jacobian(paths_of(x), array, ofdm, with_cru=False)[:, cols] * unit
        return np.vstack([J.real, J.imag])

    x0 = np.array([[t, az, el, g.real, g.imag] for (t, az, el), g in zip(params, gains)])
    x0 = (x0[:, per] / unit.reshape(L, len(per))).ravel()
    f0 = fun(x0)
    try:
        out = least_squares(fun, x0, jac=jac, method="lm", xtol=1e-12, ftol=1e-12,
                            max_nfev=max_nfev)
    except (ValueError, np.linalg.LinAlgError):
        return params, gains
    if not np.all(np.isfinite(out.x)) or out.cost > 0.5 * f0 @ f0:
        return params, gains
    ps = paths_of(out.x)
    if any(abs(p.toa - q[0]) > res for p, q in zip(ps, params)):
        return params, gains
    return ([(p.toa, *canonical_angles(p.aoa_az, p.aoa_el)) for p in ps],
            np.array([p.gain for p in ps], dtype=complex))


def extract_params(factors, tensor: ObservationTensor, array: ArrayConfig,
                   ofdm: OfdmConfig, cfg: SaConfig, with_angles: bool = True) -> PathEstimateSet:
    """Per-path (gain, ToA, AoA) from CPD factors of the augmented tensor."""
    A, B, C = factors
    df = ofdm.subcarrier_spacing
    params, flags = [], []
    for r in range(C.shape[1]):
        c = C[:, r]
        if not np.any(c):
            continue
        tau = phase_slope_delay(c, df)
        if cfg.refine_delay:
            tau = _refine_delay(c, tau, df, ofdm.delay_resolution)
        if with_angles:
            az, el, flag = estimate_angles(B[:, r], A[:, r], tau, array, ofdm, cfg)
        else:
            az, el, flag = 0.0, 0.0, False
        params.append((tau, az, el))
        flags.append(flag)

    params, flags = _dedupe(params, flags, ofdm.delay_resolution)
    y = tensor.data.ravel()
    floor = gain_floor(tensor.noise_variance, y.size, cfg.floor_db)
    gains = np.zeros(0, dtype=complex)
    while params:
        Bk = _basis(params, array, ofdm)
        gains = np.linalg.lstsq(Bk, y, rcond=None)[0]
        power = np.abs(gains) ** 2
        keep = (power > floor) & (power > 1e-12 * power.max())
        if keep.all():
            break
        params = [p for p, k in zip(params, keep) if k]
        flags = [f for f, k in zip(flags, keep) if k]

    if cfg.ml_refine and params:
        params, gains = ml_refine(params, gains, y, array, ofdm, with_angles, cfg.ml_max_nfev)

    order = np.argsort([p[0] for p in params], kind="stable")
    paths = [
        PathParams(complex(gains[i]), params[i][0], params[i][1], params[i][2],
                   bounce_count=None, is_los=False)
        for i in order
    ]
    return PathEstimateSet(
        paths=paths,
        rank_used=C.shape[1],
        energies=np.abs(gains[order]) ** 2 if len(paths) else np.zeros(0),
        boundary_flags=[flags[i] for i in order],
    )


def _dedupe(params, flags, resolution):
    out, out_flags = [], []
    for p, f in zip(params, flags):
        if any(abs(p[0] - q[0]) < 1e-3 * resolution and abs(p[1] - q[1]) < 1e-3
               and abs(p[2] - q[2]) < 1e-3 for q in out):
            continue
        out.append(p)
        out_flags.append(f)
    return out, out_flags


def select_rank(aug: np.ndarray, cfg: SaConfig, seed=None, backend=None,
                noise_variance: float | None = None):
    """Residual-elbow model order.

    The sweep stops once another component helps by less than
    ``cfg.rank_improvement`` (relative), or, when the noise variance is known,
    once the residual energy is within ``cfg.noise_sigmas`` standard
    deviations of the noise energy a rank-R fit is expected to leave. Each
    input sample appears up to (Lz+1)(Lx+1) times in the augmented tensor,
    which widens that spread accordingly.
    """
    rng = np.random.default_rng(seed)
    residuals = [1.0]
    results = [None]
    chosen = 0
    energy = float(np.linalg.norm(aug) ** 2)
    I, J, K = aug.shape
    n = aug.size
    mult = (cfg.n_z_aug + 1) * (cfg.n_x_aug + 1)
    known = noise_variance is not None and noise_variance > 0 and energy > 0

    def at_noise_floor(R, rel):
        if not known:
            return False
        expected = n - R * (I + J + K - 2) + cfg.noise_sigmas * np.sqrt(n * mult)
        return rel ** 2 * energy <= noise_variance * expected

    Yr, V = _reduce_frequency_mode(np.ascontiguousarray(aug, dtype=complex))
    reduced = (Yr, V, _mode_bases(Yr))
    for R in range(1, cfg.max_rank + 1):
        res = cpd_als(aug, R, cfg, seed=rng.integers(2**63), backend=backend,
                      _reduced=reduced)
        residuals.append(res.residual)
        results.append(res)
        if res.residual < 1e-10 or at_noise_floor(R, res.residual):
            chosen = R
            break
        if (residuals[R - 1] - res.residual) < cfg.rank_improvement * residuals[R - 1]:
            chosen = R - 1
            break
        chosen = R
    return chosen, results[chosen], residuals


def estimate(tensor: ObservationTensor, array: ArrayConfig, ofdm: OfdmConfig,
             cfg: SaConfig = SaConfig(), seed=None, backend=None,
             with_angles: bool = True) -> PathEstimateSet:
    """Augment, pick the CP rank, decompose and extract path parameters."""
    aug = augment(tensor, cfg)
    rank, res, residuals = select_rank(aug, cfg, seed, backend, tensor.noise_variance)
    if rank == 0:
        return PathEstimateSet(rank_used=0, residual=1.0, residual_by_rank=residuals)
    est = extract_params(res.factors, tensor, array, ofdm, cfg, with_angles=with_angles)
    est.rank_used = rank
    est.residual = float(min(max(res.residual, 0.0), 1.0))
    est.residual_by_rank = residuals
    return est


def estimate_delays(vector, noise_variance: float, ofdm: OfdmConfig,
                    cfg: SaConfig = SaConfig(n_x_aug=3, n_z_aug=3), seed=None,
                    backend=None) -> PathEstimateSet:
    """Delay-only estimator for a single-antenna receiver.

    The frequency response is folded into a (Lz+1, Lx+1, V) tensor by the
    same augmentation, so the CPD machinery applies unchanged; angles are
    reported as zero.
    """
    vector = np.asarray(vector, dtype=complex).reshape(1, 1, -1)
    array = ArrayConfig.single(ofdm.wavelength)
    return estimate(ObservationTensor(vector, noise_variance), array, ofdm, cfg, seed,
                    backend, with_angles=False)
