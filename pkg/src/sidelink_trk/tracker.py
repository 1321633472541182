"""Kalman tracking of the CRU with bound-driven measurement covariance.

State ``[x, y, z, vx, vy, vz]`` with ``H = [I3, 0]``. Height and vertical
velocity stay in the state but carry pinned, tiny variances so a single code
path covers the planar case.

The LoS gate works in (range [m], azimuth [rad], elevation [rad]) rather than
(delay [s], ...), which keeps ``U`` well conditioned; the delay-to-range
factor is exactly ``c``, so the quadratic form is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.constants import speed_of_light as C

from .scene import MotionModel, RsuState, back_project, los_geometry

H = np.hstack([np.eye(3), np.zeros((3, 3))])
BETA = 11.34  # chi-square 3 dof, 99 %
PRIOR_STD = np.array([5.0, 5.0, 0.01, 1.0, 1.0, 0.01])


def _sym(P):
    return 0.5 * (P + P.T)


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(6)
        self.cov = np.asarray(self.cov, dtype=float).reshape(6, 6)

    @property
    def position(self) -> np.ndarray:
        return self.mean[:3]

    def copy(self) -> "GaussianState":
        return GaussianState(self.mean.copy(), self.cov.copy())


@dataclass
class PosMeasurement:
    z: np.ndarray
    R: np.ndarray
    source_path_index: int | None = None
    variant: str = ""

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float).reshape(3)
        self.R = _sym(np.asarray(self.R, dtype=float).reshape(3, 3))


@dataclass
class Gate:
    """LoS gate. ``center`` is (delay s, az, el); ``U`` is in (m, rad, rad)."""

    center: np.ndarray
    U: np.ndarray
    beta: float = BETA

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.U = _sym(np.asarray(self.U, dtype=float).reshape(3, 3))
        if not self.beta > 0:
            raise ValueError("gate threshold must be positive")

    def residual(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        d = q - self.center
        return np.array([C * d[0], wrap_angle(d[1]), d[2]])

    def distance(self, q) -> float:
        """Mahalanobis quadratic form of a candidate (delay s, az, el)."""
        e = self.residual(q)
        return float(e @ np.linalg.solve(self.U, e))

    def contains(self, q) -> bool:
        return self.distance(q) <= self.beta


def initial_state(truth_vector, rng=None, std=PRIOR_STD) -> GaussianState:
    """Prior around the true initial state.

    With a generator the mean is drawn from N(truth, P0) over the planar
    coordinates; height and vertical velocity stay exact.
    """
    truth_vector = np.asarray(truth_vector, dtype=float)
    P0 = np.diag(np.asarray(std, dtype=float) ** 2)
    mean = truth_vector.copy()
    if rng is not None:
        idx = [0, 1, 3, 4]
        mean[idx] += rng.standard_normal(4) * np.asarray(std)[idx]
    return GaussianState(mean, P0)


def predict(state: GaussianState, model: MotionModel, substeps: int = 1) -> GaussianState:
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    F, W = model.F, model.GQGt
    m, P = state.mean.copy(), state.cov.copy()
    for _ in range(substeps):
        m = F @ m
        P = _sym(F @ P @ F.T + W)
    return GaussianState(m, P)


def update(state: GaussianState, meas: PosMeasurement) -> GaussianState:
    """Kalman update with ``H = [I3, 0]``.

    The measurement is rotated into the eigenbasis of R and applied as three
    independent scalar updates with the Joseph covariance form. This equals
    the batch update algebraically but stays accurate when R spans many
    decades (a bound with no information along one direction can put 1e13 m^2
    next to 1e-3 m^2, which the batch innovation covariance cannot resolve).
    """
    w, V = np.linalg.eigh(_sym(np.asarray(meas.R, dtype=float)))
    if not w[0] > 0:
        raise np.linalg.LinAlgError("measurement covariance is not positive definite")
    Hv = V.T @ H
    zv = V.T @ np.asarray(meas.z, dtype=float)
    m, P = state.mean.copy(), state.cov.copy()
    eye = np.eye(len(m))
    for h, z, r in zip(Hv, zv, w):
        Ph = P @ h
        s = float(h @ Ph) + r
        if not s > 0:
            raise np.linalg.LinAlgError("innovation covariance is not positive definite")
        k = Ph / s
        m = m + k * (z - h @ m)
        A = eye - np.outer(k, h)
        P = _sym(A @ P @ A.T + r * np.outer(k, k))
    return GaussianState(m, P)


def measurement_jacobian(rsu: RsuState, position) -> np.ndarray:
    """d(range, az, el) / d(global position)."""
    R = rsu.rotation
    v = R.T @ (np.asarray(position, dtype=float) - rsu.position)
    r2 = float(v @ v)
    r = np.sqrt(r2)
    rho2 = v[0] ** 2 + v[1] ** 2
    rho = np.sqrt(rho2)
    if rho < 1e-12:
        raise ValueError("azimuth is undefined directly above or below the RSU")
    d_range = v / r
    d_az = np.array([-v[1], v[0], 0.0]) / rho2
    d_el = np.array([-v[0] * v[2] / (rho * r2), -v[1] * v[2] / (rho * r2), rho / r2])
    return np.vstack([d_range, d_az, d_el]) @ R.T


def build_gate(pred: GaussianState, rsu: RsuState, beta: float = BETA) -> Gate:
    center = np.array(los_geometry(rsu, pred.position))
    M = measurement_jacobian(rsu, pred.position)
    U = M @ pred.cov[:3, :3] @ M.T
    return Gate(center, U, beta)


def _candidates(estimates, toas=None):
    paths = list(estimates)
    t = np.array([p.toa for p in paths]) if toas is None else np.asarray(toas, dtype=float)
    if len(t) != len(paths):
        raise ValueError("one delay per estimate expected")
    return paths, t


def identify_los(estimates, gate: Gate | None = None, toas=None) -> int | None:
    """Index of the estimate taken as LoS.

    ``toas`` optionally overrides the per-estimate delays (e.g. RTT-derived
    one-way delays). Without a gate the shortest delay wins; with a gate the
    in-gate estimate closest in delay to the gate center wins, or None.
    """
    paths, t = _candidates(estimates, toas)
    if not paths:
        return None
    if gate is None:
        return int(np.argmin(t))
    inside = [i for i, p in enumerate(paths)
              if gate.contains((t[i], p.aoa_az, p.aoa_el))]
    if not inside:
        return None
    return min(inside, key=lambda i: (abs(t[i] - gate.center[0]), i))


def make_measurement(estimates, los_index: int, rtt_range_m: float, rsu: RsuState,
                     R, variant: str = "", height: float | None = None) -> PosMeasurement | None:
    """Back-project the LoS estimate to a position.

    ``R`` is the measurement covariance (an ``Eeclb`` or a 3x3 matrix). When
    ``height`` is given (planar mode) the vertical coordinate is set to the
    known antenna height. Returns None for a degenerate range.
    """
    paths = list(estimates)
    if los_index is None or not 0 <= los_index < len(paths):
        raise IndexError("LoS index out of range")
    if not np.isfinite(rtt_range_m) or rtt_range_m <= 0:
        return None
    p = paths[los_index]
    z = back_project(rsu, rtt_range_m, p.aoa_az, p.aoa_el)
    if height is not None:
        z[2] = height
    cov = getattr(R, "position_cov", R)
    variant = getattr(R, "variant", variant)
    return PosMeasurement(z, cov, los_index, variant)


# --- filtering over an epoch sequence --------------------------------------------

@dataclass
class EpochObservation:
    """What the channel estimators produced at one measurement epoch.

    ``ranges`` holds one RTT range per RSU-side estimate (metres); NaN marks
    a candidate with no usable range.
    """

    estimates: list
    ranges: np.ndarray
    cache: dict = field(default_factory=dict)

    @property
    def toas(self) -> np.ndarray:
        return np.asarray(self.ranges, dtype=float) / C


@dataclass
class FilterStep:
    posterior: GaussianState
    los_index: int | None
    gate_used: bool
    gate_empty: bool
    updated: bool
    error: str | None = None


CovProvider = Callable[[int, EpochObservation, int, GaussianState], np.ndarray]


def run_filter(prior: GaussianState, model: MotionModel, substeps: int,
               epochs: Sequence[EpochObservation | None], rsu: RsuState,
               cov_provider: CovProvider, gated: bool = False, beta: float = BETA,
               height: float | None = None) -> list[FilterStep]:
    """Epoch loop: predict (except at k = 0), identify LoS, update or skip.

    ``cov_provider(k, obs, los_index, predicted)`` returns the 3x3 R (or raises
    to skip the update; the message is kept in the step record).
    """
    out = []
    state = prior
    for k, obs in enumerate(epochs):
        pred = state if k == 0 else predict(state, model, substeps)
        idx, gate, err = None, None, None
        if obs is not None and len(obs.estimates):
            ranges = np.asarray(obs.ranges, dtype=float)
            valid = np.isfinite(ranges) & (ranges > 0)
            est = [p for p, ok in zip(obs.estimates, valid) if ok]
            pos = np.flatnonzero(valid)
            if est:
                if gated:
                    gate = build_gate(pred, rsu, beta)
                j = identify_los(est, gate, ranges[valid] / C)
                idx = None if j is None else int(pos[j])
        post, updated = pred, False
        if idx is not None:
            try:
                R = cov_provider(k, obs, idx, pred)
                meas = make_measurement(obs.estimates, idx, float(obs.ranges[idx]), rsu, R,
                                        height=height)
                if meas is not None:
                    post, updated = update(pred, meas), True
            except (ValueError, np.linalg.LinAlgError) as exc:
                err = f"{type(exc).__name__}: {exc}"
        out.append(FilterStep(post, idx, gated, gated and idx is None and obs is not None,
                              updated, err))
        state = post
    return out


def snapshot_positions(epochs: Sequence[EpochObservation | None], rsu: RsuState,
                       height: float | None = None) -> np.ndarray:
    """Shortest-delay snapshot fixes per epoch (NaN rows where none exists)."""
    out = np.full((len(epochs), 3), np.nan)
    for k, obs in enumerate(epochs):
        if obs is None or not len(obs.estimates):
            continue
        ranges = np.asarray(obs.ranges, dtype=float)
        valid = np.isfinite(ranges) & (ranges > 0)
        if not valid.any():
            continue
        pos = np.flatnonzero(valid)
        j = identify_los([obs.estimates[i] for i in pos], None, ranges[valid] / C)
        i = int(pos[j])
        p = obs.estimates[i]
        z = back_project(rsu, float(ranges[i]), p.aoa_az, p.aoa_el)
        if height is not None:
            z[2] = height
        out[k] = z
    return out


def mse_tables(snapshots: np.ndarray, truth: np.ndarray, z_variance: float = 1e-4,
               scalar: bool = False):
    """Per-epoch and trajectory-averaged MSE matrices of snapshot fixes.

    ``snapshots`` has shape (runs, epochs, 3), ``truth`` (epochs, 3). The
    height block is pinned to ``z_variance``. With ``scalar`` each matrix is
    replaced by its mean planar MSE times the identity.
    """
    err = np.asarray(snapshots, dtype=float) - np.asarray(truth, dtype=float)[None]
    n_ep = err.shape[1]
    inst = np.zeros((n_ep, 3, 3))
    for k in range(n_ep):
        e = err[:, k][np.all(np.isfinite(err[:, k]), axis=1)]
        if len(e):
            inst[k] = e.T @ e / len(e)
    ok = np.all(np.isfinite(err), axis=2)
    e_all = err[ok]
    avg = e_all.T @ e_all / max(len(e_all), 1)

    def fix(M):
        M = _sym(M.copy())
        if scalar:
            s = 0.5 * (M[0, 0] + M[1, 1])
            M = np.diag([s, s, 0.0])
        M[2, :] = 0.0
        M[:, 2] = 0.0
        M[2, 2] = z_variance
        # an epoch with no (or identical) fixes still needs an SPD matrix
        floor = 1e-9 * max(np.trace(M), 1e-6)
        M[:2, :2] += floor * np.eye(2)
        return M

    return np.array([fix(M) for M in inst]), fix(avg)


def run_benchmarks(prior: GaussianState, model: MotionModel, substeps: int,
                   epochs: Sequence[EpochObservation | None], rsu: RsuState,
                   mse_inst=None, mse_avg=None, gated: bool = False, beta: float = BETA,
                   height: float | None = None) -> dict:
    """BM1..BM4 position tracks, each of shape (epochs, 3).

    BM1 uses the per-epoch MSE matrix as R, BM2 the trajectory-averaged one,
    BM3 is the raw snapshot fix and BM4 predicts from the prior only.
    """
    if mse_inst is None or mse_avg is None:
        raise ValueError("BM1 and BM2 need MSE tables from a completed campaign")
    mse_inst = np.asarray(mse_inst, dtype=float)
    if len(mse_inst) != len(epochs):
        raise ValueError("one MSE matrix per epoch expected")
    bm1 = run_filter(prior, model, substeps, epochs, rsu,
                     lambda k, obs, i, pred: mse_inst[k], gated, beta, height)
    bm2 = run_filter(prior, model, substeps, epochs, rsu,
                     lambda k, obs, i, pred: np.asarray(mse_avg), gated, beta, height)
    bm4 = dead_reckoning(prior, model, substeps, len(epochs))
    return {
        "BM1": np.array([s.posterior.position for s in bm1]),
        "BM2": np.array([s.posterior.position for s in bm2]),
        "BM3": snapshot_positions(epochs, rsu, height),
        "BM4": np.array([s.position for s in bm4]),
    }


def dead_reckoning(prior: GaussianState, model: MotionModel, substeps: int,
                   n_epochs: int) -> list[GaussianState]:
    out = [prior]
    for _ in range(n_epochs - 1):
        out.append(predict(out[-1], model, substeps))
    return out
