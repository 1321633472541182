"""Fisher information, error covariance lower bounds and their estimated forms.

Parameter ordering. The parameters of interest come first,
``eta = [tau_0, az_0, el_0]`` for the LoS path. The nuisance block
``kappa`` follows:

* the LoS gain as (re, im) on the RSU link;
* then, for every retained NLoS path, ``(tau, az, el, re, im)``;
* then, when the CRU link is included, one (re, im) gain pair per path for
  the single-antenna return link.

Only the delays are shared between the two links, so the CRU link informs
the delay block and its own gains. The sub-matrix rule in :func:`eclb`
relies on this ordering.

RTT bookkeeping. The RTT range is the mean of the two one-way delay
estimates. ``rtt_mode="sum"`` treats the delay as one parameter observed
on both links, so the two FIMs add. ``rtt_mode="average"`` bounds each link
separately and uses ``var = (V_rsu + V_cru) / 4`` for the averaged delay.
Clock bias is not a parameter in either mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.constants import speed_of_light as C

from .scene import PathParams, RsuState, los_geometry
from .waveform import ArrayConfig, OfdmConfig, delay_steering, steering_x, steering_z

RIDGE = 1e-12
Z_VARIANCE = 1e-4  # m^2, pinned height variance in planar mode
VARIANTS = ("LOS", "NLOS")


class UnobservableError(np.linalg.LinAlgError):
    """Raised when the FIM is singular; ``direction`` is the null eigenvector."""

    def __init__(self, msg, direction=None, labels=None):
        super().__init__(msg)
        self.direction = direction
        self.labels = labels


class NoBoundAvailable(ValueError):
    pass


@dataclass
class ParamVector:
    eta: np.ndarray
    kappa: np.ndarray
    labels: list = field(default_factory=list)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.eta, self.kappa])

    @property
    def dim_eta(self) -> int:
        return len(self.eta)

    @classmethod
    def from_paths(cls, los: PathParams, others=(), with_cru: bool = True) -> "ParamVector":
        eta = [los.toa, los.aoa_az, los.aoa_el]
        kappa = [los.gain.real, los.gain.imag]
        labels = ["tau0", "az0", "el0", "re0", "im0"]
        for i, p in enumerate(others, start=1):
            kappa += [p.toa, p.aoa_az, p.aoa_el, p.gain.real, p.gain.imag]
            labels += [f"tau{i}", f"az{i}", f"el{i}", f"re{i}", f"im{i}"]
        if with_cru:
            for i, p in enumerate([los, *others]):
                kappa += [p.gain.real, p.gain.imag]
                labels += [f"cru_re{i}", f"cru_im{i}"]
        return cls(np.array(eta, dtype=float), np.array(kappa, dtype=float), labels)


@dataclass
class FimMatrix:
    matrix: np.ndarray
    noise_variance: float
    labels: list = field(default_factory=list)

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError("FIM must be square")
        self.matrix = 0.5 * (M + M.T)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def scaled(self):
        """Diagonally equilibrated FIM and the scaling vector."""
        d = np.sqrt(np.clip(np.diag(self.matrix), 0.0, None))
        safe = np.where(d > 0, d, 1.0)
        return self.matrix / np.outer(safe, safe), safe, d

    @property
    def rank(self) -> int:
        S, _, _ = self.scaled()
        w = np.linalg.eigvalsh(S)
        return int(np.sum(w > RIDGE * max(np.trace(S), 1.0)))

    def is_psd(self, tol: float = 1e-9) -> bool:
        w = np.linalg.eigvalsh(self.matrix)
        return bool(w.min() >= -tol * max(np.trace(self.matrix), 0.0))


@dataclass
class Eeclb:
    position_cov: np.ndarray
    channel_cov: np.ndarray
    variant: str
    n_paths: int = 1


# --- model derivatives ---------------------------------------------------------

def _path_blocks(p: PathParams, array: ArrayConfig, ofdm: OfdmConfig):
    """Model column and derivatives for one path on the URA link.

    Returns ``(mu, d_tau, d_az, d_el)`` for unit gain, each flattened in
    (n_z, n_x, S) order.
    """
    k = 2 * np.pi / array.wavelength
    nx = np.arange(array.n_x)
    nz = np.arange(array.n_z)
    ax = steering_x(array, p.aoa_az, p.aoa_el)
    az_ = steering_z(array, p.aoa_az, p.aoa_el)
    d = delay_steering(ofdm, p.toa)
    kappa = np.arange(ofdm.n_subcarriers)
    ce, se = np.cos(p.aoa_el), np.sin(p.aoa_el)
    ca, sa = np.cos(p.aoa_az), np.sin(p.aoa_az)

    dd = -2j * np.pi * ofdm.subcarrier_spacing * kappa * d
    dax_az = 1j * k * array.d_x * nx * ce * ca * ax
    dax_el = -1j * k * array.d_x * nx * se * sa * ax
    daz_el = 1j * k * array.d_z * nz * ce * az_

    def outer(a, b, c):
        return np.einsum("i,j,k->ijk", a, b, c).ravel()

    mu = outer(az_, ax, d)
    return (mu, outer(az_, ax, dd), outer(az_, dax_az, d),
            outer(daz_el, ax, d) + outer(az_, dax_el, d))


def _delay_blocks(p: PathParams, ofdm: OfdmConfig):
    kappa = np.arange(ofdm.n_subcarriers)
    d = delay_steering(ofdm, p.toa)
    return d, -2j * np.pi * ofdm.subcarrier_spacing * kappa * d


def jacobian(paths, array: ArrayConfig, ofdm: OfdmConfig, with_cru: bool = True):
    """Stacked complex Jacobian of the noiseless model(s), ParamVector ordering.

    Rows: the vectorised URA tensor, then (if ``with_cru``) the S-vector of
    the single-antenna link.
    """
    paths = list(paths)
    if not paths:
        raise ValueError("need at least one path")
    L = len(paths)
    n_rsu = array.size * ofdm.n_subcarriers
    n_cru = ofdm.n_subcarriers if with_cru else 0
    dim = 5 * L + (2 * L if with_cru else 0)
    J = np.zeros((n_rsu + n_cru, dim), dtype=complex)

    def cols(i):
        # (tau, az, el, re, im) column indices of path i on the RSU link
        if i == 0:
            return 0, 1, 2, 3, 4
        b = 5 * i
        return b, b + 1, b + 2, b + 3, b + 4

    for i, p in enumerate(paths):
        mu, dt, da, de = _path_blocks(p, array, ofdm)
        ct, ca, ce, cr, ci = cols(i)
        g = complex(p.gain)
        J[:n_rsu, ct] = g * dt
        J[:n_rsu, ca] = g * da
        J[:n_rsu, ce] = g * de
        J[:n_rsu, cr] = mu
        J[:n_rsu, ci] = 1j * mu
        if with_cru:
            d, ddt = _delay_blocks(p, ofdm)
            cr2 = 5 * L + 2 * i
            J[n_rsu:, ct] = g * ddt
            J[n_rsu:, cr2] = d
            J[n_rsu:, cr2 + 1] = 1j * d
    return J


def fim(paths, array: ArrayConfig, ofdm: OfdmConfig, noise_variance: float | None = None,
        with_cru: bool = True) -> FimMatrix:
    """``(2 / N0) Re(J^H J)`` over the stacked link models."""
    paths = list(paths)
    n0 = ofdm.noise_variance if noise_variance is None else float(noise_variance)
    if not n0 > 0:
        raise ValueError("noise variance must be positive")
    J = jacobian(paths, array, ofdm, with_cru)
    M = (2.0 / n0) * np.real(J.conj().T @ J)
    pv = ParamVector.from_paths(paths[0], paths[1:], with_cru)
    out = FimMatrix(M, n0, pv.labels)
    assert out.is_psd(), "FIM lost positive semidefiniteness"
    return out


# --- bounds ----------------------------------------------------------------

def _safe_inverse(F: FimMatrix) -> np.ndarray:
    S, scale, d = F.scaled()
    labels = F.labels or [str(i) for i in range(F.dim)]
    if np.any(d == 0):
        i = int(np.argmin(d))
        e = np.zeros(F.dim)
        e[i] = 1.0
        raise UnobservableError(f"FIM is singular: no information on {labels[i]}", e, labels)
    w, V = np.linalg.eigh(S)
    tr = np.trace(S)
    if w[0] <= RIDGE * tr:
        v = V[:, 0] / scale
        v /= np.linalg.norm(v)
        top = np.argsort(-np.abs(v))[:3]
        names = ", ".join(f"{labels[i]} ({v[i]:+.2f})" for i in top)
        raise UnobservableError(
            f"FIM has rank {int(np.sum(w > RIDGE * tr))} of {F.dim}; "
            f"unobservable direction along {names}", v, labels)
    Sinv = np.linalg.inv(S + RIDGE * tr * np.eye(F.dim))
    return Sinv / np.outer(scale, scale)


def eclb(F: FimMatrix, dim_eta: int = 3) -> np.ndarray:
    """Top-left ``dim_eta`` block of the (ridged) inverse FIM."""
    if not 1 <= dim_eta <= F.dim:
        raise ValueError("dim_eta out of range")
    inv = _safe_inverse(F)
    B = inv[:dim_eta, :dim_eta]
    return 0.5 * (B + B.T)


def position_jacobian(rsu: RsuState, cru_position) -> np.ndarray:
    """d x / d(tau, az, el) for ``x = x_RSU + c tau R u(az, el)`` at the given point."""
    tau, az, el = los_geometry(rsu, cru_position)
    ce, se, ca, sa = np.cos(el), np.sin(el), np.cos(az), np.sin(az)
    u = np.array([ce * ca, ce * sa, se])
    du_az = np.array([-ce * sa, ce * ca, 0.0])
    du_el = np.array([-se * ca, -se * sa, ce])
    R = rsu.rotation
    r = C * tau
    return np.column_stack([C * (R @ u), r * (R @ du_az), r * (R @ du_el)])


def position_eclb(channel_bound, rsu: RsuState, cru_position, planar: bool = True,
                  z_variance: float = Z_VARIANCE) -> np.ndarray:
    """Map a (tau, az, el) bound to a global-frame position covariance.

    In planar mode the xy block is kept and the height variance is pinned
    to ``z_variance``.
    """
    Jp = position_jacobian(rsu, cru_position)
    P = Jp @ np.asarray(channel_bound, dtype=float) @ Jp.T
    P = 0.5 * (P + P.T)
    if planar:
        P[2, :] = 0.0
        P[:, 2] = 0.0
        P[2, 2] = z_variance
    return P


# --- estimated bounds ---------------------------------------------------------

def beamwidths(array: ArrayConfig) -> tuple[float, float]:
    """3 dB two-sided beamwidths in spatial-frequency units (x, z)."""
    bx = 0.886 * array.wavelength / (array.n_x * array.d_x)
    bz = 0.886 * array.wavelength / (array.n_z * array.d_z)
    return bx, bz


def in_resolution_cell(ref: PathParams, other: PathParams, array: ArrayConfig,
                       ofdm: OfdmConfig) -> bool:
    """Close in delay, or within the beamwidth in either angle coordinate."""
    if abs(other.toa - ref.toa) < ofdm.delay_resolution:
        return True
    bx, bz = beamwidths(array)
    ux = lambda p: np.cos(p.aoa_el) * np.sin(p.aoa_az)  # noqa: E731
    uz = lambda p: np.sin(p.aoa_el)  # noqa: E731
    if array.n_x > 1 and abs(ux(other) - ux(ref)) < bx:
        return True
    if array.n_z > 1 and abs(uz(other) - uz(ref)) < bz:
        return True
    return False


def _rtt_channel_bound(paths, array, ofdm, rtt_mode, noise_variance):
    if rtt_mode == "sum":
        return eclb(fim(paths, array, ofdm, noise_variance, with_cru=True), 3)
    if rtt_mode == "average":
        B = eclb(fim(paths, array, ofdm, noise_variance, with_cru=False), 3)
        cru_arr = ArrayConfig.single(array.wavelength)
        Fc = fim(paths, cru_arr, ofdm, noise_variance, with_cru=False)
        # the single-antenna link carries no angle information: drop those rows
        keep = [i for i, lab in enumerate(Fc.labels) if not lab.startswith(("az", "el"))]
        Fc = FimMatrix(Fc.matrix[np.ix_(keep, keep)], Fc.noise_variance,
                       [Fc.labels[i] for i in keep])
        v_cru = eclb(Fc, 1)[0, 0]
        out = B.copy()
        out[0, 0] = (B[0, 0] + v_cru) / 4.0
        out[0, 1:] *= 0.5
        out[1:, 0] *= 0.5
        return out
    raise ValueError(f"unknown rtt_mode {rtt_mode!r}")


def eeclb_channel(estimates, los_index, variant: str, array: ArrayConfig, ofdm: OfdmConfig,
                  rtt_mode: str = "sum", noise_variance: float | None = None):
    """Channel-domain part of :func:`eeclb`: (bound over (tau, az, el), paths used)."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    paths = list(estimates)
    if los_index is None or not 0 <= los_index < len(paths):
        raise NoBoundAvailable("no LoS estimate to build a bound from")
    los = paths[los_index]
    used = [los]
    if variant == "NLOS":
        used += [p for i, p in enumerate(paths)
                 if i != los_index and in_resolution_cell(los, p, array, ofdm)]
    return _rtt_channel_bound(used, array, ofdm, rtt_mode, noise_variance), len(used)


def eeclb(estimates, los_index, predicted_position, variant: str, array: ArrayConfig,
          ofdm: OfdmConfig, rsu: RsuState, rtt_mode: str = "sum",
          noise_variance: float | None = None, planar: bool = True) -> Eeclb:
    """Estimated bound treating the estimated paths and predicted position as truth.

    ``LOS`` uses the identified LoS estimate alone; ``NLOS`` adds every other
    estimate inside the LoS resolution cell.
    """
    ch, n = eeclb_channel(estimates, los_index, variant, array, ofdm, rtt_mode, noise_variance)
    pos = position_eclb(ch, rsu, predicted_position, planar=planar)
    return Eeclb(pos, ch, variant, n)
