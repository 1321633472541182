"""Steering vectors, observation-tensor synthesis and RTT timing.

Noise bookkeeping. Pilots have constant modulus and are wiped off, and the
``n_symbols`` OFDM symbols are integrated coherently, so the tensor entry for
path gain ``rho`` is ``rho * a_z * a_x * d`` plus complex Gaussian noise of
variance::

    N0_eff = (psd * subcarrier_spacing * NF) / (n_symbols * P_tx / S)

with ``psd``, ``NF`` and ``P_tx`` in linear units (mW/Hz, ratio, mW). This is
the per-subcarrier thermal noise divided by the per-subcarrier transmit power
and by the integration gain.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np
from scipy.constants import speed_of_light as C

from .scene import PathParams


def db2lin(x):
    return 10.0 ** (np.asarray(x, dtype=float) / 10.0)


@dataclass(frozen=True)
class OfdmConfig:
    n_subcarriers: int = 288
    subcarrier_spacing: float = 60e3
    n_symbols: int = 12
    carrier_freq: float = 5.9e9
    tx_power_dbm: float = 10.0
    noise_psd_dbm_hz: float = -174.0
    noise_figure_db: float = 8.0

    def __post_init__(self):
        if self.n_subcarriers < 2:
            raise ValueError("need at least two subcarriers")
        if self.subcarrier_spacing <= 0:
            raise ValueError("subcarrier spacing must be positive")
        if self.n_symbols < 1:
            raise ValueError("need at least one OFDM symbol")

    @property
    def bandwidth(self) -> float:
        return self.n_subcarriers * self.subcarrier_spacing

    @property
    def wavelength(self) -> float:
        return C / self.carrier_freq

    @property
    def delay_resolution(self) -> float:
        """1 / (S * df), the width of one delay resolution cell."""
        return 1.0 / self.bandwidth

    @cached_property
    def noise_variance(self) -> float:
        noise_per_sc = db2lin(self.noise_psd_dbm_hz + self.noise_figure_db) * self.subcarrier_spacing
        tx_per_sc = db2lin(self.tx_power_dbm) / self.n_subcarriers
        return float(noise_per_sc / (self.n_symbols * tx_per_sc))

    def snr(self, gain: complex) -> float:
        """Post-integration SNR per tensor entry (linear)."""
        return abs(gain) ** 2 / self.noise_variance


@dataclass(frozen=True)
class ArrayConfig:
    n_x: int = 4
    n_z: int = 2
    d_x: float | None = None
    d_z: float | None = None
    wavelength: float = C / 5.9e9

    def __post_init__(self):
        if self.n_x < 1 or self.n_z < 1:
            raise ValueError("array needs at least one element per axis")
        # half-wavelength spacing unless given
        if self.d_x is None:
            object.__setattr__(self, "d_x", self.wavelength / 2)
        if self.d_z is None:
            object.__setattr__(self, "d_z", self.wavelength / 2)
        if self.d_x <= 0 or self.d_z <= 0:
            raise ValueError("element spacings must be positive")

    @property
    def size(self) -> int:
        return self.n_x * self.n_z

    @classmethod
    def single(cls, wavelength: float) -> "ArrayConfig":
        return cls(n_x=1, n_z=1, wavelength=wavelength)


def steering_x(array: ArrayConfig, aoa_az: float, aoa_el: float) -> np.ndarray:
    k = 2 * np.pi / array.wavelength
    n = np.arange(array.n_x)
    return np.exp(1j * k * array.d_x * n * np.cos(aoa_el) * np.sin(aoa_az))


def steering_z(array: ArrayConfig, aoa_az: float, aoa_el: float) -> np.ndarray:
    k = 2 * np.pi / array.wavelength
    n = np.arange(array.n_z)
    return np.exp(1j * k * array.d_z * n * np.sin(aoa_el))


def steering(array: ArrayConfig, aoa_az: float, aoa_el: float) -> np.ndarray:
    """Full URA response ``a_x kron a_z``."""
    return np.kron(steering_x(array, aoa_az, aoa_el), steering_z(array, aoa_az, aoa_el))


def delay_steering(ofdm: OfdmConfig, toa, n: int | None = None) -> np.ndarray:
    """``exp(-j 2 pi k df toa)`` for subcarriers k = 0..n-1 (default S)."""
    n = ofdm.n_subcarriers if n is None else n
    return np.exp(-2j * np.pi * ofdm.subcarrier_spacing * np.arange(n) * toa)


@dataclass
class ObservationTensor:
    """Pilot-free received tensor, axes (vertical element, horizontal element, subcarrier)."""

    data: np.ndarray
    noise_variance: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex)
        if self.data.ndim != 3:
            raise ValueError("observation tensor must be 3-D")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("observation tensor has non-finite entries")

    @property
    def shape(self):
        return self.data.shape

    def dump(self, path) -> None:
        """Little-endian binary: three uint64 dims, float64 noise variance,
        then interleaved (re, im) float64 in C order."""
        with open(path, "wb") as fh:
            fh.write(np.asarray(self.data.shape, dtype="<u8").tobytes())
            fh.write(np.asarray([self.noise_variance], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.data).astype("<c16").view("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ObservationTensor":
        raw = open(path, "rb").read()
        dims = tuple(int(v) for v in np.frombuffer(raw[:24], dtype="<u8"))
        nv = float(np.frombuffer(raw[24:32], dtype="<f8")[0])
        data = np.frombuffer(raw[32:], dtype="<f8").view("<c16").reshape(dims)
        return cls(data.astype(complex), nv)


def noiseless_tensor(paths, array: ArrayConfig, ofdm: OfdmConfig) -> np.ndarray:
    Y = np.zeros((array.n_z, array.n_x, ofdm.n_subcarriers), dtype=complex)
    for p in paths:
        Y += p.gain * np.einsum(
            "i,j,k->ijk",
            steering_z(array, p.aoa_az, p.aoa_el),
            steering_x(array, p.aoa_az, p.aoa_el),
            delay_steering(ofdm, p.toa),
        )
    return Y


def synthesize(paths: list[PathParams], array: ArrayConfig, ofdm: OfdmConfig,
               seed=None, noise_variance: float | None = None) -> ObservationTensor:
    """Noisy observation tensor; ``noise_variance`` overrides the link budget."""
    nv = ofdm.noise_variance if noise_variance is None else float(noise_variance)
    if nv < 0:
        raise ValueError("noise variance must be non-negative")
    Y = noiseless_tensor(paths, array, ofdm)
    if nv > 0:
        rng = np.random.default_rng(seed)
        Y = Y + np.sqrt(nv / 2) * (rng.standard_normal(Y.shape) + 1j * rng.standard_normal(Y.shape))
    return ObservationTensor(Y, nv)


class DegenerateRange(ValueError):
    """RTT exchange implies a negative distance."""


@dataclass(frozen=True)
class RttExchange:
    """Timestamps of one request/response exchange.

    ``toa_request`` is the arrival of the request in the CRU clock;
    ``toa_response`` the arrival of the response in the RSU clock, counted
    from the request transmission. ``clock_bias`` is kept for logging only.
    """

    toa_request: float
    toa_response: float
    processing_time: float
    clock_bias: float = 0.0

    def __post_init__(self):
        if self.processing_time < 0:
            raise ValueError("processing time must be non-negative")


def response_departure(cru_toa: float, processing_time: float, clock_bias: float) -> float:
    """Departure of the response in the RSU clock.

    The CRU stamps the request at ``clock_bias + cru_toa`` in its own clock
    and answers ``processing_time`` later. Evaluated in exact rational
    arithmetic so that the clock bias cancels without rounding.
    """
    b = Fraction(clock_bias)
    stamped = b + Fraction(cru_toa)
    return float(stamped + Fraction(processing_time) - b)


def response_window_offset(cru_toa: float, processing_time: float, clock_bias: float) -> float:
    """Delay offset of the response inside the RSU receive window.

    The RSU opens its window ``processing_time`` after sending the request,
    so every response path appears delayed by the CRU-side ToA.
    """
    return response_departure(cru_toa, processing_time, clock_bias) - processing_time


def make_exchange(cru_toa: float, rsu_window_toa: float, processing_time: float,
                  clock_bias: float = 0.0) -> RttExchange:
    """Timestamps from the two window-relative ToA estimates.

    ``cru_toa``: request delay measured inside the CRU receive window.
    ``rsu_window_toa``: response delay measured inside the RSU window, which
    already contains the CRU-side ToA (see :func:`response_window_offset`).
    """
    return RttExchange(
        toa_request=float(Fraction(clock_bias) + Fraction(cru_toa)),
        toa_response=processing_time + rsu_window_toa,
        processing_time=processing_time,
        clock_bias=clock_bias,
    )


def rtt_range(exchange: RttExchange) -> float:
    """One-way distance ``c (round_trip - processing) / 2``."""
    rng_m = C * (exchange.toa_response - exchange.processing_time) / 2
    if not np.isfinite(rng_m):
        raise DegenerateRange("non-finite RTT range")
    if rng_m < 0:
        raise DegenerateRange(f"negative RTT range {rng_m:.3f} m")
    return float(rng_m)
