"""Seeded Monte Carlo campaign: scene -> waveform -> chest -> crlb -> tracker.

Seeding. Every random draw of a step comes from its own generator seeded by
``SeedSequence(seed, spawn_key=(run, step, stream))``, with streams

    0  request-link noise (CRU receiver)
    1  response-link noise (RSU array)
    2  CRU-side CPD restarts
    3  RSU-side CPD restarts
    4  clock bias

and the prior of a run uses ``spawn_key=(run, PRIOR_STEP, 0)``. Any single
step can therefore be replayed in isolation, and the execution order of runs
never affects the result.

Phases. (A) channel estimation for every (run, step), shared by all filter
variants. (B) snapshot MSE tables for BM1/BM2 from all runs. (C) the filters
per run and gating mode. Runs are fanned out over worker processes in
A and C. Results are reduced in run order.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.constants import speed_of_light as C

from .. import chest, crlb, tracker
from ..scene import CruState, PathParams, generate_paths, lane_trajectory, los_geometry
from ..waveform import (ArrayConfig, DegenerateRange, make_exchange, response_window_offset,
                        rtt_range, synthesize)
from .config import FILTER_VARIANTS, CampaignConfig

STREAMS = {"cru_noise": 0, "rsu_noise": 1, "cru_cpd": 2, "rsu_cpd": 3, "bias": 4}
PRIOR_STEP = 2**31 - 1
THREADS_ENV = "SIDELINK_TRK_THREADS"


def sub_seed(seed: int, run: int, step: int, stream: int) -> int:
    """64-bit integer seed of one (run, step, stream) cell."""
    ss = np.random.SeedSequence(seed, spawn_key=(run, step, stream))
    return int(ss.generate_state(1, np.uint64)[0])


def worker_count(n_tasks: int) -> int:
    cap = os.environ.get(THREADS_ENV, "").strip()
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return max(1, min(n, n_tasks))


def track_name(variant: str, gated: bool | None) -> str:
    if gated is None:
        return variant
    return f"{variant}/{'gated' if gated else 'ungated'}"


@dataclass
class StepData:
    run: int
    step: int
    truth: np.ndarray
    los_range: float
    n_true_paths: int
    seeds: dict
    clock_bias: float
    cru_toas: list
    window_toas: list
    obs: tracker.EpochObservation | None
    rank: int = 0
    error: str | None = None


@dataclass
class RunResult:
    run: int
    steps: list
    tracks: dict = field(default_factory=dict)       # name -> (n_steps, 3)
    los_index: dict = field(default_factory=dict)    # name -> list[int | None]
    gate_empty: dict = field(default_factory=dict)   # name -> list[bool]
    step_errors: dict = field(default_factory=dict)  # name -> list[str | None]
    eeclb_traces: dict = field(default_factory=dict)  # name -> list[float | None]


class _Ctx:
    """Per-campaign constants, rebuilt inside each worker."""

    def __init__(self, cfg: CampaignConfig):
        self.cfg = cfg
        self.ofdm = cfg.ofdm()
        self.array = cfg.array()
        self.single = ArrayConfig.single(self.ofdm.wavelength)
        self.sa = cfg.sa()
        self.cru_sa = cfg.cru_sa()
        self.rsu = cfg.rsu()
        self.geometry = cfg.geometry()
        self.model = cfg.motion()
        t = cfg["trajectory"]
        self.truth = lane_trajectory(t["y_start"], t["y_end"], t["speed"], t["epoch"],
                                     t["lane_x"], t["height"])
        self.height = t["height"]
        self.noise_variance = self.ofdm.noise_variance * cfg.noise_scale
        self.fim_noise = self.noise_variance if self.noise_variance > 0 else self.ofdm.noise_variance
        c = cfg["campaign"]
        self.proc = c["processing_time"]
        self.bias_max = c["clock_bias_max"]
        self.rtt_mode = c["rtt_mode"]


_CTX: _Ctx | None = None


def _ctx(cfg) -> _Ctx:
    global _CTX
    if _CTX is None or _CTX.cfg is not cfg:
        _CTX = _Ctx(cfg)
    return _CTX


# --- phase A ---------------------------------------------------------------------

def estimate_step(cfg: CampaignConfig, run: int, step: int, cru: CruState | None = None) -> StepData:
    """Channel estimation for one (run, step); replayable in isolation."""
    ctx = _ctx(cfg)
    cru = ctx.truth[step] if cru is None else cru
    seeds = {name: sub_seed(cfg.seed, run, step, s) for name, s in STREAMS.items()}
    bias = 0.0
    if ctx.bias_max > 0:
        bias = float(np.random.default_rng(seeds["bias"]).uniform(-ctx.bias_max, ctx.bias_max))
    los_range = C * los_geometry(ctx.rsu, cru.position)[0]
    data = StepData(run, step, cru.position.copy(), los_range, 0, seeds, bias, [], [], None)
    try:
        paths = generate_paths(ctx.geometry, ctx.rsu, cru, ctx.ofdm.wavelength)
        data.n_true_paths = len(paths)
        # request: RSU -> CRU, single antenna, delays d / c in the CRU window
        v = synthesize(paths, ctx.single, ctx.ofdm, seeds["cru_noise"], ctx.noise_variance)
        cru_est = chest.estimate_delays(v.data, v.noise_variance, ctx.ofdm, ctx.cru_sa,
                                        seed=seeds["cru_cpd"])
        data.cru_toas = [float(t) for t in cru_est.toas]
        if not len(cru_est):
            data.obs = tracker.EpochObservation([], np.zeros(0))
            return data
        t_cru = float(np.min(cru_est.toas))
        # response: CRU -> RSU array, delayed inside the RSU window by the CRU-side ToA
        offset = response_window_offset(t_cru, ctx.proc, bias)
        shifted = [p.shifted(offset) for p in paths]
        Y = synthesize(shifted, ctx.array, ctx.ofdm, seeds["rsu_noise"], ctx.noise_variance)
        est = chest.estimate(Y, ctx.array, ctx.ofdm, ctx.sa, seed=seeds["rsu_cpd"])
        data.rank = est.rank_used
        data.window_toas = [float(p.toa) for p in est]
        ranges, cands = [], []
        for p in est:
            try:
                r = rtt_range(make_exchange(t_cru, p.toa, ctx.proc, bias))
            except DegenerateRange:
                r = float("nan")
            ranges.append(r)
            toa = r / C if np.isfinite(r) else p.toa
            cands.append(PathParams(p.gain, toa, p.aoa_az, p.aoa_el, None, False))
        data.obs = tracker.EpochObservation(cands, np.array(ranges, dtype=float))
    except (ValueError, np.linalg.LinAlgError) as exc:
        data.error = f"{type(exc).__name__}: {exc}"
    return data


def _phase_a(args):
    cfg, run = args
    return [estimate_step(cfg, run, k) for k in range(len(_ctx(cfg).truth))]


# --- phase C ---------------------------------------------------------------------

def prior_for_run(cfg: CampaignConfig, run: int) -> tracker.GaussianState:
    ctx = _ctx(cfg)
    t = cfg["tracker"]
    rng = None
    if t["random_prior"]:
        rng = np.random.default_rng(sub_seed(cfg.seed, run, PRIOR_STEP, 0))
    return tracker.initial_state(ctx.truth[0].vector, rng, np.array(t["prior_std"]))


def _eeclb_provider(ctx: _Ctx, variant: str, traces: list):
    short = variant.split("-", 1)[1]

    def provide(k, obs, idx, pred):
        key = (short, idx)
        if key not in obs.cache:
            obs.cache[key] = crlb.eeclb_channel(obs.estimates, idx, short, ctx.array, ctx.ofdm,
                                                ctx.rtt_mode, ctx.fim_noise)[0]
        P = crlb.position_eclb(obs.cache[key], ctx.rsu, pred.position)
        traces[k] = float(np.trace(P[:2, :2]))
        return P

    return provide


def _phase_c(args):
    cfg, run, steps, mse_inst, mse_avg = args
    ctx = _ctx(cfg)
    prior = prior_for_run(cfg, run)
    substeps = cfg["tracker"]["substeps"]
    beta = cfg["tracker"]["beta"]
    epochs = [s.obs for s in steps]
    res = RunResult(run, steps)
    n = len(epochs)
    for gated in cfg.gating_modes:
        for variant in FILTER_VARIANTS:
            if variant not in cfg.variants:
                continue
            name = track_name(variant, gated)
            traces = [None] * n
            if variant.startswith("EECLB"):
                provider = _eeclb_provider(ctx, variant, traces)
            elif variant == "BM1":
                provider = lambda k, obs, i, pred: mse_inst[k]  # noqa: E731
            else:
                provider = lambda k, obs, i, pred: mse_avg  # noqa: E731
            out = tracker.run_filter(prior, ctx.model, substeps, epochs, ctx.rsu, provider,
                                     gated, beta, ctx.height)
            res.tracks[name] = np.array([s.posterior.position for s in out])
            res.los_index[name] = [s.los_index for s in out]
            res.gate_empty[name] = [s.gate_empty for s in out]
            res.step_errors[name] = [s.error for s in out]
            if variant.startswith("EECLB"):
                res.eeclb_traces[name] = traces
    if "BM3" in cfg.variants:
        res.tracks["BM3"] = tracker.snapshot_positions(epochs, ctx.rsu, ctx.height)
        res.los_index["BM3"] = [_shortest(s.obs) for s in steps]
    if "BM4" in cfg.variants:
        dr = tracker.dead_reckoning(prior, ctx.model, substeps, n)
        res.tracks["BM4"] = np.array([s.position for s in dr])
    return res


def _shortest(obs):
    if obs is None or not len(obs.estimates):
        return None
    r = np.asarray(obs.ranges, dtype=float)
    ok = np.isfinite(r) & (r > 0)
    if not ok.any():
        return None
    pos = np.flatnonzero(ok)
    return int(pos[np.argmin(r[ok])])


# --- driver ----------------------------------------------------------------------

@dataclass
class CampaignResult:
    cfg: CampaignConfig
    runs: list
    truth: np.ndarray
    mse_inst: np.ndarray
    mse_avg: np.ndarray
    elapsed: float
    backend: str

    @property
    def y(self) -> np.ndarray:
        return self.truth[:, 1]


def _map(fn, tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks, chunksize=1))


def run_campaign(cfg: CampaignConfig, workers: int | None = None, progress=None) -> CampaignResult:
    """Run every MC run of ``cfg``; deterministic for fixed (seed, cfg)."""
    t0 = time.perf_counter()
    ctx = _ctx(cfg)
    runs = list(range(cfg.runs))
    workers = worker_count(len(runs)) if workers is None else max(1, workers)

    if progress:
        progress(f"channel estimation: {len(runs)} runs x {len(ctx.truth)} steps, "
                 f"{workers} worker(s), {chest.BACKEND} ALS")
    steps = _map(_phase_a, [(cfg, r) for r in runs], workers)

    truth = np.array([s.position for s in ctx.truth])
    snaps = np.array([tracker.snapshot_positions([s.obs for s in st], ctx.rsu, ctx.height)
                      for st in steps])
    mse_inst, mse_avg = tracker.mse_tables(snaps, truth,
                                           scalar=cfg["campaign"]["mse_mode"] == "scalar")

    if progress:
        progress("filtering")
    results = _map(_phase_c, [(cfg, r, steps[r], mse_inst, mse_avg) for r in runs], workers)
    results.sort(key=lambda r: r.run)
    return CampaignResult(cfg, results, truth, mse_inst, mse_avg,
                          time.perf_counter() - t0, chest.BACKEND)
