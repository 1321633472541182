"""Output files of a campaign.

Layout under ``out_dir``::

    rmse_vs_y.csv          y_m, then one RMSE column (m) per track
    cdf.csv                error_m, then one cumulative-fraction column per track
    los_id.csv             y_m, track, id_rate, gate_empty_rate, toa_rmse_m, n_runs
    summary.txt            human-readable digest
    runs/<seed>/campaign.json   config and track list (used by ``report``)
    runs/<seed>/<run>.jsonl     one JSON object per step

Track names are ``<variant>/gated``, ``<variant>/ungated`` for the filters
and plain ``BM3`` / ``BM4`` for the gate-free benchmarks.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
from scipy.constants import speed_of_light as C

from ..scene import los_geometry
from .config import CampaignConfig
from .metrics import MetricsTable, compute_metrics


class OutputError(OSError):
    pass


def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def _vec(v):
    return None if v is None else [_num(x) for x in np.asarray(v, dtype=float).ravel()]


def track_names(result) -> list:
    names = []
    for r in result.runs[:1]:
        names = list(r.tracks)
    return names


def step_records(result) -> list:
    """Flat JSON-ready per-step dictionaries, ordered by (run, step)."""
    rsu = result.cfg.rsu()
    out = []
    for rr in result.runs:
        for k, s in enumerate(rr.steps):
            _, los_az, _ = los_geometry(rsu, s.truth)
            cands = []
            if s.obs is not None:
                for p, r in zip(s.obs.estimates, s.obs.ranges):
                    cands.append([_num(r), _num(p.aoa_az), _num(p.aoa_el), _num(abs(p.gain))])
            tracks = {}
            for name, pos in rr.tracks.items():
                t = {"pos": _vec(pos[k])}
                if name in rr.los_index:
                    t["los_index"] = rr.los_index[name][k]
                    t["gate_empty"] = bool(rr.gate_empty.get(name, [False] * (k + 1))[k])
                if name in rr.step_errors and rr.step_errors[name][k]:
                    t["error"] = rr.step_errors[name][k]
                if name in rr.eeclb_traces:
                    t["eeclb_trace_m2"] = _num(rr.eeclb_traces[name][k])
                tracks[name] = t
            out.append({
                "run": rr.run, "step": k, "y": _num(s.truth[1]),
                "truth": _vec(s.truth), "los_range": _num(s.los_range), "los_az": _num(los_az),
                "seeds": s.seeds, "clock_bias": s.clock_bias, "n_true_paths": s.n_true_paths,
                "rank": s.rank, "error": s.error,
                "cru_toas": [_num(t) for t in s.cru_toas],
                "window_toas": [_num(t) for t in s.window_toas],
                "candidates": cands, "tracks": tracks,
            })
    return out


def half_cell(cfg: CampaignConfig) -> float:
    o = cfg.ofdm()
    return C * o.delay_resolution / 2


def _fmt(v):
    if v is None:
        return "nan"
    if isinstance(v, str):
        return v
    return f"{float(v):.10g}"


def _write_csv(path: Path, header, rows):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_tables(m: MetricsTable, out_dir) -> None:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create {out}: {exc.strerror or exc}") from exc
    has = bool(m.tracks)
    _write_csv(out / "rmse_vs_y.csv", ["y_m", *m.tracks],
               [[m.y[k], *m.rmse[k]] for k in range(len(m.y))] if has else [])
    _write_csv(out / "cdf.csv", ["error_m", *m.tracks],
               [[m.cdf_x[i], *m.cdf[i]] for i in range(len(m.cdf_x))] if has else [])
    _write_csv(out / "los_id.csv", ["y_m", "track", "id_rate", "gate_empty_rate", "toa_rmse_m",
                                    "n_runs"],
               [[r["y_m"], r["track"], r["id_rate"], r["gate_empty_rate"], r["toa_rmse_m"],
                 r["n_runs"]] for r in m.los_rows])


def write_logs(records: list, cfg: CampaignConfig, tracks: list, out_dir) -> Path:
    d = Path(out_dir) / "runs" / str(cfg.seed)
    try:
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "campaign.json", "w") as fh:
            json.dump({"config": cfg.to_dict(), "tracks": tracks,
                       "half_cell_m": half_cell(cfg)}, fh, indent=1)
        by_run = {}
        for rec in records:
            by_run.setdefault(rec["run"], []).append(rec)
        for run, recs in by_run.items():
            with open(d / f"{run}.jsonl", "w") as fh:
                for rec in recs:
                    fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write logs under {d}: {exc.strerror or exc}") from exc
    return d


def read_logs(log_dir):
    """Records and metadata from ``runs/<seed>`` (sorted by run, step)."""
    d = Path(log_dir)
    try:
        meta = json.loads((d / "campaign.json").read_text())
        records = []
        files = sorted(d.glob("*.jsonl"), key=lambda p: int(p.stem))
        for f in files:
            with open(f) as fh:
                records += [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise OutputError(f"cannot read logs in {d}: {exc.strerror or exc}") from exc
    except (json.JSONDecodeError, ValueError) as exc:
        raise OutputError(f"malformed log in {d}: {exc}") from exc
    records.sort(key=lambda r: (r["run"], r["step"]))
    return records, meta


def _nanmean(a) -> float:
    a = np.asarray(a, dtype=float)
    a = a[np.isfinite(a)]
    return float(a.mean()) if len(a) else float("nan")


def summary_text(m: MetricsTable, cfg: CampaignConfig, elapsed=None, backend=None) -> str:
    lines = [
        "sidelink tracking campaign",
        f"seed {cfg.seed}, runs {cfg.runs}, variants {', '.join(cfg.variants)}",
        f"gating {cfg['campaign']['gating']}, rtt_mode {cfg['campaign']['rtt_mode']}",
    ]
    if elapsed is not None:
        lines.append(f"runtime {elapsed:.1f} s ({backend} ALS)")
    lines += ["", f"{'track':22s} {'trajRMSE_m':>11s} {'median_m':>9s} {'p90_m':>8s}"]
    for t in m.tracks:
        e = m.errors[t]
        fin = e[np.isfinite(e)]
        p90 = float(np.percentile(fin, 90)) if len(fin) else float("nan")
        lines.append(f"{t:22s} {m.trajectory_rmse(t):11.3f} {m.median_error(t):9.3f} {p90:8.3f}")
    ids = [t for t in m.tracks if not np.all(np.isnan(m.id_correct[t]))]
    if ids:
        lines += ["", f"{'track':22s} {'LoS_id_rate':>11s} {'gate_empty':>10s} {'ToA_RMSE_m':>10s}"]
        for t in ids:
            lines.append(f"{t:22s} {_nanmean(m.id_correct[t]):11.3f} "
                         f"{_nanmean(m.gate_empty[t]):10.3f} "
                         f"{_nanmean(m.toa_rmse(t)):10.3f}")
    return "\n".join(lines) + "\n"


def emit(result, out_dir) -> MetricsTable:
    """Write tables, logs and summary for a finished campaign."""
    cfg = result.cfg
    records = step_records(result)
    tracks = track_names(result)
    m = compute_metrics(records, tracks, half_cell(cfg))
    write_tables(m, out_dir)
    if cfg["campaign"]["log_steps"]:
        write_logs(records, cfg, tracks, out_dir)
    try:
        (Path(out_dir) / "summary.txt").write_text(
            summary_text(m, cfg, result.elapsed, result.backend))
    except OSError as exc:
        raise OutputError(f"cannot write {Path(out_dir) / 'summary.txt'}: {exc}") from exc
    return m


def report(out_dir, seed: int | None = None) -> MetricsTable:
    """Recompute every table from the step logs under ``out_dir``."""
    base = Path(out_dir) / "runs"
    if seed is None:
        seeds = sorted(p.name for p in base.glob("*") if p.is_dir()) if base.exists() else []
        if not seeds:
            raise OutputError(f"no step logs under {base}")
        seed = int(seeds[0])
    records, meta = read_logs(base / str(seed))
    cfg = CampaignConfig({s: {k: tuple(v) if isinstance(v, list) else v for k, v in kv.items()}
                          for s, kv in meta["config"].items()})
    m = compute_metrics(records, meta["tracks"], meta["half_cell_m"])
    write_tables(m, out_dir)
    try:
        (Path(out_dir) / "summary.txt").write_text(summary_text(m, cfg))
    except OSError as exc:
        raise OutputError(f"cannot write summary: {exc}") from exc
    return m
