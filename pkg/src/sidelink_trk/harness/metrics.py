"""Metrics over campaign step records.

All tables are computed from flat per-step records (the same dictionaries
written to the JSONL logs), so a campaign and a later ``report`` over its logs
produce identical numbers.

Definitions:

* position error: Euclidean distance between a track and the truth;
* RMSE at a position: root mean square over runs, ignoring missing values;
* trajectory-averaged RMSE: mean of the per-position RMSEs;
* LoS ToA error: identified candidate's one-way RTT range minus the true
  LoS distance (metres);
* correct identification: identified candidate within half a delay
  resolution cell in range and within ``ID_AZ_TOL`` in azimuth of the true
  LoS.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ID_AZ_TOL = np.deg2rad(10.0)
CDF_POINTS = 201


@dataclass
class MetricsTable:
    y: np.ndarray
    tracks: list
    rmse: np.ndarray                      # (positions, tracks)
    cdf_x: np.ndarray
    cdf: np.ndarray                       # (abscissae, tracks)
    los_rows: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)    # track -> (runs, steps)
    toa_errors: dict = field(default_factory=dict)  # track -> (runs, steps), NaN if none
    id_correct: dict = field(default_factory=dict)
    gate_empty: dict = field(default_factory=dict)

    def trajectory_rmse(self, track: str) -> float:
        return float(np.nanmean(rmse_per_position(self.errors[track])))

    def median_error(self, track: str) -> float:
        return float(np.nanmedian(self.errors[track]))

    def toa_rmse(self, track: str) -> np.ndarray:
        return rmse_per_position(self.toa_errors[track])


def rmse_per_position(err: np.ndarray) -> np.ndarray:
    err = np.asarray(err, dtype=float)
    out = np.full(err.shape[1], np.nan)
    for k in range(err.shape[1]):
        e = err[:, k][np.isfinite(err[:, k])]
        if len(e):
            out[k] = np.sqrt(np.mean(e ** 2))
    return out


def empirical_cdf(samples, x) -> np.ndarray:
    s = np.sort(np.asarray(samples, dtype=float)[np.isfinite(samples)])
    if not len(s):
        return np.zeros(len(x))
    return np.searchsorted(s, x, side="right") / len(s)


def bootstrap_diff_ci(err_a, err_b, n_boot: int = 2000, seed: int = 0, level: float = 0.95):
    """CI of trajRMSE(A) - trajRMSE(B), resampling runs jointly."""
    err_a = np.asarray(err_a, dtype=float)
    err_b = np.asarray(err_b, dtype=float)
    n = err_a.shape[0]
    rng = np.random.default_rng(seed)
    stats = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, n)
        stats[b] = (np.nanmean(rmse_per_position(err_a[idx]))
                    - np.nanmean(rmse_per_position(err_b[idx])))
    a = (1 - level) / 2
    point = np.nanmean(rmse_per_position(err_a)) - np.nanmean(rmse_per_position(err_b))
    return float(point), float(np.quantile(stats, a)), float(np.quantile(stats, 1 - a))


def _azdiff(a, b):
    return abs((a - b + np.pi) % (2 * np.pi) - np.pi)


def compute_metrics(records: list, tracks: list, half_cell_m: float) -> MetricsTable:
    """Tables from per-step records.

    ``records`` is a list of dicts with keys ``run``, ``step``, ``truth``,
    ``los_range``, ``los_az``, ``candidates`` (list of [range, az, el]) and
    ``tracks`` (name -> {"pos", "los_index", "gate_empty"}).
    """
    if not records:
        return MetricsTable(np.zeros(0), list(tracks), np.zeros((0, len(tracks))),
                            np.zeros(0), np.zeros((0, len(tracks))))
    runs = sorted({r["run"] for r in records})
    steps = sorted({r["step"] for r in records})
    ri = {r: i for i, r in enumerate(runs)}
    si = {s: i for i, s in enumerate(steps)}
    shape = (len(runs), len(steps))
    y = np.full(len(steps), np.nan)
    errors = {t: np.full(shape, np.nan) for t in tracks}
    toa = {t: np.full(shape, np.nan) for t in tracks}
    ident = {t: np.full(shape, np.nan) for t in tracks}
    empty = {t: np.full(shape, np.nan) for t in tracks}

    for rec in records:
        i, k = ri[rec["run"]], si[rec["step"]]
        truth = np.asarray(rec["truth"], dtype=float)
        y[k] = truth[1]
        cands = rec.get("candidates") or []
        for t in tracks:
            tr = rec["tracks"].get(t)
            if tr is None:
                continue
            pos = tr.get("pos")
            if pos is not None and all(v is not None for v in pos):
                errors[t][i, k] = float(np.linalg.norm(np.asarray(pos, dtype=float) - truth))
            if "los_index" not in tr:
                continue
            j = tr["los_index"]
            empty[t][i, k] = 1.0 if tr.get("gate_empty") else 0.0
            if j is None:
                ident[t][i, k] = 0.0
                continue
            r, az = cands[j][0], cands[j][1]
            if r is not None and np.isfinite(r):
                toa[t][i, k] = r - rec["los_range"]
            ok = (r is not None and abs(r - rec["los_range"]) < half_cell_m
                  and _azdiff(az, rec["los_az"]) < ID_AZ_TOL)
            ident[t][i, k] = 1.0 if ok else 0.0

    rmse = np.column_stack([rmse_per_position(errors[t]) for t in tracks]) if tracks \
        else np.zeros((len(steps), 0))
    pooled = [errors[t][np.isfinite(errors[t])] for t in tracks]
    hi = max([np.percentile(p, 99) for p in pooled if len(p)] or [1.0])
    cdf_x = np.linspace(0.0, max(hi, 1e-9), CDF_POINTS)
    cdf = np.column_stack([empirical_cdf(p, cdf_x) for p in pooled]) if tracks \
        else np.zeros((CDF_POINTS, 0))

    los_rows = []
    for t in tracks:
        if np.all(np.isnan(ident[t])):
            continue
        trm = rmse_per_position(toa[t])
        for k in range(len(steps)):
            n = int(np.sum(np.isfinite(ident[t][:, k])))
            los_rows.append({
                "y_m": y[k], "track": t,
                "id_rate": float(np.nanmean(ident[t][:, k])) if n else float("nan"),
                "gate_empty_rate": float(np.nanmean(empty[t][:, k])) if n else float("nan"),
                "toa_rmse_m": trm[k],
                "n_runs": n,
            })
    return MetricsTable(y, list(tracks), rmse, cdf_x, cdf, los_rows, errors, toa, ident, empty)
