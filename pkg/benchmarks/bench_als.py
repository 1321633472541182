"""Compare the compiled and NumPy ALS backends on campaign-sized tensors.

Usage::

    python benchmarks/bench_als.py [--repeats 20]

Both backends run identical sweeps from identical starting factors; the
script reports the median wall time per call, the speed-up and the largest
factor difference between the two.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from sidelink_trk.chest import SaConfig, augment, available_backends
from sidelink_trk.chest import kernels
from sidelink_trk.scene import PathParams
from sidelink_trk.waveform import ArrayConfig, OfdmConfig, synthesize


def _case(n_x, n_z, seed=0):
    ofdm = OfdmConfig()
    array = ArrayConfig(n_x=n_x, n_z=n_z, wavelength=ofdm.wavelength)
    paths = [PathParams(1e-4, 2.4e-7, -1.4, -0.12, 0, True),
             PathParams(5e-5, 2.6e-7, -1.1, -0.10, 1, False)]
    Y = synthesize(paths, array, ofdm, seed)
    cfg = SaConfig(n_x_aug=3, n_z_aug=3) if n_x == 1 else SaConfig()
    return augment(Y, cfg), cfg


def _time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--rank", type=int, default=3)
    args = ap.parse_args(argv)

    backends = available_backends()
    if "compiled" not in backends:
        print("compiled backend not built; only the NumPy path is available")
    print(f"{'tensor':>16s} {'backend':>9s} {'median_ms':>10s} {'speedup':>8s} {'max|dA|':>9s}")
    for label, (n_x, n_z) in (("RSU 4x2", (4, 2)), ("CRU 1x1", (1, 1))):
        Y, cfg = _case(n_x, n_z)
        Y = np.ascontiguousarray(Y)
        rng = np.random.default_rng(1)
        I, J, K = Y.shape
        R = args.rank
        start = [rng.standard_normal((n, R)) + 1j * rng.standard_normal((n, R)) for n in (I, J, K)]
        res = {}
        for b in backends:
            def call(b=b):
                return kernels.als_run(Y, *[s.copy() for s in start], cfg.als_max_iters,
                                       cfg.als_tol, cfg.ridge, b)
            res[b] = _time(call, args.repeats)
        base = res["python"][0]
        for b in backends:
            t, out = res[b]
            diff = float(np.max(np.abs(out[0] - res["python"][1][0])))
            print(f"{label + ' ' + str(Y.shape):>16s} {b:>9s} {1e3 * t:10.3f} "
                  f"{base / t:8.2f} {diff:9.2e}")


if __name__ == "__main__":
    main()
