"""Command-line entry point: ``sidelink-trk {simulate,track,report}``.

Exit codes: 0 success, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ..scene import generate_paths, los_geometry
from ..waveform import ArrayConfig, synthesize
from .campaign import STREAMS, _ctx, run_campaign, sub_seed
from .config import ConfigError, default_config, load_config
from .emit import emit, report

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sidelink-trk", description="V2X sidelink tracking simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_default):
        sp.add_argument("--config", type=Path, help="INI or JSON campaign config")
        sp.add_argument("--seed", help="campaign seed (0 .. 2**64-1)")
        sp.add_argument("--runs", help="number of Monte Carlo runs")
        sp.add_argument("--out", type=Path, default=Path(out_default), help="output directory")
        sp.add_argument("--variants", help="comma-separated subset of "
                        "EECLB-LOS,EECLB-NLOS,BM1,BM2,BM3,BM4")
        sp.add_argument("--no-gate", action="store_true", help="run the filters ungated only")
        sp.add_argument("-q", "--quiet", action="store_true", help="no progress on stderr")

    common(sub.add_parser("simulate", help="dump paths and observation tensors only"), "sim_out")
    common(sub.add_parser("track", help="run the full campaign and write tables"), "out")
    r = sub.add_parser("report", help="recompute tables from step logs in --out")
    r.add_argument("--out", type=Path, default=Path("out"))
    r.add_argument("--seed", help="which runs/<seed> log directory to use")
    r.add_argument("--config", type=Path, help="ignored; the logged config is used")
    return p


def _config(args, default_runs=None):
    cfg = load_config(args.config) if args.config else default_config()
    over = {}
    if args.seed is not None:
        over["campaign__seed"] = args.seed
    if args.runs is not None:
        over["campaign__runs"] = args.runs
    elif default_runs is not None:
        over["campaign__runs"] = default_runs
    if args.variants is not None:
        over["campaign__variants"] = args.variants
    if args.no_gate:
        over["campaign__gating"] = "off"
    return cfg.replace(**over) if over else cfg


def _path_json(p) -> dict:
    return {"gain_re": float(np.real(p.gain)), "gain_im": float(np.imag(p.gain)),
            "toa_s": float(p.toa), "aoa_az_rad": float(p.aoa_az), "aoa_el_rad": float(p.aoa_el),
            "bounce_count": p.bounce_count, "is_los": bool(p.is_los)}


def simulate(cfg, out_dir: Path, log=print) -> Path:
    """Write true paths and noisy tensors for every (run, step).

    Files per step under ``<out>/simulate/<seed>/<run>/``: ``<step>_paths.json``,
    ``<step>_cru.bin`` (request link, shape (1, 1, S)) and ``<step>_rsu.bin``
    (response link at the array, paths delayed by the true LoS ToA).
    """
    ctx = _ctx(cfg)
    single = ArrayConfig.single(ctx.ofdm.wavelength)
    base = out_dir / "simulate" / str(cfg.seed)
    for run in range(cfg.runs):
        d = base / str(run)
        try:
            d.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {d}: {exc.strerror or exc}") from exc
        for k, cru in enumerate(ctx.truth):
            paths = generate_paths(ctx.geometry, ctx.rsu, cru, ctx.ofdm.wavelength)
            seed_c = sub_seed(cfg.seed, run, k, STREAMS["cru_noise"])
            seed_r = sub_seed(cfg.seed, run, k, STREAMS["rsu_noise"])
            v = synthesize(paths, single, ctx.ofdm, seed_c, ctx.noise_variance)
            t_los = los_geometry(ctx.rsu, cru.position)[0]
            Y = synthesize([p.shifted(t_los) for p in paths], ctx.array, ctx.ofdm, seed_r,
                           ctx.noise_variance)
            target = d / f"{k}_paths.json"
            try:
                target.write_text(json.dumps({
                    "run": run, "step": k, "position": cru.position.tolist(),
                    "noise_variance": ctx.noise_variance,
                    "paths": [_path_json(p) for p in paths]}, indent=1))
                target = d / f"{k}_cru.bin"
                v.dump(target)
                target = d / f"{k}_rsu.bin"
                Y.dump(target)
            except OSError as exc:
                raise OSError(f"cannot write {target}: {exc.strerror or exc}") from exc
        log(f"run {run}: {len(ctx.truth)} steps written to {d}")
    return base


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    quiet = getattr(args, "quiet", False)

    def log(msg):
        if not quiet:
            print(msg, file=sys.stderr)

    try:
        if args.command == "report":
            seed = None
            if args.seed is not None:
                try:
                    seed = int(args.seed, 0)
                except ValueError:
                    raise ConfigError(f"--seed: expected an integer, got {args.seed!r}") from None
            m = report(args.out, seed)
            log(f"recomputed {len(m.tracks)} track(s) over {len(m.y)} positions in {args.out}")
            return EXIT_OK
        if args.command == "simulate":
            cfg = _config(args, default_runs=1)
            simulate(cfg, args.out, log)
            return EXIT_OK
        cfg = _config(args)
        res = run_campaign(cfg, progress=log)
        m = emit(res, args.out)
        log(f"{cfg.runs} run(s) in {res.elapsed:.1f} s; tables in {args.out}")
        if not quiet:
            print((args.out / "summary.txt").read_text(), end="")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        name = getattr(exc, "filename", None)
        msg = f"{exc.strerror}: {name}" if name and exc.strerror else str(exc)
        print(f"I/O error: {msg}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
