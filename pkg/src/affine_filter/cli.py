"""Command line entry point: ``affine-filter <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import bench
from .aff import PriorMixture, TruncationWarning, aff_cf, aff_moments_cir, fourier_invert
from .core import Inadmissible
from .models import InvalidParams
from .observation import make_schedule

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2

log = logging.getLogger("affine_filter")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML file with ExperimentConfig fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=str)
    common.add_argument("--threads", type=int)
    common.add_argument("--np", dest="Np", type=int, help="particle count")
    common.add_argument("--replications", dest="M", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="affine-filter", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate a signal path and its observations")
    sub.add_parser("filter", parents=[common], help="run the configured filters on one simulated record")
    exp = sub.add_parser("experiment", parents=[common], help="run a preset experiment")
    exp.add_argument("name", choices=sorted(bench.PRESETS))
    inv = sub.add_parser("invert-density", parents=[common], help="AFF density of X_T by Fourier inversion")
    inv.add_argument("--points", type=int, default=401)
    return p


def _load(args, base: dict) -> bench.ExperimentConfig:
    data = dict(base)
    if args.config is not None:
        cfg = bench.ExperimentConfig.from_toml(args.config)
        data.update(cfg.to_dict())
    cfg = bench.ExperimentConfig.from_dict(data)
    return cfg.override(seed=args.seed, out=args.out, threads=args.threads, Np=args.Np, M=args.M)


def _cmd_simulate(cfg: bench.ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path, record = bench.simulate(cfg, bench.derive_rng(cfg.seed, 0), seed=cfg.seed)
    path.to_csv(out / "signal.csv")
    record.to_csv(out / "observations.csv")
    print(f"wrote {out / 'signal.csv'} and {out / 'observations.csv'}")
    return EXIT_OK


def _cmd_filter(cfg: bench.ExperimentConfig) -> int:
    res = bench.run_filter_case(cfg, cfg.out)
    bench.emit_plotdata(res, cfg.out)
    for method, t in res.timings.items():
        status = "failed: " + res.failures[method] if method in res.failures else "ok"
        print(f"{method:6s} {t:8.2f}s  {status}")
    return EXIT_PARTIAL if res.failures else EXIT_OK


def _cmd_mse(cfg: bench.ExperimentConfig) -> int:
    table = bench.run_mse_experiment(cfg, cfg.out)
    bench.emit_plotdata(table, cfg.out, cfg)
    partial = False
    for m in cfg.methods:
        tail = table.window_mean(m, 0.5 * cfg.T, cfg.T)
        print(f"{m:4s} effective M={table.effective_M[m]:4d}  mean e over [T/2, T]={tail:.6g}  "
              f"median time={table.median_time(m):.3f}s")
        partial |= table.effective_M[m] < cfg.M
    return EXIT_PARTIAL if partial else EXIT_OK


def _cmd_invert(cfg: bench.ExperimentConfig, points: int) -> int:
    if cfg.model != "cir":
        raise bench.ConfigError("density inversion is implemented for the cir model")
    _, record = bench.simulate(cfg, bench.derive_rng(cfg.seed, 0), seed=cfg.seed)
    model = cfg.signal_model()
    sched = make_schedule(record.model, [float(cfg.x0)])
    prior = PriorMixture.clamped_normal(float(cfg.x0), cfg.s0, cfg.prior_nodes)
    mom = aff_moments_cir(model, record, sched, cfg.T, prior, cfg.rtol, cfg.atol)
    mean, sd = float(mom.mean[0]), math.sqrt(float(mom.variance[0]))
    def cf(v):
        return aff_cf(model, record, sched, prior, cfg.T, np.asarray(v, dtype=float)[:, None],
                      rtol=cfg.rtol, atol=cfg.atol)

    # with a tiny b the law keeps an (almost) point mass at 0 and the CF levels
    # off at its weight; the cutoff grows until the CF has settled and the
    # settled value is split off as that atom before inverting the rest
    v_max = 8.0 / sd
    for _ in range(10):
        a, b2 = cf([v_max, 2 * v_max])
        if abs(a - b2) < 1e-5:
            break
        v_max *= 2
    atom = float(np.real(b2)) if abs(b2) > 1e-6 else 0.0
    # spacing small enough that the aliasing period covers all mass
    dv = math.pi / (abs(mean) + 10.0 * sd)
    n_nodes = min(2 * int(math.ceil(v_max / dv)), 200_000)
    x = np.linspace(max(0.0, mean - 6 * sd), mean + 6 * sd, points)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", TruncationWarning)
        dens, tail = fourier_invert(lambda v: cf(v) - atom, v_max, n_nodes, x)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "density.csv", "w") as fh:
        fh.write("x,density\n")
        for xi, fi in zip(x, dens):
            fh.write(f"{float(xi)!r},{float(fi)!r}\n")
    print(f"mean={mean:.6g} sd={sd:.3g} atom at 0={atom:.3g} |cf(V)|={tail:.2e} nodes={n_nodes}")
    return EXIT_PARTIAL if caught else EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    base = bench.PRESETS[args.name] if args.command == "experiment" else {}
    try:
        cfg = _load(args, base)
        cfg.signal_model()
    except (bench.ConfigError, InvalidParams, Inadmissible, OSError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "simulate":
        return _cmd_simulate(cfg)
    if args.command == "filter":
        return _cmd_filter(cfg)
    if args.command == "invert-density":
        return _cmd_invert(cfg, args.points)
    if cfg.model == "wishart":
        return _cmd_mse(cfg)
    return _cmd_filter(cfg)


if __name__ == "__main__":
    sys.exit(main())
