"""Command line entry point ``vortsdf``.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, dump_config, load_config, parse_config
from .cvt import CvtConfig, cvt_loss_and_grad, nn_distance_variance, optimize_cvt, sample_angles
from .extract import EmptyMeshError
from .geom import GeometryError, SiteSet, build_kdtree, knn_table
from .pipeline import NumericalError, evaluate, train
from .render import beta_schedule
from .report import plot_cvt, write_csv, write_report
from .scene import SceneError, load_scene, save_scene, synth_scene
from .traverse import GrazingRay, TraversalError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

log = logging.getLogger("vortsdf")


def _reconstruct(args) -> int:
    dataset = load_scene(args.scene)
    overrides = {"levels": args.levels, "seed": args.seed, "iters_per_level": args.iters, "batch_rays": args.batch}
    cfg = load_config(args.config, overrides) if args.config else parse_config("", overrides=overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    t0 = time.perf_counter()

    def progress(level, it, loss):
        if it % 100 == 0:
            log.info("level %d iter %d loss %.5f", level, it, loss)

    results = train(dataset, cfg, out, progress)
    metrics = {}
    if dataset.gt_mesh is not None:
        for r in results:
            if len(r.mesh):
                metrics[r.level] = evaluate(r.mesh, dataset.gt_mesh, n_samples=args.eval_samples, seed=cfg.seed)
                log.info("level %d: Acc %.3f mm, Compl %.3f mm", r.level, metrics[r.level]["acc_mm"],
                         metrics[r.level]["compl_mm"])
    if not args.no_report:
        beta = beta_schedule(cfg.levels * cfg.iters_per_level, cfg.levels - 1, cfg.beta0, cfg.beta_growth, cfg.beta_cap0)
        for p in write_report(out, results, dataset, metrics, beta):
            log.info("wrote %s", p)
    print(f"done in {time.perf_counter() - t0:.1f} s; outputs in {out}")
    return EXIT_OK


def _synth(args) -> int:
    ds = synth_scene(args.shape, args.views, tuple(args.res), args.seed)
    save_scene(ds, args.out)
    print(f"wrote {len(ds)} views to {args.out}")
    return EXIT_OK


def _eval(args) -> int:
    m = evaluate(args.pred, args.gt, args.clip, args.samples, args.seed)
    print(f"acc_mm,compl_mm\n{m['acc_mm']:.6f},{m['compl_mm']:.6f}")
    if args.csv:
        write_csv(args.csv, ["acc_mm", "compl_mm"], [[m["acc_mm"], m["compl_mm"]]])
    return EXIT_OK


def _cvt_bench(args) -> int:
    side = max(2, round(args.sites ** (1.0 / 3.0)))
    rng = np.random.default_rng(args.seed)
    g = (np.stack(np.meshgrid(*[np.arange(side)] * 3, indexing="ij"), -1).reshape(-1, 3) + 0.5) / side
    pos = g + rng.uniform(-0.25, 0.25, g.shape) / side
    sites = SiteSet(pos)
    cfg = CvtConfig(n_iterations=args.iters, rng_seed=args.seed)
    table = knn_table(build_kdtree(sites), cfg.n_neighbors)
    free = sites.free
    # warm-up compiles the kernel outside the timed region
    cvt_loss_and_grad(pos, None, table, free, sample_angles(args.seed, 0, len(pos)), (np.zeros(3), np.ones(3)))
    history, stamps = [], []
    var0 = nn_distance_variance(pos)
    t0 = time.perf_counter()
    out = optimize_cvt(sites, None, cfg, bounds=(np.zeros(3), np.ones(3)), history=history,
                       callback=lambda it, p: stamps.append(time.perf_counter() - t0))
    total = time.perf_counter() - t0
    var1 = nn_distance_variance(out.positions)
    print(f"sites={len(pos)} iterations={args.iters} total_s={total:.3f} per_iter_s={total / args.iters:.4f}")
    print(f"loss_ratio={history[-1] / history[0]:.4g} nn_var {var0:.4g} -> {var1:.4g}")
    if args.out:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        write_csv(d / "cvt_bench.csv", ["iteration", "loss", "elapsed_s"],
                  [[i, f"{l:.10g}", f"{s:.4f}"] for i, (l, s) in enumerate(zip(history, stamps))])
        plot_cvt(d / "cvt_bench.csv", d / "cvt_bench.png")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vortsdf", description="Multi-view SDF reconstruction on an adaptive CVT.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("reconstruct", help="train on a scene directory")
    r.add_argument("--scene", required=True)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--levels", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--iters", type=int, help="iterations per level")
    r.add_argument("--batch", type=int, help="rays per iteration")
    r.add_argument("--eval-samples", type=int, default=200_000)
    r.add_argument("--no-report", action="store_true")
    r.set_defaults(func=_reconstruct)

    s = sub.add_parser("synth", help="write a synthetic scene")
    s.add_argument("--shape", choices=("sphere", "torus", "box"), default="sphere")
    s.add_argument("--views", type=int, default=20)
    s.add_argument("--res", type=int, nargs=2, metavar=("W", "H"), default=(256, 256))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_synth)

    e = sub.add_parser("eval", help="Chamfer accuracy/completeness between meshes")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--clip", type=float, default=0.1)
    e.add_argument("--samples", type=int, default=1_000_000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--csv")
    e.set_defaults(func=_eval)

    b = sub.add_parser("cvt-bench", help="time CVT iterations on a jittered lattice")
    b.add_argument("--sites", type=int, default=100_000)
    b.add_argument("--iters", type=int, default=300)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=_cvt_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (SceneError, ConfigError, EmptyMeshError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, GeometryError, TraversalError, GrazingRay, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
