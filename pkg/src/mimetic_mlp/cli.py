"""``mimetic-mlp`` command line: gradcheck, train, sweep-bias, epoch-curve, farm, analyze."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from .autodiff import ConfigurationError
from .gradcheck import run_suite
from .population import PopulationError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _load_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.from_yaml(args.config) if args.config else ex.ExperimentConfig()
    updates = {}
    if getattr(args, "seeds", None):
        updates["seeds"] = ex.parse_seeds(args.seeds)
    if getattr(args, "b_grid", None):
        updates["b_grid"] = ex.parse_float_list(args.b_grid)
    epochs = getattr(args, "epochs", None)
    if epochs:
        if args.command == "epoch-curve":
            updates["epochs_grid"] = ex.parse_int_list(epochs)
        else:
            updates["epochs"] = int(epochs)
    init = getattr(args, "init", None)
    if init:
        if args.command == "epoch-curve":
            updates["init_modes"] = tuple(m for m in init.split(",") if m)
        else:
            updates["model"] = replace(cfg.model, init_spec=ex.with_mode(cfg.model.init_spec, init))
    return replace(cfg, **updates) if updates else cfg


def _out(args, cfg: ex.ExperimentConfig) -> Path:
    return Path(args.out or cfg.out)


def _parallel(args) -> int:
    return args.parallel if args.parallel is not None else ex.default_parallelism()


def cmd_gradcheck(args) -> int:
    ops = [o for o in args.ops.split(",") if o] if args.ops else None
    try:
        reports = run_suite(ops, points=args.points, models=not args.no_models, seed=args.seed)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_USAGE
    width = max(len(r.name) for r in reports)
    for r in reports:
        print(f"{r.name:<{width}}  worst rel err {r.worst_rel_err:.3e}  tol {r.tol:.0e}  "
              f"{'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in reports if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_FAIL
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    results = ex.run_train(cfg, _out(args, cfg), _parallel(args), args.force)
    print(f"{'seed':>6}  {'status':<24} final_acc")
    for r in results:
        acc = "-" if r.failed else f"{r.final_test_acc:.4f}"
        print(f"{r.seed:>6}  {r.status:<24} {acc}")
    n, mean, std, _ = ex.summarize([ex._final_acc(r) for r in results])
    print(f"mean {mean:.4f} +- {std:.4f} over {n} seed(s)")
    return EXIT_FAIL if any(r.failed for r in results) else EXIT_OK


def _print_summary(rows, labels):
    print("  ".join(f"{x:>10}" for x in (*labels, "n", "mean", "std")))
    for g, x, n, mean, std, _ in rows:
        print("  ".join(f"{v:>10}" for v in (g, x, n, f"{mean:.4f}", f"{std:.4f}")))


def cmd_sweep_bias(args) -> int:
    cfg = _load_config(args)
    rows = ex.run_sweep_bias(cfg, _out(args, cfg), _parallel(args), args.force)
    _print_summary(ex.summarize_rows(rows), ("arm", "b"))
    return EXIT_OK


def cmd_epoch_curve(args) -> int:
    cfg = _load_config(args)
    rows = ex.run_epoch_curve(cfg, _out(args, cfg), _parallel(args), args.force)
    _print_summary(ex.summarize_rows(rows), ("mode", "epochs"))
    return EXIT_OK


def cmd_farm(args) -> int:
    cfg = _load_config(args)
    report = ex.run_farm(cfg, _out(args, cfg), _parallel(args))
    print(f"trained {len(report.trained)}, skipped {len(report.skipped)} (already done), "
          f"failed {len(report.failed)}")
    if report.failed:
        print("failed seeds: " + ", ".join(map(str, sorted(report.failed))))
    return EXIT_OK


def cmd_analyze(args) -> int:
    src = Path(args.snapshots)
    out = Path(args.out) if args.out else (src.parent if src.name == "snapshots" else src) / "analysis"
    layers = ex.parse_int_list(args.layer) if args.layer else None
    report = ex.run_analyze(src, out, layers)
    for layer, d in report.items():
        s = d["stripe_scores"]
        print(f"layer {layer}  K={d['K']}  rho={d['rho']:+.4f}")
        for axis in ("rows", "columns"):
            print(f"  {axis:<8} W1 {s['W1'][axis]:.3f}   W2 {s['W2'][axis]:.3f}")
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mimetic-mlp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive and both model families")
    g.add_argument("--ops", help="comma-separated subset, e.g. matmul,gelu or model:vit")
    g.add_argument("--points", type=int, default=100, help="random points per primitive")
    g.add_argument("--no-models", action="store_true", help="skip the end-to-end model checks")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    def common(p, epochs_help="training epochs per run"):
        p.add_argument("--config", help="YAML experiment config (defaults to the built-in synthetic setup)")
        p.add_argument("--seeds", help="seed list such as 0-4 or 1,3,5")
        p.add_argument("--epochs", help=epochs_help)
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--parallel", type=int, help="worker processes (default: available cores)")

    t = sub.add_parser("train", help="one run per seed with JSON results and snapshots")
    common(t)
    t.add_argument("--init", help="none | constant:B | rowvec:S | anticorr")
    t.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep-bias", help="accuracy across the mean-shift b grid plus baseline arms")
    common(s)
    s.add_argument("--b-grid", dest="b_grid", help="comma-separated b values; must include 0")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sweep_bias)

    e = sub.add_parser("epoch-curve", help="independent runs per epoch budget and init mode")
    common(e, epochs_help="comma-separated epoch budgets, e.g. 2,5,10")
    e.add_argument("--init", help="comma-separated init modes, e.g. none,constant:0.02")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_epoch_curve)

    f = sub.add_parser("farm", help="train a population of models (resumable)")
    common(f)
    f.add_argument("--init", help="none | constant:B | rowvec:S | anticorr")
    f.set_defaults(func=cmd_farm)

    a = sub.add_parser("analyze", help="population covariance and stripe statistics")
    a.add_argument("snapshots", help="farm output directory or its snapshots/ subdirectory")
    a.add_argument("--layer", help="comma-separated MLP layer indices (default: all)")
    a.add_argument("--out", help="directory for stats JSON and heatmap CSV")
    a.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ValueError, ex.OutputExistsError, FileNotFoundError) as exc:
        if isinstance(exc, PopulationError):
            print(f"analysis error: {exc}", file=sys.stderr)
            return EXIT_FAIL
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
