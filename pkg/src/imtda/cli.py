"""Command line entry point: ``imtda {generate-data,run,sweep,report,eval}``.

Exit codes: 0 success, 1 configuration or input error, 2 training
divergence, 3 some sweep runs failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, load, parse_order
from .synth_domains import ChecksumError
from .training import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_PARTIAL = 0, 1, 2, 3


def _config(args) -> ExperimentConfig:
    if args.config:
        cfg = load(args.config)
        base = Path(args.config).resolve().parent
        if not Path(cfg.data_root).is_absolute():
            cfg = cfg.with_(data_root=str(base / cfg.data_root))
    else:
        cfg = ExperimentConfig()
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "strategy", None):
        kw["strategy"] = args.strategy
    if getattr(args, "order", None):
        kw["order"] = parse_order(args.order)
    if getattr(args, "out", None):
        kw["out"] = args.out
    if getattr(args, "data", None):
        kw["data_root"] = str(Path(args.data).resolve())
    return cfg.with_(**kw) if kw else cfg


def cmd_generate(args) -> int:
    from .experiment import generate_data
    cfg = _config(args)
    for name, d, status in generate_data(cfg):
        print(f"{name}: {status} ({d})")
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiment import run_experiment
    cfg = _config(args)
    state, d = run_experiment(cfg, max_steps=args.max_steps)
    for row in state.map_table():
        print("step {step}: ".format(**row) + ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "step"))
    print(f"run directory: {d}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import run_sweep
    cfg = _config(args)
    values = None
    if args.values:
        raw = args.values.split(";") if args.axis == "order" else args.values.split(",")
        conv = {"alpha": float, "seed": int, "dtm_variant": str, "order": parse_order}[args.axis]
        values = [conv(v.strip()) for v in raw if v.strip()]
    rows, csv_path = run_sweep(cfg, args.axis, values)
    failed = [r for r in rows if r.status != "ok"]
    for r in rows:
        print(f"{r.axis}={r.value}: {r.status}" + ("" if r.status != "ok" else f" mean mAP {r.mean_map:.4f}"))
    print(f"results: {csv_path}")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_report(args) -> int:
    from .report import build_report
    path = build_report(args.runs, args.out, with_models=not args.no_models)
    print(f"report: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .experiment import evaluate_checkpoint
    rep, meta, name = evaluate_checkpoint(args.checkpoint, args.domain)
    print(f"checkpoint step {meta.get('step')} on {name}: mAP {rep.mAP:.4f}")
    for c, ap in sorted(rep.per_class_ap.items()):
        print(f"  class {c}: AP {ap:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imtda", description="Incremental multi-target detection adaptation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, run_flags=True):
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--data", metavar="DIR", help="dataset root (overrides [data] root)")
        if run_flags:
            sp.add_argument("--seed", type=int, metavar="N")
            sp.add_argument("--strategy", metavar="ID")
            sp.add_argument("--order", metavar="i,j,k")

    g = sub.add_parser("generate-data", help="build and save all configured domains")
    common(g, run_flags=False)
    g.set_defaults(func=cmd_generate)
    r = sub.add_parser("run", help="run one strategy (resumes if interrupted)")
    common(r)
    r.add_argument("--max-steps", type=int, help="stop after this many adaptation steps")
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("sweep", help="run a sweep over one axis")
    common(s)
    s.add_argument("--axis", required=True, choices=("alpha", "order", "seed", "dtm_variant"))
    s.add_argument("--values", help="comma list (orders: ';'-separated, e.g. '0,1;1,0')")
    s.set_defaults(func=cmd_sweep)
    rp = sub.add_parser("report", help="markdown + plots for run directories")
    rp.add_argument("runs", nargs="+", metavar="RUN_DIR")
    rp.add_argument("--out", required=True, metavar="DIR")
    rp.add_argument("--no-models", action="store_true", help="skip model-based diagnostics")
    rp.set_defaults(func=cmd_report)
    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset directory")
    e.add_argument("--checkpoint", required=True, metavar="DIR")
    e.add_argument("--domain", required=True, metavar="DIR")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ChecksumError, CheckpointError, FileNotFoundError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
