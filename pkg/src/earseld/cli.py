"""Command-line entry point: ``earseld {synth,train,eval,embed,verify,trend}``.

Every command reads an optional YAML experiment config (``--config``);
flags override file values, which override defaults.  Failures print one
JSON error record on stderr and exit non-zero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import ConfigError, EarError

log = logging.getLogger("earseld")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_INTERNAL = 3


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--data-dir", dest="data_dir", help="dataset root")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="earseld", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize IR bank, clips, labels and manifest")
    _common(p)
    p.add_argument("--scale", type=float, help="global clip-count scale (default 1/16)")
    p.add_argument("--paper-scale", dest="paper_scale", action="store_true", default=None,
                   help="full published split counts (scale 1)")
    p.add_argument("--workers", type=int)
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p.add_argument("--plan-only", action="store_true", help="print split counts without rendering")

    p = sub.add_parser("train", help="train one condition (A-F)")
    _common(p)
    p.add_argument("--condition", required=True)
    p.add_argument("--out-dir", dest="out_dir", help="run directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--desk-width", dest="desk_width", action="store_true", default=None,
                   help="narrower CNN/GRU for CPU runs")
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint .npz (omit with --oracle)")
    p.add_argument("--split", default="Test")
    p.add_argument("--oracle", action="store_true", help="score references against themselves")
    p.add_argument("--output", help="write the report as JSON")

    p = sub.add_parser("embed", help="export time-pooled f and f' per clip")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--splits", nargs="+", default=["Test"])
    p.add_argument("--output", required=True, help="CSV path")

    p = sub.add_parser("verify", help="run invariant and oracle checks")
    _common(p)
    p.add_argument("--checks", nargs="+", help="subset of checks to run")

    p = sub.add_parser("trend", help="desk-scale condition comparison over seeds")
    _common(p)
    p.add_argument("--conditions", nargs="+")
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    return parser


OVERRIDE_KEYS = ("data_dir", "seed", "scale", "paper_scale", "workers", "out_dir", "epochs", "batch_size",
                 "lr", "val_fraction", "desk_width", "conditions", "seeds")


def resolve_config(args) -> ExperimentConfig:
    overrides = {k: getattr(args, k, None) for k in OVERRIDE_KEYS}
    return load_config(args.config, overrides)


def _print(obj):
    print(json.dumps(obj, indent=1, default=str))


def cmd_synth(args, cfg: ExperimentConfig) -> int:
    from .dataset import synthesize_dataset
    from .scenes import SPLIT_TABLE

    dcfg = cfg.dataset_config()
    if args.plan_only:
        _print({name: dcfg.split_count(name) for name in (dcfg.splits or SPLIT_TABLE)})
        return EXIT_OK
    report = synthesize_dataset(dcfg, cfg.data_dir, force=args.force, workers=cfg.workers)
    _print(report)
    return EXIT_OK if report.get("ok") else EXIT_FAILED


def _train_config(cfg: ExperimentConfig, condition: str, max_steps=None):
    from .experiment import DESK_MODEL
    from .training import TrainConfig

    return TrainConfig(condition=condition, batch_size=cfg.batch_size, lr=cfg.lr, epochs=cfg.epochs,
                       seed=cfg.seed, model=dict(DESK_MODEL) if cfg.desk_width else {},
                       validate=cfg.val_fraction > 0, max_steps=max_steps)


def cmd_train(args, cfg: ExperimentConfig) -> int:
    from .dataset import Dataset
    from .experiment import prepare_training_data
    from .io import write_json
    from .training import get_condition, train

    condition = get_condition(args.condition)
    dataset = Dataset.open(cfg.data_dir)
    data = prepare_training_data(dataset, condition.name, cfg.val_fraction, cfg.seed)
    tc = _train_config(cfg, condition.name, args.max_steps)
    run_dir = Path(cfg.out_dir) / f"{condition.name}_seed{cfg.seed}" if args.out_dir is None else Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_json(run_dir / "config.json", {"experiment": cfg.to_dict(), "train": tc.to_dict()})
    result = train(tc, data, run_dir)
    epochs = [h for h in result.history if h["type"] == "epoch"]
    _print({"run_dir": str(run_dir), "checkpoints": result.checkpoints, "best_epoch": result.best_epoch,
            "final_loss": epochs[-1]["loss"] if epochs else None,
            "grl_lambda": [e["grl_lambda"] for e in epochs]})
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    from .dataset import Dataset
    from .experiment import evaluate_split, oracle_report
    from .io import write_json

    dataset = Dataset.open(cfg.data_dir)
    dataset.require(args.split)
    if args.oracle:
        report, name = oracle_report(dataset, args.split), "oracle"
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --oracle)")
        report, name = evaluate_split(args.checkpoint, dataset, args.split), Path(args.checkpoint).parent.name
    print(report.table(name))
    if args.output:
        write_json(args.output, {"split": args.split, "system": name, **report.to_dict()})
    return EXIT_OK


def cmd_embed(args, cfg: ExperimentConfig) -> int:
    from .dataset import Dataset
    from .experiment import export_embeddings

    dataset = Dataset.open(cfg.data_dir)
    dataset.require(*args.splits)
    n = export_embeddings(args.checkpoint, dataset, args.splits, args.output)
    _print({"output": args.output, "rows": n})
    return EXIT_OK


def cmd_verify(args, cfg: ExperimentConfig) -> int:
    from .checks import ALL_CHECKS, run_checks
    from .dataset import MANIFEST_NAME, verify_dataset

    names = args.checks or list(ALL_CHECKS)
    unknown = [n for n in names if n not in ALL_CHECKS]
    if unknown:
        raise ConfigError(f"unknown check(s) {', '.join(unknown)}; available: {', '.join(ALL_CHECKS)}")
    ok = True
    for res in run_checks(names):
        print(res.line())
        ok &= res.passed
    if args.data_dir and (Path(args.data_dir) / MANIFEST_NAME).exists():
        report = verify_dataset(args.data_dir)
        print(f"[{'PASS' if report['ok'] else 'FAIL'}] dataset checksums: {report['checked']} files, "
              f"{len(report['mismatched'])} mismatched")
        ok &= report["ok"]
    return EXIT_OK if ok else EXIT_FAILED


def cmd_trend(args, cfg: ExperimentConfig) -> int:
    from .dataset import Dataset
    from .experiment import TrendConfig, run_trend, trend_table

    dataset = Dataset.open(cfg.data_dir)
    tcfg = TrendConfig(conditions=tuple(c.upper() for c in cfg.conditions), seeds=tuple(cfg.seeds),
                       epochs=cfg.epochs if args.epochs is not None else TrendConfig.epochs)
    out = run_trend(dataset, tcfg, cfg.out_dir)
    print(trend_table(out["median"]))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "embed": cmd_embed,
    "verify": cmd_verify,
    "trend": cmd_trend,
}


def error_record(exc: BaseException, command: str) -> dict:
    return {"error": type(exc).__name__, "message": str(exc), "command": command}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, KeyError, FileNotFoundError) as exc:
        print(json.dumps(error_record(exc, args.command)), file=sys.stderr)
        return EXIT_CONFIG
    except EarError as exc:
        print(json.dumps(error_record(exc, args.command)), file=sys.stderr)
        return EXIT_FAILED
    except Exception as exc:  # pragma: no cover - last-resort record
        rec = error_record(exc, args.command)
        rec["traceback"] = traceback.format_exc()
        print(json.dumps(rec), file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
