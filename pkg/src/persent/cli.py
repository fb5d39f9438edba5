"""Command-line entry point.

Subcommands: gen-synth, train, eval, ablate, layer-sweep, metrics. Result
payloads are JSON on stdout; diagnostics go to stderr. Failures exit
nonzero after printing a machine-readable error object. Every run writes
its fully resolved config beside its outputs, so any run can be reproduced
from that file alone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from .config import RunConfig, apply_overrides
from .data import SyntheticDims, generate_synthetic, load_archive, write_archive
from .encoders import load_flat_weights
from .experiments import ablate, eval_split, layer_sweep, load_data, train
from .metrics import evaluate
from .model import build_model


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _load_config(args) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.set:
        config = apply_overrides(config, args.set)
    if args.out is not None:
        config.out_dir = args.out
    return config.resolved()


def cmd_gen_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    dims = SyntheticDims(d_v=args.d_v, d_a=args.d_a, vocab=args.vocab)
    archive = generate_synthetic(args.seed, args.n, dims)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_archive(archive, out)
    spec = {"seed": args.seed, "n": args.n, "d_v": args.d_v, "d_a": args.d_a, "vocab": args.vocab}
    out.with_suffix(out.suffix + ".meta.json").write_text(json.dumps(spec, indent=2), encoding="utf-8")
    _emit(
        {
            "path": str(out),
            "sha256": hashlib.sha256(out.read_bytes()).hexdigest(),
            "records": len(archive.records),
            "manifest": json.loads(archive.manifest.to_json()),
        }
    )
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    _log(f"training into {config.out_dir or '(no persistence)'}")
    record = train(config)
    _emit(
        {
            "out_dir": config.out_dir,
            "config_hash": record.config_hash,
            "n_steps": record.n_steps,
            "best_epoch": record.best_epoch,
            "val_report_best": record.val_report_best,
            "test_report": record.test_report,
            "train_report_final": record.train_report_final,
            "wall_clock_sec": record.wall_clock_sec,
        }
    )
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    records = ablate(config)
    _emit(
        {
            "out_dir": config.out_dir,
            "csv": str(Path(config.out_dir) / "ablation.csv") if config.out_dir else None,
            "variants": {name: record.test_report for name, record in records.items()},
        }
    )
    return 0


def cmd_layer_sweep(args) -> int:
    config = _load_config(args)
    records = layer_sweep(config)
    _emit(
        {
            "out_dir": config.out_dir,
            "csv": str(Path(config.out_dir) / "layer_sweep.csv") if config.out_dir else None,
            "layers": {str(k): record.test_report for k, record in records.items()},
        }
    )
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    config = RunConfig.from_file(run_dir / "config.json").resolved()
    archive = load_archive(args.archive) if args.archive else load_data(config)
    model = build_model(config, archive.manifest)
    load_flat_weights(model, run_dir / "weights.jsonl")
    report = eval_split(model, archive, args.split, config)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "eval_config.json").write_text(
            json.dumps({"run": str(run_dir), "archive": args.archive, "split": args.split}, indent=2),
            encoding="utf-8",
        )
        (out_dir / "eval_report.json").write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    _emit(report.to_dict())
    return 0


def _read_values(path: str) -> list[float]:
    lines = Path(path).read_text(encoding="utf-8").split()
    return [float(x) for x in lines]


def cmd_metrics(args) -> int:
    preds = _read_values(args.preds)
    labels = _read_values(args.labels)
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    _emit(evaluate(preds, labels).to_dict())
    return 0


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    parser.add_argument("--out", help="output directory (overrides config.out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="persent", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a deterministic synthetic feature archive")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True, help="records per split")
    p.add_argument("--d-v", type=int, default=35, dest="d_v")
    p.add_argument("--d-a", type=int, default=74, dest="d_a")
    p.add_argument("--vocab", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train and persist a run record")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="full model plus the five removal variants")
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("layer-sweep", help="alignment applied at each position k = 1..L+2")
    _add_config_args(p)
    p.set_defaults(func=cmd_layer_sweep)

    p = sub.add_parser("eval", help="evaluate a persisted run on an archive split")
    p.add_argument("--run", required=True, help="run directory with config.json and weights.jsonl")
    p.add_argument("--archive", help="archive file (defaults to the run's data source)")
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="optional directory for the eval artifacts")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("metrics", help="score prediction/label files (one value per line)")
    p.add_argument("--preds", required=True)
    p.add_argument("--labels", required=True)
    p.set_defaults(func=cmd_metrics)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface every failure as machine-readable JSON
        _emit({"error": type(exc).__name__, "message": str(exc)})
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
