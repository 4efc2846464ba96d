"""Command-line entry point: ``fairscl {generate,train,evaluate,run,report}``.

Exit codes: 0 success, 2 configuration, 3 data, 4 training, 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .dataset import generate_synthetic, ingest_table, split
from .errors import (
    BootstrapInfeasibleError,
    CheckpointError,
    ConfigError,
    FairSCLError,
    NaNGuardError,
    OutputError,
    ParseError,
    PretrainingInfeasibleError,
    RankError,
    SchemaError,
    SeparationError,
    ShapeError,
    UndefinedMetricError,
    ValidationError,
)
from .experiment import (
    ATTRIBUTE_FREE,
    ExperimentConfig,
    ExperimentReport,
    check_output_dir,
    checkpoint_name,
    evaluate_scored,
    relative_change_table,
    run_experiment,
    t_tests_table,
)
from .nnet import TRAINERS, load_checkpoint, predict, save_checkpoint
from .report import PRESETS, emit_table, emit_table_dataset

log = logging.getLogger("fairscl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN, EXIT_IO = 0, 2, 3, 4, 5
REPORT_FILES = {"json": "report.json", "markdown": "report.md", "delimited": "report.csv"}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (NaNGuardError, PretrainingInfeasibleError)):
        return EXIT_TRAIN
    if isinstance(exc, (OutputError, CheckpointError, OSError)):
        return EXIT_IO
    if isinstance(exc, (SchemaError, ParseError, ValidationError, UndefinedMetricError,
                        BootstrapInfeasibleError, SeparationError, RankError, ShapeError)):
        return EXIT_DATA
    return EXIT_TRAIN if isinstance(exc, FairSCLError) else 1


def _csv_list(text):
    return tuple(x.strip() for x in text.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="CSV with id, label, group and feature columns (default: synthetic)")
    data.add_argument("--groups", type=_csv_list,
                      help="comma-separated group columns of --data (default: the attributes)")
    data.add_argument("--attribute", type=_csv_list, dest="attributes",
                      help="attribute(s) to optimize and evaluate, comma-separated")

    methods = argparse.ArgumentParser(add_help=False)
    methods.add_argument("--methods", type=_csv_list, help="comma-separated subset of erm,balanced,adv,scl,proposed")

    evaluation = argparse.ArgumentParser(add_help=False)
    evaluation.add_argument("--bootstrap", type=int, help="bootstrap replicates B")
    evaluation.add_argument("--format", type=_csv_list, dest="formats",
                            help="comma-separated subset of json,markdown,delimited")

    p = argparse.ArgumentParser(prog="fairscl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--test-fraction", type=float, help="also write train.csv and test.csv")

    sub.add_parser("train", parents=[common, data, methods], help="train methods and save checkpoints")

    e = sub.add_parser("evaluate", parents=[common, data, evaluation],
                       help="score checkpoints on a dataset with bootstrap CIs")
    e.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint file; the method name is taken from the file name (repeatable)")

    r = sub.add_parser("run", parents=[common, data, methods, evaluation], help="split, train, evaluate, report")
    r.add_argument("--test-data", help="separate test CSV instead of a random split")

    rep = sub.add_parser("report", parents=[common], help="re-emit a saved report.json")
    rep.add_argument("input", help="path to report.json")
    rep.add_argument("--format", type=_csv_list, dest="formats", default=("markdown",))
    rep.add_argument("--preset", choices=PRESETS, default="full")
    return p


def load_config(args) -> ExperimentConfig:
    """JSON file (if any) with command-line flags layered on top."""
    d = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
    for flag, key in (("seed", "seed"), ("out", "out_dir"), ("methods", "methods"),
                      ("attributes", "attributes"), ("bootstrap", "bootstrap"), ("formats", "formats"),
                      ("data", "data_path"), ("test_data", "test_path")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    if d.get("data_path") is not None:
        d.pop("synthetic", None)
        groups = getattr(args, "groups", None)
        if groups is not None or d.get("schema") is None:
            schema = dict(d.get("schema") or {})
            schema["group_columns"] = list(groups or d.get("attributes") or ["group"])
            d["schema"] = schema
    elif d.get("synthetic") is None:
        d["synthetic"] = {}
    cfg = ExperimentConfig.from_dict(d)
    if cfg.synthetic is not None and "attributes" not in d:
        cfg = replace(cfg, attributes=(cfg.synthetic.attribute,))
    return cfg


def _load_dataset(cfg: ExperimentConfig):
    if cfg.data_path is not None:
        return ingest_table(cfg.data_path, cfg.schema)
    return generate_synthetic(cfg.synthetic, cfg.seed)


def cmd_generate(args) -> int:
    cfg = load_config(args)
    out = check_output_dir(cfg.out_dir or ".")
    ds = _load_dataset(cfg)
    emit_table_dataset(ds, out / "dataset.csv")
    written = ["dataset.csv"]
    if args.test_fraction is not None:
        train, test = split(ds, args.test_fraction, cfg.seed)
        emit_table_dataset(train, out / "train.csv")
        emit_table_dataset(test, out / "test.csv")
        written += ["train.csv", "test.csv"]
    print(json.dumps({"written": [str(out / w) for w in written], "n": len(ds)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    cfg.validate()
    out = check_output_dir(cfg.out_dir or ".")
    ds = _load_dataset(cfg)
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    multi = len(cfg.attributes) > 1
    written = []
    for m in cfg.methods:
        for attr in cfg.attributes:
            if m in ATTRIBUTE_FREE and attr != cfg.attributes[0]:
                continue
            state = TRAINERS[m](ds, replace(cfg.train, seed=cfg.seed, attribute=attr))
            name = f"{m}.bin" if m in ATTRIBUTE_FREE else checkpoint_name(m, attr, multi)
            save_checkpoint(state, ckdir / name)
            written.append(str(ckdir / name))
    print(json.dumps({"checkpoints": written}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    cfg.validate()
    out = check_output_dir(cfg.out_dir or ".")
    test = _load_dataset(cfg)
    states = {}
    for path in args.checkpoint:
        method = Path(path).name.split(".")[0]
        states[method] = load_checkpoint(path)
    methods = list(states)
    scored = {(m, a): predict(states[m], test) for m in methods for a in cfg.attributes}
    failures: list = []
    results, resamples, replicates = evaluate_scored(
        scored, methods, cfg.attributes, test, cfg.bootstrap, cfg.seed, cfg.threshold, failures
    )
    report = ExperimentReport(
        methods=methods,
        attributes=list(cfg.attributes),
        results=results,
        t_tests=t_tests_table(methods, cfg.attributes, replicates),
        relative_change=relative_change_table(methods, cfg.attributes, results),
        adv_sweep=[],
        failures=failures,
        provenance={
            "checkpoints": [str(p) for p in args.checkpoint],
            "seeds": {"bootstrap": cfg.seed},
            "resample_digests": {a: r.digest() for a, r in resamples.items()},
            "n_test": len(test),
        },
    )
    d = report.to_dict()
    for fmt in cfg.formats:
        emit_table(d, fmt, out / REPORT_FILES[fmt])
    return EXIT_DATA if failures else EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args)
    if cfg.out_dir is None:
        cfg = replace(cfg, out_dir=".")
    report = run_experiment(cfg)
    for f in report.failures:
        print(f"failed: {f['method']}/{f['attribute']} at {f['stage']}: {f['error']}", file=sys.stderr)
    if not report.failures:
        return EXIT_OK
    return EXIT_TRAIN if any(f["stage"] in ("train", "sweep") for f in report.failures) else EXIT_DATA


def cmd_report(args) -> int:
    try:
        with open(args.input, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.input}: invalid JSON: {exc}") from None
    out = Path(args.out) if args.out else None
    if out is not None:
        check_output_dir(out)
    for fmt in args.formats:
        if fmt not in REPORT_FILES:
            raise ConfigError(f"unknown format {fmt!r}")
        text = emit_table(d, fmt, None if out is None else out / REPORT_FILES[fmt], preset=args.preset)
        if out is None:
            sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "run": cmd_run,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (FairSCLError, OSError) as exc:
        print(f"fairscl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
