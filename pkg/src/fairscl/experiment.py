"""End-to-end evaluation: split, train each method, score, bootstrap, test, write reports."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import __version__
from .dataset import Dataset, SyntheticConfig, TableSchema, generate_synthetic, ingest_table, split
from .errors import ConfigError, FairSCLError, OutputError, UndefinedMetricError, ValidationError
from .metrics import METRICS_VERSION, ScoredSet, fairness_report, relative_change
from .nnet import TRAINERS, TrainConfig, adversary_predict, predict, save_checkpoint, train_adv
from .stats import BootstrapResult, Resamples, draw_resamples, paired_t_test, percentile_ci

log = logging.getLogger(__name__)

METHODS = ("erm", "balanced", "adv", "scl", "proposed")
FORMATS = ("json", "markdown", "delimited")
REPORT_SCHEMA_VERSION = "1"
# methods whose training does not look at the group attribute
ATTRIBUTE_FREE = ("erm",)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs. Either ``data_path`` or ``synthetic`` supplies the data."""

    data_path: str | None = None
    test_path: str | None = None
    schema: TableSchema | None = None
    synthetic: SyntheticConfig | None = None
    attributes: tuple = ("group",)
    methods: tuple = METHODS
    train: TrainConfig = field(default_factory=TrainConfig)
    bootstrap: int = 200
    seed: int = 0
    test_fraction: float = 0.2
    out_dir: str | None = None
    formats: tuple = ("json", "markdown")
    threshold: float = 0.5
    adv_lambdas: tuple = ()

    def validate(self):
        if not self.methods:
            raise ConfigError("at least one method is required")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {list(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError(f"duplicate methods in {list(self.methods)}")
        if not self.attributes:
            raise ConfigError("at least one attribute is required")
        if self.bootstrap < 2:
            raise ConfigError(f"bootstrap must be >= 2, got {self.bootstrap}")
        bad = [f for f in self.formats if f not in FORMATS]
        if bad:
            raise ConfigError(f"unknown formats {bad}; choose from {list(FORMATS)}")
        if self.data_path is None and self.synthetic is None:
            raise ConfigError("need a data_path or a synthetic config")
        if self.data_path is not None and self.synthetic is not None:
            raise ConfigError("data_path and synthetic are mutually exclusive")
        if self.data_path is not None and self.schema is None:
            raise ConfigError("a data_path needs a schema")
        if self.test_path is None and not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if any(lam < 0 for lam in self.adv_lambdas):
            raise ConfigError("adv_lambdas must be non-negative")
        self.train.validate()
        if self.synthetic is not None:
            self.synthetic.validate()

    def to_dict(self) -> dict:
        return {
            "data_path": self.data_path,
            "test_path": self.test_path,
            "schema": None if self.schema is None else self.schema.to_dict(),
            "synthetic": None if self.synthetic is None else self.synthetic.to_dict(),
            "attributes": list(self.attributes),
            "methods": list(self.methods),
            "train": self.train.to_dict(),
            "bootstrap": self.bootstrap,
            "seed": self.seed,
            "test_fraction": self.test_fraction,
            "out_dir": self.out_dir,
            "formats": list(self.formats),
            "threshold": self.threshold,
            "adv_lambdas": list(self.adv_lambdas),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"unknown config keys {extra}")
        if d.get("schema") is not None:
            d["schema"] = TableSchema.from_dict(d["schema"])
        if d.get("synthetic") is not None:
            d["synthetic"] = SyntheticConfig.from_dict(d["synthetic"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"] or {})
        for key in ("attributes", "methods", "formats", "adv_lambdas"):
            if key in d:
                if isinstance(d[key], str):
                    raise ConfigError(f"{key} must be a list")
                d[key] = tuple(d[key])
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad experiment config: {exc}") from None
        return cfg

    def digest(self) -> str:
        # out_dir does not change results, so it stays out of the hash
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class ExperimentReport:
    methods: list
    attributes: list
    results: dict
    t_tests: dict
    relative_change: dict
    adv_sweep: list
    failures: list
    provenance: dict
    # in-memory only
    states: dict = field(default_factory=dict, repr=False)
    scored: dict = field(default_factory=dict, repr=False)
    resamples: dict = field(default_factory=dict, repr=False)
    replicates: dict = field(default_factory=dict, repr=False)

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "partial": self.partial,
            "methods": list(self.methods),
            "attributes": list(self.attributes),
            "results": self.results,
            "t_tests": self.t_tests,
            "relative_change": self.relative_change,
            "adv_sweep": self.adv_sweep,
            "failures": self.failures,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True) + "\n"


# ---------------------------------------------------------------------- helpers


def check_output_dir(path) -> Path:
    """Create ``path`` if needed and prove it is writable, before any work happens."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OutputError(f"output directory {str(out)!r} is not writable: {exc}") from None
    return out


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    """(full, train, test). With a separate test file, full is the training file."""
    if cfg.synthetic is not None:
        full = generate_synthetic(cfg.synthetic, cfg.seed)
    else:
        full = ingest_table(cfg.data_path, cfg.schema)
    if cfg.test_path is not None:
        test = ingest_table(cfg.test_path, cfg.schema)
        return full, full, test
    train, test = split(full, cfg.test_fraction, cfg.seed)
    return full, train, test


def metric_names(categories) -> list[str]:
    """Bootstrapped scalars in report order."""
    names = ["overall_auc"] + [f"mauc[{c}]" for c in categories] + ["d_mauc"]
    for m in ("tpr", "fpr", "bs"):
        names += [f"{m}[{c}]" for c in categories]
    return names + ["d_tpr", "d_fpr", "d_bs"]


def scalars(s: ScoredSet, attribute: str, threshold: float, categories) -> dict:
    rep = fairness_report(s, attribute, threshold)
    out = {"overall_auc": rep.overall_auc}
    for c in categories:
        out[f"mauc[{c}]"] = rep.per_group[c].mauc
    out["d_mauc"] = rep.deltas["d_mauc"]
    for m in ("tpr", "fpr", "bs"):
        for c in categories:
            out[f"{m}[{c}]"] = getattr(rep.per_group[c], m)
    for m in ("d_tpr", "d_fpr", "d_bs"):
        out[m] = rep.deltas[m]
    return out


def _valid_resample(labels, groups, categories):
    # every category keeps a positive and a negative, so TPR, FPR and mAUC exist
    masks = [(groups == c) for c in categories]

    def valid(idx):
        y = labels[idx]
        for m in masks:
            mi = m[idx]
            if not (y[mi] == 1).any() or not (y[mi] == 0).any():
                return False
        return True

    return valid


def bootstrap_scalars(s: ScoredSet, attribute: str, threshold: float, resamples: Resamples):
    """Point values, BootstrapResults and raw replicate arrays for every scalar."""
    cats = s.categories(attribute)
    names = metric_names(cats)
    point = scalars(s, attribute, threshold, cats)
    reps = np.empty((resamples.B, len(names)))
    for b, idx in enumerate(resamples.indices):
        vals = scalars(s.take(idx), attribute, threshold, cats)
        reps[b] = [vals[n] for n in names]
    results = {}
    for k, n in enumerate(names):
        lo, hi = percentile_ci(reps[:, k])
        results[n] = BootstrapResult(point[n], reps[:, k], lo, hi, resamples.B, resamples.seed, resamples.redraws)
    return results


def _train_cfg(cfg: ExperimentConfig, attribute: str, **kw) -> TrainConfig:
    return replace(cfg.train, seed=cfg.seed, attribute=attribute, **kw)


ASSUMPTIONS = (
    "batch size and baseline epoch budgets are not given by the source method; values here are chosen defaults",
    "baselines train for pretrain_epochs + finetune_epochs supervised epochs (equal budget)",
    "no early stopping; fixed epoch counts",
    "TPR/FPR use score >= threshold as a positive prediction",
    "percentile bootstrap CIs; resamples lacking a positive or negative in any category are redrawn",
    "paired t-tests pair ΔmAUC replicates computed on identical resample indices",
    "contrastive loss uses the log form with a negatives-only denominator",
)


# ---------------------------------------------------------------------- runner


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentReport:
    cfg.validate()
    out = check_output_dir(cfg.out_dir) if (write and cfg.out_dir) else None

    full, train, test = load_data(cfg)
    for attr in cfg.attributes:
        for name, ds in (("training", train), ("test", test)):
            if not ds.usable(attr):
                raise ValidationError(f"attribute {attr!r} has fewer than two categories in the {name} set")

    failures: list[dict] = []
    states: dict = {}
    scored: dict = {}

    for method in cfg.methods:
        trainer = TRAINERS[method]
        for attr in cfg.attributes:
            key = (method, attr)
            first = (method, cfg.attributes[0])
            if method in ATTRIBUTE_FREE and attr != cfg.attributes[0]:
                # one model serves every attribute
                if first in states:
                    states[key], scored[key] = states[first], scored[first]
                else:
                    failures.append({"method": method, "attribute": attr, "stage": "train",
                                     "error": "training failed (shared across attributes)",
                                     "type": "FairSCLError"})
                continue
            try:
                log.info("training %s for %s", method, attr)
                state = trainer(train, _train_cfg(cfg, attr))
                states[key] = state
                scored[key] = predict(state, test)
            except FairSCLError as exc:
                failures.append({"method": method, "attribute": attr, "stage": "train",
                                 "error": str(exc), "type": type(exc).__name__})

    results, resamples, replicates = evaluate_scored(
        scored, cfg.methods, cfg.attributes, test, cfg.bootstrap, cfg.seed, cfg.threshold, failures
    )

    t_tests = t_tests_table(cfg.methods, cfg.attributes, replicates)
    rel = relative_change_table(cfg.methods, cfg.attributes, results)
    sweep = _adv_sweep(cfg, train, test, resamples, failures)

    provenance = {
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seeds": {"data": cfg.seed, "split": cfg.seed, "train": cfg.seed, "bootstrap": cfg.seed},
        "n_train": len(train),
        "n_test": len(test),
        "anchor_drops": {
            f"{m}/{a}": {"used": st.log.anchors_used, "dropped": st.log.anchors_dropped,
                         "skipped_batches": st.log.skipped_batches}
            for (m, a), st in states.items() if m in ("scl", "proposed")
        },
        "resample_digests": {a: r.digest() for a, r in resamples.items()},
        "resample_redraws": {a: r.redraws for a, r in resamples.items()},
        "metrics_version": METRICS_VERSION,
        "package_version": __version__,
        "assumptions": list(ASSUMPTIONS),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    report = ExperimentReport(
        methods=list(cfg.methods),
        attributes=list(cfg.attributes),
        results=results,
        t_tests=t_tests,
        relative_change=rel,
        adv_sweep=sweep,
        failures=failures,
        provenance=provenance,
        states=states,
        scored=scored,
        resamples=resamples,
        replicates=replicates,
    )
    if out is not None:
        write_outputs(report, cfg, out, full)
    return report


def evaluate_scored(scored, methods, attributes, test: Dataset, B: int, seed: int,
                    threshold: float = 0.5, failures=None):
    """Bootstrap every (method, attribute) on one shared set of resamples per attribute.

    ``scored`` maps (method, attribute) to a ScoredSet over ``test``. Errors are
    appended to ``failures`` rather than raised.
    """
    failures = [] if failures is None else failures
    results: dict = {m: {} for m in methods}
    resamples: dict = {}
    replicates: dict = {}
    for attr in attributes:
        cats = test.categories(attr)
        try:
            rs = draw_resamples(len(test), B, seed, valid=_valid_resample(test.labels, test.groups[attr], cats))
        except FairSCLError as exc:
            for m in methods:
                failures.append({"method": m, "attribute": attr, "stage": "bootstrap",
                                 "error": str(exc), "type": type(exc).__name__})
            continue
        resamples[attr] = rs
        for m in methods:
            if (m, attr) not in scored:
                continue
            s = scored[(m, attr)]
            try:
                rep = fairness_report(s, attr, threshold)
                boots = bootstrap_scalars(s, attr, threshold, rs)
            except FairSCLError as exc:
                failures.append({"method": m, "attribute": attr, "stage": "evaluate",
                                 "error": str(exc), "type": type(exc).__name__})
                continue
            replicates[(m, attr)] = {n: b.replicates for n, b in boots.items()}
            results[m][attr] = {
                "fairness": rep.to_dict(),
                "bootstrap": {n: b.to_dict() for n, b in boots.items()},
            }
    return results, resamples, replicates


def t_tests_table(methods, attributes, replicates) -> dict:
    """Proposed minus each baseline on ΔmAUC replicates, per attribute and pooled."""
    if "proposed" not in methods:
        return {}
    out: dict = {}
    pooled: dict = {}
    for attr in attributes:
        if ("proposed", attr) not in replicates:
            continue
        a = replicates[("proposed", attr)]["d_mauc"]
        row = {}
        for m in methods:
            if m == "proposed" or (m, attr) not in replicates:
                continue
            b = replicates[(m, attr)]["d_mauc"]
            row[m] = paired_t_test(a, b).to_dict()
            pa, pb = pooled.setdefault(m, ([], []))
            pa.append(a)
            pb.append(b)
        out[attr] = row
    if len(attributes) > 1:
        out["pooled"] = {
            m: paired_t_test(np.concatenate(pa), np.concatenate(pb)).to_dict()
            for m, (pa, pb) in pooled.items()
        }
    return out


def relative_change_table(methods, attributes, results) -> dict:
    if "proposed" not in methods:
        return {}
    out: dict = {}
    for attr in attributes:
        prop = results["proposed"].get(attr)
        if prop is None:
            continue
        row = {}
        for m in methods:
            base = results[m].get(attr)
            if m == "proposed" or base is None:
                continue
            cells = {}
            for name, b in base["bootstrap"].items():
                if not (name == "overall_auc" or name.startswith("mauc[") or name == "d_mauc"):
                    continue
                p = prop["bootstrap"][name]["point"]
                try:
                    cells[name] = relative_change(b["point"], p)
                except UndefinedMetricError as exc:
                    cells[name] = {"relative_pct": None, "absolute": exc.absolute}
            row[m] = cells
        out[attr] = row
    return out


def _adv_sweep(cfg, train, test, resamples, failures) -> list:
    """ADV trained at each requested λ: test AUC, ΔmAUC (with CI) and adversary accuracy."""
    rows = []
    for attr in cfg.attributes:
        if attr not in resamples:
            continue
        classes = test.categories(attr)
        for lam in cfg.adv_lambdas:
            try:
                state = train_adv(train, _train_cfg(cfg, attr, adversary_weight=float(lam)))
                s = predict(state, test)
                boots = bootstrap_scalars(s, attr, cfg.threshold, resamples[attr])
            except FairSCLError as exc:
                failures.append({"method": f"adv@{lam}", "attribute": attr, "stage": "sweep",
                                 "error": str(exc), "type": type(exc).__name__})
                continue
            lookup = {c: i for i, c in enumerate(state.adv_classes)}
            truth = np.array([lookup.get(c, -1) for c in test.groups[attr]])
            acc = float(np.mean(adversary_predict(state, test.features) == truth))
            majority = max(np.mean(test.groups[attr] == c) for c in classes)
            rows.append({
                "attribute": attr,
                "lambda": float(lam),
                "overall_auc": boots["overall_auc"].to_dict(),
                "d_mauc": boots["d_mauc"].to_dict(),
                "adversary_accuracy": acc,
                "majority_rate": float(majority),
            })
    return rows


def checkpoint_name(method: str, attribute: str, multi: bool) -> str:
    return f"{method}.{attribute}.bin" if multi else f"{method}.bin"


def write_outputs(report: ExperimentReport, cfg: ExperimentConfig, out: Path, dataset: Dataset) -> list[str]:
    from .report import emit_table, emit_table_dataset

    written = []
    try:
        ckdir = out / "checkpoints"
        ckdir.mkdir(exist_ok=True)
        multi = len(cfg.attributes) > 1
        saved = set()
        for (m, a), st in report.states.items():
            if m in ATTRIBUTE_FREE:
                if m in saved:
                    continue
                saved.add(m)
                name = f"{m}.bin"
            else:
                name = checkpoint_name(m, a, multi)
            save_checkpoint(st, ckdir / name)
            written.append(f"checkpoints/{name}")
        d = report.to_dict()
        for fmt in cfg.formats:
            fname = {"json": "report.json", "markdown": "report.md", "delimited": "report.csv"}[fmt]
            emit_table(d, fmt, out / fname)
            written.append(fname)
        emit_table_dataset(dataset, out / "dataset.csv")
        written.append("dataset.csv")
        manifest = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "partial": report.partial,
            "files": sorted(written),
            "failures": report.failures,
            "config_hash": report.provenance["config_hash"],
        }
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise OutputError(f"could not write outputs to {str(out)!r}: {exc}") from None
    return written
