"""Report and dataset emission: JSON, markdown tables, delimited rows, CSV datasets."""

from __future__ import annotations

import csv
import io
import json
import re
from pathlib import Path
from typing import Mapping

from .dataset import Dataset, TableSchema
from .errors import ConfigError, OutputError

CELL_RE = re.compile(r"^\s*(-?\d+\.\d+) \((-?\d+\.\d+)-(-?\d+\.\d+)\)\s*$")
PRESETS = ("full", "compact")


def format_cell(point: float, lo: float, hi: float, digits: int = 4) -> str:
    """``0.0116 (0.0110-0.0123)``: point estimate then the 95% interval."""
    return f"{point:.{digits}f} ({lo:.{digits}f}-{hi:.{digits}f})"


def parse_cell(text: str) -> tuple[float, float, float]:
    m = CELL_RE.match(text)
    if not m:
        raise ValueError(f"not a 'point (low-high)' cell: {text!r}")
    return tuple(float(g) for g in m.groups())


def _pretty(metric: str) -> str:
    if metric == "overall_auc":
        return "Overall AUC"
    if metric == "d_mauc":
        return "ΔmAUC"
    if metric.startswith("mauc["):
        return f"mAUC {metric[5:-1]}"
    return metric


def _md_table(header, rows) -> list[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in rows]
    return lines


def _metric_rows(report: Mapping, attr: str, compact: bool):
    methods = [m for m in report["methods"] if attr in report["results"].get(m, {})]
    if not methods:
        return methods, []
    names = list(report["results"][methods[0]][attr]["bootstrap"])
    if compact:
        names = [n for n in names if n == "overall_auc" or n.startswith("mauc[") or n == "d_mauc"]
    rows = []
    for n in names:
        row = [_pretty(n) if compact else n]
        for m in methods:
            b = report["results"][m][attr]["bootstrap"][n]
            row.append(format_cell(b["point"], b["ci_low"], b["ci_high"]))
        rows.append(row)
    return methods, rows


def to_markdown(report: Mapping, preset: str = "full") -> str:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {list(PRESETS)}")
    compact = preset == "compact"
    out = []
    if report.get("partial"):
        out += ["**Partial report**: see the failure list at the end.", ""]
    for attr in report["attributes"]:
        methods, rows = _metric_rows(report, attr, compact)
        out.append(f"## Attribute: {attr}")
        out.append("")
        if rows:
            out += _md_table(["Metric"] + methods, rows)
        else:
            out.append("(no results)")
        out.append("")

    tt = report.get("t_tests") or {}
    if tt:
        out += ["## Paired t-tests on ΔmAUC replicates (proposed minus baseline)", ""]
        rows = []
        for attr, row in tt.items():
            for m, r in row.items():
                rows.append([attr, m, f"{r['mean_diff']:.4f}", f"{r['t']:.3f}", f"{r['p']:.4g}", r["df"]])
        out += _md_table(["Attribute", "Baseline", "Mean diff", "t", "p", "df"], rows)
        out.append("")

    rel = report.get("relative_change") or {}
    if rel:
        out += ["## Change of proposed relative to each baseline", ""]
        if compact:
            for attr, per_base in rel.items():
                bases = list(per_base)
                if not bases:
                    continue
                out += [f"### {attr}", ""]
                metrics = list(per_base[bases[0]])
                header = ["Metric"]
                for b in bases:
                    header += [f"{b} relative (%)", f"{b} absolute"]
                rows = []
                for n in metrics:
                    row = [_pretty(n)]
                    for b in bases:
                        c = per_base[b][n]
                        row += [_fmt_pct(c["relative_pct"]), f"{c['absolute']:.4f}"]
                    rows.append(row)
                out += _md_table(header, rows)
                out.append("")
        else:
            rows = []
            for attr, per_base in rel.items():
                for b, cells in per_base.items():
                    for n, c in cells.items():
                        rows.append([attr, b, n, _fmt_pct(c["relative_pct"]), f"{c['absolute']:.4f}"])
            out += _md_table(["Attribute", "Baseline", "Metric", "Relative (%)", "Absolute"], rows)
            out.append("")

    sweep = report.get("adv_sweep") or []
    if sweep and not compact:
        out += ["## ADV λ sweep", ""]
        rows = [
            [r["attribute"], f"{r['lambda']:g}",
             format_cell(r["overall_auc"]["point"], r["overall_auc"]["ci_low"], r["overall_auc"]["ci_high"]),
             format_cell(r["d_mauc"]["point"], r["d_mauc"]["ci_low"], r["d_mauc"]["ci_high"]),
             f"{r['adversary_accuracy']:.4f}", f"{r['majority_rate']:.4f}"]
            for r in sweep
        ]
        out += _md_table(["Attribute", "λ", "Overall AUC", "ΔmAUC", "Adversary acc.", "Majority rate"], rows)
        out.append("")

    if report.get("failures"):
        out += ["## Failures", ""]
        rows = [[f["method"], f["attribute"], f["stage"], f["type"], f["error"].replace("|", "/")]
                for f in report["failures"]]
        out += _md_table(["Method", "Attribute", "Stage", "Error type", "Message"], rows)
        out.append("")
    return "\n".join(out).rstrip("\n") + "\n"


def _fmt_pct(v):
    return "undefined" if v is None else f"{v:.2f}"


def parse_markdown(text: str) -> dict:
    """Recover ``{attribute: {metric: {method: (point, low, high)}}}`` from a full-preset table."""
    out: dict = {}
    attr = None
    header = None
    for line in text.splitlines():
        if line.startswith("## "):
            attr = line[len("## Attribute: "):] if line.startswith("## Attribute: ") else None
            header = None
            continue
        if attr is None or not line.startswith("|"):
            continue
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        if header is None:
            header = cells
            continue
        if set("".join(cells)) <= {"-"}:
            continue
        row = out.setdefault(attr, {}).setdefault(cells[0], {})
        for m, c in zip(header[1:], cells[1:]):
            row[m] = parse_cell(c)
    return out


def to_delimited(report: Mapping) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "attribute", "metric", "point", "ci_low", "ci_high", "B"])
    for m in report["methods"]:
        for attr in report["attributes"]:
            res = report["results"].get(m, {}).get(attr)
            if res is None:
                continue
            for n, b in res["bootstrap"].items():
                w.writerow([m, attr, n, repr(b["point"]), repr(b["ci_low"]), repr(b["ci_high"]), b["B"]])
    return buf.getvalue()


def to_json(report: Mapping) -> str:
    return json.dumps(report, indent=2) + "\n"


def render(report: Mapping, fmt: str, preset: str = "full") -> str:
    if fmt == "json":
        return to_json(report)
    if fmt == "markdown":
        return to_markdown(report, preset)
    if fmt == "delimited":
        return to_delimited(report)
    raise ConfigError(f"unknown format {fmt!r}")


def emit_table(report: Mapping, fmt: str, path=None, preset: str = "full") -> str:
    """Render ``report`` (the dict form) and write it to ``path`` if given."""
    text = render(report, fmt, preset)
    if path is not None:
        try:
            Path(path).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise OutputError(f"cannot write {path}: {exc}") from None
    return text


def emit_table_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` as CSV: id, label, group columns (sorted), f0..f{d-1}.

    Features use 17 significant digits so ingest_table reads back the same bits.
    """
    attrs = sorted(ds.groups)
    groups = ds.groups
    header = ["id", "label"] + attrs + [f"f{k}" for k in range(ds.feature_dim)]
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            X, y = ds.features, ds.labels
            for i, rid in enumerate(ds.ids):
                w.writerow([rid, int(y[i])] + [groups[a][i] for a in attrs] + [format(v, ".17g") for v in X[i]])
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from None


def dataset_schema(ds: Dataset):
    """TableSchema matching the layout written by :func:`emit_table_dataset`."""
    return TableSchema("id", "label", tuple(sorted(ds.groups)), None)
