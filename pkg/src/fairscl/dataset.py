"""Tabular records with subgroup attributes: ingestion, synthesis, resampling, splitting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ParseError, SchemaError, ValidationError


@dataclass(frozen=True)
class Record:
    id: str
    features: tuple
    label: int
    groups: Mapping[str, str]


@dataclass(frozen=True)
class SubgroupView:
    """Boolean masks, one per category, that partition a dataset."""

    attribute: str
    masks: Mapping[str, np.ndarray]

    @property
    def categories(self) -> list[str]:
        return list(self.masks)


class Dataset:
    """Validated, immutable collection of records.

    Features are held as an (n, d) float64 array, labels as an int array and
    each group attribute as an object array of category strings. All arrays
    are made read-only on construction.
    """

    def __init__(self, ids, features, labels, groups: Mapping[str, Sequence[str]]):
        ids = [str(i) for i in ids]
        X = np.array(features, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(len(ids), -1) if len(ids) else X.reshape(0, 0)
        y = np.asarray(labels)
        n = len(ids)
        if X.shape[0] != n or y.shape != (n,):
            raise ValidationError(
                f"length mismatch: {n} ids, {X.shape[0]} feature rows, {y.shape[0]} labels"
            )
        if n == 0:
            raise ValidationError("dataset is empty")
        if X.shape[1] < 1:
            raise ValidationError("feature_dim must be positive")
        bad = np.flatnonzero(~np.isin(y, (0, 1)))
        if bad.size:
            raise ValidationError(
                f"labels must be 0 or 1; offending records {[ids[i] for i in bad[:10]]}",
                rows=bad.tolist(),
            )
        nonfinite = np.flatnonzero(~np.isfinite(X).all(axis=1))
        if nonfinite.size:
            raise ValidationError(
                f"non-finite features in records {[ids[i] for i in nonfinite[:10]]}",
                rows=nonfinite.tolist(),
            )
        if len(set(ids)) != n:
            seen, dups = set(), []
            for i, rid in enumerate(ids):
                if rid in seen:
                    dups.append(i)
                seen.add(rid)
            raise ValidationError(
                f"duplicate ids: {sorted({ids[i] for i in dups})[:10]}", rows=dups
            )
        if not groups:
            raise ValidationError("at least one group attribute is required")
        g = {}
        for name, values in groups.items():
            arr = np.array([str(v) for v in values], dtype=object)
            if arr.shape != (n,):
                raise ValidationError(f"attribute {name!r} has {arr.shape[0]} values, expected {n}")
            missing = np.flatnonzero(arr == "")
            if missing.size:
                raise ValidationError(
                    f"attribute {name!r} missing for records {[ids[i] for i in missing[:10]]}",
                    rows=missing.tolist(),
                )
            arr.setflags(write=False)
            g[str(name)] = arr
        X.setflags(write=False)
        y = y.astype(np.int64)
        y.setflags(write=False)
        self._ids = tuple(ids)
        self._X = X
        self._y = y
        self._groups = g

    # ------------------------------------------------------------------ access
    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def features(self) -> np.ndarray:
        return self._X

    @property
    def labels(self) -> np.ndarray:
        return self._y

    @property
    def groups(self) -> Mapping[str, np.ndarray]:
        return dict(self._groups)

    @property
    def feature_dim(self) -> int:
        return self._X.shape[1]

    @property
    def attributes(self) -> dict[str, list[str]]:
        """Attribute name -> sorted list of categories present."""
        return {name: sorted(set(arr.tolist())) for name, arr in self._groups.items()}

    def usable(self, attribute: str) -> bool:
        return len(self.categories(attribute)) >= 2

    def categories(self, attribute: str) -> list[str]:
        if attribute not in self._groups:
            raise ConfigError(
                f"unknown attribute {attribute!r}; have {sorted(self._groups)}"
            )
        return sorted(set(self._groups[attribute].tolist()))

    def view(self, attribute: str) -> SubgroupView:
        arr = self._groups.get(attribute)
        if arr is None:
            raise ConfigError(f"unknown attribute {attribute!r}; have {sorted(self._groups)}")
        return SubgroupView(attribute, {c: arr == c for c in self.categories(attribute)})

    def __len__(self) -> int:
        return len(self._ids)

    def __iter__(self) -> Iterator[Record]:
        for i in range(len(self)):
            yield self.record(i)

    @property
    def records(self) -> list[Record]:
        return list(self)

    def record(self, i: int) -> Record:
        return Record(
            id=self._ids[i],
            features=tuple(self._X[i].tolist()),
            label=int(self._y[i]),
            groups={k: v[i] for k, v in self._groups.items()},
        )

    @classmethod
    def from_records(cls, records: Iterable[Record]) -> "Dataset":
        records = list(records)
        if not records:
            raise ValidationError("dataset is empty")
        names = set(records[0].groups)
        for r in records:
            if set(r.groups) != names:
                raise ValidationError(
                    f"record {r.id!r} has attributes {sorted(r.groups)}, expected {sorted(names)}"
                )
        dims = {len(r.features) for r in records}
        if len(dims) != 1:
            raise ValidationError(f"records have differing feature lengths {sorted(dims)}")
        return cls(
            [r.id for r in records],
            [r.features for r in records],
            [r.label for r in records],
            {k: [r.groups[k] for r in records] for k in sorted(names)},
        )

    def subset(self, indices, ids=None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        new_ids = [self._ids[i] for i in idx] if ids is None else ids
        return Dataset(
            new_ids,
            self._X[idx],
            self._y[idx],
            {k: v[idx] for k, v in self._groups.items()},
        )

    def equals(self, other: "Dataset") -> bool:
        """Field-for-field equality, bitwise on features."""
        return (
            self._ids == other._ids
            and self._X.shape == other._X.shape
            and self._X.tobytes() == other._X.tobytes()
            and np.array_equal(self._y, other._y)
            and set(self._groups) == set(other._groups)
            and all(np.array_equal(self._groups[k], other._groups[k]) for k in self._groups)
        )

    def __repr__(self):
        return f"Dataset(n={len(self)}, feature_dim={self.feature_dim}, attributes={self.attributes})"


# ---------------------------------------------------------------------- ingestion


@dataclass(frozen=True)
class TableSchema:
    """Column roles for a delimited table.

    ``feature_columns=None`` takes every column not otherwise claimed, in file order.
    """

    id_column: str = "id"
    label_column: str = "label"
    group_columns: tuple = ()
    feature_columns: tuple | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "TableSchema":
        feats = d.get("feature_columns")
        return cls(
            id_column=d.get("id_column", "id"),
            label_column=d.get("label_column", "label"),
            group_columns=tuple(d.get("group_columns", ())),
            feature_columns=None if feats is None else tuple(feats),
        )

    def to_dict(self) -> dict:
        return {
            "id_column": self.id_column,
            "label_column": self.label_column,
            "group_columns": list(self.group_columns),
            "feature_columns": None if self.feature_columns is None else list(self.feature_columns),
        }


def ingest_table(path, schema: TableSchema) -> Dataset:
    """Read a comma-separated UTF-8 table with a header row into a Dataset."""
    if not schema.group_columns:
        raise SchemaError("schema must name at least one group column")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, no header row") from None
        header = [h.strip() for h in header]
        col = {name: i for i, name in enumerate(header)}
        claimed = [schema.id_column, schema.label_column, *schema.group_columns]
        if schema.feature_columns is None:
            feature_cols = [h for h in header if h not in claimed]
        else:
            feature_cols = list(schema.feature_columns)
        missing = [c for c in claimed + feature_cols if c not in col]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        if not feature_cols:
            raise SchemaError(f"{path}: no feature columns")

        ids, feats, labels = [], [], []
        groups = {g: [] for g in schema.group_columns}
        bad_labels = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}", row=lineno
                )
            ids.append(row[col[schema.id_column]])
            raw_label = row[col[schema.label_column]].strip()
            if raw_label not in ("0", "1"):
                bad_labels.append((lineno, raw_label))
                labels.append(0)
            else:
                labels.append(int(raw_label))
            for g in schema.group_columns:
                groups[g].append(row[col[g]].strip())
            vec = []
            for c in feature_cols:
                text = row[col[c]]
                try:
                    v = float(text)
                except ValueError:
                    raise ParseError(
                        f"{path}:{lineno}: column {c!r} is not numeric: {text!r}",
                        row=lineno,
                        column=c,
                    ) from None
                if not math.isfinite(v):
                    raise ValidationError(
                        f"{path}:{lineno}: column {c!r} is not finite: {text!r}", rows=[lineno]
                    )
                vec.append(v)
            feats.append(vec)
    if bad_labels:
        shown = ", ".join(f"line {ln} ({v!r})" for ln, v in bad_labels[:10])
        raise ValidationError(
            f"{path}: non-binary labels at {shown}", rows=[ln for ln, _ in bad_labels]
        )
    if not ids:
        raise ValidationError(f"{path}: no data rows")
    X = np.array(feats, dtype=np.float64).reshape(len(ids), len(feature_cols))
    return Dataset(ids, X, labels, groups)


# ---------------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SyntheticConfig:
    """Two-group tabular data with an injected, learnable group bias.

    Features are laid out as ``[label signal | group marker | noise]``. Records
    of the last category additionally have their label-signal block shifted by
    ``nuisance``, so the raw signal over-ranks that group unless a model uses
    the marker block to undo the shift.
    """

    n: int = 5000
    feature_dim: int = 16
    attribute: str = "group"
    categories: tuple = ("A", "B")
    proportions: tuple = (0.5, 0.5)
    prevalence: tuple = (0.3, 0.6)
    signal: float = 1.0
    nuisance: float = 1.0
    marker: float = 1.5
    signal_dims: int = 4
    marker_dims: int = 2

    def validate(self):
        if self.n < 40:
            raise ConfigError(f"n={self.n} is too small for stable pairwise metrics (need >= 40)")
        k = len(self.categories)
        if k < 2 or len(set(self.categories)) != k:
            raise ConfigError("need at least two distinct categories")
        if len(self.proportions) != k or len(self.prevalence) != k:
            raise ConfigError("proportions and prevalence need one entry per category")
        if abs(sum(self.proportions) - 1.0) > 1e-9:
            raise ConfigError(f"proportions sum to {sum(self.proportions)!r}, expected 1")
        if any(p < 0 for p in self.proportions):
            raise ConfigError("proportions must be non-negative")
        if any(not 0.0 <= p <= 1.0 for p in self.prevalence):
            raise ConfigError("prevalence values must lie in [0, 1]")
        if self.signal_dims < 1 or self.marker_dims < 0:
            raise ConfigError("signal_dims must be >= 1 and marker_dims >= 0")
        if self.signal_dims + self.marker_dims > self.feature_dim:
            raise ConfigError("signal_dims + marker_dims exceeds feature_dim")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "feature_dim": self.feature_dim,
            "attribute": self.attribute,
            "categories": list(self.categories),
            "proportions": list(self.proportions),
            "prevalence": list(self.prevalence),
            "signal": self.signal,
            "nuisance": self.nuisance,
            "marker": self.marker,
            "signal_dims": self.signal_dims,
            "marker_dims": self.marker_dims,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticConfig":
        d = dict(d)
        for key in ("categories", "proportions", "prevalence"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic config: {exc}") from None


def _apportion(total: int, weights: Sequence[float]) -> list[int]:
    """Largest-remainder rounding: counts sum to total, each within 1 of total*w."""
    raw = [total * w for w in weights]
    counts = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def generate_synthetic(config: SyntheticConfig, seed: int) -> Dataset:
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    sizes = _apportion(config.n, config.proportions)
    k = len(config.categories)
    last = k - 1

    group_idx, labels = [], []
    for g, (size, prev) in enumerate(zip(sizes, config.prevalence)):
        n_pos = int(round(size * prev))
        group_idx.append(np.full(size, g))
        labels.append(np.r_[np.ones(n_pos, dtype=np.int64), np.zeros(size - n_pos, dtype=np.int64)])
    group_idx = np.concatenate(group_idx)
    labels = np.concatenate(labels)
    order = rng.permutation(config.n)
    group_idx, labels = group_idx[order], labels[order]

    d, s, m = config.feature_dim, config.signal_dims, config.marker_dims
    X = rng.standard_normal((config.n, d))
    sign = 2.0 * labels - 1.0
    X[:, :s] += (config.signal * sign / 2.0)[:, None]
    X[:, :s] += (config.nuisance * (group_idx == last))[:, None]
    if m:
        # evenly spaced marker levels in [-marker, marker] across categories
        levels = np.linspace(-config.marker, config.marker, k)
        X[:, s : s + m] += levels[group_idx][:, None]

    width = len(str(config.n - 1))
    ids = [f"s{i:0{width}d}" for i in range(config.n)]
    cats = np.array(config.categories, dtype=object)[group_idx]
    return Dataset(ids, X, labels, {config.attribute: cats})


# ---------------------------------------------------------------------- resampling


def balanced_resample(ds: Dataset, attribute: str, seed: int) -> Dataset:
    """Upsample smaller categories with replacement to the largest category's size.

    Every original record is kept in place; duplicates are appended after them
    with ids suffixed ``#dup<k>``. An already balanced dataset is returned as is.
    """
    cats = ds.categories(attribute)
    if len(cats) < 2:
        raise ValidationError(f"attribute {attribute!r} has a single category; cannot balance")
    arr = ds.groups[attribute]
    members = {c: np.flatnonzero(arr == c) for c in cats}
    target = max(len(v) for v in members.values())
    if all(len(v) == target for v in members.values()):
        return ds
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    extra = []
    for c in cats:
        short = target - len(members[c])
        if short:
            extra.append(rng.choice(members[c], size=short, replace=True))
    extra = np.concatenate(extra)
    idx = np.r_[np.arange(len(ds)), extra]
    taken = set(ds.ids)
    counts: dict[str, int] = {}
    new_ids = list(ds.ids)
    for i in extra:
        base = ds.ids[i]
        k = counts.get(base, 0)
        while True:
            k += 1
            cand = f"{base}#dup{k}"
            if cand not in taken:
                break
        counts[base] = k
        taken.add(cand)
        new_ids.append(cand)
    return ds.subset(idx, ids=new_ids)


def base_id(record_id: str) -> str:
    """Strip a resampling suffix added by :func:`balanced_resample`."""
    return record_id.split("#dup", 1)[0]


def split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction!r}")
    n = len(ds)
    n_test = int(round(n * test_fraction))
    n_test = min(max(n_test, 1), n - 1) if n >= 2 else n_test
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    perm = rng.permutation(n)
    test = np.sort(perm[:n_test])
    train = np.sort(perm[n_test:])
    return ds.subset(train), ds.subset(test)
