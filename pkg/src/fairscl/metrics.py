"""AUC, marginal AUC and the subgroup gap metrics (ΔmAUC, ΔTPR, ΔFPR, ΔBS)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.stats import rankdata

from .dataset import SubgroupView
from .errors import UndefinedMetricError, ValidationError

METRICS_VERSION = "1"


@dataclass(frozen=True)
class ScoredSet:
    """Model scores aligned with binary labels and group categories.

    ``groups`` maps attribute name -> array of category strings.
    """

    scores: np.ndarray
    labels: np.ndarray
    groups: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels).astype(np.int64)
        if scores.ndim != 1 or labels.shape != scores.shape:
            raise ValidationError(
                f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors"
            )
        if not np.isin(labels, (0, 1)).all():
            raise ValidationError("labels must be 0 or 1")
        if not np.isfinite(scores).all():
            raise ValidationError("scores must be finite")
        groups = {}
        for name, arr in dict(self.groups).items():
            arr = np.asarray(arr, dtype=object)
            if arr.shape != scores.shape:
                raise ValidationError(f"attribute {name!r} has length {arr.shape}, expected {scores.shape}")
            groups[name] = arr
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "groups", groups)

    def __len__(self):
        return self.scores.shape[0]

    def categories(self, attribute: str) -> list[str]:
        return sorted(set(self._attr(attribute).tolist()))

    def view(self, attribute: str) -> SubgroupView:
        arr = self._attr(attribute)
        return SubgroupView(attribute, {c: arr == c for c in self.categories(attribute)})

    def take(self, indices) -> "ScoredSet":
        idx = np.asarray(indices, dtype=np.int64)
        return ScoredSet(self.scores[idx], self.labels[idx], {k: v[idx] for k, v in self.groups.items()})

    def _attr(self, attribute):
        try:
            return self.groups[attribute]
        except KeyError:
            raise ValidationError(
                f"scored set has no attribute {attribute!r}; have {sorted(self.groups)}"
            ) from None


def _mann_whitney(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """P(pos > neg) + 0.5 P(pos == neg) via average ranks."""
    n_pos, n_neg = pos_scores.size, neg_scores.size
    ranks = rankdata(np.concatenate([pos_scores, neg_scores]))
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(s: ScoredSet) -> float:
    pos = s.scores[s.labels == 1]
    neg = s.scores[s.labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative", metric="auc")
    return _mann_whitney(pos, neg)


def marginal_auc(s: ScoredSet, attribute: str, category: str) -> float:
    """AUC of the category's positives against negatives from the whole set."""
    in_cat = s._attr(attribute) == category
    pos = s.scores[in_cat & (s.labels == 1)]
    neg = s.scores[s.labels == 0]
    if pos.size == 0:
        raise UndefinedMetricError(
            f"no positives in category {category!r} of {attribute!r}", category=category, metric="mauc"
        )
    if neg.size == 0:
        raise UndefinedMetricError("no negatives in the scored set", category=category, metric="mauc")
    return _mann_whitney(pos, neg)


def marginal_aucs(s: ScoredSet, attribute: str, categories=None) -> dict[str, float]:
    cats = s.categories(attribute) if categories is None else categories
    return {c: marginal_auc(s, attribute, c) for c in cats}


def delta(values) -> float:
    """Max minus min of a collection of per-group values."""
    vals = list(values.values()) if isinstance(values, Mapping) else list(values)
    return float(max(vals) - min(vals))


@dataclass(frozen=True)
class GroupStats:
    mauc: float
    tpr: float
    fpr: float
    bs: float
    n_pos: int
    n_total: int


@dataclass(frozen=True)
class FairnessReport:
    attribute: str
    overall_auc: float
    per_group: dict
    deltas: dict
    threshold: float

    def to_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "overall_auc": self.overall_auc,
            "per_group": {c: vars(g).copy() for c, g in self.per_group.items()},
            "deltas": dict(self.deltas),
            "threshold": self.threshold,
        }


def confusion(scores, labels, threshold: float) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) with ``score >= threshold`` predicted positive."""
    pred = np.asarray(scores) >= threshold
    y = np.asarray(labels) == 1
    return (
        int(np.sum(pred & y)),
        int(np.sum(pred & ~y)),
        int(np.sum(~pred & ~y)),
        int(np.sum(~pred & y)),
    )


def group_scalars(s: ScoredSet, attribute: str, category: str, threshold: float) -> GroupStats:
    mask = s._attr(attribute) == category
    sc, y = s.scores[mask], s.labels[mask]
    tp, fp, tn, fn = confusion(sc, y, threshold)
    if tp + fn == 0:
        raise UndefinedMetricError(
            f"TPR undefined: category {category!r} of {attribute!r} has no positives",
            category=category,
            metric="tpr",
        )
    if fp + tn == 0:
        raise UndefinedMetricError(
            f"FPR undefined: category {category!r} of {attribute!r} has no negatives",
            category=category,
            metric="fpr",
        )
    return GroupStats(
        mauc=marginal_auc(s, attribute, category),
        tpr=tp / (tp + fn),
        fpr=fp / (fp + tn),
        bs=float(np.mean((sc - y) ** 2)),
        n_pos=tp + fn,
        n_total=int(mask.sum()),
    )


def fairness_report(s: ScoredSet, attribute: str, threshold: float = 0.5) -> FairnessReport:
    if s.scores.min() < 0.0 or s.scores.max() > 1.0:
        raise ValidationError("fairness_report needs probability scores in [0, 1]")
    per_group = {c: group_scalars(s, attribute, c, threshold) for c in s.categories(attribute)}
    deltas = {
        f"d_{name}": delta(getattr(g, name) for g in per_group.values())
        for name in ("mauc", "tpr", "fpr", "bs")
    }
    return FairnessReport(attribute, auc(s), per_group, deltas, threshold)


def relative_change(baseline: float, proposed: float) -> dict:
    """Absolute and percentage change from ``baseline`` to ``proposed``.

    Raises UndefinedMetricError (carrying ``.absolute``) when baseline is 0.
    """
    absolute = proposed - baseline
    if baseline == 0:
        raise UndefinedMetricError(
            "relative change undefined for a zero baseline", metric="relative_pct", absolute=absolute
        )
    return {"relative_pct": 100.0 * absolute / baseline, "absolute": absolute}
