"""Group-aware pair construction and the supervised contrastive loss.

For an anchor ``i`` the loss term is

    L_i = -(1/|P(i)|) * sum_{p in P(i)} log( exp(z_i.z_p / tau) / sum_{n in N(i)} exp(z_i.z_n / tau) )

and the batch loss is the sum over anchors. Note the denominator runs over
the negatives only. ``log_form=False`` drops the logarithm and sums the bare
ratios instead.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

GROUP_AWARE = "group_aware"
PLAIN_SCL = "plain_scl"
MODES = (GROUP_AWARE, PLAIN_SCL)


class AnchorDropWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PairIndex:
    anchor: int
    positives: tuple
    negatives: tuple


@dataclass(frozen=True)
class PairSet:
    """Anchors that kept both a positive and a negative, plus the number dropped."""

    pairs: tuple
    dropped: int
    batch_size: int

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]


@dataclass(frozen=True)
class EmbeddingBatch:
    z: np.ndarray
    temperature: float

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim != 2:
            raise ValidationError("embeddings must be a 2-D array")
        if not self.temperature > 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")
        norms = np.linalg.norm(z, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValidationError("embedding rows must have unit L2 norm")
        object.__setattr__(self, "z", z)

    @classmethod
    def normalized(cls, raw, temperature: float) -> "EmbeddingBatch":
        raw = np.asarray(raw, dtype=np.float64)
        return cls(raw / np.linalg.norm(raw, axis=1, keepdims=True), temperature)


def pair_masks(labels, groups, mode: str = GROUP_AWARE) -> tuple[np.ndarray, np.ndarray]:
    """Boolean positive/negative matrices before any anchor filtering."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    y = np.asarray(labels)
    g = np.asarray(groups, dtype=object)
    if y.shape != g.shape:
        raise ValidationError("labels and groups must have equal length")
    same_label = y[:, None] == y[None, :]
    if mode == GROUP_AWARE:
        same_group = g[:, None] == g[None, :]
        pos = same_label & ~same_group
        neg = ~same_label & same_group
    else:
        pos = same_label.copy()
        np.fill_diagonal(pos, False)
        neg = ~same_label
    return pos, neg


def build_pairs(labels, groups, mode: str = GROUP_AWARE) -> PairSet:
    y = np.asarray(labels)
    if y.size < 2:
        raise ValidationError("a batch needs at least two records")
    pos, neg = pair_masks(labels, groups, mode)
    keep = pos.any(axis=1) & neg.any(axis=1)
    pairs = tuple(
        PairIndex(int(i), tuple(np.flatnonzero(pos[i]).tolist()), tuple(np.flatnonzero(neg[i]).tolist()))
        for i in np.flatnonzero(keep)
    )
    return PairSet(pairs, int(y.size - keep.sum()), int(y.size))


def _count_matrices(pairs: Iterable[PairIndex], batch_size: int):
    """Anchor list and per-anchor multiplicity rows for positives and negatives."""
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("no anchors: pairs must be non-empty")
    anchors = np.array([p.anchor for p in pairs], dtype=np.int64)
    P = np.zeros((len(pairs), batch_size))
    N = np.zeros((len(pairs), batch_size))
    for r, p in enumerate(pairs):
        if not p.negatives:
            raise ValidationError(f"anchor {p.anchor} has no negatives")
        if not p.positives:
            raise ValidationError(f"anchor {p.anchor} has no positives")
        idx = (p.anchor, *p.positives, *p.negatives)
        if min(idx) < 0 or max(idx) >= batch_size:
            raise ValidationError(f"anchor {p.anchor}: pair index outside the batch of {batch_size}")
        np.add.at(P[r], np.asarray(p.positives, dtype=np.int64), 1.0)
        np.add.at(N[r], np.asarray(p.negatives, dtype=np.int64), 1.0)
    return anchors, P, N


def loss_and_grad(z, temperature: float, pairs, log_form: bool = True) -> tuple[float, np.ndarray]:
    """Loss and dL/dz for raw embedding rows (no renormalization applied).

    ``pairs`` is a PairSet or any iterable of PairIndex. Indices may repeat
    inside a positive or negative list; repeats are counted with multiplicity.
    """
    z = np.asarray(z, dtype=np.float64)
    B = z.shape[0]
    anchors, P, N = _count_matrices(pairs, B)
    sims = (z[anchors] @ z.T) / temperature  # (A, B)

    neg_mask = N > 0
    shift = np.where(neg_mask, sims, -np.inf).max(axis=1, keepdims=True)
    e = N * np.exp(np.where(neg_mask, sims - shift, -np.inf))
    denom = e.sum(axis=1, keepdims=True)
    lse = np.log(denom) + shift  # (A, 1)
    softmax_n = e / denom
    n_pos = P.sum(axis=1, keepdims=True)

    if log_form:
        per_anchor = -((P * sims).sum(axis=1, keepdims=True) / n_pos) + lse
        coef = -P / n_pos + softmax_n
    else:
        ratio = np.where(P > 0, np.exp(np.minimum(sims - lse, 700.0)), 0.0)
        per_anchor = -(P * ratio).sum(axis=1, keepdims=True) / n_pos
        w = P * ratio / n_pos
        coef = -w + w.sum(axis=1, keepdims=True) * softmax_n

    loss = float(per_anchor.sum())
    # coef[a, j] = dL/dsims[a, j]; sims[a, j] = z[anchor_a] . z[j] / tau
    grad = coef.T @ z[anchors]
    np.add.at(grad, anchors, coef @ z)
    grad /= temperature
    return loss, grad


def contrastive_loss(batch: EmbeddingBatch, pairs, log_form: bool = True) -> float:
    return loss_and_grad(batch.z, batch.temperature, pairs, log_form)[0]


def contrastive_loss_grad(batch: EmbeddingBatch, pairs, log_form: bool = True) -> tuple[float, np.ndarray]:
    return loss_and_grad(batch.z, batch.temperature, pairs, log_form)


def warn_if_mostly_dropped(pairset: PairSet, threshold: float = 0.9) -> bool:
    if pairset.batch_size and pairset.dropped / pairset.batch_size > threshold:
        warnings.warn(
            f"{pairset.dropped}/{pairset.batch_size} anchors dropped; batch is likely group-homogeneous",
            AnchorDropWarning,
            stacklevel=2,
        )
        return True
    return False
