"""Small ReLU encoder with contrastive / prediction / adversary heads, trained with Adam.

Parameters live in a flat ``dict`` keyed ``enc{k}.W``, ``enc{k}.b``, ``con.W``,
``con.b``, ``pred.W``, ``pred.b`` and, for adversarial training, ``adv.W`` and
``adv.b``. Weight matrices are (fan_in, fan_out) and act on row batches.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import contrastive
from .dataset import Dataset, balanced_resample
from .errors import (
    CheckpointError,
    ConfigError,
    NaNGuardError,
    PretrainingInfeasibleError,
    ShapeError,
    ValidationError,
)
from .metrics import ScoredSet

log = logging.getLogger(__name__)

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8
P_CLAMP = 1e-7
# clamping p to [P_CLAMP, 1 - P_CLAMP] is the same as clamping the logit to [-LOGIT_CLAMP, LOGIT_CLAMP]
LOGIT_CLAMP = float(np.log((1.0 - P_CLAMP) / P_CLAMP))

CONTRASTIVE = "contrastive"
PREDICTION = "prediction"


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 10
    finetune_epochs: int = 1
    learning_rate: float = 1e-4
    temperature: float = 0.05
    batch_size: int = 32
    seed: int = 0
    adversary_weight: float = 1.0
    attribute: str = "group"
    hidden: tuple = (64, 64)
    embed_dim: int = 128

    def validate(self):
        ints = ("pretrain_epochs", "finetune_epochs")
        for name in ints:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.adversary_weight < 0:
            raise ConfigError("adversary_weight must be non-negative")
        if self.embed_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("layer widths must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from None
        cfg.validate()
        return cfg


@dataclass
class TrainLog:
    phase1_losses: list = field(default_factory=list)
    phase2_losses: list = field(default_factory=list)
    anchors_used: int = 0
    anchors_dropped: int = 0
    skipped_batches: int = 0
    adv_losses: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelState:
    feature_dim: int
    hidden: tuple
    embed_dim: int
    params: dict
    m: dict
    v: dict
    step: int = 0
    adv_classes: tuple = ()
    log: TrainLog = field(default_factory=TrainLog)

    @property
    def n_layers(self) -> int:
        return len(self.hidden)

    def copy(self) -> "ModelState":
        return ModelState(
            self.feature_dim,
            tuple(self.hidden),
            self.embed_dim,
            {k: a.copy() for k, a in self.params.items()},
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step,
            tuple(self.adv_classes),
            TrainLog(**{k: (list(v) if isinstance(v, list) else v) for k, v in asdict(self.log).items()}),
        )

    def reset_optimizer(self):
        self.m = {k: np.zeros_like(a) for k, a in self.params.items()}
        self.v = {k: np.zeros_like(a) for k, a in self.params.items()}
        self.step = 0

    def digest(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            if k.startswith(prefix):
                h.update(k.encode())
                h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(feature_dim: int, hidden=(64, 64), embed_dim: int = 128, seed: int = 0,
               adv_classes=()) -> ModelState:
    """Seeded init: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases.

    The prediction head starts at zero; see ``train_proposed``.
    """
    if feature_dim < 1:
        raise ShapeError("feature_dim must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    params = {}
    width = feature_dim
    for k, h in enumerate(hidden):
        params[f"enc{k}.W"] = _uniform(rng, width, (width, h))
        params[f"enc{k}.b"] = np.zeros(h)
        width = h
    params["con.W"] = _uniform(rng, width, (width, embed_dim))
    params["con.b"] = np.zeros(embed_dim)
    params["pred.W"] = np.zeros((width, 1))
    params["pred.b"] = np.zeros(1)
    if adv_classes:
        adv_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
        params["adv.W"] = _uniform(adv_rng, width, (width, len(adv_classes)))
        params["adv.b"] = np.zeros(len(adv_classes))
    state = ModelState(feature_dim, tuple(hidden), embed_dim, params, {}, {}, 0, tuple(adv_classes))
    state.reset_optimizer()
    return state


# ---------------------------------------------------------------------- forward / backward


def _check_X(state: ModelState, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != state.feature_dim:
        raise ShapeError(f"expected (n, {state.feature_dim}) features, got {X.shape}")
    return X


def _encode(params, n_layers, X):
    cache = [X]
    h = X
    for k in range(n_layers):
        h = np.maximum(h @ params[f"enc{k}.W"] + params[f"enc{k}.b"], 0.0)
        cache.append(h)
    return h, cache


def _encode_backward(params, n_layers, cache, dh, grads):
    for k in reversed(range(n_layers)):
        dh = dh * (cache[k + 1] > 0)
        grads[f"enc{k}.W"] = cache[k].T @ dh
        grads[f"enc{k}.b"] = dh.sum(axis=0)
        dh = dh @ params[f"enc{k}.W"].T
    return grads


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _bce_from_logits(logit, y) -> float:
    """Mean BCE with p clamped to [1e-7, 1 - 1e-7], evaluated in log space to avoid log(1 - p) cancellation."""
    t = np.clip(logit, -LOGIT_CLAMP, LOGIT_CLAMP)
    return float(np.mean(y * np.logaddexp(0.0, -t) + (1.0 - y) * np.logaddexp(0.0, t)))


def forward(state: ModelState, X, head: str = PREDICTION) -> np.ndarray:
    """Contrastive head: unit-norm embeddings (n, embed_dim). Prediction head: probabilities (n,)."""
    X = _check_X(state, X)
    h, _ = _encode(state.params, state.n_layers, X)
    if head == CONTRASTIVE:
        e = h @ state.params["con.W"] + state.params["con.b"]
        return e / np.linalg.norm(e, axis=1, keepdims=True)
    if head == PREDICTION:
        return _sigmoid((h @ state.params["pred.W"] + state.params["pred.b"])[:, 0])
    raise ValueError(f"unknown head {head!r}")


def bce_loss_grad(state: ModelState, X, y) -> tuple[float, dict]:
    """Mean binary cross-entropy and its gradient w.r.t. encoder + prediction head.

    Probabilities are clamped to [1e-7, 1 - 1e-7] for the loss value only; the gradient is unclamped.
    """
    X = _check_X(state, X)
    y = np.asarray(y, dtype=np.float64)
    p_ = state.params
    h, cache = _encode(p_, state.n_layers, X)
    logit = (h @ p_["pred.W"] + p_["pred.b"])[:, 0]
    p = _sigmoid(logit)
    loss = _bce_from_logits(logit, y)
    dlogit = ((p - y) / y.size)[:, None]
    grads = {"pred.W": h.T @ dlogit, "pred.b": dlogit.sum(axis=0)}
    _encode_backward(p_, state.n_layers, cache, dlogit @ p_["pred.W"].T, grads)
    return loss, grads


def contrastive_grad(state: ModelState, X, labels, groups, temperature: float,
                     mode: str = contrastive.GROUP_AWARE, log_form: bool = True):
    """Contrastive loss over one batch and gradients w.r.t. encoder + contrastive head.

    Returns ``(loss, grads, pairset)``; ``grads`` is None when every anchor was dropped.
    """
    X = _check_X(state, X)
    pairset = contrastive.build_pairs(labels, groups, mode)
    if len(pairset) == 0:
        return 0.0, None, pairset
    p_ = state.params
    h, cache = _encode(p_, state.n_layers, X)
    e = h @ p_["con.W"] + p_["con.b"]
    norm = np.linalg.norm(e, axis=1, keepdims=True)
    z = e / norm
    loss, dz = contrastive.loss_and_grad(z, temperature, pairset, log_form)
    # Jacobian of row normalization: (I - z z^T) / ||e||
    de = (dz - z * np.sum(dz * z, axis=1, keepdims=True)) / norm
    grads = {"con.W": h.T @ de, "con.b": de.sum(axis=0)}
    _encode_backward(p_, state.n_layers, cache, de @ p_["con.W"].T, grads)
    return loss, grads, pairset


def _softmax(a):
    a = a - a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=1, keepdims=True)


def adversarial_grad(state: ModelState, X, y, group_idx, weight: float):
    """BCE on labels plus a group classifier behind a gradient-reversal layer.

    The adversary head descends its cross-entropy; the encoder receives the
    prediction gradient plus ``-weight`` times the adversary's gradient.
    Returns ``(bce, adv_ce, grads, encoder_adv_grads)`` where the last item is
    the adversary's un-reversed contribution to the encoder gradients.
    """
    X = _check_X(state, X)
    y = np.asarray(y, dtype=np.float64)
    p_ = state.params
    n = y.size
    h, cache = _encode(p_, state.n_layers, X)
    logit = (h @ p_["pred.W"] + p_["pred.b"])[:, 0]
    p = _sigmoid(logit)
    bce = _bce_from_logits(logit, y)
    dlogit = ((p - y) / n)[:, None]

    a_logits = h @ p_["adv.W"] + p_["adv.b"]
    q = _softmax(a_logits)
    onehot = np.zeros_like(q)
    onehot[np.arange(n), group_idx] = 1.0
    ce = float(-np.mean(np.log(np.clip(q[np.arange(n), group_idx], 1e-300, None))))
    da = (q - onehot) / n

    grads = {
        "pred.W": h.T @ dlogit,
        "pred.b": dlogit.sum(axis=0),
        "adv.W": h.T @ da,
        "adv.b": da.sum(axis=0),
    }
    dh_pred = dlogit @ p_["pred.W"].T
    dh_adv = da @ p_["adv.W"].T
    enc_adv = _encode_backward(p_, state.n_layers, cache, dh_adv, {})
    _encode_backward(p_, state.n_layers, cache, dh_pred + (-weight) * dh_adv, grads)
    return bce, ce, grads, enc_adv


# ---------------------------------------------------------------------- optimizer


def adam_step(state: ModelState, gradients: Mapping[str, np.ndarray], lr: float) -> ModelState:
    """One Adam update, applied in place to the parameters named in ``gradients``."""
    for name, g in gradients.items():
        if name not in state.params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if g.shape != state.params[name].shape:
            raise ShapeError(f"gradient {name!r} has shape {g.shape}, expected {state.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NaNGuardError(f"non-finite gradient in layer {name!r}; update rejected", layer=name)
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for name, g in gradients.items():
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        state.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)
        if not np.all(np.isfinite(state.params[name])):
            raise NaNGuardError(f"parameter {name!r} became non-finite", layer=name)
    return state


# ---------------------------------------------------------------------- batching


def _rngs(seed):
    shuffle = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    return shuffle


def shuffled_batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def stratified_batches(labels, groups, batch_size: int, rng) -> list[np.ndarray]:
    """Shuffle within each (label, group) stratum and interleave strata proportionally.

    Every contiguous window then holds each stratum at roughly its overall
    share, so contrastive batches rarely lose all their anchors.
    """
    labels = np.asarray(labels)
    groups = np.asarray(groups, dtype=object)
    keys = sorted(set(zip(labels.tolist(), groups.tolist())))
    idx_parts, pos_parts = [], []
    for key in keys:
        members = np.flatnonzero((labels == key[0]) & (groups == key[1]))
        members = rng.permutation(members)
        m = members.size
        pos = (np.arange(m) + rng.uniform()) / m
        idx_parts.append(members)
        pos_parts.append(pos)
    idx = np.concatenate(idx_parts)
    pos = np.concatenate(pos_parts)
    order = idx[np.argsort(pos, kind="stable")]
    return [order[i : i + batch_size] for i in range(0, order.size, batch_size)]


# ---------------------------------------------------------------------- trainers


def _new_state(ds: Dataset, cfg: TrainConfig, adv_classes=()) -> ModelState:
    cfg.validate()
    if len(ds) == 0:
        raise ValidationError("training set is empty")
    return init_model(ds.feature_dim, cfg.hidden, cfg.embed_dim, cfg.seed, adv_classes)


def _supervised_epochs(state, ds, cfg, epochs, rng):
    X, y = ds.features, ds.labels
    for _ in range(epochs):
        total, count = 0.0, 0
        for idx in shuffled_batches(len(ds), cfg.batch_size, rng):
            loss, grads = bce_loss_grad(state, X[idx], y[idx])
            adam_step(state, grads, cfg.learning_rate)
            total += loss * idx.size
            count += idx.size
        state.log.phase2_losses.append(total / count)
    return state


def _contrastive_epochs(state, ds, cfg, rng, mode):
    X, y = ds.features, ds.labels
    g = ds.groups[cfg.attribute]
    for epoch in range(cfg.pretrain_epochs):
        total, used = 0.0, 0
        for idx in stratified_batches(y, g, cfg.batch_size, rng):
            if idx.size < 2:
                state.log.skipped_batches += 1
                continue
            loss, grads, pairset = contrastive_grad(state, X[idx], y[idx], g[idx], cfg.temperature, mode)
            state.log.anchors_dropped += pairset.dropped
            state.log.anchors_used += len(pairset)
            contrastive.warn_if_mostly_dropped(pairset)
            if grads is None:
                state.log.skipped_batches += 1
                continue
            adam_step(state, grads, cfg.learning_rate)
            total += loss
            used += len(pairset)
        if used == 0:
            raise PretrainingInfeasibleError(
                f"epoch {epoch}: every batch dropped all anchors for attribute {cfg.attribute!r}"
            )
        state.log.phase1_losses.append(total / used)
    return state


def _require_usable(ds: Dataset, attribute: str):
    if not ds.usable(attribute):
        raise ValidationError(f"attribute {attribute!r} has fewer than two categories")


def train_contrastive(ds_train: Dataset, cfg: TrainConfig, mode: str) -> ModelState:
    """Two-phase training: contrastive pretraining, then head swap and BCE fine-tuning.

    Phase 2 keeps the phase-1 encoder and predicts through the (untouched)
    prediction head. The Adam moments and step counter carry over from
    phase 1; a fresh optimizer would take full-size bias-corrected steps on
    the pretrained encoder and wash out the group invariance it learned.
    """
    _require_usable(ds_train, cfg.attribute)
    state = _new_state(ds_train, cfg)
    rng = _rngs(cfg.seed)
    _contrastive_epochs(state, ds_train, cfg, rng, mode)
    _supervised_epochs(state, ds_train, cfg, cfg.finetune_epochs, rng)
    return state


def train_proposed(ds_train: Dataset, cfg: TrainConfig) -> ModelState:
    return train_contrastive(ds_train, cfg, contrastive.GROUP_AWARE)


def train_scl(ds_train: Dataset, cfg: TrainConfig) -> ModelState:
    return train_contrastive(ds_train, cfg, contrastive.PLAIN_SCL)


def train_erm(ds_train: Dataset, cfg: TrainConfig) -> ModelState:
    """Plain BCE training for pretrain_epochs + finetune_epochs epochs."""
    state = _new_state(ds_train, cfg)
    rng = _rngs(cfg.seed)
    return _supervised_epochs(state, ds_train, cfg, cfg.pretrain_epochs + cfg.finetune_epochs, rng)


def train_balanced(ds_train: Dataset, cfg: TrainConfig) -> ModelState:
    _require_usable(ds_train, cfg.attribute)
    return train_erm(balanced_resample(ds_train, cfg.attribute, cfg.seed), cfg)


def train_adv(ds_train: Dataset, cfg: TrainConfig) -> ModelState:
    _require_usable(ds_train, cfg.attribute)
    classes = tuple(ds_train.categories(cfg.attribute))
    state = _new_state(ds_train, cfg, adv_classes=classes)
    rng = _rngs(cfg.seed)
    X, y = ds_train.features, ds_train.labels
    lookup = {c: i for i, c in enumerate(classes)}
    gidx = np.array([lookup[c] for c in ds_train.groups[cfg.attribute]], dtype=np.int64)
    for _ in range(cfg.pretrain_epochs + cfg.finetune_epochs):
        total, adv_total, count = 0.0, 0.0, 0
        for idx in shuffled_batches(len(ds_train), cfg.batch_size, rng):
            bce, ce, grads, _ = adversarial_grad(state, X[idx], y[idx], gidx[idx], cfg.adversary_weight)
            adam_step(state, grads, cfg.learning_rate)
            total += bce * idx.size
            adv_total += ce * idx.size
            count += idx.size
        state.log.phase2_losses.append(total / count)
        state.log.adv_losses.append(adv_total / count)
    return state


TRAINERS = {
    "erm": train_erm,
    "balanced": train_balanced,
    "adv": train_adv,
    "scl": train_scl,
    "proposed": train_proposed,
}


def adversary_predict(state: ModelState, X) -> np.ndarray:
    """Predicted category index from the adversary head."""
    if "adv.W" not in state.params:
        raise ValueError("model has no adversary head")
    X = _check_X(state, X)
    h, _ = _encode(state.params, state.n_layers, X)
    return np.argmax(h @ state.params["adv.W"] + state.params["adv.b"], axis=1)


def predict(state: ModelState, ds: Dataset) -> ScoredSet:
    return ScoredSet(forward(state, ds.features, PREDICTION), ds.labels, ds.groups)


# ---------------------------------------------------------------------- checkpoints

MAGIC = b"FSCLCKPT"
FORMAT_VERSION = 1


def save_checkpoint(state: ModelState, path) -> None:
    """Write a checkpoint.

    Layout: 8-byte magic ``FSCLCKPT``, little-endian uint32 format version,
    uint64 header length, a UTF-8 JSON header (dimensions, step, and the
    ordered list of arrays with shapes), then every array as little-endian
    float64 in row-major order: all parameters, then first moments, then
    second moments, each in header order.
    """
    names = sorted(state.params)
    header = {
        "format_version": FORMAT_VERSION,
        "feature_dim": state.feature_dim,
        "hidden": list(state.hidden),
        "embed_dim": state.embed_dim,
        "adv_classes": list(state.adv_classes),
        "step": state.step,
        "arrays": [{"name": n, "shape": list(state.params[n].shape)} for n in names],
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for table in (state.params, state.m, state.v):
            for n in names:
                fh.write(np.ascontiguousarray(table[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a fairscl checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 8 + struct.calcsize("<IQ")
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    tables = []
    for _ in range(3):
        table = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
            off += 8 * count
            table[spec["name"]] = arr
        tables.append(table)
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return ModelState(
        feature_dim=header["feature_dim"],
        hidden=tuple(header["hidden"]),
        embed_dim=header["embed_dim"],
        params=tables[0],
        m=tables[1],
        v=tables[2],
        step=header["step"],
        adv_classes=tuple(header["adv_classes"]),
    )
