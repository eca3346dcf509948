"""Meta-data fusion head: a dense network fused with frozen CNN features.

The trainable part of the task-2 model. Meta vectors pass through two
dense+BN+ReLU+dropout blocks, get concatenated with the CNN feature
vector, pass one more such block, and end in a 9-way classification
layer. Training is plain backprop + Adam on a weighted cross-entropy;
the CNN features are inputs and never updated.
"""

from __future__ import annotations

import copy
import csv
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .constants import CLASSES, CLASS_INDEX, KNOWN_CLASSES
from .errors import MissingFeatures, NonFiniteLoss, ShapeMismatch
from .features import FeatureStore
from .folds import ManifestRow
from .ioutil import atomic_write
from .layers import (batchnorm_backward, batchnorm_forward, dense_backward,
                     dense_forward, dropout_backward, dropout_forward,
                     relu_backward, relu_forward, softmax, weighted_ce_batch)
from .meta import META_DIM, encode_meta, meta_dropout

N_CLASSES = len(CLASSES)

# Canonical tensor order; also the checkpoint serialization order.
TRAINABLE_KEYS = (
    "meta1_w", "meta1_b", "bn1_gamma", "bn1_beta",
    "meta2_w", "meta2_b", "bn2_gamma", "bn2_beta",
    "fuse_w", "fuse_b", "bn3_gamma", "bn3_beta",
    "cls_w", "cls_b",
)
RUNNING_KEYS = ("bn1_mean", "bn1_var", "bn2_mean", "bn2_var", "bn3_mean", "bn3_var")
ALL_KEYS = TRAINABLE_KEYS + RUNNING_KEYS


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-5
    batch_size: int = 20
    dropout_p: float = 0.4
    meta_dropout_p: float = 0.1
    eval_every: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")
        for p in (self.dropout_p, self.meta_dropout_p):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_head_params(feature_dim: int, hidden: int = 256, fused: int = 1024,
                     rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """He-uniform dense weights, zero biases, identity batch norms."""
    rng = rng or np.random.default_rng(0)
    params = {
        "meta1_w": _he_uniform(rng, META_DIM, hidden),
        "meta1_b": np.zeros(hidden),
        "bn1_gamma": np.ones(hidden),
        "bn1_beta": np.zeros(hidden),
        "meta2_w": _he_uniform(rng, hidden, hidden),
        "meta2_b": np.zeros(hidden),
        "bn2_gamma": np.ones(hidden),
        "bn2_beta": np.zeros(hidden),
        "fuse_w": _he_uniform(rng, feature_dim + hidden, fused),
        "fuse_b": np.zeros(fused),
        "bn3_gamma": np.ones(fused),
        "bn3_beta": np.zeros(fused),
        "cls_w": _he_uniform(rng, fused, N_CLASSES),
        "cls_b": np.zeros(N_CLASSES),
    }
    for name in RUNNING_KEYS:
        dim = fused if name.startswith("bn3") else hidden
        params[name] = np.ones(dim) if name.endswith("var") else np.zeros(dim)
    return params


def head_dims(params: dict[str, np.ndarray]) -> tuple[int, int, int]:
    """(feature_dim, hidden, fused) implied by the parameter shapes."""
    hidden = params["meta1_w"].shape[1]
    fused = params["fuse_w"].shape[1]
    feature_dim = params["fuse_w"].shape[0] - hidden
    return feature_dim, hidden, fused


def _check_inputs(params, feats, meta):
    feature_dim, _, _ = head_dims(params)
    if feats.ndim != 2 or meta.ndim != 2 or feats.shape[0] != meta.shape[0]:
        raise ShapeMismatch(f"feats {feats.shape} / meta {meta.shape}")
    if feats.shape[1] != feature_dim:
        raise ShapeMismatch(f"feature dim {feats.shape[1]}, parameters expect {feature_dim}")
    if meta.shape[1] != META_DIM:
        raise ShapeMismatch(f"meta dim {meta.shape[1]}, expected {META_DIM}")


def head_forward_full(params: dict[str, np.ndarray], feats: np.ndarray, meta: np.ndarray,
                      bn_mode: str = "running", dropout_p: float = 0.0,
                      rng: np.random.Generator | None = None):
    """Forward pass returning (logits, cache, running_updates).

    bn_mode "batch" is the training path (batch statistics, dropout active
    when dropout_p > 0); "running" is the deterministic inference path.
    running_updates holds the refreshed BN statistics for the batch path.
    """
    feats = np.asarray(feats, dtype=np.float64)
    meta = np.asarray(meta, dtype=np.float64)
    _check_inputs(params, feats, meta)
    p = params
    running: dict[str, np.ndarray] = {}

    h1, c_d1 = dense_forward(meta, p["meta1_w"], p["meta1_b"])
    h1, c_bn1, (running["bn1_mean"], running["bn1_var"]) = batchnorm_forward(
        h1, p["bn1_gamma"], p["bn1_beta"], p["bn1_mean"], p["bn1_var"], bn_mode)
    h1, c_r1 = relu_forward(h1)
    h1, m1 = dropout_forward(h1, dropout_p, rng)

    h2, c_d2 = dense_forward(h1, p["meta2_w"], p["meta2_b"])
    h2, c_bn2, (running["bn2_mean"], running["bn2_var"]) = batchnorm_forward(
        h2, p["bn2_gamma"], p["bn2_beta"], p["bn2_mean"], p["bn2_var"], bn_mode)
    h2, c_r2 = relu_forward(h2)
    h2, m2 = dropout_forward(h2, dropout_p, rng)

    z = np.concatenate([feats, h2], axis=1)
    h3, c_d3 = dense_forward(z, p["fuse_w"], p["fuse_b"])
    h3, c_bn3, (running["bn3_mean"], running["bn3_var"]) = batchnorm_forward(
        h3, p["bn3_gamma"], p["bn3_beta"], p["bn3_mean"], p["bn3_var"], bn_mode)
    h3, c_r3 = relu_forward(h3)
    h3, m3 = dropout_forward(h3, dropout_p, rng)

    logits, c_d4 = dense_forward(h3, p["cls_w"], p["cls_b"])
    cache = (c_d1, c_bn1, c_r1, m1, c_d2, c_bn2, c_r2, m2,
             feats.shape[1], c_d3, c_bn3, c_r3, m3, c_d4)
    return logits, cache, running


def head_forward(params: dict[str, np.ndarray], feats: np.ndarray, meta: np.ndarray,
                 mode: str = "eval", dropout_p: float = 0.0,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Logits for a batch (or a single example given 1-D inputs).

    mode "train" uses batch statistics and inverted dropout; "eval" uses
    running statistics and no dropout, and is deterministic.
    """
    single = np.asarray(feats).ndim == 1
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    meta = np.atleast_2d(np.asarray(meta, dtype=np.float64))
    if mode == "eval":
        logits, _, _ = head_forward_full(params, feats, meta, bn_mode="running")
    elif mode == "train":
        logits, _, _ = head_forward_full(params, feats, meta, bn_mode="batch",
                                         dropout_p=dropout_p, rng=rng)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return logits[0] if single else logits


def head_backward(params: dict[str, np.ndarray], cache, dlogits: np.ndarray
                  ) -> dict[str, np.ndarray]:
    """Gradients of the loss w.r.t. every trainable tensor."""
    (c_d1, c_bn1, c_r1, m1, c_d2, c_bn2, c_r2, m2,
     f_dim, c_d3, c_bn3, c_r3, m3, c_d4) = cache
    g: dict[str, np.ndarray] = {}

    dh3, g["cls_w"], g["cls_b"] = dense_backward(dlogits, c_d4)
    dh3 = dropout_backward(dh3, m3)
    dh3 = relu_backward(dh3, c_r3)
    dh3, g["bn3_gamma"], g["bn3_beta"] = batchnorm_backward(dh3, c_bn3)
    dz, g["fuse_w"], g["fuse_b"] = dense_backward(dh3, c_d3)
    dh2 = dz[:, f_dim:]  # gradient w.r.t. the feature block is discarded (frozen CNN)

    dh2 = dropout_backward(dh2, m2)
    dh2 = relu_backward(dh2, c_r2)
    dh2, g["bn2_gamma"], g["bn2_beta"] = batchnorm_backward(dh2, c_bn2)
    dh1, g["meta2_w"], g["meta2_b"] = dense_backward(dh2, c_d2)

    dh1 = dropout_backward(dh1, m1)
    dh1 = relu_backward(dh1, c_r1)
    dh1, g["bn1_gamma"], g["bn1_beta"] = batchnorm_backward(dh1, c_bn1)
    _, g["meta1_w"], g["meta1_b"] = dense_backward(dh1, c_d1)
    return g


def head_loss_and_grads(params, feats, meta, labels, weight_vec,
                        bn_mode: str = "batch", dropout_p: float = 0.0,
                        rng: np.random.Generator | None = None):
    """Mean weighted cross-entropy of a batch plus gradients and BN updates.

    Pure apart from rng consumption: params are not modified, which makes
    this the unit that gradient checks exercise.
    """
    logits, cache, running = head_forward_full(params, feats, meta, bn_mode,
                                               dropout_p, rng)
    loss, dlogits = weighted_ce_batch(logits, labels, weight_vec)
    grads = head_backward(params, cache, dlogits)
    return loss, grads, running


# ---------------------------------------------------------------------------
# Adam.

@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(params[k]) for k in TRAINABLE_KEYS},
                   v={k: np.zeros_like(params[k]) for k in TRAINABLE_KEYS})


def adam_update(params, grads, state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for k in TRAINABLE_KEYS:
        g = grads[k]
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        params[k] = params[k] - lr * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + eps)


def train_step(params, feats, meta, labels, weight_vec, adam_state: AdamState,
               cfg: TrainConfig, rng: np.random.Generator) -> float:
    """One optimization step on a batch; updates params, BN stats and Adam state."""
    if len(labels) == 0:
        raise ValueError("empty batch")
    loss, grads, running = head_loss_and_grads(
        params, feats, meta, labels, weight_vec,
        bn_mode="batch", dropout_p=cfg.dropout_p, rng=rng)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss={loss} at Adam step {adam_state.t + 1}; "
                            f"lr={cfg.learning_rate}, batch={len(labels)}")
    adam_update(params, grads, adam_state, cfg.learning_rate)
    params.update(running)
    return loss


# ---------------------------------------------------------------------------
# Training loop.

@dataclass
class TrainResult:
    best: dict[str, np.ndarray]
    last: dict[str, np.ndarray]
    best_epoch: int
    best_sensitivity: float
    history: list[tuple[int, float, float | None]]  # (epoch, train loss, val S or None)


def _weight_vector(class_wts, labels_present) -> np.ndarray:
    missing = sorted(c for c in labels_present if c not in class_wts)
    if missing:
        raise ValueError(f"no balancing weight for classes {missing}")
    return np.array([class_wts.get(c, 1.0) for c in CLASSES])


def validation_sensitivity(params, store: FeatureStore, rows) -> float:
    """Mean recall over the known classes present in the rows, eval mode.

    Uses replicate 0 of each image's features so the score is deterministic.
    """
    feats = np.stack([store.get(r.image)[0] for r in rows]).astype(np.float64)
    meta = np.stack([encode_meta(r.meta) for r in rows])
    labels = np.array([CLASS_INDEX[r.label] for r in rows])
    logits = head_forward(params, feats, meta, mode="eval")
    preds = logits.argmax(axis=1)
    recalls = []
    for i in range(len(KNOWN_CLASSES)):
        pos = labels == i
        if pos.any():
            recalls.append(np.mean(preds[pos] == i))
    return float(np.mean(recalls))


def train_head(store: FeatureStore, train_rows, val_rows, class_wts,
               cfg: TrainConfig, hidden: int = 256, fused: int = 1024) -> TrainResult:
    """Train the fusion head for cfg.epochs epochs on precomputed features.

    Each epoch draws one feature replicate per image uniformly (the frozen
    CNN would see a fresh augmentation every pass) and applies meta-data
    dropout before encoding. Validation mean sensitivity is computed every
    eval_every epochs and at the end; the best and the final parameter
    sets are both returned. Deterministic given cfg.seed.
    """
    missing = sorted(r.image for r in list(train_rows) + list(val_rows)
                     if r.image not in store)
    if missing:
        raise MissingFeatures(f"no features for {len(missing)} images: {missing[:5]}")
    if not val_rows:
        raise ValueError("validation set is empty")
    weight_vec = _weight_vector(class_wts, {r.label for r in train_rows})
    rng = np.random.default_rng(cfg.seed)
    params = init_head_params(store.feature_dim, hidden, fused, rng)
    adam = AdamState.for_params(params)

    best_params = None
    best_s = -1.0
    best_epoch = -1
    history: list[tuple[int, float, float | None]] = []
    n = len(train_rows)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        replicate = rng.integers(0, store.replicates, size=n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            rows = [train_rows[i] for i in idx]
            feats = np.stack([store.get(r.image)[replicate[i]]
                              for i, r in zip(idx, rows)]).astype(np.float64)
            meta = np.stack([encode_meta(meta_dropout(r.meta, cfg.meta_dropout_p, rng))
                             for r in rows])
            labels = np.array([CLASS_INDEX[r.label] for r in rows])
            losses.append(train_step(params, feats, meta, labels, weight_vec,
                                     adam, cfg, rng))
        val_s: float | None = None
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            val_s = validation_sensitivity(params, store, val_rows)
            if val_s > best_s:
                best_s = val_s
                best_epoch = epoch
                best_params = copy.deepcopy(params)
        history.append((epoch, float(np.mean(losses)), val_s))
    return TrainResult(best=best_params, last=params, best_epoch=best_epoch,
                       best_sensitivity=best_s, history=history)


def predict_proba(params, feats: np.ndarray, meta: np.ndarray) -> np.ndarray:
    """Eval-mode softmax probabilities for a batch."""
    return softmax(head_forward(params, feats, meta, mode="eval"))


# ---------------------------------------------------------------------------
# Checkpoint file: u32 JSON-descriptor length, JSON descriptor, float32 payload.

def save_checkpoint(path, params: dict[str, np.ndarray], extra: dict | None = None) -> None:
    tensors = []
    offset = 0
    payload = bytearray()
    for name in ALL_KEYS:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload += arr.tobytes()
        offset += arr.nbytes
    descriptor = json.dumps({"tensors": tensors, "extra": extra or {}},
                            sort_keys=True, separators=(",", ":")).encode("utf-8")
    with atomic_write(path, "wb") as fh:
        fh.write(struct.pack("<I", len(descriptor)))
        fh.write(descriptor)
        fh.write(bytes(payload))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    from pathlib import Path
    blob = Path(path).read_bytes()
    (desc_len,) = struct.unpack_from("<I", blob, 0)
    descriptor = json.loads(blob[4:4 + desc_len].decode("utf-8"))
    payload = blob[4 + desc_len:]
    params: dict[str, np.ndarray] = {}
    for entry in descriptor["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        params[entry["name"]] = arr.reshape(shape).astype(np.float64)
    missing = set(ALL_KEYS) - set(params)
    if missing:
        raise ValueError(f"{path}: checkpoint missing tensors {sorted(missing)}")
    return params, descriptor.get("extra", {})


def write_history(path, history) -> None:
    with atomic_write(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_mean_sensitivity"])
        for epoch, loss, val_s in history:
            writer.writerow([epoch, format(loss, ".9g"),
                             "" if val_s is None else format(val_s, ".9g")])
