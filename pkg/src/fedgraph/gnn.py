"""Mean-aggregation graph classifier with hand-written gradients.

Forward pass for one graph with node features ``X`` and affinity ``A``::

    P      = (I + A) / (1 + rowsum(A))          # row-normalised, self weight 1
    H^0    = X
    H^l    = dropout(ReLU(P H^{l-1} W_l^T))     # l = 1..L
    h_G    = mean over nodes of H^L
    z      = sigmoid(W_c h_G)
    loss   = -sum_c [y_c ln z_c + (1 - y_c) ln(1 - z_c)]   # y one-hot

With a binary ``A`` the aggregation is the plain mean over the node and its
neighbours. Multi-class prediction is ``argmax_c z_c``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ConfigError, ContainerError, InvalidLabelError, RuntimeFailure, ShapeError, TruncatedPayloadError
from .graphs import GraphSample
from .numerics import AdamState, RngStream, adam_step

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int
    n_layers: int = 2
    hidden_dim: int = 64
    n_classes: int = 5
    dropout_rate: float = 0.3
    readout: str = "mean"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be at least 1")
        if self.in_dim < 1 or self.hidden_dim < 1 or self.n_classes < 1:
            raise ConfigError("dimensions must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.readout != "mean":
            raise ConfigError(f"unsupported readout {self.readout!r}")


@dataclass
class ModelWeights:
    """Layer transforms ``W_1..W_L`` followed by the classifier.

    Flattening concatenates the tensors in that order, each row-major.
    """

    layers: list[np.ndarray]
    classifier: np.ndarray

    def tensors(self) -> list[np.ndarray]:
        return [*self.layers, self.classifier]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.tensors()]

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    @classmethod
    def unflatten(cls, flat: np.ndarray, shapes) -> "ModelWeights":
        flat = np.asarray(flat, dtype=np.float64)
        total = sum(int(np.prod(s)) for s in shapes)
        if flat.shape != (total,):
            raise ShapeError(f"flat vector has {flat.size} entries, shapes need {total}")
        out, pos = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(flat[pos : pos + n].reshape(s).copy())
            pos += n
        return cls(out[:-1], out[-1])

    def copy(self) -> "ModelWeights":
        return ModelWeights([w.copy() for w in self.layers], self.classifier.copy())

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors())


def layer_shapes(cfg: ModelConfig) -> list[tuple[int, int]]:
    dims = [cfg.in_dim] + [cfg.hidden_dim] * cfg.n_layers
    return [(dims[i + 1], dims[i]) for i in range(cfg.n_layers)] + [(cfg.n_classes, cfg.hidden_dim)]


def init_weights(cfg: ModelConfig, rng: RngStream) -> ModelWeights:
    """Glorot-uniform initialisation of every tensor."""
    tensors = []
    for fan_out, fan_in in layer_shapes(cfg):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        tensors.append(rng.uniform(-limit, limit, (fan_out, fan_in)))
    return ModelWeights(tensors[:-1], tensors[-1])


def check_weights(ws: ModelWeights, cfg: ModelConfig) -> None:
    want = layer_shapes(cfg)
    if len(ws.layers) != cfg.n_layers or ws.shapes != want:
        raise ShapeError(f"weight shapes {ws.shapes} do not match config {want}")


# --------------------------------------------------------------------------
# Building blocks
# --------------------------------------------------------------------------

def propagation_matrix(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    return (np.eye(n) + a) / (1.0 + a.sum(axis=1, keepdims=True))


def dropout_mask(shape, rate: float, rng: RngStream) -> np.ndarray:
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def layer_forward(h, a, w, training: bool = False, rng: RngStream | None = None, dropout_rate: float = 0.0):
    """One aggregation layer; returns ``(H_next, mask)``.

    In evaluation mode the mask is all ones and ``rng`` is not touched.
    """
    h = np.asarray(h, dtype=np.float64)
    if a.shape != (h.shape[0], h.shape[0]) or w.shape[1] != h.shape[1]:
        raise ShapeError(f"layer shapes disagree: h {h.shape}, a {a.shape}, w {w.shape}")
    out = np.maximum(propagation_matrix(a) @ h @ w.T, 0.0)
    if training and dropout_rate > 0.0:
        if rng is None:
            raise ConfigError("training-mode dropout needs an rng")
        mask = dropout_mask(out.shape, dropout_rate, rng)
    else:
        mask = np.ones(out.shape)
    return out * mask, mask


def readout(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 1:
        raise ShapeError(f"readout needs at least one node row, got {h.shape}")
    # Sorting each column first makes the sum independent of node order, bit for bit.
    return np.sort(h, axis=0).sum(axis=0) / h.shape[0]


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def classify(h_graph, w) -> np.ndarray:
    h_graph = np.asarray(h_graph, dtype=np.float64)
    if w.shape[1] != h_graph.shape[0]:
        raise ShapeError(f"classifier {w.shape} cannot take embedding of size {h_graph.shape[0]}")
    return sigmoid(w @ h_graph)


def one_hot(y: int, n_classes: int) -> np.ndarray:
    if not 0 <= int(y) < n_classes:
        raise InvalidLabelError(f"label {y} outside [0, {n_classes})")
    out = np.zeros(n_classes)
    out[int(y)] = 1.0
    return out


def bce_loss(z, y) -> float:
    """Summed binary cross entropy against a one-hot target."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.shape != y.shape:
        raise ShapeError(f"prediction {z.shape} and target {y.shape} differ")
    if not (np.all((y == 0.0) | (y == 1.0)) and y.sum() == 1.0):
        raise InvalidLabelError("target must be one-hot")
    zc = np.clip(z, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.sum(y * np.log(zc) + (1.0 - y) * np.log(1.0 - zc)))


# --------------------------------------------------------------------------
# Full model
# --------------------------------------------------------------------------

@dataclass
class ForwardCache:
    prop: np.ndarray
    inputs: list[np.ndarray] = field(default_factory=list)  # H^{l-1} per layer
    aggregated: list[np.ndarray] = field(default_factory=list)  # P H^{l-1}
    pre: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    h_graph: np.ndarray | None = None
    logits: np.ndarray | None = None
    z: np.ndarray | None = None
    target: np.ndarray | None = None
    weights_id: int = 0
    sample_id: int = 0


def forward(g: GraphSample, ws: ModelWeights, cfg: ModelConfig, training: bool = False, rng: RngStream | None = None):
    """Returns ``(z, loss, cache)``; ``cache`` is ``None`` in evaluation mode."""
    if g.x.shape[1] != cfg.in_dim:
        raise ShapeError(f"graph has {g.x.shape[1]} features, model expects {cfg.in_dim}")
    target = one_hot(g.y, cfg.n_classes)
    prop = propagation_matrix(g.a)
    cache = ForwardCache(prop) if training else None
    h = g.x
    for w in ws.layers:
        m = prop @ h
        pre = m @ w.T
        act = np.maximum(pre, 0.0)
        if training and cfg.dropout_rate > 0.0:
            if rng is None:
                raise ConfigError("training-mode dropout needs an rng")
            mask = dropout_mask(act.shape, cfg.dropout_rate, rng)
        else:
            mask = np.ones(act.shape)
        if cache is not None:
            cache.inputs.append(h)
            cache.aggregated.append(m)
            cache.pre.append(pre)
            cache.masks.append(mask)
        h = act * mask
    h_graph = readout(h)
    logits = ws.classifier @ h_graph
    z = sigmoid(logits)
    loss = bce_loss(z, target)
    if cache is not None:
        cache.h_graph = h_graph
        cache.logits = logits
        cache.z = z
        cache.target = target
        cache.weights_id = id(ws)
        cache.sample_id = id(g)
    return z, loss, cache


def backward(cache: ForwardCache | None, g: GraphSample, ws: ModelWeights) -> ModelWeights:
    """Exact gradient of the loss with respect to every weight tensor."""
    if cache is None or cache.z is None:
        raise RuntimeFailure("backward needs the cache of a training-mode forward pass")
    if cache.weights_id != id(ws) or cache.sample_id != id(g) or len(cache.pre) != len(ws.layers):
        raise RuntimeFailure("forward cache was produced for different weights or a different graph")
    z = cache.z
    inside = (z > PROB_CLAMP) & (z < 1.0 - PROB_CLAMP)
    d_logits = np.where(inside, z - cache.target, 0.0)
    d_classifier = np.outer(d_logits, cache.h_graph)
    d_hg = ws.classifier.T @ d_logits
    n = g.x.shape[0]
    d_h = np.broadcast_to(d_hg / n, (n, d_hg.size))
    d_layers = [None] * len(ws.layers)
    for l in range(len(ws.layers) - 1, -1, -1):
        d_pre = d_h * cache.masks[l] * (cache.pre[l] > 0.0)
        d_layers[l] = d_pre.T @ cache.aggregated[l]
        if l > 0:
            d_h = cache.prop.T @ (d_pre @ ws.layers[l])
    return ModelWeights(d_layers, d_classifier)


def train_batch(ws: ModelWeights, batch: list[GraphSample], opt: AdamState, rng: RngStream, cfg: ModelConfig):
    """Average the batch gradients (in sample order) and take one Adam step.

    Returns ``(new_weights, new_opt, mean_loss)``.
    """
    if not batch:
        raise ConfigError("batch must not be empty")
    total = np.zeros(ws.n_params)
    losses = []
    for g in batch:
        _, loss, cache = forward(g, ws, cfg, training=True, rng=rng)
        total += backward(cache, g, ws).flatten()
        losses.append(loss)
    grad = total / len(batch)
    new_flat, new_opt = adam_step(ws.flatten(), grad, opt)
    return ModelWeights.unflatten(new_flat, ws.shapes), new_opt, float(np.mean(losses))


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    per_class_f1: list[float]
    macro_f1: float
    loss: float
    absent_classes: list[int]
    confusion: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class_f1": list(self.per_class_f1),
            "absent_classes": list(self.absent_classes),
        }


def classification_metrics(truth, pred, n_classes: int, loss: float = float("nan")) -> Metrics:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    f1, absent = [], []
    for c in range(n_classes):
        tp = conf[c, c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        if conf[c, :].sum() == 0 and conf[:, c].sum() == 0:
            absent.append(c)
        denom = 2 * tp + fp + fn
        # F1 = 2PR/(P+R) = 2tp/(2tp+fp+fn); zero when precision and recall are both zero
        f1.append(float(2 * tp / denom) if tp > 0 else 0.0)
    acc = float(np.trace(conf) / max(truth.size, 1))
    return Metrics(acc, f1, float(np.mean(f1)), float(loss), absent, conf)


def predict(ws: ModelWeights, data: list[GraphSample], cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Predicted classes and per-sample losses (evaluation mode)."""
    preds, losses = [], []
    for g in data:
        z, loss, _ = forward(g, ws, cfg, training=False)
        preds.append(int(np.argmax(z)))
        losses.append(loss)
    return np.array(preds, dtype=np.int64), np.array(losses)


def evaluate(ws: ModelWeights, data: list[GraphSample], cfg: ModelConfig) -> Metrics:
    if not data:
        raise ConfigError("cannot evaluate on an empty dataset")
    preds, losses = predict(ws, data, cfg)
    truth = [g.y for g in data]
    return classification_metrics(truth, preds, cfg.n_classes, float(np.mean(losses)))


# --------------------------------------------------------------------------
# .mwt checkpoints
# --------------------------------------------------------------------------

MWT_MAGIC = b"MWT1"
# in_dim, n_layers, hidden_dim, n_classes, dropout_rate
_MWT_CONFIG = struct.Struct("<IIIId")


def encode_checkpoint(ws: ModelWeights, cfg: ModelConfig) -> bytes:
    check_weights(ws, cfg)
    head = MWT_MAGIC + _MWT_CONFIG.pack(cfg.in_dim, cfg.n_layers, cfg.hidden_dim, cfg.n_classes, cfg.dropout_rate)
    return head + ws.flatten().astype("<f8").tobytes()


def decode_checkpoint(data: bytes) -> tuple[ModelWeights, ModelConfig]:
    if data[:4] != MWT_MAGIC:
        raise BadMagicError("not an .mwt checkpoint (bad magic)")
    if len(data) < 4 + _MWT_CONFIG.size:
        raise TruncatedPayloadError("checkpoint config block is truncated")
    in_dim, n_layers, hidden, n_classes, rate = _MWT_CONFIG.unpack_from(data, 4)
    cfg = ModelConfig(in_dim=in_dim, n_layers=n_layers, hidden_dim=hidden, n_classes=n_classes, dropout_rate=rate)
    shapes = layer_shapes(cfg)
    n = sum(r * c for r, c in shapes)
    payload = data[4 + _MWT_CONFIG.size :]
    if len(payload) != 8 * n:
        raise ContainerError(f"checkpoint holds {len(payload)} payload bytes, expected {8 * n}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ModelWeights.unflatten(flat, shapes), cfg


def save_checkpoint(ws: ModelWeights, cfg: ModelConfig, path) -> None:
    from .io_utils import atomic_write_bytes

    atomic_write_bytes(path, encode_checkpoint(ws, cfg))


def load_checkpoint(path) -> tuple[ModelWeights, ModelConfig]:
    return decode_checkpoint(Path(path).read_bytes())
