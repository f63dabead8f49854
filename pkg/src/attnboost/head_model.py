"""Frozen dense classifier head and its bootstrap trainer.

The head maps a flat feature vector to a probability distribution over
all categories.  After :func:`train_head` (or :func:`read_head_file`)
returns, nothing in this package mutates head parameters; the attention
trainer treats the head as a fixed function.

File format ("ATNH", little-endian):

    magic    4 bytes  b"ATNH"
    version  u32      1
    n_layers u32
    layers   n_layers x (in_dim u32, out_dim u32, activation u8,
                         weights row-major float32 (out_dim*in_dim),
                         biases float32 (out_dim))

Activation codes: 0 identity, 1 relu.  The final layer must use
identity; forward ops apply the softmax.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .feature_store import Dataset

MAGIC = b"ATNH"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_LAYER_HEADER = struct.Struct("<IIB")

ACTIVATIONS = ("identity", "relu")


class HeadFileError(ValueError):
    """Malformed or inconsistent head file."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


def _f32_exact(arr: np.ndarray) -> np.ndarray:
    # Quantise to float32-representable values so file round-trips are
    # bit-exact while in-memory math stays float64.
    return arr.astype(np.float32).astype(np.float64)


@dataclass
class DenseLayer:
    weights: np.ndarray  # float64, (out_dim, in_dim)
    biases: np.ndarray   # float64, (out_dim,)
    activation: str      # "identity" or "relu"

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.biases = np.ascontiguousarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("weights must be a matrix")
        if self.biases.shape != (self.weights.shape[0],):
            raise ValueError("bias length must equal the layer's output dim")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Prediction:
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 1:
            raise ValueError("probabilities must be a vector")
        if ((p < 0) | (p > 1)).any() or abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("probabilities must lie in [0,1] and sum to 1")
        self.probabilities = p

    @property
    def top1(self) -> int:
        return int(np.argmax(self.probabilities))


class HeadModel:
    """Ordered dense layers; adjacent dimensions chain; final layer identity."""

    def __init__(self, layers):
        self.layers = list(layers)
        self.validate()

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def n_categories(self) -> int:
        return self.layers[-1].out_dim

    def validate(self) -> None:
        if not self.layers:
            raise ValueError("head needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise HeadFileError(
                    f"dimension chain mismatch: {prev.out_dim} -> {nxt.in_dim}")
        if self.layers[-1].activation != "identity":
            raise HeadFileError("final layer must use identity activation")
        for layer in self.layers:
            if not (np.isfinite(layer.weights).all() and np.isfinite(layer.biases).all()):
                raise ValueError("non-finite head parameter")

    def param_checksum(self) -> str:
        """SHA-256 over all parameter bytes; asserts the frozen-head contract."""
        digest = hashlib.sha256()
        for layer in self.layers:
            digest.update(layer.weights.tobytes())
            digest.update(layer.biases.tobytes())
        return digest.hexdigest()

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Pre-softmax outputs for a (batch, input_dim) float64 array."""
        h = x
        for layer in self.layers:
            h = h @ layer.weights.T + layer.biases
            if layer.activation == "relu":
                h = np.maximum(h, 0.0)
        return h

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(np.asarray(x, dtype=np.float64)))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stabilised softmax over the last axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def head_forward(head: HeadModel, features: np.ndarray) -> Prediction:
    """Class probabilities for one feature vector."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (head.input_dim,):
        raise ValueError(f"expected {head.input_dim} features, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite input features")
    return Prediction(softmax(head.logits(x[None, :]))[0])


@dataclass
class TrainConfig:
    """Minibatch SGD-with-momentum hyperparameters."""

    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.patience < 1:
            raise ValueError("batch_size and patience must be positive")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be nonnegative")


HEAD_TRAIN_DEFAULTS = TrainConfig(learning_rate=0.05, momentum=0.9,
                                  batch_size=64, max_epochs=30)


def _head_grads(layers, x, y_onehot):
    """Mean cross-entropy loss and per-layer (dW, db) for a minibatch."""
    batch = x.shape[0]
    activations = [x]
    pres = []
    h = x
    for layer in layers:
        pre = h @ layer.weights.T + layer.biases
        pres.append(pre)
        h = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
        activations.append(h)
    probs = softmax(pres[-1])
    # Clip only inside the log; gradients use the exact softmax.
    loss = -np.mean(np.log(np.maximum((probs * y_onehot).sum(axis=1), 1e-300)))
    delta = (probs - y_onehot) / batch
    grads = []
    for i in reversed(range(len(layers))):
        grads.append((delta.T @ activations[i], delta.sum(axis=0)))
        if i > 0:
            delta = delta @ layers[i].weights
            if layers[i - 1].activation == "relu":
                delta = delta * (pres[i - 1] > 0)
    grads.reverse()
    return loss, grads


def train_head(dataset: Dataset, hidden_dims=(256,), config: TrainConfig | None = None,
               seed: int = 0, min_accuracy_over_chance: float = 0.2) -> HeadModel:
    """Bootstrap a head on the train split over all categories, then freeze it.

    Deterministic for a fixed seed.  Raises :class:`TrainingDivergedError`
    on a non-finite loss and ``ValueError`` if the final val-split top-1
    accuracy does not exceed chance by ``min_accuracy_over_chance``.
    """
    cfg = config or HEAD_TRAIN_DEFAULTS
    rng = np.random.default_rng(seed)
    dims = [dataset.shape.flat_dim, *hidden_dims, dataset.n_categories]
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        scale = np.sqrt((1.0 if last else 2.0) / d_in)
        layers.append(DenseLayer(
            weights=rng.standard_normal((d_out, d_in)) * scale,
            biases=np.zeros(d_out),
            activation="identity" if last else "relu",
        ))

    train_idx = dataset.indices(split="train")
    x_train = dataset.features[train_idx].astype(np.float64)
    y_train = dataset.category_ids[train_idx]
    eye = np.eye(dataset.n_categories)

    velocities = [(np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in layers]
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_idx))
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            loss, grads = _head_grads(layers, x_train[sel], eye[y_train[sel]])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"head training diverged at epoch {epoch + 1} (loss={loss})")
            for layer, (vw, vb), (gw, gb) in zip(layers, velocities, grads):
                vw *= cfg.momentum
                vw -= cfg.learning_rate * gw
                vb *= cfg.momentum
                vb -= cfg.learning_rate * gb
                layer.weights += vw
                layer.biases += vb

    for layer in layers:
        layer.weights = _f32_exact(layer.weights)
        layer.biases = _f32_exact(layer.biases)
    head = HeadModel(layers)

    val_idx = dataset.indices(split="val")
    preds = predict_labels(head, dataset.features[val_idx].astype(np.float64))
    accuracy = float(np.mean(preds == dataset.category_ids[val_idx]))
    chance = 1.0 / dataset.n_categories
    if accuracy < chance + min_accuracy_over_chance:
        raise ValueError(
            f"bootstrap head val accuracy {accuracy:.3f} does not exceed "
            f"chance {chance:.3f} by the required margin {min_accuracy_over_chance}")
    return head


def predict_labels(head: HeadModel, x: np.ndarray) -> np.ndarray:
    """Top-1 labels over the full label space for a (batch, dim) array."""
    return np.argmax(head.logits(np.asarray(x, dtype=np.float64)), axis=1)


def write_head_file(head: HeadModel, path) -> None:
    head.validate()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(head.layers)))
        for layer in head.layers:
            fh.write(_LAYER_HEADER.pack(layer.in_dim, layer.out_dim,
                                        ACTIVATIONS.index(layer.activation)))
            fh.write(layer.weights.astype("<f4").tobytes())
            fh.write(layer.biases.astype("<f4").tobytes())


def read_head_file(path) -> HeadModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise HeadFileError(f"bad magic in {path}")
    _, version, n_layers = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise HeadFileError(f"unsupported version {version} in {path}")
    offset = _HEADER.size
    layers = []
    for _ in range(n_layers):
        if offset + _LAYER_HEADER.size > len(buf):
            raise HeadFileError(f"truncated layer header in {path}")
        in_dim, out_dim, act = _LAYER_HEADER.unpack_from(buf, offset)
        offset += _LAYER_HEADER.size
        if act >= len(ACTIVATIONS):
            raise HeadFileError(f"unknown activation code {act} in {path}")
        n_w, n_b = in_dim * out_dim, out_dim
        end = offset + 4 * (n_w + n_b)
        if end > len(buf):
            raise HeadFileError(f"truncated payload in {path}")
        weights = np.frombuffer(buf, dtype="<f4", count=n_w, offset=offset)
        biases = np.frombuffer(buf, dtype="<f4", count=n_b, offset=offset + 4 * n_w)
        offset = end
        layers.append(DenseLayer(
            weights=weights.astype(np.float64).reshape(out_dim, in_dim),
            biases=biases.astype(np.float64),
            activation=ACTIVATIONS[act],
        ))
    if offset != len(buf):
        raise HeadFileError(f"trailing bytes in {path}")
    return HeadModel(layers)
