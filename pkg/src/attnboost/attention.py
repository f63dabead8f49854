"""Trainable nonnegative attention mask and its projected-gradient trainer.

The mask multiplies the cached features elementwise before they enter
the frozen head.  A fresh mask is all ones, so the attention network
starts out exactly equal to the plain head.  Training runs minibatch
gradient descent with momentum on the mask alone and clamps weights at
zero after every update (projection onto the nonnegative orthant).

Mask file format ("ATNA", little-endian): magic, version u32 = 1,
granularity u8 (0 unit, 1 channel), height/width/channels u32, then the
weights as float32 (height*width*channels values for unit granularity,
channels values for channel granularity).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backend
from .feature_store import Dataset, FeatureShape
from .head_model import (HeadModel, Prediction, TrainConfig,
                         TrainingDivergedError, _f32_exact, softmax)

MAGIC = b"ATNA"
VERSION = 1
_HEADER = struct.Struct("<4sIBIII")

GRANULARITIES = ("unit", "channel")


class MaskFileError(ValueError):
    """Malformed or inconsistent mask file."""


@dataclass
class AttentionMask:
    weights: np.ndarray      # float64; (flat_dim,) for unit, (channels,) for channel
    shape: FeatureShape
    granularity: str = "unit"

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        expected = self.shape.flat_dim if self.granularity == "unit" else self.shape.channels
        if self.weights.shape != (expected,):
            raise ValueError(
                f"mask weights shape {self.weights.shape} does not match "
                f"{self.granularity} granularity for {self.shape}")
        self.check_weights()

    @classmethod
    def identity(cls, shape: FeatureShape, granularity: str = "unit") -> "AttentionMask":
        n = shape.flat_dim if granularity == "unit" else shape.channels
        return cls(np.ones(n), shape, granularity)

    def check_weights(self) -> None:
        if not np.isfinite(self.weights).all():
            raise ValueError("non-finite mask weight")
        if (self.weights < 0).any():
            raise ValueError("negative mask weight")

    def flat(self) -> np.ndarray:
        """Weights expanded to one value per feature position."""
        if self.granularity == "unit":
            return self.weights
        # layout is height-major, then width, then channel: channel
        # weights repeat across all spatial positions
        return np.tile(self.weights, self.shape.height * self.shape.width)


def attention_forward(head: HeadModel, mask: AttentionMask,
                      features: np.ndarray) -> Prediction:
    """Head probabilities for features modulated by the mask."""
    mask.check_weights()
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (mask.shape.flat_dim,):
        raise ValueError(f"expected {mask.shape.flat_dim} features, got shape {x.shape}")
    modulated = mask.flat() * x
    if modulated.shape != (head.input_dim,):
        raise ValueError("mask shape does not match head input dim")
    return Prediction(softmax(head.logits(modulated[None, :]))[0])


def predict_batch(head: HeadModel, mask: AttentionMask, x: np.ndarray) -> np.ndarray:
    """Top-1 labels under the attention network for a (batch, dim) array."""
    modulated = np.asarray(x, dtype=np.float64) * mask.flat()
    return np.argmax(head.logits(modulated), axis=1)


def _head_arrays(head: HeadModel):
    weights = [layer.weights for layer in head.layers]
    biases = [layer.biases for layer in head.layers]
    acts = [1 if layer.activation == "relu" else 0 for layer in head.layers]
    return weights, biases, acts


def batch_loss_and_grad(head: HeadModel, mask: AttentionMask, x: np.ndarray,
                        labels: np.ndarray):
    """Mean cross-entropy loss, gradient w.r.t. mask weights, top-1 hits.

    The gradient matches the mask's granularity: for channel masks the
    per-position contributions are summed over spatial positions.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != mask.shape.flat_dim:
        raise ValueError("batch shape does not match mask shape")
    if labels.shape != (x.shape[0],):
        raise ValueError("labels length does not match batch")
    if (labels < 0).any() or (labels >= head.n_categories).any():
        raise ValueError("label out of range")
    weights, biases, acts = _head_arrays(head)
    loss, grad_flat, n_correct = backend.fused_batch_step(
        weights, biases, acts, mask.flat(), x, labels)
    if mask.granularity == "channel":
        grad = grad_flat.reshape(-1, mask.shape.channels).sum(axis=0)
    else:
        grad = grad_flat
    return loss, grad, n_correct


def attention_gradient(head: HeadModel, mask: AttentionMask, x: np.ndarray,
                       labels: np.ndarray) -> np.ndarray:
    """Analytic gradient of the mean batch cross-entropy w.r.t. the mask."""
    return batch_loss_and_grad(head, mask, x, labels)[1]


def _in_set_val_accuracy(head, mask, x_val, y_val) -> float:
    return float(np.mean(predict_batch(head, mask, x_val) == y_val))


def train_attention(head: HeadModel, dataset: Dataset, task_categories,
                    config: TrainConfig, granularity: str = "unit",
                    log_path=None) -> AttentionMask:
    """Train a mask on the task set's train split; head stays frozen.

    Loss is cross-entropy over the full label space.  Early stopping
    keeps the mask from the earliest epoch with the best val-split
    in-set accuracy.  Deterministic for a fixed config seed.  When
    ``log_path`` is given, a per-epoch CSV log
    (epoch,train_loss,val_in_set_accuracy) is written.
    """
    cats = sorted(set(int(c) for c in task_categories))
    if not cats:
        raise ValueError("empty task set")
    if min(cats) < 0 or max(cats) >= dataset.n_categories:
        raise ValueError("task category out of range")

    mask = AttentionMask.identity(dataset.shape, granularity)
    if config.max_epochs == 0:
        if log_path is not None:
            _write_training_log(log_path, [])
        return mask

    train_idx = dataset.indices(split="train", categories=cats)
    val_idx = dataset.indices(split="val", categories=cats)
    x_train = dataset.features[train_idx].astype(np.float64)
    y_train = dataset.category_ids[train_idx]
    x_val = dataset.features[val_idx].astype(np.float64)
    y_val = dataset.category_ids[val_idx]

    rng = np.random.default_rng(config.seed)
    w = mask.weights.copy()
    velocity = np.zeros_like(w)
    best_acc, best_epoch, best_w = -1.0, 0, w.copy()
    history = []

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_idx))
        loss_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            sel = order[start:start + config.batch_size]
            live = AttentionMask(w, dataset.shape, granularity)
            loss, grad, _ = batch_loss_and_grad(head, live, x_train[sel], y_train[sel])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"attention training diverged at epoch {epoch} (loss={loss})")
            velocity *= config.momentum
            velocity -= config.learning_rate * grad
            w += velocity
            np.maximum(w, 0.0, out=w)
            loss_sum += loss * len(sel)
        assert w.min() >= 0.0, "projection must keep weights nonnegative"

        train_loss = loss_sum / len(train_idx)
        val_acc = _in_set_val_accuracy(
            head, AttentionMask(w, dataset.shape, granularity), x_val, y_val)
        history.append((epoch, train_loss, val_acc))
        if val_acc > best_acc:
            best_acc, best_epoch, best_w = val_acc, epoch, w.copy()
        elif epoch - best_epoch >= config.patience:
            break

    if log_path is not None:
        _write_training_log(log_path, history)
    return AttentionMask(_f32_exact(best_w), dataset.shape, granularity)


def _write_training_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_in_set_accuracy"])
        for epoch, loss, acc in history:
            writer.writerow([epoch, repr(float(loss)), repr(float(acc))])


def write_mask_file(mask: AttentionMask, path) -> None:
    mask.check_weights()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, GRANULARITIES.index(mask.granularity),
                              mask.shape.height, mask.shape.width,
                              mask.shape.channels))
        fh.write(mask.weights.astype("<f4").tobytes())


def read_mask_file(path) -> AttentionMask:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MaskFileError(f"bad magic in {path}")
    if len(buf) < _HEADER.size:
        raise MaskFileError(f"truncated header in {path}")
    _, version, gran, height, width, channels = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise MaskFileError(f"unsupported version {version} in {path}")
    if gran >= len(GRANULARITIES):
        raise MaskFileError(f"unknown granularity code {gran} in {path}")
    shape = FeatureShape(height, width, channels)
    n = shape.flat_dim if gran == 0 else channels
    if len(buf) != _HEADER.size + 4 * n:
        raise MaskFileError(f"truncated payload in {path}")
    weights = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size)
    return AttentionMask(weights.astype(np.float64), shape, GRANULARITIES[gran])
