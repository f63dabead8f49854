"""Pure-numpy implementation of the hot training-step kernel.

Selected by :mod:`attnboost.backend` when the compiled extension is
unavailable or disabled.  Semantics must match ``_kernels.pyx``.
"""

from __future__ import annotations

import numpy as np


def fused_batch_step(weights, biases, acts, mask, x, labels):
    """One fused minibatch step of the attention objective.

    Args:
        weights: per-layer (out_dim, in_dim) float64 C-contiguous matrices.
        biases: per-layer (out_dim,) float64 vectors.
        acts: per-layer activation codes (0 identity, 1 relu).
        mask: (flat_dim,) float64 attention weights at unit granularity.
        x: (batch, flat_dim) float64 feature rows.
        labels: (batch,) int64 category ids.

    Returns:
        (mean cross-entropy loss, gradient of that loss w.r.t. ``mask``,
        number of top-1 correct predictions in the batch)
    """
    batch = x.shape[0]
    z = x * mask
    activations = [z]
    pres = []
    h = z
    for w, b, act in zip(weights, biases, acts):
        pre = h @ w.T + b
        pres.append(pre)
        h = np.maximum(pre, 0.0) if act == 1 else pre
        activations.append(h)

    logits = pres[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1)
    rows = np.arange(batch)
    # -log softmax[label] computed from the shifted logits directly
    loss = float(np.mean(np.log(denom) - shifted[rows, labels]))
    n_correct = int(np.sum(np.argmax(logits, axis=1) == labels))

    probs = exp / denom[:, None]
    delta = probs
    delta[rows, labels] -= 1.0
    delta /= batch
    for i in reversed(range(len(weights))):
        delta = delta @ weights[i]
        if i > 0 and acts[i - 1] == 1:
            delta = delta * (pres[i - 1] > 0)
    grad = np.einsum("bi,bi->i", delta, x)
    return loss, grad, n_correct
