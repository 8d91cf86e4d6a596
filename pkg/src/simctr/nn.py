"""Small dense-network pieces with hand-written backward passes."""

from __future__ import annotations

import numpy as np

from .errors import NumericError

PROB_CLAMP = 1e-7


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def mlp_param_names(prefix: str, n_layers: int) -> list[str]:
    names = []
    for i in range(n_layers):
        names += [f"{prefix}.W{i}", f"{prefix}.b{i}"]
    return names


def mlp_forward(params: dict, prefix: str, x: np.ndarray, n_layers: int):
    """ReLU MLP; the last layer is linear. Returns (output, cache)."""
    acts = [x]
    h = x
    for i in range(n_layers):
        h = h @ params[f"{prefix}.W{i}"] + params[f"{prefix}.b{i}"]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def mlp_backward(params: dict, prefix: str, acts: list, dout: np.ndarray, n_layers: int, grads: dict):
    """Accumulate parameter gradients into ``grads``; return d(input)."""
    g = dout
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            g = g * (acts[i + 1] > 0)
        grads[f"{prefix}.W{i}"] += acts[i].T @ g
        grads[f"{prefix}.b{i}"] += g.sum(axis=0)
        g = g @ params[f"{prefix}.W{i}"].T
    return g


def two_way_probability(logits: np.ndarray) -> np.ndarray:
    """Click probability from a 2-way output: softmax(logits)[..., 1]."""
    return sigmoid(logits[..., 1] - logits[..., 0])


def binary_cross_entropy(p, labels):
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def bce_grad_wrt_logits(p: np.ndarray, labels: np.ndarray, weight: float) -> np.ndarray:
    """d(weight * mean CE)/d(two-way logits). Clamped probabilities get zero gradient."""
    y = labels.astype(np.float64)
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    dz = np.where(inside, p - y, 0.0) * (weight / len(p))
    return np.stack([-dz, dz], axis=-1)


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``mask``; every row needs one True."""
    lg = np.where(mask, logits, -np.inf)
    m = lg.max(axis=-1, keepdims=True)
    e = np.exp(lg - m)
    return e / e.sum(axis=-1, keepdims=True)


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(name)
