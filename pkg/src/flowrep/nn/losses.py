"""Loss functions returning (value, gradient) pairs.

Values are python floats accumulated in float64; gradients match the
prediction dtype and already include the batch-mean scaling.
"""

from __future__ import annotations

import numpy as np


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements."""
    if pred.shape != target.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    value = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 / diff.size) * diff
    return value, grad


def sparse_ce(logits: np.ndarray, classes: np.ndarray) -> tuple[float, np.ndarray]:
    """Sparse categorical cross-entropy from logits, mean over the batch."""
    classes = np.asarray(classes)
    if logits.ndim != 2 or classes.shape != (logits.shape[0],):
        raise ValueError(f"sparse_ce: logits {logits.shape} vs classes {classes.shape}")
    if classes.min(initial=0) < 0 or classes.max(initial=0) >= logits.shape[1]:
        raise IndexError(f"sparse_ce: class index outside [0,{logits.shape[1]})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    batch = logits.shape[0]
    value = float(-log_probs[np.arange(batch), classes].mean())
    probs = np.exp(log_probs)
    probs[np.arange(batch), classes] -= 1.0
    grad = (probs / batch).astype(logits.dtype)
    return value, grad


def kl_unit_gaussian(mu: np.ndarray, logvar: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over dims, batch mean."""
    if mu.shape != logvar.shape:
        raise ValueError(f"kl: shape mismatch {mu.shape} vs {logvar.shape}")
    mu64 = mu.astype(np.float64)
    lv64 = logvar.astype(np.float64)
    per_item = -0.5 * np.sum(1.0 + lv64 - mu64**2 - np.exp(lv64), axis=-1)
    batch = mu.shape[0] if mu.ndim > 1 else 1
    value = float(per_item.mean()) if mu.ndim > 1 else float(per_item)
    dmu = (mu / batch).astype(mu.dtype)
    dlogvar = (0.5 * (np.exp(lv64) - 1.0) / batch).astype(logvar.dtype)
    return value, dmu, dlogvar
