"""Dense numeric kernels: stable softmax, bias-free QKV projection, scaled
dot-product attention.

All arrays at module boundaries carry float32 values. Every kernel
accumulates in float64 and rounds the result back to float32 once, so
mathematically equivalent evaluation orders (fused, block-sliced, permuted)
produce identical float32 outputs. That property is what lets the cached
attention path be checked bit-for-bit against a joint forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ProjectionWeights",
    "matmul",
    "project_qkv",
    "scaled_attention",
    "softmax_rows",
]


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product ``a @ b`` with float64 accumulation, float32 result."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def _softmax64(logits: np.ndarray) -> np.ndarray:
    # per-row max subtraction keeps exp() in range for arbitrarily large logits
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax; each output row is nonnegative and sums to one."""
    m = _as_matrix(m, "m")
    if m.shape[1] == 0:
        raise ValueError("softmax over zero columns is undefined")
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite logits")
    return _softmax64(m.astype(np.float64)).astype(np.float32)


@dataclass(frozen=True)
class ProjectionWeights:
    """Bias-free square q/k/v projection matrices for one layer."""

    layer_index: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        d = self.w_q.shape[0] if self.w_q.ndim == 2 else -1
        for name in ("w_q", "w_k", "w_v"):
            w = getattr(self, name)
            if w.ndim != 2 or w.shape != (d, d):
                raise ValueError(f"{name} must be square {d}x{d}, got shape {w.shape}")
            w.setflags(write=False)

    @property
    def width(self) -> int:
        return self.w_q.shape[0]


def project_qkv(x, weights: ProjectionWeights):
    """Project tokens to queries, keys and values with the layer's weights."""
    x = _as_matrix(x, "x")
    if x.shape[1] != weights.width:
        raise ValueError(
            f"token width {x.shape[1]} does not match projection width {weights.width}"
        )
    xf = x.astype(np.float64)
    q = (xf @ weights.w_q.astype(np.float64)).astype(np.float32)
    k = (xf @ weights.w_k.astype(np.float64)).astype(np.float32)
    v = (xf @ weights.w_v.astype(np.float64)).astype(np.float32)
    return q, k, v


def scaled_attention(q, k, v) -> np.ndarray:
    """softmax(q kᵀ / sqrt(d_k)) v — each output row is a convex combination
    of the rows of ``v``."""
    q = _as_matrix(q, "q")
    k = _as_matrix(k, "k")
    v = _as_matrix(v, "v")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"key count {k.shape[0]} != value count {v.shape[0]}")
    if k.shape[0] == 0:
        raise ValueError("attention over zero keys is undefined")
    d_k = q.shape[1]
    logits = (q.astype(np.float64) @ k.astype(np.float64).T) / np.sqrt(d_k)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    weights = _softmax64(logits)
    return (weights @ v.astype(np.float64)).astype(np.float32)
