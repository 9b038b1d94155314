"""Dense and sparse single-head attention under a PPA mask, with gradients.

The dense path materializes the full mask and score matrix and serves as the
reference; the sparse path gathers only the attended key positions per row,
so its work is proportional to the number of attended entries rather than
L^2. Both share one flop-accounting model: MACS_PER_ENTRY multiply-accumulate
operations of width d per (query, key) score-plus-accumulate pair. The dense
path is charged for the causal triangle it evaluates, the sparse path only
for the entries it touches.

Gradients are analytic (softmax-attention backward per row, touching only
attended positions) and are validated against central finite differences in
the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mask_core import MaskConfig, full_mask, stride_positions

__all__ = [
    "MACS_PER_ENTRY",
    "AttentionOutput",
    "AllMaskedError",
    "softmax_row",
    "dense_masked_attention",
    "sparse_gather_attention",
    "attention_backward",
    "row_index_lists",
]

# One attended (query, key) pair costs d MACs for the q.k score and d MACs
# for the prob-weighted value accumulation.
MACS_PER_ENTRY = 2


class AllMaskedError(ValueError):
    """softmax over a row with no attended positions."""


@dataclass(frozen=True)
class AttentionOutput:
    output: np.ndarray  # (L, d)
    flops: int  # multiply-accumulates performed
    attended_entries: int  # mask support touched by this computation


def softmax_row(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked, overflow-safe softmax of one score row.

    Masked entries are exactly zero in the result; unmasked entries are
    exp(s - max)/sum over the unmasked s.
    """
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if scores.shape != mask.shape:
        raise ValueError(f"scores {scores.shape} vs mask {mask.shape}")
    if not mask.any():
        raise AllMaskedError("softmax over an all-masked row")
    out = np.zeros_like(scores)
    s = scores[mask]
    e = np.exp(s - s.max())
    out[mask] = e / e.sum()
    return out


def _validate_qkv(Q, K, V, d_min: int = 1):
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ValueError("Q, K, V must be 2-D (L, d) arrays")
    if Q.shape != K.shape or Q.shape != V.shape:
        raise ValueError(f"shape mismatch: Q{Q.shape} K{K.shape} V{V.shape}")
    if Q.shape[1] < d_min:
        raise ValueError(f"feature dimension must be >= {d_min}")


def row_index_lists(L: int, cfg: MaskConfig) -> list[np.ndarray]:
    """Attended key indices per query row, ascending, shared stride table."""
    js = stride_positions(L, cfg.p)
    rows = []
    for q in range(L):
        n = np.searchsorted(js, q + 1, side="right")
        stride_keys = q + 1 - js[:n]
        window_keys = np.arange(max(0, q - cfg.window + 1), q + 1, dtype=np.int64)
        rows.append(np.union1d(stride_keys, window_keys))
    return rows


def dense_masked_attention(
    Q: np.ndarray, K: np.ndarray, V: np.ndarray, cfg: MaskConfig, scale: float
) -> AttentionOutput:
    """Reference path: full score matrix, masked row softmax, dense matmul."""
    _validate_qkv(Q, K, V)
    L, d = Q.shape
    mask = full_mask(L, cfg)
    scores = scale * (Q @ K.T)
    scores = np.where(mask, scores, -np.inf)
    m = scores.max(axis=1, keepdims=True)
    P = np.exp(scores - m)
    P /= P.sum(axis=1, keepdims=True)
    out = P @ V
    return AttentionOutput(
        output=out,
        flops=MACS_PER_ENTRY * d * (L * (L + 1) // 2),
        attended_entries=int(mask.sum()),
    )


def sparse_gather_attention(
    Q: np.ndarray, K: np.ndarray, V: np.ndarray, cfg: MaskConfig, scale: float
) -> AttentionOutput:
    """Gather path: touches only attended positions, no L x L buffer."""
    _validate_qkv(Q, K, V)
    L, d = Q.shape
    out = np.empty_like(Q, dtype=np.float64)
    entries = 0
    for q, idx in enumerate(row_index_lists(L, cfg)):
        s = scale * (K[idx] @ Q[q])
        e = np.exp(s - s.max())
        w = e / e.sum()
        out[q] = w @ V[idx]
        entries += idx.size
    return AttentionOutput(
        output=out, flops=MACS_PER_ENTRY * d * entries, attended_entries=entries
    )


def attention_backward(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    cfg: MaskConfig,
    scale: float,
    dO: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of sum(O * dO) w.r.t. Q, K, V.

    Works row by row over attended indices only, so masked-out positions
    contribute exactly zero to the dK and dV cross terms.
    """
    _validate_qkv(Q, K, V)
    if dO.shape != Q.shape:
        raise ValueError(f"dO shape {dO.shape} != Q shape {Q.shape}")
    L, _ = Q.shape
    dQ = np.zeros_like(Q, dtype=np.float64)
    dK = np.zeros_like(K, dtype=np.float64)
    dV = np.zeros_like(V, dtype=np.float64)
    for q, idx in enumerate(row_index_lists(L, cfg)):
        s = scale * (K[idx] @ Q[q])
        e = np.exp(s - s.max())
        w = e / e.sum()
        g = dO[q]
        dV[idx] += w[:, None] * g
        dw = V[idx] @ g
        ds = w * (dw - w @ dw)
        dQ[q] = scale * (ds @ K[idx])
        dK[idx] += scale * ds[:, None] * Q[q]
    return dQ, dK, dV
