"""Attention mechanisms: additive soft attention over feature rows, the
scalar adaptive gate, its three-way parallel variant, and the mean-pool
baseline.  All of them are stateless given their parameters and safe for
concurrent read-only use."""

from __future__ import annotations

import csv
from typing import NamedTuple

import numpy as np

from .errors import EmptyInputError, ShapeError
from .layers import glorot
from .tensor import (
    Tensor, add_rowvec, at, matmul, mean_rows, sigmoid, softmax, tanh, transpose,
)

__all__ = [
    "AdditiveAttention", "AdaptiveGate", "TraceRow",
    "mean_pool", "temporal_attend", "spatial_attend",
    "adaptive_blend", "parallel_adaptive_blend", "write_trace_csv",
]


def mean_pool(feats: Tensor) -> Tensor:
    """Average of feature rows; the no-attention baseline context."""
    if feats.data.ndim != 2 or feats.data.shape[0] == 0:
        raise EmptyInputError(f"mean_pool needs a non-empty (n, d) matrix, got {feats.data.shape}")
    return mean_rows(feats)


class AdditiveAttention:
    """Single-layer additive attention.

    Scores each feature row v against a query state h as
    w . tanh(W_a h + U_a v + b_a), normalizes with a softmax, and returns
    the weighted feature sum.  The same scorer serves frame-level
    (temporal) and region-level (spatial) features.
    """

    def __init__(self, query_dim: int, feature_dim: int, attn_dim: int,
                 rng: np.random.Generator):
        self.query_dim = query_dim
        self.feature_dim = feature_dim
        self.attn_dim = attn_dim
        self.W_a = glorot(rng, attn_dim, query_dim)
        self.U_a = glorot(rng, attn_dim, feature_dim)
        self.b_a = Tensor(np.zeros(attn_dim), requires_grad=True)
        self.w = Tensor(glorot(rng, attn_dim, 1).data[:, 0].copy(), requires_grad=True)

    def attend(self, h: Tensor, feats: Tensor) -> tuple[Tensor, Tensor]:
        """Return (context, alpha) for query h over feature rows."""
        if feats.data.ndim != 2 or feats.data.shape[0] == 0:
            raise EmptyInputError(f"attention over empty feature set {feats.data.shape}")
        if feats.data.shape[1] != self.feature_dim:
            raise ShapeError(
                f"attention expects features of dim {self.feature_dim}, got {feats.data.shape}")
        if h.shape != (self.query_dim,):
            raise ShapeError(
                f"attention expects a query of dim {self.query_dim}, got {h.shape}")
        proj = matmul(feats, transpose(self.U_a))          # (n, attn)
        shift = matmul(self.W_a, h) + self.b_a             # (attn,)
        scores = matmul(tanh(add_rowvec(proj, shift)), self.w)  # (n,)
        alpha = softmax(scores)
        ctx = matmul(transpose(feats), alpha)              # (d,)
        return ctx, alpha

    def parameters(self) -> dict[str, Tensor]:
        return {"W_a": self.W_a, "U_a": self.U_a, "b_a": self.b_a, "w": self.w}


def temporal_attend(att: AdditiveAttention, h: Tensor, frames: Tensor):
    """Attend over frame-level features."""
    return att.attend(h, frames)


def spatial_attend(att: AdditiveAttention, h: Tensor, regions: Tensor):
    """Attend over region-level features; same scorer, different rows."""
    return att.attend(h, regions)


class AdaptiveGate:
    """Learned gate mixing attended context with the language state.

    arity 1: a sigmoid scalar blends two vectors.
    arity 3: a softmax triple blends two contexts and the language state.
    """

    def __init__(self, hidden_dim: int, rng: np.random.Generator, arity: int = 1):
        if arity not in (1, 3):
            raise ShapeError(f"adaptive gate arity must be 1 or 3, got {arity}")
        self.hidden_dim = hidden_dim
        self.arity = arity
        self.W_s = glorot(rng, arity, hidden_dim)

    def parameters(self) -> dict[str, Tensor]:
        return {"W_s": self.W_s}


def adaptive_blend(gate: AdaptiveGate, h: Tensor, ctx: Tensor, h_lang: Tensor,
                   force: float | None = None) -> tuple[Tensor, Tensor]:
    """Convex blend: beta*ctx + (1-beta)*h_lang with beta = sigmoid(W_s h).

    ``force`` overrides beta with a constant (ablation hook); gradients
    then stop flowing into the gate weights.
    """
    if gate.arity != 1:
        raise ShapeError("adaptive_blend needs an arity-1 gate")
    if ctx.shape != h_lang.shape:
        raise ShapeError(f"blend operands differ: {ctx.shape} vs {h_lang.shape}")
    if force is None:
        beta = sigmoid(matmul(gate.W_s, h))      # (1,)
    else:
        beta = Tensor(np.asarray([float(force)]))
    blended = ctx * beta + h_lang * (1.0 - beta)
    return blended, beta


def parallel_adaptive_blend(gate: AdaptiveGate, h: Tensor, ctx1: Tensor,
                            ctx2: Tensor, h_lang: Tensor) -> tuple[Tensor, Tensor]:
    """Three-way blend of two attended contexts and the language state.

    The weights are a softmax over W_s h, so they are positive and sum
    to one; the result stays inside the coordinate-wise hull of its
    three inputs.
    """
    if gate.arity != 3:
        raise ShapeError("parallel_adaptive_blend needs an arity-3 gate")
    if not (ctx1.shape == ctx2.shape == h_lang.shape):
        raise ShapeError(
            f"blend operands differ: {ctx1.shape}, {ctx2.shape}, {h_lang.shape}")
    betas = softmax(matmul(gate.W_s, h))         # (3,)
    blended = ctx1 * at(betas, 0) + ctx2 * at(betas, 1) + h_lang * at(betas, 2)
    return blended, betas


class TraceRow(NamedTuple):
    """Attention internals recorded for one decoding step."""
    alpha: np.ndarray
    beta: np.ndarray


def write_trace_csv(path, tokens: list[str], rows) -> None:
    """Dump per-step attention weights for one sample.

    Columns: step, token, alpha_1..alpha_n, then beta (or beta1..beta3).
    ``tokens`` labels each step with the word generated at that step.
    """
    if not rows:
        raise EmptyInputError("no trace rows to write")
    n_alpha = len(rows[0].alpha)
    n_beta = len(rows[0].beta)
    beta_cols = ["beta"] if n_beta == 1 else [f"beta{i + 1}" for i in range(n_beta)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "token"]
                        + [f"alpha_{i + 1}" for i in range(n_alpha)] + beta_cols)
        for step, row in enumerate(rows, start=1):
            token = tokens[step - 1] if step - 1 < len(tokens) else ""
            writer.writerow([step, token]
                            + [f"{a:.10g}" for a in row.alpha]
                            + [f"{b:.10g}" for b in row.beta])
