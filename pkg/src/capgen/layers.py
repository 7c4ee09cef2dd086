"""Neural building blocks: LSTM cell, word embedding, affine maps, dropout."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ContractError, ShapeError, VocabularyError
from .tensor import (
    Tensor, add_rowvec, matmul, sigmoid, take_row, take_rows, tanh, transpose,
)

__all__ = ["LstmCell", "LstmOut", "Embedding", "Linear", "dropout", "glorot"]


def glorot(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    """Uniform(-a, a) init with a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-a, a, size=(rows, cols)), requires_grad=True)


def _zeros_param(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


class LstmOut(NamedTuple):
    """One LSTM step with its gate activations kept for tracing."""
    h: Tensor
    m: Tensor
    i: Tensor
    f: Tensor
    o: Tensor
    g: Tensor


class LstmCell:
    """Single LSTM cell with separate per-gate weight blocks.

    i/f/o are sigmoid gates, g the tanh candidate; the memory update is
    m_t = f*m_prev + i*g and the output h_t = o*tanh(m_t).  The forget
    bias starts at 1.0 to keep early training stable.
    """

    GATES = ("i", "f", "o", "g")

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator,
                 forget_bias: float = 1.0):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        for gate in self.GATES:
            setattr(self, f"W_{gate}", glorot(rng, hidden_dim, input_dim))
            setattr(self, f"U_{gate}", glorot(rng, hidden_dim, hidden_dim))
            setattr(self, f"b_{gate}", _zeros_param(hidden_dim))
        self.b_f.data[:] = forget_bias

    def _check(self, y: Tensor, h_prev: Tensor, m_prev: Tensor) -> None:
        if y.shape != (self.input_dim,):
            raise ShapeError(
                f"input-gate block W_i expects input of dim {self.input_dim}, got {y.shape}")
        if h_prev.shape != (self.hidden_dim,):
            raise ShapeError(
                f"recurrent block U_i expects hidden of dim {self.hidden_dim}, got {h_prev.shape}")
        if m_prev.shape != (self.hidden_dim,):
            raise ShapeError(
                f"memory block expects dim {self.hidden_dim}, got {m_prev.shape}")

    def step(self, y: Tensor, h_prev: Tensor, m_prev: Tensor) -> LstmOut:
        self._check(y, h_prev, m_prev)
        i = sigmoid(matmul(self.W_i, y) + matmul(self.U_i, h_prev) + self.b_i)
        f = sigmoid(matmul(self.W_f, y) + matmul(self.U_f, h_prev) + self.b_f)
        o = sigmoid(matmul(self.W_o, y) + matmul(self.U_o, h_prev) + self.b_o)
        g = tanh(matmul(self.W_g, y) + matmul(self.U_g, h_prev) + self.b_g)
        m = f * m_prev + i * g
        h = o * tanh(m)
        return LstmOut(h, m, i, f, o, g)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for gate in self.GATES:
            for block in ("W", "U", "b"):
                name = f"{block}_{gate}"
                out[name] = getattr(self, name)
        return out


class Embedding:
    """Row-lookup word embedding E of shape (vocab_size, dim)."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator):
        self.vocab_size = vocab_size
        self.dim = dim
        self.E = glorot(rng, vocab_size, dim)

    def _check(self, ids) -> None:
        for i in ids:
            if not 0 <= int(i) < self.vocab_size:
                raise VocabularyError(
                    f"token id {int(i)} outside vocabulary of size {self.vocab_size}")

    def lookup(self, ids) -> Tensor:
        """Gather rows for a sequence of ids -> (len, dim)."""
        self._check(ids)
        return take_rows(self.E, ids)

    def lookup_one(self, idx: int) -> Tensor:
        self._check((idx,))
        return take_row(self.E, int(idx))

    def parameters(self) -> dict[str, Tensor]:
        return {"E": self.E}


class Linear:
    """Affine map y = W x (+ b); also applies row-wise to matrices."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.W = glorot(rng, out_dim, in_dim)
        self.b = _zeros_param(out_dim) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim == 1:
            y = matmul(self.W, x)
            return y + self.b if self.b is not None else y
        y = matmul(x, transpose(self.W))
        return add_rowvec(y, self.b) if self.b is not None else y

    def parameters(self) -> dict[str, Tensor]:
        out = {"W": self.W}
        if self.b is not None:
            out["b"] = self.b
        return out


def dropout(x: Tensor, rate: float, training: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero entries with prob ``rate`` and scale survivors.

    At inference (training=False) this is the exact identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an rng")
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask)
