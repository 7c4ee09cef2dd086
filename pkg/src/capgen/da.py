"""Two-pass image-caption decoder with deliberation.

The first LSTM drafts: it reads [global feature; previous second-pass
hidden; word embedding], a residual word shortcut reprojects [word;
hidden], and region attention pools a first visual context.  The second
LSTM proofreads: a gated transform of its memory acts as an extra
"language" attention slot (the sentinel) next to the regions, and the
word distribution comes from fusing the draft hidden, the refined hidden
and the second attended vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import TraceRow
from .data import BOS_ID, FeatureSet
from .errors import ConfigError, ContractError
from .layers import Embedding, Linear, LstmCell, dropout, glorot
from .tensor import (
    Tensor, add_rowvec, at, concat, log, matmul, narrow, reshape, sigmoid,
    softmax, stack_rows, tanh, transpose, zeros,
)

__all__ = ["DaConfig", "DaState", "DeliberateDecoder", "da_step",
           "da_first_pass_distribution"]


@dataclass
class DaConfig:
    vocab_size: int
    hidden_dim: int = 512
    embed_dim: int = 512
    attn_dim: int = 512
    region_dim: int = 2048
    global_dim: int = 2048
    first_pass_head: bool = False  # auxiliary draft-word head
    deliberate: bool = True        # False drops the whole second pass
    dropout: float = 0.0
    seed: int = 0

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class DaState:
    h1: Tensor
    m1: Tensor
    h2: Tensor
    m2: Tensor
    step: int
    feats: tuple                 # (global vector, region matrix)
    trace: Optional[tuple]
    draft: Optional[tuple] = None  # (h1_tilde, v1_hat) of the latest step


class _ScoredAttention:
    """Bias-free additive scorer w . tanh(W_v v + W_h h) over region rows."""

    def __init__(self, query_dim, feature_dim, attn_dim, rng):
        self.W_v = glorot(rng, attn_dim, feature_dim)
        self.W_h = glorot(rng, attn_dim, query_dim)
        self.w = Tensor(glorot(rng, attn_dim, 1).data[:, 0].copy(), requires_grad=True)

    def scores(self, h: Tensor, feats: Tensor) -> Tensor:
        proj = matmul(feats, transpose(self.W_v))
        return matmul(tanh(add_rowvec(proj, matmul(self.W_h, h))), self.w)

    def parameters(self):
        return {"W_v": self.W_v, "W_h": self.W_h, "w": self.w}


class DeliberateDecoder:
    """Deliberate-attention decoder (variant tag "DA" in checkpoints)."""

    variant = "da"

    def __init__(self, config: DaConfig):
        c = config
        if not c.deliberate and not c.first_pass_head:
            raise ConfigError("disabling deliberation requires the first-pass head")
        self.config = config
        rng = config.rng()
        self.embed = Embedding(c.vocab_size, c.embed_dim, rng)
        self.lstm1 = LstmCell(c.global_dim + c.hidden_dim + c.embed_dim, c.hidden_dim, rng)
        self.W_rd = Linear(c.embed_dim + c.hidden_dim, c.hidden_dim, rng, bias=False)
        self.attn1 = _ScoredAttention(c.hidden_dim, c.region_dim, c.attn_dim, rng)
        if c.first_pass_head:
            self.first_head = Linear(c.hidden_dim + c.region_dim, c.vocab_size, rng)
        else:
            self.first_head = None
        if c.deliberate:
            y2_dim = c.global_dim + c.hidden_dim + c.region_dim
            self.lstm2 = LstmCell(y2_dim, c.hidden_dim, rng)
            self.W_x = glorot(rng, c.hidden_dim, y2_dim)
            self.W_h = glorot(rng, c.hidden_dim, c.hidden_dim)
            self.attn2 = _ScoredAttention(c.hidden_dim, c.region_dim, c.attn_dim, rng)
            # sentinel slot score: w_a . tanh(W_s s + W_h3 h2)
            self.W_s = glorot(rng, c.attn_dim, c.hidden_dim)
            self.W_h3 = glorot(rng, c.attn_dim, c.hidden_dim)
            self.w_a = Tensor(glorot(rng, c.attn_dim, 1).data[:, 0].copy(),
                              requires_grad=True)
            # the sentinel competes with region rows, so it must share their dim
            if c.hidden_dim != c.region_dim:
                self.sentinel_proj = Linear(c.hidden_dim, c.region_dim, rng, bias=False)
            else:
                self.sentinel_proj = None
            self.W_sd = Linear(2 * c.hidden_dim + c.region_dim, c.hidden_dim, rng, bias=False)
            self.out = Linear(c.hidden_dim, c.vocab_size, rng)

    def init_state(self, features: FeatureSet, record_trace: bool = False) -> DaState:
        v_g = Tensor(features.require("global"))
        regions = Tensor(features.require("spatial"))
        c = self.config
        if v_g.shape != (c.global_dim,):
            raise ConfigError(f"global feature dim {v_g.shape} != configured {c.global_dim}")
        z = zeros(c.hidden_dim)
        return DaState(z, z, z, z, 0, (v_g, regions), () if record_trace else None)

    def step(self, state: DaState, token_id: int, training: bool = False, rng=None):
        v_g, regions = state.feats
        return da_step(self, state, token_id, v_g, regions, training=training, rng=rng)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for k, v in self.embed.parameters().items():
            out[f"embed.{k}"] = v
        for k, v in self.lstm1.parameters().items():
            out[f"lstm1.{k}"] = v
        for k, v in self.W_rd.parameters().items():
            out[f"W_rd.{k}"] = v
        for k, v in self.attn1.parameters().items():
            out[f"attn1.{k}"] = v
        if self.first_head is not None:
            for k, v in self.first_head.parameters().items():
                out[f"first_head.{k}"] = v
        if self.config.deliberate:
            for k, v in self.lstm2.parameters().items():
                out[f"lstm2.{k}"] = v
            out["W_x"] = self.W_x
            out["W_h"] = self.W_h
            for k, v in self.attn2.parameters().items():
                out[f"attn2.{k}"] = v
            out["W_s"] = self.W_s
            out["W_h3"] = self.W_h3
            out["w_a"] = self.w_a
            if self.sentinel_proj is not None:
                for k, v in self.sentinel_proj.parameters().items():
                    out[f"sentinel_proj.{k}"] = v
            for k, v in self.W_sd.parameters().items():
                out[f"W_sd.{k}"] = v
            for k, v in self.out.parameters().items():
                out[f"out.{k}"] = v
        return out

    def forward_teacher_forced(self, features, tokens, training=False, rng=None,
                               with_aux: bool = False):
        """Log-probs (T, vocab); with_aux also returns the draft head's rows."""
        tokens = [int(t) for t in tokens]
        if not tokens or tokens[0] != BOS_ID:
            raise ContractError("teacher forcing requires a caption starting with BOS")
        if len(tokens) < 2:
            raise ContractError("caption has no prediction steps")
        state = self.init_state(features)
        rows, aux_rows = [], []
        for t in range(1, len(tokens)):
            p, state = self.step(state, tokens[t - 1], training, rng)
            rows.append(log(p))
            if with_aux:
                aux_rows.append(log(da_first_pass_distribution(self, state)))
        main = stack_rows(rows)
        if with_aux:
            return main, stack_rows(aux_rows)
        return main


def da_step(dec: DeliberateDecoder, state: DaState, token_id: int,
            v_g: Tensor, regions: Tensor, training: bool = False, rng=None):
    """One decoding step; returns (word distribution, new state)."""
    c = dec.config
    L = regions.data.shape[0]
    if L < 1:
        raise ContractError("da_step needs at least one region")
    w_t = dec.embed.lookup_one(token_id)

    # first pass: draft hidden with residual word shortcut, region attention
    y1 = concat([v_g, state.h2, w_t])
    out1 = dec.lstm1.step(y1, state.h1, state.m1)
    h1_d = dropout(out1.h, c.dropout, training, rng)
    h1_tilde = dec.W_rd(concat([w_t, h1_d]))
    e1 = dec.attn1.scores(h1_tilde, regions)
    alpha1 = softmax(e1)
    v1_hat = matmul(transpose(regions), alpha1)

    if not c.deliberate:
        p = softmax(dec.first_head(concat([h1_tilde, v1_hat])))
        trace = state.trace
        if trace is not None:
            trace = trace + (TraceRow(alpha1.data.copy(), np.ones(1)),)
        new = DaState(out1.h, out1.m, state.h2, state.m2, state.step + 1,
                      state.feats, trace, draft=(h1_tilde, v1_hat))
        return p, new

    # second pass: sentinel-augmented attention over regions + language slot
    y2 = concat([v_g, h1_tilde, v1_hat])
    out2 = dec.lstm2.step(y2, state.h2, state.m2)
    h2_d = dropout(out2.h, c.dropout, training, rng)
    g = sigmoid(matmul(dec.W_x, y2) + matmul(dec.W_h, state.h2))
    s = g * tanh(out2.m)
    e2 = dec.attn2.scores(h2_d, regions)
    sent_score = matmul(tanh(matmul(dec.W_s, s) + matmul(dec.W_h3, h2_d)), dec.w_a)
    alpha2 = softmax(concat([e2, reshape(sent_score, (1,))]))
    s_vis = dec.sentinel_proj(s) if dec.sentinel_proj is not None else s
    v2_hat = matmul(transpose(regions), narrow(alpha2, 0, L)) + s_vis * at(alpha2, L)
    h2_tilde = dec.W_sd(concat([h1_tilde, h2_d, v2_hat]))
    p = softmax(dec.out(h2_tilde))

    trace = state.trace
    if trace is not None:
        trace = trace + (TraceRow(alpha2.data.copy(),
                                  np.asarray([alpha2.data[L]])),)
    new = DaState(out1.h, out1.m, out2.h, out2.m, state.step + 1,
                  state.feats, trace, draft=(h1_tilde, v1_hat))
    return p, new


def da_first_pass_distribution(dec: DeliberateDecoder, state: DaState) -> Tensor:
    """Auxiliary draft-word distribution from the latest step's first pass."""
    if dec.first_head is None:
        raise ConfigError("the first-pass head is disabled in this configuration")
    if state.draft is None:
        raise ContractError("no step has been taken from this state yet")
    h1_tilde, v1_hat = state.draft
    return softmax(dec.first_head(concat([h1_tilde, v1_hat])))
