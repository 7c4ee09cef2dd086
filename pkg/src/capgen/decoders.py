"""Caption decoders built on the hierarchical two-LSTM design.

Variants share one step pipeline: the bottom LSTM reads the previous word
embedding, the top LSTM refines the bottom hidden state, additive
attention pools visual features with the bottom hidden as query, a gate
mixes the attended context with the top hidden state, and a two-layer MLP
emits the word distribution.  ``build_variant`` wires the six published
configurations: a single-LSTM baseline, temporal/spatial attention,
concatenation fusion, parallel adaptive attention, and two fused streams.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .attention import (
    AdaptiveGate, AdditiveAttention, TraceRow, adaptive_blend, mean_pool,
    parallel_adaptive_blend,
)
from .data import BOS_ID, FeatureSet
from .errors import ConfigError, ContractError, ShapeError
from .layers import Embedding, Linear, LstmCell, dropout
from .tensor import Tensor, concat, log, softmax, stack_rows, tanh, zeros

__all__ = [
    "DecoderConfig", "DecoderState", "TwoStreamState",
    "BasicDecoder", "HierarchicalDecoder", "ParallelDecoder", "TwoStreamDecoder",
    "build_variant", "two_stream_fuse", "VARIANTS",
]

VARIANTS = ("basic", "hlstmat_temporal", "hlstmat_spatial", "conf", "para", "two_stream")


@dataclass
class DecoderConfig:
    vocab_size: int
    hidden_dim: int = 512
    embed_dim: int = 512
    attn_dim: int = 512
    feature_dim: int = 512      # width of the attended (appearance) features
    motion_dim: int | None = None  # second feature width for conf/para/two_stream
    output_hidden: str = "bottom"  # which hidden feeds the word MLP: bottom|top
    use_adaptive_gate: bool = True  # False realizes the gate-free ablation
    dropout: float = 0.0
    stream_features: tuple[str, str] = ("temporal", "motion")
    seed: int = 0

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class DecoderState:
    """Immutable per-step decoder state; step() returns a fresh one."""
    h: Tensor
    m: Tensor
    h_top: Tensor
    m_top: Tensor
    step: int
    feats: tuple
    trace: Optional[tuple]


def _nearest_segment_rows(frames: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Map each frame to the temporally nearest motion segment's feature."""
    n_frames, n_seg = frames.shape[0], segments.shape[0]
    if n_frames == 1:
        idx = np.zeros(1, dtype=int)
    else:
        idx = np.rint(np.arange(n_frames) * (n_seg - 1) / (n_frames - 1)).astype(int)
    return segments[idx]


class _MlpHead:
    """Word MLP: softmax(U_p tanh(W_p x + b_p) + d)."""

    def __init__(self, in_dim, hidden_dim, vocab_size, rng):
        self.out_hidden = Linear(in_dim, hidden_dim, rng)
        self.out_vocab = Linear(hidden_dim, vocab_size, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return softmax(self.out_vocab(tanh(self.out_hidden(x))))

    def parameters(self):
        out = {}
        for k, v in self.out_hidden.parameters().items():
            out[f"out_hidden.{k}"] = v
        for k, v in self.out_vocab.parameters().items():
            out[f"out_vocab.{k}"] = v
        return out


def _merge(prefix: str, params: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in params.items()}


class BasicDecoder:
    """Single-LSTM baseline: the mean-pooled feature vector is concatenated
    to the word embedding at every step; no attention, no gate."""

    variant = "basic"

    def __init__(self, config: DecoderConfig):
        self.config = config
        rng = config.rng()
        c = config
        self.embed = Embedding(c.vocab_size, c.embed_dim, rng)
        self.cell = LstmCell(c.embed_dim + c.feature_dim, c.hidden_dim, rng)
        self.head = _MlpHead(c.hidden_dim, c.hidden_dim, c.vocab_size, rng)

    def init_state(self, features: FeatureSet, record_trace: bool = False) -> DecoderState:
        frames = Tensor(features.require("temporal"))
        vbar = mean_pool(frames)
        h = zeros(self.config.hidden_dim)
        m = zeros(self.config.hidden_dim)
        return DecoderState(h, m, h, m, 0, (vbar,), () if record_trace else None)

    def step(self, state: DecoderState, token_id: int,
             training: bool = False, rng=None):
        c = self.config
        (vbar,) = state.feats
        y = concat([self.embed.lookup_one(token_id), vbar])
        out = self.cell.step(y, state.h, state.m)
        h_d = dropout(out.h, c.dropout, training, rng)
        p = self.head(h_d)
        trace = state.trace
        if trace is not None:
            trace = trace + (TraceRow(np.ones(1), np.ones(1)),)
        new = DecoderState(out.h, out.m, out.h, out.m, state.step + 1,
                           state.feats, trace)
        return p, new

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(_merge("embed", self.embed.parameters()))
        out.update(_merge("lstm", self.cell.parameters()))
        out.update(self.head.parameters())
        return out

    def forward_teacher_forced(self, features, tokens, training=False, rng=None):
        return _teacher_forced(self, features, tokens, training, rng)


class HierarchicalDecoder:
    """Two-LSTM decoder with additive attention and the adaptive gate.

    ``attend_kind`` picks the attention source: "temporal" frames,
    "spatial" regions, or "fused" frame+motion concatenation.  With
    ``use_adaptive_gate=False`` the gate is removed and the attended
    context feeds the word MLP directly (the gate-free ablation).
    """

    def __init__(self, config: DecoderConfig, attend_kind: str = "temporal"):
        if attend_kind not in ("temporal", "spatial", "fused"):
            raise ConfigError(f"unknown attention source {attend_kind!r}")
        self.config = config
        self.attend_kind = attend_kind
        self.variant = {"temporal": "hlstmat_temporal", "spatial": "hlstmat_spatial",
                        "fused": "conf"}[attend_kind]
        c = config
        ctx_dim = c.feature_dim
        if attend_kind == "fused":
            if c.motion_dim is None:
                raise ConfigError("conf decoder needs motion_dim")
            ctx_dim = c.feature_dim + c.motion_dim
        if c.use_adaptive_gate and ctx_dim != c.hidden_dim:
            raise ConfigError(
                f"adaptive gate blends the attended context (dim {ctx_dim}) with the top "
                f"hidden state (dim {c.hidden_dim}); these must match")
        self.ctx_dim = ctx_dim
        rng = config.rng()
        self.embed = Embedding(c.vocab_size, c.embed_dim, rng)
        self.bottom = LstmCell(c.embed_dim, c.hidden_dim, rng)
        self.top = LstmCell(c.hidden_dim, c.hidden_dim, rng)
        self.init_h = Linear(ctx_dim, c.hidden_dim, rng, bias=False)
        self.init_m = Linear(ctx_dim, c.hidden_dim, rng, bias=False)
        self.attn = AdditiveAttention(c.hidden_dim, ctx_dim, c.attn_dim, rng)
        self.gate = AdaptiveGate(c.hidden_dim, rng) if c.use_adaptive_gate else None
        self.head = _MlpHead(c.hidden_dim + ctx_dim, c.hidden_dim, c.vocab_size, rng)
        # ablation hook: force the gate to a constant (e.g. 1.0 = visual only)
        self.gate_override: float | None = None

    def _source(self, features: FeatureSet) -> np.ndarray:
        if self.attend_kind == "temporal":
            return features.require("temporal")
        if self.attend_kind == "spatial":
            return features.require("spatial")
        frames = features.require("temporal")
        motion = features.require("motion")
        return np.concatenate([frames, _nearest_segment_rows(frames, motion)], axis=1)

    def init_state(self, features: FeatureSet, record_trace: bool = False) -> DecoderState:
        source = Tensor(self._source(features))
        vbar = mean_pool(source)
        h = self.init_h(vbar)
        m = self.init_m(vbar)
        c = self.config
        return DecoderState(h, m, zeros(c.hidden_dim), zeros(c.hidden_dim), 0,
                            (source,), () if record_trace else None)

    def step(self, state: DecoderState, token_id: int,
             training: bool = False, rng=None):
        c = self.config
        (source,) = state.feats
        y = self.embed.lookup_one(token_id)
        bot = self.bottom.step(y, state.h, state.m)
        h_d = dropout(bot.h, c.dropout, training, rng)
        top = self.top.step(h_d, state.h_top, state.m_top)
        ht_d = dropout(top.h, c.dropout, training, rng)
        ctx, alpha = self.attn.attend(h_d, source)
        if self.gate is not None:
            blended, beta = adaptive_blend(self.gate, h_d, ctx, ht_d,
                                           force=self.gate_override)
            beta_val = beta.data.reshape(-1).copy()
        else:
            blended = ctx
            beta_val = np.ones(1)
        out_h = h_d if c.output_hidden == "bottom" else ht_d
        p = self.head(concat([out_h, blended]))
        trace = state.trace
        if trace is not None:
            trace = trace + (TraceRow(alpha.data.copy(), beta_val),)
        new = DecoderState(bot.h, bot.m, top.h, top.m, state.step + 1,
                           state.feats, trace)
        return p, new

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(_merge("embed", self.embed.parameters()))
        out.update(_merge("bottom", self.bottom.parameters()))
        out.update(_merge("top", self.top.parameters()))
        out.update(_merge("init_h", self.init_h.parameters()))
        out.update(_merge("init_m", self.init_m.parameters()))
        out.update(_merge("attn", self.attn.parameters()))
        if self.gate is not None:
            out.update(_merge("gate", self.gate.parameters()))
        out.update(self.head.parameters())
        return out

    def forward_teacher_forced(self, features, tokens, training=False, rng=None):
        return _teacher_forced(self, features, tokens, training, rng)


class ParallelDecoder:
    """Shared decoder with two attention branches and a three-way gate.

    Appearance and motion features each get their own additive attention;
    a softmax gate weighs the two attended contexts against the top
    hidden state.  Initial state comes from the concatenated feature
    means.
    """

    variant = "para"

    def __init__(self, config: DecoderConfig):
        c = config
        if c.motion_dim is None:
            raise ConfigError("para decoder needs motion_dim")
        if not (c.feature_dim == c.motion_dim == c.hidden_dim):
            raise ConfigError(
                f"para blends appearance (dim {c.feature_dim}), motion (dim {c.motion_dim}) "
                f"and the top hidden state (dim {c.hidden_dim}); all three must match")
        self.config = config
        rng = config.rng()
        self.embed = Embedding(c.vocab_size, c.embed_dim, rng)
        self.bottom = LstmCell(c.embed_dim, c.hidden_dim, rng)
        self.top = LstmCell(c.hidden_dim, c.hidden_dim, rng)
        self.init_h = Linear(c.feature_dim + c.motion_dim, c.hidden_dim, rng, bias=False)
        self.init_m = Linear(c.feature_dim + c.motion_dim, c.hidden_dim, rng, bias=False)
        self.attn_static = AdditiveAttention(c.hidden_dim, c.feature_dim, c.attn_dim, rng)
        self.attn_motion = AdditiveAttention(c.hidden_dim, c.motion_dim, c.attn_dim, rng)
        self.gate = AdaptiveGate(c.hidden_dim, rng, arity=3)
        self.head = _MlpHead(c.hidden_dim + c.feature_dim, c.hidden_dim, c.vocab_size, rng)

    def init_state(self, features: FeatureSet, record_trace: bool = False) -> DecoderState:
        static = Tensor(features.require("temporal"))
        motion = Tensor(features.require("motion"))
        pooled = concat([mean_pool(static), mean_pool(motion)])
        h = self.init_h(pooled)
        m = self.init_m(pooled)
        c = self.config
        return DecoderState(h, m, zeros(c.hidden_dim), zeros(c.hidden_dim), 0,
                            (static, motion), () if record_trace else None)

    def step(self, state: DecoderState, token_id: int,
             training: bool = False, rng=None):
        c = self.config
        static, motion = state.feats
        y = self.embed.lookup_one(token_id)
        bot = self.bottom.step(y, state.h, state.m)
        h_d = dropout(bot.h, c.dropout, training, rng)
        top = self.top.step(h_d, state.h_top, state.m_top)
        ht_d = dropout(top.h, c.dropout, training, rng)
        ctx1, alpha1 = self.attn_static.attend(h_d, static)
        ctx2, alpha2 = self.attn_motion.attend(h_d, motion)
        blended, betas = parallel_adaptive_blend(self.gate, h_d, ctx1, ctx2, ht_d)
        out_h = h_d if c.output_hidden == "bottom" else ht_d
        p = self.head(concat([out_h, blended]))
        trace = state.trace
        if trace is not None:
            trace = trace + (TraceRow(alpha1.data.copy(), betas.data.copy()),)
        new = DecoderState(bot.h, bot.m, top.h, top.m, state.step + 1,
                           state.feats, trace)
        return p, new

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(_merge("embed", self.embed.parameters()))
        out.update(_merge("bottom", self.bottom.parameters()))
        out.update(_merge("top", self.top.parameters()))
        out.update(_merge("init_h", self.init_h.parameters()))
        out.update(_merge("init_m", self.init_m.parameters()))
        out.update(_merge("attn_static", self.attn_static.parameters()))
        out.update(_merge("attn_motion", self.attn_motion.parameters()))
        out.update(_merge("gate", self.gate.parameters()))
        out.update(self.head.parameters())
        return out

    def forward_teacher_forced(self, features, tokens, training=False, rng=None):
        return _teacher_forced(self, features, tokens, training, rng)


def two_stream_fuse(p1: Tensor, p2: Tensor) -> Tensor:
    """Average two word distributions; stays a valid distribution."""
    if p1.shape != p2.shape:
        raise ShapeError(f"two_stream_fuse: vocab sizes differ: {p1.shape} vs {p2.shape}")
    return (p1 + p2) * 0.5


@dataclass(frozen=True)
class TwoStreamState:
    s1: DecoderState
    s2: DecoderState
    step: int

    @property
    def trace(self):
        return self.s1.trace


class TwoStreamDecoder:
    """Two independently trained decoders whose distributions are averaged.

    Each stream is a full hierarchical decoder over one feature kind.
    Training drives the streams with separate losses by default; the
    fused distribution only matters at inference (a joint-training mode
    exists for experimentation).
    """

    variant = "two_stream"

    def __init__(self, stream1: HierarchicalDecoder, stream2: HierarchicalDecoder,
                 features1: str = "temporal", features2: str = "motion"):
        self.streams = (stream1, stream2)
        self.sources = (features1, features2)

    def init_state(self, features: FeatureSet, record_trace: bool = False) -> TwoStreamState:
        s1 = self.streams[0].init_state(_select(features, self.sources[0]), record_trace)
        s2 = self.streams[1].init_state(_select(features, self.sources[1]), record_trace)
        return TwoStreamState(s1, s2, 0)

    def step(self, state: TwoStreamState, token_id: int,
             training: bool = False, rng=None):
        p1, s1 = self.streams[0].step(state.s1, token_id, training, rng)
        p2, s2 = self.streams[1].step(state.s2, token_id, training, rng)
        return two_stream_fuse(p1, p2), TwoStreamState(s1, s2, state.step + 1)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(_merge("stream1", self.streams[0].parameters()))
        out.update(_merge("stream2", self.streams[1].parameters()))
        return out

    def forward_teacher_forced(self, features, tokens, training=False, rng=None):
        """Per-step log-probs of the fused distribution (joint mode)."""
        return _teacher_forced(self, features, tokens, training, rng)

    def stream_teacher_forced(self, features, tokens, training=False, rng=None):
        """One log-prob matrix per stream, for independent training."""
        out = []
        for dec, src in zip(self.streams, self.sources):
            out.append(dec.forward_teacher_forced(
                _select(features, src), tokens, training, rng))
        return tuple(out)


def _select(features: FeatureSet, kind: str) -> FeatureSet:
    """View of one feature kind exposed under the decoder's expected slot."""
    arr = features.require(kind)
    if kind == "spatial":
        return FeatureSet(spatial=arr)
    return FeatureSet(temporal=arr)


def _teacher_forced(decoder, features, tokens, training=False, rng=None) -> Tensor:
    """Log-probs (T, vocab): step t consumes ground-truth token t-1."""
    tokens = [int(t) for t in tokens]
    if not tokens or tokens[0] != BOS_ID:
        raise ContractError("teacher forcing requires a caption starting with BOS")
    if len(tokens) < 2:
        raise ContractError("caption has no prediction steps")
    state = decoder.init_state(features)
    rows = []
    for t in range(1, len(tokens)):
        p, state = decoder.step(state, tokens[t - 1], training, rng)
        rows.append(log(p))
    return stack_rows(rows)


def build_variant(kind: str, config: DecoderConfig):
    """Construct one of the published decoder configurations."""
    if kind == "basic":
        return BasicDecoder(config)
    if kind == "hlstmat_temporal":
        return HierarchicalDecoder(config, "temporal")
    if kind == "hlstmat_spatial":
        return HierarchicalDecoder(config, "spatial")
    if kind == "conf":
        return HierarchicalDecoder(config, "fused")
    if kind == "para":
        return ParallelDecoder(config)
    if kind == "two_stream":
        src1, src2 = config.stream_features
        dim_of = {"temporal": config.feature_dim, "spatial": config.feature_dim,
                  "motion": config.motion_dim or config.feature_dim}
        cfg1 = replace(config, feature_dim=dim_of[src1], motion_dim=None, seed=config.seed)
        cfg2 = replace(config, feature_dim=dim_of[src2], motion_dim=None,
                       seed=config.seed + 1)
        attend1 = "spatial" if src1 == "spatial" else "temporal"
        attend2 = "spatial" if src2 == "spatial" else "temporal"
        return TwoStreamDecoder(HierarchicalDecoder(cfg1, attend1),
                                HierarchicalDecoder(cfg2, attend2), src1, src2)
    raise ConfigError(f"unknown decoder variant {kind!r}; expected one of {VARIANTS}")
