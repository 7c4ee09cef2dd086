"""Losses, reward-based fine-tuning, and the two-stage training driver.

Stage 1 minimizes the teacher-forced negative log-likelihood with early
stopping on a validation metric.  Stage 2 (optional) fine-tunes with a
policy gradient: sample a caption, score it against a greedy-decoded
baseline, and push log-probs in proportion to the reward advantage.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import metrics
from .checkpoint import load_checkpoint, save_checkpoint
from .da import DaConfig, DeliberateDecoder
from .data import (
    BOS_ID, EOS_ID, CaptionBatch, Dataset, FeatureSet, Vocabulary, tokenize,
)
from .decoders import DecoderConfig, TwoStreamDecoder, build_variant
from .errors import ConfigError, ContractError, EmptyInputError, ShapeError
from .layers import Embedding, Linear, LstmCell
from .optim import (
    adadelta_update, adam_lr, adam_update, clip_gradients, opt_state_arrays,
    opt_state_from_arrays, zero_grads,
)
from .search import greedy_decode
from .tensor import Tape, Tensor, at, backward, log, matmul, pick_per_row, relu, sqrt, sum_all, zeros

__all__ = [
    "mle_loss", "ContrastiveEncoder", "contrastive_loss",
    "RewardConfig", "reward_gradient_step", "make_cider_reward",
    "TrainConfig", "TrainResult", "train", "parse_config_file",
]


def mle_loss(log_probs, targets: CaptionBatch) -> Tensor:
    """Negative log-likelihood over unmasked steps, averaged over the batch.

    ``log_probs`` is one (T, vocab) tensor for a single-sample batch or a
    sequence of them, one per sample; padded steps contribute exactly 0.
    """
    if isinstance(log_probs, Tensor):
        log_probs = [log_probs]
    if len(log_probs) != len(targets):
        raise ShapeError(f"{len(log_probs)} log-prob matrices for {len(targets)} captions")
    total = None
    for b, lp in enumerate(log_probs):
        if lp.data.shape[0] != targets.steps:
            raise ShapeError(
                f"log-probs cover {lp.data.shape[0]} steps but captions have {targets.steps}")
        picked = pick_per_row(lp, targets.tokens[b, 1:])
        masked = picked * Tensor(targets.target_mask(b))
        sample_loss = -sum_all(masked)
        total = sample_loss if total is None else total + sample_loss
    return total * (1.0 / len(targets))


class ContrastiveEncoder:
    """Caption/image encoders with projections into a shared cosine space."""

    def __init__(self, vocab_size: int, embed_dim: int, rnn_hidden: int,
                 image_dim: int, joint_dim: int = 1024, margin: float = 0.2,
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        self.margin = margin
        self.rnn_hidden = rnn_hidden
        self.embed = Embedding(vocab_size, embed_dim, rng)
        self.cell = LstmCell(embed_dim, rnn_hidden, rng)
        self.W_v = Linear(image_dim, joint_dim, rng, bias=False)
        self.W_c = Linear(rnn_hidden, joint_dim, rng, bias=False)

    def encode_caption(self, token_ids) -> Tensor:
        h = zeros(self.rnn_hidden)
        m = zeros(self.rnn_hidden)
        for t in token_ids:
            out = self.cell.step(self.embed.lookup_one(int(t)), h, m)
            h, m = out.h, out.m
        return self.W_c(h)

    def encode_image(self, image_vec) -> Tensor:
        v = image_vec if isinstance(image_vec, Tensor) else Tensor(image_vec)
        return self.W_v(v)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, layer in (("embed", self.embed), ("rnn", self.cell),
                              ("W_v", self.W_v), ("W_c", self.W_c)):
            for k, v in layer.parameters().items():
                out[f"{prefix}.{k}"] = v
        return out


def _cosine(a: Tensor, b: Tensor) -> Tensor:
    num = matmul(a, b)
    return num / (sqrt(sum_all(a * a)) * sqrt(sum_all(b * b)))


def contrastive_loss(enc: ContrastiveEncoder, images, captions) -> Tensor:
    """Two hinge losses against the hardest in-batch negatives, batch mean.

    ``images`` are feature vectors, ``captions`` token-id sequences; the
    pair (images[i], captions[i]) is the positive for sample i.
    """
    n = len(images)
    if n != len(captions):
        raise ShapeError(f"{n} images vs {len(captions)} captions")
    if n < 2:
        raise ContractError("contrastive loss needs a batch of at least 2")
    fx = [enc.encode_image(v) for v in images]
    fc = [enc.encode_caption(c) for c in captions]
    sims = [[_cosine(fx[i], fc[j]) for j in range(n)] for i in range(n)]
    total = None
    for i in range(n):
        pos = sims[i][i]
        hard_c = max((j for j in range(n) if j != i), key=lambda j: float(sims[i][j].data))
        hard_x = max((j for j in range(n) if j != i), key=lambda j: float(sims[j][i].data))
        term = (relu(enc.margin + sims[i][hard_c] - pos)
                + relu(enc.margin + sims[hard_x][i] - pos))
        total = term if total is None else total + term
    return total * (1.0 / n)


@dataclass
class RewardConfig:
    """How to score sampled captions during reward fine-tuning.

    ``reward_fn(tokens, refs)`` maps a generated token-id sequence and the
    sample's reference strings to a scalar reward.  Sampling is plain
    ancestral sampling at temperature 1; the baseline is the greedy decode.
    """

    reward_fn: Callable[[list[int], list[str]], float]
    rng: np.random.Generator
    max_len: int = 30


def make_cider_reward(vocab: Vocabulary, corpus_refs: list[list[str]],
                      contrastive: Callable[[list[int]], float] | None = None):
    """Reward = CIDEr of the caption against its references, with document
    frequencies taken from the whole reference corpus; optionally minus a
    contrastive penalty."""
    ref_tokens = [[tokenize(r) for r in refs] for refs in corpus_refs]

    def reward(tokens: list[int], refs: list[str]) -> float:
        cand = vocab.decode(tokens)
        here = [tokenize(r) for r in refs]
        corpus = metrics.TokenizedCorpus([cand], [here], df_refs=ref_tokens)
        value = metrics.cider(corpus)
        if contrastive is not None:
            value -= contrastive(tokens)
        return value

    return reward


def _sample_caption(decoder, features, rng, max_len):
    """Ancestral sampling; returns (tokens, list of per-step log-prob tensors)."""
    state = decoder.init_state(features)
    tok = BOS_ID
    tokens: list[int] = []
    terms = []
    for _ in range(max_len):
        p, state = decoder.step(state, tok)
        probs = p.data / p.data.sum()
        nxt = int(rng.choice(len(probs), p=probs))
        terms.append(log(at(p, nxt)))
        if nxt == EOS_ID:
            break
        tokens.append(nxt)
        tok = nxt
    return tokens, terms


def reward_gradient_step(decoder, features, refs, cfg: RewardConfig) -> float:
    """One self-critical update: accumulate the policy gradient, return the
    reward advantage of the sampled caption over the greedy baseline."""
    if refs is not None and len(refs) == 0:
        raise EmptyInputError("reward fine-tuning needs at least one reference")
    baseline = greedy_decode(decoder, features, max_len=cfg.max_len)
    with Tape():
        tokens, terms = _sample_caption(decoder, features, cfg.rng, cfg.max_len)
        advantage = cfg.reward_fn(tokens, refs) - cfg.reward_fn(baseline.tokens, refs)
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        backward(total * (-advantage))
    return advantage


# ---------------------------------------------------------------------------
# training driver

_CONFIG_DEFAULTS = {
    "variant": "hlstmat_temporal",
    "data_dir": "",
    "hidden_dim": 512, "embed_dim": 512, "attn_dim": 512,
    "optimizer": "adadelta", "lr": 5e-4, "rho": 0.95, "eps": 1e-6,
    "lr_decay": 0.8, "lr_decay_every": 15,
    "epochs": 500, "patience": 20, "batch_size": 64,
    "dropout": 0.5, "clip": 10.0, "seed": 0,
    "val_metric": "cider",  # cider | bleu4 | loss
    "max_len": 30, "beam_size": 5,
    "checkpoint": "", "log_path": "", "resume": "",
    "rl_epochs": 0, "rl_lr": 5e-4,
}

_INT_KEYS = {"hidden_dim", "embed_dim", "attn_dim", "epochs", "patience",
             "batch_size", "seed", "max_len", "beam_size", "rl_epochs",
             "lr_decay_every"}
_FLOAT_KEYS = {"lr", "rho", "eps", "dropout", "clip", "rl_lr", "lr_decay"}


def parse_config_file(path) -> dict[str, str]:
    """Line-based ``key = value`` files; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


@dataclass
class TrainConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = dict(_CONFIG_DEFAULTS)
        for k, v in self.values.items():
            if k not in merged:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = v
        for k in _INT_KEYS:
            merged[k] = int(merged[k])
        for k in _FLOAT_KEYS:
            merged[k] = float(merged[k])
        self.values = merged

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        values = dict(overrides or {})
        values.update(parse_config_file(path))  # the file wins over flags
        return cls(values)


@dataclass
class TrainResult:
    history: list[dict]
    best_val: float
    checkpoint_path: str
    decoder: object
    vocab: Vocabulary


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # per-epoch stream so a resumed run replays the same shuffles and masks
    return np.random.default_rng([seed, epoch])


def _build_decoder(cfg: TrainConfig, vocab: Vocabulary, probe: FeatureSet):
    if cfg.variant == "da":
        da = DaConfig(vocab_size=len(vocab), hidden_dim=cfg.hidden_dim,
                      embed_dim=cfg.embed_dim, attn_dim=cfg.attn_dim,
                      region_dim=probe.require("spatial").shape[1],
                      global_dim=probe.require("global").shape[0],
                      dropout=cfg.dropout, seed=cfg.seed)
        return DeliberateDecoder(da)
    feature_dim = probe.require("temporal").shape[1]
    motion_dim = probe.motion.shape[1] if probe.motion is not None else None
    dc = DecoderConfig(vocab_size=len(vocab), hidden_dim=cfg.hidden_dim,
                       embed_dim=cfg.embed_dim, attn_dim=cfg.attn_dim,
                       feature_dim=feature_dim, motion_dim=motion_dim,
                       dropout=cfg.dropout, seed=cfg.seed)
    return build_variant(cfg.variant, dc)


def _sample_losses(decoder, features, batch: CaptionBatch, training, rng):
    """Per-batch mean loss tensor; two-stream sums its per-stream losses."""
    if isinstance(decoder, TwoStreamDecoder):
        lps = decoder.stream_teacher_forced(features, batch.tokens[0], training, rng)
        return mle_loss(lps[0], batch) + mle_loss(lps[1], batch)
    lp = decoder.forward_teacher_forced(features, batch.tokens[0], training, rng)
    return mle_loss(lp, batch)


def _val_score(cfg, decoder, dataset, vocab, split="val") -> float:
    samples = dataset.splits.get(split) or dataset.splits["train"]
    if cfg.val_metric == "loss":
        total = 0.0
        for s in samples:
            feats = dataset.features(s)
            ids = vocab.wrap(tokenize(s.refs[0]))
            lp = decoder.forward_teacher_forced(feats, ids)
            total += float(mle_loss(lp, CaptionBatch.from_id_seqs([ids])).data)
        return -total / len(samples)  # higher is better, like the metrics
    cands, refs = [], []
    for s in samples:
        feats = dataset.features(s)
        gen = greedy_decode(decoder, feats, max_len=cfg.max_len)
        cands.append(vocab.decode(gen.tokens))
        refs.append([tokenize(r) for r in s.refs])
    corpus = metrics.TokenizedCorpus(cands, refs)
    if cfg.val_metric == "cider":
        return metrics.cider(corpus)
    if cfg.val_metric == "bleu4":
        return metrics.bleu(corpus, 4)
    raise ConfigError(f"unknown val_metric {cfg.val_metric!r}")


def train(cfg: TrainConfig) -> TrainResult:
    """Stage-1 MLE training with early stopping; optional stage-2 rewards.

    Seeded end to end: parameter init, sample order and dropout masks all
    derive from cfg.seed, so one configuration reproduces bit-identical
    epoch losses.
    """
    if not cfg.data_dir:
        raise ConfigError("config must set data_dir")
    dataset = Dataset.load(cfg.data_dir)
    vocab = Vocabulary.load(Path(cfg.data_dir) / "vocab.json")
    train_samples = dataset.splits["train"]
    probe = dataset.features(train_samples[0])
    decoder = _build_decoder(cfg, vocab, probe)
    params = decoder.parameters()

    opt_state: dict = {}
    start_epoch = 0
    best_val = -np.inf
    stale = 0
    if cfg.resume:
        variant, arrays = load_checkpoint(cfg.resume)
        if variant != getattr(decoder, "variant", cfg.variant):
            raise ConfigError(f"checkpoint variant {variant!r} != configured {cfg.variant!r}")
        for name, p in params.items():
            p.data[...] = arrays[name]
        opt_state = opt_state_from_arrays(
            {k[len("opt/"):]: v for k, v in arrays.items() if k.startswith("opt/")})
        start_epoch = int(arrays["meta/epoch"]) + 1
        best_val = float(arrays["meta/best_val"])
        stale = int(arrays["meta/stale"])

    feats_cache = [dataset.features(s) for s in train_samples]
    ids_cache = [vocab.wrap(tokenize(s.refs[0])) for s in train_samples]

    history: list[dict] = []
    ckpt_path = cfg.checkpoint or str(Path(cfg.data_dir) / "model.ckpt")

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        rng = _epoch_rng(cfg.seed, epoch)
        order = rng.permutation(len(train_samples))
        lr = adam_lr(cfg.lr, epoch, cfg.lr_decay, cfg.lr_decay_every)
        epoch_loss = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            chunk = order[lo:lo + cfg.batch_size]
            zero_grads(params)
            batch_loss = 0.0
            for bi in chunk:
                batch = CaptionBatch.from_id_seqs([ids_cache[bi]])
                with Tape():
                    loss = _sample_losses(decoder, feats_cache[bi], batch, True, rng)
                    backward(loss * (1.0 / len(chunk)))
                batch_loss += float(loss.data)
            clip_gradients(params, cfg.clip)
            if cfg.optimizer == "adadelta":
                adadelta_update(params, opt_state, cfg.rho, cfg.eps)
            elif cfg.optimizer == "adam":
                adam_update(params, opt_state, lr)
            else:
                raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")
            epoch_loss += batch_loss
        epoch_loss /= len(train_samples)

        val = _val_score(cfg, decoder, dataset, vocab)
        improved = val > best_val
        if improved:
            best_val = val
            stale = 0
            _save(ckpt_path, cfg, decoder, params, opt_state, epoch, best_val, stale)
        else:
            stale += 1
        entry = {"epoch": epoch, "loss": epoch_loss, "val_metric": val,
                 "lr": lr if cfg.optimizer == "adam" else None,
                 "wall_time": time.perf_counter() - t0}
        history.append(entry)
        if cfg.log_path:
            with open(cfg.log_path, "a") as fh:
                fh.write(json.dumps(entry) + "\n")
        if cfg.patience and stale >= cfg.patience:
            break

    if cfg.rl_epochs > 0:
        _reward_stage(cfg, decoder, params, dataset, vocab, history, ckpt_path)

    return TrainResult(history, best_val, ckpt_path, decoder, vocab)


def _reward_stage(cfg, decoder, params, dataset, vocab, history, ckpt_path):
    reward = make_cider_reward(vocab, [s.refs for s in dataset.splits["train"]])
    opt_state: dict = {}
    train_samples = dataset.splits["train"]
    feats_cache = [dataset.features(s) for s in train_samples]
    for epoch in range(cfg.rl_epochs):
        rng = _epoch_rng(cfg.seed + 1_000_003, epoch)
        rcfg = RewardConfig(reward_fn=reward, rng=rng, max_len=cfg.max_len)
        t0 = time.perf_counter()
        adv_sum = 0.0
        for i, s in enumerate(train_samples):
            zero_grads(params)
            adv_sum += reward_gradient_step(decoder, feats_cache[i], s.refs, rcfg)
            clip_gradients(params, cfg.clip)
            adam_update(params, opt_state, cfg.rl_lr)
        entry = {"epoch": cfg.epochs + epoch, "loss": None,
                 "val_metric": adv_sum / len(train_samples), "lr": cfg.rl_lr,
                 "wall_time": time.perf_counter() - t0}
        history.append(entry)
        if cfg.log_path:
            with open(cfg.log_path, "a") as fh:
                fh.write(json.dumps(entry) + "\n")
    _save(ckpt_path, cfg, decoder, params, {}, cfg.epochs + cfg.rl_epochs - 1,
          history[-1]["val_metric"], 0)


def _save(path, cfg, decoder, params, opt_state, epoch, best_val, stale):
    arrays = {name: p.data for name, p in params.items()}
    for k, v in opt_state_arrays(opt_state).items():
        arrays[f"opt/{k}"] = v
    arrays["meta/epoch"] = np.asarray(float(epoch))
    arrays["meta/best_val"] = np.asarray(float(best_val))
    arrays["meta/stale"] = np.asarray(float(stale))
    for dim in ("hidden_dim", "embed_dim", "attn_dim"):
        arrays[f"meta/{dim}"] = np.asarray(float(getattr(cfg, dim)))
    save_checkpoint(path, getattr(decoder, "variant", "unknown"), arrays)
