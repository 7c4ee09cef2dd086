"""Shared verification harness: tiny decoder instances and gradient probes.

Used by the ``gradcheck`` CLI subcommand and by the acceptance suite, so
both run the identical check.
"""

from __future__ import annotations

import numpy as np

from .da import DaConfig, DeliberateDecoder
from .data import BOS_ID, EOS_ID, CaptionBatch, FeatureSet
from .decoders import DecoderConfig, TwoStreamDecoder, build_variant
from .gradcheck import check_gradients
from .training import mle_loss

GRADCHECK_VARIANTS = ("basic", "hlstmat_temporal", "hlstmat_spatial", "conf",
                      "para", "two_stream", "da")

__all__ = ["GRADCHECK_VARIANTS", "tiny_decoder", "tiny_features", "tiny_caption",
           "decoder_gradcheck"]


def tiny_features(rng: np.random.Generator, frames: int, dim: int,
                  motion_dim: int, region_dim: int, global_dim: int,
                  segments: int = 3) -> FeatureSet:
    return FeatureSet(
        temporal=rng.standard_normal((frames, dim)),
        spatial=rng.standard_normal((frames, region_dim)),
        motion=rng.standard_normal((segments, motion_dim)),
        global_vec=rng.standard_normal(global_dim),
    )


def tiny_decoder(variant: str, hidden: int = 8, vocab_size: int = 12,
                 seed: int = 0):
    """A desk-scale decoder plus matching feature dims for probing.

    Feature widths track the blend constraints: variants with the scalar
    gate need the attended context as wide as the hidden state, conf
    splits that width across the two feature kinds.
    """
    if variant == "da":
        cfg = DaConfig(vocab_size=vocab_size, hidden_dim=hidden, embed_dim=hidden,
                       attn_dim=hidden - 1, region_dim=hidden - 2,
                       global_dim=hidden - 3, first_pass_head=True, seed=seed)
        return DeliberateDecoder(cfg), {"dim": hidden, "motion_dim": hidden,
                                        "region_dim": hidden - 2,
                                        "global_dim": hidden - 3}
    feature_dim, motion_dim = hidden, hidden
    if variant == "conf":
        feature_dim = hidden // 2
        motion_dim = hidden - feature_dim
    cfg = DecoderConfig(vocab_size=vocab_size, hidden_dim=hidden, embed_dim=hidden,
                        attn_dim=hidden - 1, feature_dim=feature_dim,
                        motion_dim=motion_dim, seed=seed)
    dims = {"dim": feature_dim, "motion_dim": motion_dim,
            "region_dim": feature_dim, "global_dim": hidden}
    return build_variant(variant, cfg), dims


def tiny_caption(rng: np.random.Generator, vocab_size: int, words: int = 3) -> list[int]:
    body = rng.integers(4, vocab_size, size=words).tolist()
    return [BOS_ID] + [int(t) for t in body] + [EOS_ID]


def decoder_gradcheck(variant: str, hidden: int = 8, vocab_size: int = 12,
                      frames: int = 4, words: int = 2, seed: int = 0,
                      eps: float = 1e-5) -> float:
    """Max relative error of the teacher-forced MLE gradient vs central
    finite differences, over every parameter of the variant."""
    rng = np.random.default_rng(seed)
    decoder, dims = tiny_decoder(variant, hidden, vocab_size, seed)
    feats = tiny_features(rng, frames, dims["dim"], dims["motion_dim"],
                          dims["region_dim"], dims["global_dim"])
    tokens = tiny_caption(rng, vocab_size, words)
    batch = CaptionBatch.from_id_seqs([tokens])

    def loss_builder():
        lp = decoder.forward_teacher_forced(feats, tokens)
        return mle_loss(lp, batch)

    return check_gradients(loss_builder, decoder.parameters(), eps)
