"""Hierarchical LSTM caption decoders with adaptive attention.

Desk-scale, self-contained: a float64 autodiff tensor core, LSTM layers,
temporal/spatial/adaptive/parallel attention, six decoder variants plus a
two-pass deliberation decoder, MLE and reward training, beam search, and
BLEU / ROUGE-L / CIDEr evaluation.
"""

from .attention import (
    AdaptiveGate, AdditiveAttention, adaptive_blend, mean_pool,
    parallel_adaptive_blend, spatial_attend, temporal_attend,
)
from .da import DaConfig, DeliberateDecoder, da_first_pass_distribution, da_step
from .data import (
    BOS_ID, EOS_ID, PAD_ID, UNK_ID, CaptionBatch, Dataset, FeatureSet,
    Vocabulary, build_vocab, load_features, synth_dataset, truncate_captions,
)
from .decoders import (
    DecoderConfig, HierarchicalDecoder, TwoStreamDecoder, build_variant,
    two_stream_fuse,
)
from .layers import Embedding, Linear, LstmCell, dropout
from .metrics import TokenizedCorpus, bleu, cider, evaluate_corpus, rouge_l
from .optim import adadelta_update, adam_lr, adam_update, clip_gradients
from .search import beam_search, greedy_decode
from .tensor import Tape, Tensor, backward
from .training import (
    ContrastiveEncoder, RewardConfig, TrainConfig, contrastive_loss, mle_loss,
    reward_gradient_step, train,
)

__version__ = "0.1.0"
