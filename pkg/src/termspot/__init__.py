"""Spoken term detection over grapheme confusion networks.

Two convolutional Transformer encoders (optionally sharing their stack)
project recognition hypotheses and text queries into one embedding space;
a calibrated dot product yields per-segment probabilities, minimum-length
span detection yields scored hits, and term-weighted value metrics score
the result.
"""

from .autograd import ParameterSet, Tensor
from .confnet import (
    AlignedTranscript,
    ConfusionNetwork,
    GraphemeInventory,
    Query,
    Segment,
    Word,
    chunk,
    featurize,
    load_corpus,
    save_corpus,
)
from .detector import Hit, HypothesisIndex, find_hits, per_segment_probs, search
from .encoder import EncoderConfig, EncoderModel, build_band_mask, count_params, load_checkpoint, save_checkpoint
from .estimator import SpokenTermDetector
from .metrics import RefOccurrence, TwvConfig, evaluate, match, mtwv, twv
from .synth import SynthConfig, gen_synthetic, write_corpus_files
from .trainer import Schedule, TrainConfig, lr, sample_example, train

__version__ = "0.1.0"

__all__ = [
    "AlignedTranscript",
    "ConfusionNetwork",
    "EncoderConfig",
    "EncoderModel",
    "GraphemeInventory",
    "Hit",
    "HypothesisIndex",
    "ParameterSet",
    "Query",
    "RefOccurrence",
    "Schedule",
    "Segment",
    "SpokenTermDetector",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "TwvConfig",
    "Word",
    "build_band_mask",
    "chunk",
    "count_params",
    "evaluate",
    "featurize",
    "find_hits",
    "gen_synthetic",
    "load_checkpoint",
    "load_corpus",
    "lr",
    "match",
    "mtwv",
    "per_segment_probs",
    "sample_example",
    "save_checkpoint",
    "save_corpus",
    "search",
    "train",
    "twv",
    "write_corpus_files",
]
