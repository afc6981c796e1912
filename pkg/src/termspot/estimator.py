"""Estimator-style front door: fit a detector on a corpus, predict hits.

Wraps model construction, training, search, and scoring behind the familiar
fit/predict/score surface so the system composes with sklearn tooling
(get_params/set_params/clone work as usual).
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .confnet import CorpusRecord, GraphemeInventory, Query, validate_network, validate_transcript
from .detector import Hit, HypothesisIndex, search
from .encoder import EncoderConfig, EncoderModel
from .errors import DataError
from .metrics import RefOccurrence, TwvConfig, mtwv
from .trainer import Schedule, TrainConfig, train


def check_corpus(corpus) -> list[CorpusRecord]:
    """Validate a list of (ConfusionNetwork, AlignedTranscript) records."""
    if not isinstance(corpus, (list, tuple)) or not corpus:
        raise DataError("corpus must be a nonempty list of (network, transcript) records")
    for i, record in enumerate(corpus):
        try:
            cn, tr = record
        except (TypeError, ValueError):
            raise DataError(f"corpus record {i} is not a (network, transcript) pair") from None
        validate_network(cn, f"record {i}")
        validate_transcript(tr, f"record {i}")
        if cn.utt != tr.utt:
            raise DataError(f"corpus record {i}: network utt {cn.utt!r} != transcript utt {tr.utt!r}")
    return list(corpus)


def check_queries(queries, max_len: int) -> list[Query]:
    if not isinstance(queries, (list, tuple)):
        raise DataError("queries must be a list of Query objects")
    for q in queries:
        if not isinstance(q, Query):
            raise DataError(f"expected Query, got {type(q).__name__}")
        if not 1 <= len(q) <= max_len:
            raise DataError(f"query {q.query_id!r} has {len(q)} graphemes, need 1..{max_len}")
    return list(queries)


def corpus_inventory(corpus: list[CorpusRecord]) -> GraphemeInventory:
    """Derive a per-language symbol inventory from transcript surfaces."""
    langs: dict[str, dict[str, None]] = {}
    for cn, tr in corpus:
        bucket = langs.setdefault(cn.lang, {})
        for w in tr.words:
            for ch in w.surface:
                bucket[ch] = None
    return GraphemeInventory({lang: list(syms) for lang, syms in langs.items()})


class SpokenTermDetector(BaseEstimator):
    """Trainable spoken-term detector with an estimator interface.

    fit() trains the dual encoder on a corpus of confusion networks with
    aligned transcripts; predict() returns scored hits for a query list;
    score() reports MTWV against a reference list.
    """

    def __init__(self, layers=2, heads=4, d_model=64, d_ff=256, dropout=0.15,
                 conv_width=3, conv_stride=2, mask_band=2, window=64, max_query=16,
                 share_transformer=True, mask_hypothesis=True,
                 steps=2000, batch_size=8, peak_lr=1e-4, warmup_steps=None,
                 oov_merge_prob=0.3, length_weight=0.1,
                 threshold=0.5, length_scale=1.0, search_overlap=None, seed=0):
        self.layers = layers
        self.heads = heads
        self.d_model = d_model
        self.d_ff = d_ff
        self.dropout = dropout
        self.conv_width = conv_width
        self.conv_stride = conv_stride
        self.mask_band = mask_band
        self.window = window
        self.max_query = max_query
        self.share_transformer = share_transformer
        self.mask_hypothesis = mask_hypothesis
        self.steps = steps
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.oov_merge_prob = oov_merge_prob
        self.length_weight = length_weight
        self.threshold = threshold
        self.length_scale = length_scale
        self.search_overlap = search_overlap
        self.seed = seed

    def _encoder_config(self, languages) -> EncoderConfig:
        return EncoderConfig(
            layers=self.layers, heads=self.heads, d_model=self.d_model, d_ff=self.d_ff,
            dropout=self.dropout, conv_width=self.conv_width, conv_stride=self.conv_stride,
            mask_band=self.mask_band, n_input=self.window, m_query=self.max_query,
            share_transformer=self.share_transformer, languages=tuple(languages),
            mask_hypothesis=self.mask_hypothesis,
        )

    def fit(self, corpus, y=None, inventory: GraphemeInventory | None = None):
        """Train on a corpus (list of (network, transcript) records)."""
        records = check_corpus(corpus)
        inv = inventory if inventory is not None else corpus_inventory(records)
        languages = sorted({cn.lang for cn, _ in records})
        self.model_ = EncoderModel(self._encoder_config(languages), inv, seed=self.seed)
        warmup = self.warmup_steps if self.warmup_steps else max(1, self.steps // 10)
        cfg = TrainConfig(
            seed=self.seed, steps=self.steps, batch_size=self.batch_size,
            schedule=Schedule(warmup, max(self.steps, warmup + 1), self.peak_lr),
            oov_merge_prob=self.oov_merge_prob, length_weight=self.length_weight,
            checkpoint_interval=0, log_interval=0,
        )
        by_lang = {lang: [r for r in records if r[0].lang == lang] for lang in languages}
        self.train_result_ = train(self.model_, list(by_lang.values()), cfg, checkpoint_dir=None, log=lambda s: None)
        return self

    def _require_fitted(self) -> EncoderModel:
        model = getattr(self, "model_", None)
        if model is None:
            raise NotFittedError("this SpokenTermDetector is not fitted; call fit first")
        return model

    def predict(self, corpus, queries) -> list[Hit]:
        """Search all queries over a corpus; returns hits sorted per query."""
        model = self._require_fitted()
        records = check_corpus(corpus)
        qs = check_queries(queries, model.config.m_query)
        index = HypothesisIndex.build(model, records, overlap=self.search_overlap)
        hits: list[Hit] = []
        for q in qs:
            hits.extend(search(model, index, q, threshold=self.threshold, length_scale=self.length_scale))
        return hits

    def score(self, corpus, queries, refs: list[RefOccurrence]) -> float:
        """MTWV of predict() output against a reference occurrence list."""
        records = check_corpus(corpus)
        hits = self.predict(records, queries)
        if not hits:
            return 0.0
        total = sum(cn.segments[-1].end for cn, _ in records if cn.segments)
        best, _ = mtwv(hits, refs, TwvConfig(total_speech_seconds=total))
        return best
