"""On-the-fly example sampling, the joint detection/length loss, the
warmup-decay schedule, and the training loop with checkpointing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .confnet import ConfusionNetwork, CorpusRecord, Query, Segment, Window, chunk
from .detector import segment_logits
from .encoder import EncoderModel, save_checkpoint
from .errors import SamplingError, TrainingDiverged
from .optim import AdamState, adam_step

_RESAMPLE_BUDGET = 200


@dataclass
class Schedule:
    """Piecewise-linear learning rate: 0 -> peak over the warmup, then back
    to 0 at total_steps."""

    warmup_steps: int
    total_steps: int
    peak_lr: float

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 < warmup ({self.warmup_steps}) < total ({self.total_steps})")


def lr(step: int, schedule: Schedule) -> float:
    if step < 0:
        raise ValueError(f"negative step {step}")
    if step <= schedule.warmup_steps:
        return schedule.peak_lr * (step / schedule.warmup_steps)
    if step >= schedule.total_steps:
        return 0.0
    remaining = schedule.total_steps - step
    return schedule.peak_lr * (remaining / (schedule.total_steps - schedule.warmup_steps))


@dataclass
class TrainingExample:
    window: Window
    query: Query
    labels: np.ndarray  # (n,) float32 binary targets
    weights: np.ndarray  # (n,) float32, zero at PAD
    length_target: int
    merged: bool  # query was built by merging consecutive words


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 18000
    batch_size: int = 8
    schedule: Schedule = field(default_factory=lambda: Schedule(2000, 18000, 1e-4))
    oov_merge_prob: float = 0.3
    length_weight: float = 0.1  # weight of the squared length error
    corpus_weights: tuple[float, ...] | None = None  # sampling mix over corpora
    checkpoint_interval: int = 2000
    log_interval: int = 200


def overlap_labels(segments: list[Segment], start: float, end: float) -> np.ndarray:
    """1 where a segment overlaps [start, end] by more than half its duration."""
    labels = np.zeros(len(segments), dtype=ag.DEFAULT_DTYPE)
    for i, seg in enumerate(segments):
        if seg.duration > 0:
            inter = min(seg.end, end) - max(seg.start, start)
            if inter > 0.5 * seg.duration:
                labels[i] = 1.0
        elif start <= seg.start <= end:
            labels[i] = 1.0
    return labels


class ExampleSampler:
    """Draws training examples from one corpus with precomputed candidates.

    The merged/single decision is made first and held across retries, so the
    fraction of merged (simulated-OOV) queries matches oov_merge_prob instead
    of drifting with per-kind rejection rates.
    """

    def __init__(self, corpus: list[CorpusRecord], model: EncoderModel, oov_merge_prob: float = 0.3):
        self.corpus = corpus
        self.model = model
        self.oov_merge_prob = oov_merge_prob
        m = model.config.m_query
        self._singles: list[tuple[int, int]] = []  # (record idx, word idx)
        self._merges: list[tuple[int, int, int]] = []  # (record idx, first word, span)
        for ri, (_, transcript) in enumerate(corpus):
            words = transcript.words
            for wi, w in enumerate(words):
                if w.in_vocabulary and 0 < len(w.surface) <= m:
                    self._singles.append((ri, wi))
                for span in (2, 3):
                    if wi + span > len(words):
                        continue
                    run = words[wi:wi + span]
                    if all(x.in_vocabulary for x in run) and sum(len(x.surface) for x in run) <= m:
                        self._merges.append((ri, wi, span))
        if not self._singles:
            raise SamplingError("no utterance has an in-vocabulary word short enough to sample")

    def sample(self, rng: np.random.Generator) -> TrainingExample:
        merged = bool(self._merges) and rng.random() < self.oov_merge_prob
        for _ in range(_RESAMPLE_BUDGET):
            if merged:
                ri, first, span = self._merges[rng.integers(len(self._merges))]
                last = first + span - 1
            else:
                ri, first = self._singles[rng.integers(len(self._singles))]
                last = first
            example = self._build(ri, first, last, merged, rng)
            if example is not None:
                return example
        raise SamplingError(f"could not sample a valid example in {_RESAMPLE_BUDGET} tries")

    def _build(self, ri: int, first: int, last: int, merged: bool, rng: np.random.Generator):
        cn, transcript = self.corpus[ri]
        cfg = self.model.config
        surface = "".join(transcript.words[k].surface for k in range(first, last + 1))
        start, end = transcript.words[first].start, transcript.words[last].end
        labels_full = overlap_labels(cn.segments, start, end)
        hot = np.flatnonzero(labels_full)
        if hot.size == 0:
            return None
        window = _window_around(cn, int(hot[0]), int(hot[-1]), cfg.n_input, self.model.inventory, rng)
        labels = np.zeros(cfg.n_input, dtype=ag.DEFAULT_DTYPE)
        body = min(cfg.n_input, len(cn.segments) - window.start_index)
        labels[:body] = labels_full[window.start_index:window.start_index + body]
        if labels.sum() == 0:
            return None
        return TrainingExample(
            window=window,
            query=Query(
                graphemes=[self.model.inventory.id(ch) for ch in surface],
                lang=cn.lang,
                query_id=f"{cn.lang}:{surface}",
            ),
            labels=labels,
            weights=(~window.pad).astype(ag.DEFAULT_DTYPE),
            length_target=int(labels.sum()),
            merged=merged,
        )


def sample_example(corpus: list[CorpusRecord], rng: np.random.Generator, model: EncoderModel,
                   oov_merge_prob: float = 0.3) -> TrainingExample:
    """One-shot convenience wrapper around ExampleSampler."""
    return ExampleSampler(corpus, model, oov_merge_prob).sample(rng)


def _window_around(cn: ConfusionNetwork, first_hot: int, last_hot: int, n: int, inventory,
                   rng: np.random.Generator) -> Window:
    total = len(cn.segments)
    if total <= n:
        start = 0
    else:
        lo = max(0, last_hot - n + 1)
        hi = min(first_hot, total - n)
        start = int(rng.integers(lo, hi + 1)) if hi >= lo else max(0, min(first_hot, total - n))
    shifted = ConfusionNetwork(utt=cn.utt, lang=cn.lang, segments=cn.segments[start:start + n])
    window = chunk(shifted, n, 0, inventory)[0]
    return Window(utt=cn.utt, lang=cn.lang, segments=window.segments, pad=window.pad, start_index=start)


def example_loss(model: EncoderModel, example: TrainingExample, length_weight: float = 0.1,
                 training: bool = True) -> ag.Tensor:
    """Masked-mean BCE over segments plus weighted squared length error."""
    hyp = model.encode_hypothesis(example.window.segments, training=training)
    q, l_hat = model.encode_query(example.query, training=training)
    logits = segment_logits(hyp, q, model.alpha, model.beta)
    bce = ag.bce_with_logits(logits, example.labels, example.weights)
    err = l_hat - float(example.length_target)
    return bce + ag.sum_all(err * err) * length_weight


@dataclass
class TrainResult:
    losses: list[float]
    checkpoints: list[str]
    corpus_draws: list[int]  # how many examples each corpus supplied


def train(model: EncoderModel, corpora: list[list[CorpusRecord]], cfg: TrainConfig,
          checkpoint_dir=None, log=print) -> TrainResult:
    """Run sample -> forward -> loss -> backward -> Adam for cfg.steps steps.

    ``corpora`` holds one record list per language/source; each example draws
    its corpus from the configured mix (uniform by default; no language
    identifier reaches the model). Deterministic under a fixed seed. Aborts
    on a non-finite loss after checkpointing the prior state.
    """
    if not corpora or not any(corpora):
        raise SamplingError("train needs at least one nonempty corpus")
    weights = np.asarray(cfg.corpus_weights if cfg.corpus_weights else [1.0] * len(corpora), dtype=np.float64)
    if len(weights) != len(corpora) or (weights < 0).any() or weights.sum() == 0:
        raise ValueError("corpus_weights must be nonnegative, one per corpus, not all zero")
    weights = weights / weights.sum()

    rng = np.random.default_rng(cfg.seed)
    samplers = [ExampleSampler(corpus, model, cfg.oov_merge_prob) for corpus in corpora]
    adam = AdamState.for_params(model.params)
    result = TrainResult(losses=[], checkpoints=[], corpus_draws=[0] * len(corpora))

    def save(step: int) -> None:
        if checkpoint_dir is None:
            return
        path = Path(checkpoint_dir) / f"step{step:07d}.npz"
        save_checkpoint(model, path)
        result.checkpoints.append(str(path))

    save(0)
    # per-example matrices are small; BLAS thread fan-out costs more than it buys
    with threadpool_limits(limits=1):
        for step in range(cfg.steps):
            batch_losses = []
            for _ in range(cfg.batch_size):
                pick = int(rng.choice(len(samplers), p=weights))
                result.corpus_draws[pick] += 1
                example = samplers[pick].sample(rng)
                batch_losses.append(example_loss(model, example, cfg.length_weight, training=True))
            total = batch_losses[0]
            for extra in batch_losses[1:]:
                total = total + extra
            total = total * (1.0 / cfg.batch_size)
            loss_value = total.item()
            if not math.isfinite(loss_value):
                save(step)
                raise TrainingDiverged(step, f"non-finite loss at step {step}; prior state checkpointed")
            total.backward()
            adam_step(model.params, adam, lr(step, cfg.schedule))
            result.losses.append(loss_value)
            if cfg.log_interval and step % cfg.log_interval == 0:
                log(f"step {step}: loss {loss_value:.4f} lr {lr(step, cfg.schedule):.2e}")
            if cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0:
                save(step + 1)
    if cfg.steps and checkpoint_dir is not None and (
        cfg.checkpoint_interval == 0 or cfg.steps % cfg.checkpoint_interval != 0
    ):
        save(cfg.steps)
    return result
