"""Turn encoder outputs into calibrated per-segment probabilities, find
qualifying spans, and run windowed search with cross-window deduplication.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import autograd as ag
from .autograd import Tensor
from .confnet import ConfusionNetwork, CorpusRecord, Query, Window, chunk
from .encoder import EncoderModel
from .errors import DataError


def segment_logits(hyp: Tensor, query: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
    """Pre-sigmoid score per segment: alpha * max_k(R_i . Q_k) + beta.

    Differentiable; the training loss consumes these logits directly.
    """
    return alpha * ag.rowmax(ag.matmul(hyp, ag.transpose(query))) + beta


@dataclass
class SegmentProbs:
    """Calibrated probabilities for one window, with time bookkeeping."""

    r: np.ndarray  # (n,) in [0, 1]
    pad: np.ndarray  # (n,) bool; padded positions are excluded from detection
    starts: np.ndarray  # (n,) segment start seconds
    ends: np.ndarray  # (n,) segment end seconds
    utt: str = ""
    start_index: int = 0  # absolute index of position 0 in the utterance


def per_segment_probs(hyp: Tensor, query: Tensor, alpha, beta, window: Window | None = None) -> SegmentProbs:
    """Apply the calibrated dot-product scoring to frozen encoder outputs."""
    r_data = hyp.data if isinstance(hyp, Tensor) else np.asarray(hyp)
    q_data = query.data if isinstance(query, Tensor) else np.asarray(query)
    a = float(np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha).reshape(-1)[0])
    b = float(np.asarray(beta.data if isinstance(beta, Tensor) else beta).reshape(-1)[0])
    z = a * (r_data @ q_data.T).max(axis=1) + b
    r = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    n = r.shape[0]
    if window is not None:
        starts = np.array([s.start for s in window.segments])
        ends = np.array([s.end for s in window.segments])
        return SegmentProbs(r=r, pad=window.pad.copy(), starts=starts, ends=ends,
                            utt=window.utt, start_index=window.start_index)
    return SegmentProbs(r=r, pad=np.zeros(n, dtype=bool), starts=np.zeros(n), ends=np.zeros(n))


class Span(NamedTuple):
    i: int
    j: int
    score: float


@dataclass
class Hit:
    """A putative occurrence of a query inside one utterance."""

    query_id: str
    utt: str
    i: int  # first segment index (absolute, within the utterance)
    j: int  # last segment index, inclusive
    score: float
    start: float  # seconds
    end: float


def find_hits(probs: SegmentProbs, min_len: int, threshold: float) -> list[Span]:
    """Best qualifying sub-span of every maximal above-threshold run.

    A run is a maximal block of consecutive non-pad positions with
    r > threshold. Within a run of length >= min_len, all sub-spans of
    length >= min_len compete and the highest mean probability wins;
    ties prefer the longer span, then the smaller start index.
    """
    if min_len < 1:
        raise ValueError(f"min_len must be >= 1, got {min_len}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    active = (probs.r > threshold) & ~probs.pad
    spans: list[Span] = []
    n = len(active)
    pos = 0
    while pos < n:
        if not active[pos]:
            pos += 1
            continue
        end = pos
        while end + 1 < n and active[end + 1]:
            end += 1
        run_len = end - pos + 1
        if run_len >= min_len:
            spans.append(_best_subspan(probs.r, pos, end, min_len))
        pos = end + 1
    return spans


_TIE_EPS = 1e-9  # score differences below this are rounding noise, not preference


def _best_subspan(r: np.ndarray, lo: int, hi: int, min_len: int) -> Span:
    prefix = np.concatenate([[0.0], np.cumsum(r[lo:hi + 1], dtype=np.float64)])
    best = None
    # longer spans first, then smaller start: ties resolve in arrival order
    for length in range(hi - lo + 1, min_len - 1, -1):
        for i in range(lo, hi - length + 2):
            mean = (prefix[i - lo + length] - prefix[i - lo]) / length
            if best is None or mean > best[0] + _TIE_EPS:
                best = (mean, i, i + length - 1)
    mean, i, j = best
    return Span(i=i, j=j, score=float(mean))


# ---------------------------------------------------------------------------
# windowed search


@dataclass
class EncodedWindow:
    window: Window
    hyp: np.ndarray  # (n, d) frozen hypothesis embeddings


class HypothesisIndex:
    """Precomputed hypothesis embeddings, reusable across queries."""

    def __init__(self, windows: list[EncodedWindow]):
        self.windows = windows

    @classmethod
    def build(cls, model: EncoderModel, corpus: list[CorpusRecord], overlap: int | None = None) -> "HypothesisIndex":
        # default: a quarter window (64 segments at the full-scale N=256)
        if overlap is None:
            overlap = model.config.n_input // 4
        encoded = []
        with threadpool_limits(limits=1):
            for cn, _ in corpus:
                for window in chunk(cn, model.config.n_input, overlap, model.inventory):
                    hyp = model.encode_hypothesis(window.segments, training=False)
                    encoded.append(EncodedWindow(window=window, hyp=hyp.data))
        return cls(encoded)


def minimum_length(l_hat: float, length_scale: float = 1.0) -> int:
    """Turn the regressed length estimate into the span-length floor."""
    return max(1, round(length_scale * l_hat))


def search(model: EncoderModel, corpus_or_index, query: Query, threshold: float = 0.5,
           length_scale: float = 1.0, overlap: int | None = None) -> list[Hit]:
    """Find all putative hits of one query, sorted by descending score."""
    if isinstance(corpus_or_index, HypothesisIndex):
        index = corpus_or_index
    else:
        index = HypothesisIndex.build(model, corpus_or_index, overlap=overlap)
    q, l_hat = model.encode_query(query, training=False)
    min_len = minimum_length(float(l_hat.item()), length_scale)
    hits: list[Hit] = []
    for enc in index.windows:
        probs = per_segment_probs(enc.hyp, q.data, model.alpha, model.beta, window=enc.window)
        for span in find_hits(probs, min_len, threshold):
            hits.append(Hit(
                query_id=query.query_id,
                utt=enc.window.utt,
                i=enc.window.start_index + span.i,
                j=enc.window.start_index + span.j,
                score=span.score,
                start=float(probs.starts[span.i]),
                end=float(probs.ends[span.j]),
            ))
    hits = deduplicate(hits)
    hits.sort(key=lambda h: (-h.score, h.utt, h.start))
    return hits


def deduplicate(hits: list[Hit], overlap_frac: float = 0.5) -> list[Hit]:
    """Collapse duplicate detections from overlapping windows.

    Two hits on the same utterance are duplicates when their time intervals
    overlap by more than ``overlap_frac`` of the shorter one; the higher
    score is kept.
    """
    kept: list[Hit] = []
    for hit in sorted(hits, key=lambda h: (-h.score, h.utt, h.start)):
        duplicate = False
        for other in kept:
            if other.utt != hit.utt:
                continue
            inter = min(hit.end, other.end) - max(hit.start, other.start)
            shorter = max(min(hit.end - hit.start, other.end - other.start), 1e-9)
            if inter > overlap_frac * shorter:
                duplicate = True
                break
        if not duplicate:
            kept.append(hit)
    return kept


# ---------------------------------------------------------------------------
# hit list I/O


def save_hits(hits: list[Hit], path) -> None:
    with open(path, "w") as f:
        for h in hits:
            f.write(json.dumps({
                "query": h.query_id, "utt": h.utt,
                "start": round(h.start, 6), "end": round(h.end, 6),
                "score": round(h.score, 6),
            }) + "\n")


def load_hits(path) -> list[Hit]:
    hits = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read hit list {path}: {e}") from e
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            hits.append(Hit(query_id=obj["query"], utt=obj["utt"], i=-1, j=-1,
                            score=float(obj["score"]), start=float(obj["start"]), end=float(obj["end"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}:{lineno}: malformed hit record: {e}") from e
    return hits
