"""Grapheme confusion networks, aligned transcripts, queries, and their I/O.

Corpus files are JSONL, one utterance per line:

    {"utt": str, "lang": str,
     "segments": [{"alts": [[symbol, posterior], ...], "start": s, "dur": s}],
     "words": [{"w": str, "start": s, "end": s, "iv": bool}]}

Grapheme inventory files are JSON: {"lang": [symbols...]}. The special
symbols "<pad>", "<cls>", and "<eps>" are implicit and shared across
languages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, matmul
from .errors import DataError

PAD = "<pad>"
CLS = "<cls>"
EPS = "<eps>"
_SPECIALS = (PAD, CLS, EPS)

_TIME_SLACK = 1e-6


class GraphemeInventory:
    """Symbol/id mapping: shared specials first, then per-language symbols.

    The multilingual inventory is the union of the per-language inventories;
    a symbol appearing in several languages gets a single id.
    """

    def __init__(self, languages: dict[str, list[str]]):
        self.languages = {lang: list(syms) for lang, syms in languages.items()}
        self._symbols: list[str] = list(_SPECIALS)
        self._ids: dict[str, int] = {s: i for i, s in enumerate(self._symbols)}
        for lang, syms in self.languages.items():
            for s in syms:
                if s in _SPECIALS:
                    raise DataError(f"language '{lang}' redefines special symbol {s!r}")
                if s not in self._ids:
                    self._ids[s] = len(self._symbols)
                    self._symbols.append(s)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def cls_id(self) -> int:
        return 1

    @property
    def eps_id(self) -> int:
        return 2

    def __len__(self) -> int:
        return len(self._symbols)

    def id(self, symbol: str) -> int:
        try:
            return self._ids[symbol]
        except KeyError:
            raise DataError(f"unknown grapheme symbol {symbol!r}") from None

    def symbol(self, idx: int) -> str:
        return self._symbols[idx]

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._ids

    def encode_text(self, text: str, lang: str) -> list[int]:
        """Map a surface form to grapheme ids, one per character."""
        return [self.id(ch) for ch in text]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.languages, ensure_ascii=False, indent=1))

    @classmethod
    def load(cls, path) -> "GraphemeInventory":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read inventory {path}: {e}") from e
        if not isinstance(raw, dict) or not all(isinstance(v, list) for v in raw.values()):
            raise DataError(f"inventory {path}: expected {{lang: [symbols...]}}")
        return cls(raw)


@dataclass
class Segment:
    """One time slot of a confusion network: weighted grapheme alternatives."""

    alternatives: list[tuple[int, float]]
    start: float
    duration: float

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass
class ConfusionNetwork:
    utt: str
    lang: str
    segments: list[Segment]


@dataclass
class Word:
    surface: str
    start: float
    end: float
    in_vocabulary: bool


@dataclass
class AlignedTranscript:
    utt: str
    words: list[Word]


@dataclass
class Query:
    """A searched term as a grapheme-id sequence."""

    graphemes: list[int]
    lang: str
    query_id: str = ""

    def __len__(self) -> int:
        return len(self.graphemes)


CorpusRecord = tuple[ConfusionNetwork, AlignedTranscript]


def validate_segment(seg: Segment, where: str = "") -> None:
    if not seg.alternatives:
        raise DataError(f"{where}: segment has no alternatives")
    total = 0.0
    for sym_id, post in seg.alternatives:
        if not 0.0 < post <= 1.0:
            raise DataError(f"{where}: posterior {post} outside (0, 1]")
        total += post
    if total > 1.0 + 1e-6:
        raise DataError(f"{where}: posteriors sum to {total:.6f} > 1")
    if seg.duration < 0:
        raise DataError(f"{where}: negative duration {seg.duration}")


def validate_network(cn: ConfusionNetwork, where: str = "") -> None:
    prev_end = -np.inf
    for i, seg in enumerate(cn.segments):
        validate_segment(seg, f"{where or cn.utt}: segment {i}")
        if seg.start + _TIME_SLACK < prev_end:
            raise DataError(f"{where or cn.utt}: segment {i} starts at {seg.start} before previous end {prev_end}")
        prev_end = seg.end


def validate_transcript(tr: AlignedTranscript, where: str = "") -> None:
    prev_start = -np.inf
    for i, w in enumerate(tr.words):
        if w.end <= w.start:
            raise DataError(f"{where or tr.utt}: word {i} ({w.surface!r}) has end {w.end} <= start {w.start}")
        if w.start < prev_start:
            raise DataError(f"{where or tr.utt}: word {i} out of time order")
        prev_start = w.start


def _record_to_json(cn: ConfusionNetwork, tr: AlignedTranscript, inventory: GraphemeInventory) -> dict:
    # times stay full precision: JSON round-trips floats exactly, and rounding
    # start/duration independently can break the segment-ordering invariant
    return {
        "utt": cn.utt,
        "lang": cn.lang,
        "segments": [
            {
                "alts": [[inventory.symbol(i), float(p)] for i, p in seg.alternatives],
                "start": seg.start,
                "dur": seg.duration,
            }
            for seg in cn.segments
        ],
        "words": [
            {"w": w.surface, "start": w.start, "end": w.end, "iv": w.in_vocabulary}
            for w in tr.words
        ],
    }


def _record_from_json(obj: dict, inventory: GraphemeInventory, where: str) -> CorpusRecord:
    try:
        utt = obj["utt"]
        lang = obj["lang"]
        segments = []
        for si, s in enumerate(obj["segments"]):
            alts = []
            for sym, post in s["alts"]:
                if sym not in inventory:
                    raise DataError(f"{where}: segment {si}: unknown grapheme symbol {sym!r}")
                alts.append((inventory.id(sym), float(post)))
            segments.append(Segment(alternatives=alts, start=float(s["start"]), duration=float(s["dur"])))
        words = [
            Word(surface=w["w"], start=float(w["start"]), end=float(w["end"]), in_vocabulary=bool(w["iv"]))
            for w in obj["words"]
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{where}: malformed record: {e}") from e
    cn = ConfusionNetwork(utt=utt, lang=lang, segments=segments)
    tr = AlignedTranscript(utt=utt, words=words)
    validate_network(cn, where)
    validate_transcript(tr, where)
    return cn, tr


def load_corpus(path, inventory: GraphemeInventory) -> list[CorpusRecord]:
    """Read and validate a JSONL corpus; errors carry file and line number."""
    records = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read corpus {path}: {e}") from e
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{where}: invalid JSON: {e}") from e
        records.append(_record_from_json(obj, inventory, where))
    return records


def save_corpus(records: list[CorpusRecord], path, inventory: GraphemeInventory) -> None:
    with open(path, "w") as f:
        for cn, tr in records:
            f.write(json.dumps(_record_to_json(cn, tr, inventory), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# featurization


def featurize(segment: Segment, inventory: GraphemeInventory, embedding_table: Tensor, duration_vec: Tensor) -> Tensor:
    """Map one segment to its input vector.

    The result is a single-row (1, d) tensor: the posterior-weighted sum of
    the alternatives' embeddings plus the learned duration direction scaled
    by the segment duration in seconds. Differentiable w.r.t. both parameter
    tensors.
    """
    vocab, _ = embedding_table.shape
    posteriors = np.zeros((1, vocab), dtype=embedding_table.dtype)
    for sym_id, post in segment.alternatives:
        if not 0 <= sym_id < vocab:
            raise DataError(f"grapheme id {sym_id} outside embedding table of size {vocab}")
        posteriors[0, sym_id] += post
    durs = np.array([[segment.duration]], dtype=embedding_table.dtype)
    return matmul(Tensor(posteriors), embedding_table) + matmul(Tensor(durs), duration_vec)


def featurize_window(segments: list[Segment], embedding_table: Tensor, duration_vec: Tensor) -> Tensor:
    """Batched featurize over a window: returns an (n, d) tensor."""
    vocab, _ = embedding_table.shape
    n = len(segments)
    posteriors = np.zeros((n, vocab), dtype=embedding_table.dtype)
    durs = np.zeros((n, 1), dtype=embedding_table.dtype)
    for i, seg in enumerate(segments):
        for sym_id, post in seg.alternatives:
            if not 0 <= sym_id < vocab:
                raise DataError(f"grapheme id {sym_id} outside embedding table of size {vocab}")
            posteriors[i, sym_id] += post
        durs[i, 0] = seg.duration
    return matmul(Tensor(posteriors), embedding_table) + matmul(Tensor(durs), duration_vec)


# ---------------------------------------------------------------------------
# windowing


@dataclass
class Window:
    """A fixed-length slice of a confusion network, PAD-filled at the tail."""

    utt: str
    lang: str
    segments: list[Segment]
    pad: np.ndarray  # bool, True at PAD positions
    start_index: int  # absolute index of segments[0] in the source network

    def __len__(self) -> int:
        return len(self.segments)


def _pad_segment(pad_id: int, at_time: float) -> Segment:
    return Segment(alternatives=[(pad_id, 1.0)], start=at_time, duration=0.0)


def chunk(cn: ConfusionNetwork, n: int, overlap: int, inventory: GraphemeInventory) -> list[Window]:
    """Slice a network into windows of exactly n segments, stride n - overlap.

    The last window is PAD-filled and its padding marked; absolute time
    offsets are preserved because segments keep their own start times.
    """
    if not n > overlap >= 0:
        raise ValueError(f"need n > overlap >= 0, got n={n}, overlap={overlap}")
    total = len(cn.segments)
    if total == 0:
        return []
    stride = n - overlap
    windows = []
    start = 0
    while True:
        body = cn.segments[start:start + n]
        pad = np.zeros(n, dtype=bool)
        if len(body) < n:
            pad[len(body):] = True
            tail_time = body[-1].end if body else 0.0
            body = body + [_pad_segment(inventory.pad_id, tail_time)] * (n - len(body))
        windows.append(Window(utt=cn.utt, lang=cn.lang, segments=body, pad=pad, start_index=start))
        if start + n >= total:
            break
        start += stride
    return windows
