"""Term-Weighted Value scoring: hit/reference matching, ATWV at a fixed
threshold, and MTWV via a sweep over the observed score levels.

Uses the NIST STD 2006 convention: TWV = 1 - mean over queries of
(P_miss + beta * P_FA) with beta = 999.9 and one trial per second of speech.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .detector import Hit
from .errors import DataError, EvalError


@dataclass
class RefOccurrence:
    query_id: str
    utt: str
    start: float
    end: float

    def __post_init__(self):
        if self.end <= self.start:
            raise DataError(f"reference for {self.query_id!r} in {self.utt!r}: end {self.end} <= start {self.start}")


@dataclass
class TwvConfig:
    beta: float = 999.9
    trials_per_second: float = 1.0
    match_overlap: float = 0.5  # fraction of the reference duration
    total_speech_seconds: float = 0.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.total_speech_seconds <= 0:
            raise ValueError("total_speech_seconds must be > 0")


@dataclass
class QueryCounts:
    n_ref: int = 0
    n_correct: int = 0
    n_fa: int = 0

    @property
    def n_miss(self) -> int:
        return self.n_ref - self.n_correct


def match(hits: list[Hit], refs: list[RefOccurrence], cfg: TwvConfig) -> dict[str, QueryCounts]:
    """Greedy one-to-one alignment of hits to references, per query.

    Hits are taken in descending score order; a hit may claim any still
    unclaimed reference on the same utterance whose temporal overlap is at
    least ``match_overlap`` of the reference duration (largest overlap
    first). Unmatched hits are false alarms, unmatched references misses.
    """
    counts: dict[str, QueryCounts] = {}
    by_query_refs: dict[str, list[RefOccurrence]] = {}
    for ref in refs:
        by_query_refs.setdefault(ref.query_id, []).append(ref)
        counts.setdefault(ref.query_id, QueryCounts()).n_ref += 1

    claimed: set[int] = set()
    for hit in sorted(hits, key=lambda h: (-h.score, h.utt, h.start)):
        c = counts.setdefault(hit.query_id, QueryCounts())
        best = None
        for ref in by_query_refs.get(hit.query_id, []):
            if id(ref) in claimed or ref.utt != hit.utt:
                continue
            inter = min(hit.end, ref.end) - max(hit.start, ref.start)
            if inter >= cfg.match_overlap * (ref.end - ref.start):
                if best is None or inter > best[0]:
                    best = (inter, ref)
        if best is None:
            c.n_fa += 1
        else:
            claimed.add(id(best[1]))
            c.n_correct += 1
    return counts


def twv(hits: list[Hit], refs: list[RefOccurrence], cfg: TwvConfig, threshold: float) -> float:
    """Term-Weighted Value with hits filtered to score >= threshold.

    Averaged over queries that have at least one reference; queries without
    references contribute only their false alarms to nothing (excluded, per
    standard practice).
    """
    kept = [h for h in hits if h.score >= threshold]
    counts = match(kept, refs, cfg)
    scored = {q: c for q, c in counts.items() if c.n_ref > 0}
    if not scored:
        raise EvalError("no query has references; TWV undefined")
    trials = cfg.trials_per_second * cfg.total_speech_seconds
    total = 0.0
    for c in scored.values():
        p_miss = c.n_miss / c.n_ref
        p_fa = c.n_fa / (trials - c.n_ref)
        total += p_miss + cfg.beta * p_fa
    return 1.0 - total / len(scored)


def mtwv(hits: list[Hit], refs: list[RefOccurrence], cfg: TwvConfig) -> tuple[float, float]:
    """Maximum TWV over the observed score levels.

    Sweeps the sorted distinct hit scores plus one level above the maximum
    (the empty hit set); returns the best value and the smallest threshold
    achieving it.
    """
    if not hits:
        raise EvalError("mtwv needs a nonempty hit list")
    levels = sorted({h.score for h in hits})
    levels.append(math.nextafter(levels[-1], math.inf))
    best_value, best_threshold = -math.inf, levels[0]
    for level in levels:
        value = twv(hits, refs, cfg, level)
        if value > best_value:
            best_value, best_threshold = value, level
    return best_value, best_threshold


def det_points(hits: list[Hit], refs: list[RefOccurrence], cfg: TwvConfig) -> list[tuple[float, float, float]]:
    """(threshold, mean P_miss, mean P_FA) rows across the score sweep."""
    levels = sorted({h.score for h in hits})
    trials = cfg.trials_per_second * cfg.total_speech_seconds
    rows = []
    for level in levels:
        counts = match([h for h in hits if h.score >= level], refs, cfg)
        scored = {q: c for q, c in counts.items() if c.n_ref > 0}
        if not scored:
            continue
        p_miss = sum(c.n_miss / c.n_ref for c in scored.values()) / len(scored)
        p_fa = sum(c.n_fa / (trials - c.n_ref) for c in scored.values()) / len(scored)
        rows.append((level, p_miss, p_fa))
    return rows


def evaluate(hits: list[Hit], refs: list[RefOccurrence], cfg: TwvConfig, threshold: float = 0.5) -> dict:
    """Full report: ATWV at the given threshold, MTWV, per-query counts."""
    best, best_threshold = mtwv(hits, refs, cfg) if hits else (0.0, threshold)
    atwv = twv(hits, refs, cfg, threshold)
    counts = match([h for h in hits if h.score >= threshold], refs, cfg)
    trials = cfg.trials_per_second * cfg.total_speech_seconds
    per_query = {}
    for q, c in sorted(counts.items()):
        entry = {"n_ref": c.n_ref, "n_correct": c.n_correct, "n_fa": c.n_fa, "n_miss": c.n_miss}
        if c.n_ref > 0:
            entry["p_miss"] = c.n_miss / c.n_ref
            entry["p_fa"] = c.n_fa / (trials - c.n_ref)
        per_query[q] = entry
    return {
        "atwv": atwv,
        "atwv_threshold": threshold,
        "mtwv": best,
        "mtwv_threshold": best_threshold,
        "per_query": per_query,
    }


# ---------------------------------------------------------------------------
# reference list I/O


def save_refs(refs: list[RefOccurrence], path, texts: dict[str, str] | None = None) -> None:
    with open(path, "w") as f:
        for r in refs:
            obj = {"query": r.query_id, "utt": r.utt, "start": round(r.start, 6), "end": round(r.end, 6)}
            if texts and r.query_id in texts:
                obj["text"] = texts[r.query_id]
            f.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_refs(path) -> list[RefOccurrence]:
    refs = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read reference list {path}: {e}") from e
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            refs.append(RefOccurrence(query_id=obj["query"], utt=obj["utt"],
                                      start=float(obj["start"]), end=float(obj["end"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, DataError) as e:
            raise DataError(f"{path}:{lineno}: malformed reference record: {e}") from e
    return refs
