"""Synthetic corpus generation: random lexicons, utterances with word
timing, confusion-network corruption, splits, and query term selection.

The noise model is deliberately simple (independent per-segment corruption);
it exists to verify the pipeline, not to imitate a real recognizer.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .confnet import (
    AlignedTranscript,
    ConfusionNetwork,
    CorpusRecord,
    GraphemeInventory,
    Query,
    Segment,
    Word,
    save_corpus,
)
from .errors import DataError
from .metrics import RefOccurrence, save_refs

# Disjoint single-character alphabets are carved out of this pool, one slice
# per language; each language also gets its own word-boundary symbol.
_CHAR_POOL = (
    "abcdefghijklmnopqrstuvwxyz"
    "абвгдежзийклмнопрстуфхцчшщыэюя"
    "αβγδεζηθικλμνξοπρστυφχψω"
)
_SEPARATORS = "_|-~"


@dataclass
class SynthConfig:
    seed: int = 0
    languages: tuple[str, ...] = ("lang0",)
    inventory_size: int = 20  # content graphemes per language (separator excluded)
    lexicon_size: int = 50
    word_len_min: int = 3
    word_len_max: int = 7
    words_per_utterance: int = 8
    utterances: int = 200
    base_duration: float = 0.06  # seconds per grapheme
    timing_jitter: float = 0.2  # relative duration jitter
    substitution_prob: float = 0.1
    truth_in_alternatives: float = 0.75  # substituted truth survives as an alternative
    extra_alt_prob: float = 0.3
    max_alternatives: int = 3
    eps_insertion_prob: float = 0.02
    posterior_concentration: float = 8.0
    dev_fraction: float = 0.15
    test_fraction: float = 0.15
    query_terms: int = 30  # in-lexicon terms per evaluation split
    oov_terms: int = 15  # merged-pair terms per evaluation split

    def __post_init__(self):
        for name in ("substitution_prob", "truth_in_alternatives", "extra_alt_prob",
                     "eps_insertion_prob", "dev_fraction", "test_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"synth config: {name}={v} outside [0, 1]")
        if self.dev_fraction + self.test_fraction > 1.0:
            raise DataError("synth config: dev and test fractions sum past 1")
        if not 1 <= self.word_len_min <= self.word_len_max:
            raise DataError("synth config: bad word length range")
        if self.max_alternatives < 1:
            raise DataError("synth config: max_alternatives must be >= 1")
        needed = len(self.languages) * (self.inventory_size)
        if needed > len(_CHAR_POOL) or len(self.languages) > len(_SEPARATORS):
            raise DataError("synth config: inventory too large for the character pool")
        self.languages = tuple(self.languages)


@dataclass
class Language:
    name: str
    content: str  # content graphemes
    separator: str
    lexicon: list[str]


@dataclass
class SynthCorpus:
    inventory: GraphemeInventory
    languages: list[Language]
    train: list[CorpusRecord]
    dev: list[CorpusRecord]
    test: list[CorpusRecord]
    dev_terms: list[dict]
    test_terms: list[dict]
    dev_refs: list[RefOccurrence]
    test_refs: list[RefOccurrence]


def _build_language(cfg: SynthConfig, index: int, rng: np.random.Generator) -> Language:
    offset = index * cfg.inventory_size
    content = _CHAR_POOL[offset:offset + cfg.inventory_size]
    lexicon: list[str] = []
    seen = set()
    guard = 0
    while len(lexicon) < cfg.lexicon_size:
        guard += 1
        if guard > 100 * cfg.lexicon_size:
            raise DataError("synth: cannot build a lexicon of unique words; enlarge the inventory")
        length = int(rng.integers(cfg.word_len_min, cfg.word_len_max + 1))
        word = "".join(content[i] for i in rng.integers(0, len(content), size=length))
        if word not in seen:
            seen.add(word)
            lexicon.append(word)
    return Language(name=cfg.languages[index], content=content, separator=_SEPARATORS[index], lexicon=lexicon)


def _noisy_segment(true_sym: str, lang: Language, cfg: SynthConfig, rng: np.random.Generator,
                   start: float, dur: float, inventory: GraphemeInventory) -> Segment:
    corrupt = rng.random() < cfg.substitution_prob
    pool = lang.content
    n_extra = int(rng.binomial(cfg.max_alternatives - 1, cfg.extra_alt_prob)) if cfg.max_alternatives > 1 else 0
    if corrupt and n_extra == 0 and rng.random() < cfg.truth_in_alternatives:
        n_extra = 1
    symbols = []
    if corrupt:
        wrong = true_sym
        while wrong == true_sym:
            wrong = pool[int(rng.integers(len(pool)))]
        symbols.append(wrong)
        rest = n_extra
        if rest and rng.random() < cfg.truth_in_alternatives:
            symbols.append(true_sym)
            rest -= 1
        for _ in range(rest):
            symbols.append(pool[int(rng.integers(len(pool)))])
    else:
        symbols.append(true_sym)
        for _ in range(n_extra):
            symbols.append(pool[int(rng.integers(len(pool)))])
    if len(symbols) == 1:
        if cfg.substitution_prob == 0 and cfg.extra_alt_prob == 0:
            posts = np.array([1.0])
        else:
            posts = np.array([rng.uniform(0.85, 0.9999)])
    else:
        alpha = [cfg.posterior_concentration] + [1.0] * (len(symbols) - 1)
        posts = np.maximum(rng.dirichlet(alpha), 1e-4)
        posts = posts / posts.sum() * 0.9999
    alts = [(inventory.id(s), float(p)) for s, p in zip(symbols, posts)]
    return Segment(alternatives=alts, start=start, duration=dur)


def _make_utterance(utt_id: str, lang: Language, cfg: SynthConfig, rng: np.random.Generator,
                    inventory: GraphemeInventory) -> CorpusRecord:
    words = [lang.lexicon[int(rng.integers(len(lang.lexicon)))] for _ in range(cfg.words_per_utterance)]
    segments: list[Segment] = []
    word_records: list[Word] = []
    clock = 0.0

    def step_duration() -> float:
        return cfg.base_duration * (1.0 + cfg.timing_jitter * float(rng.uniform(-1.0, 1.0)))

    def emit(sym: str) -> tuple[float, float]:
        nonlocal clock
        if rng.random() < cfg.eps_insertion_prob:
            d = step_duration() * 0.5
            p_eps = float(rng.uniform(0.5, 0.9))
            filler = lang.content[int(rng.integers(len(lang.content)))]
            segments.append(Segment(
                alternatives=[(inventory.eps_id, p_eps), (inventory.id(filler), max(0.999 - p_eps, 1e-4))],
                start=clock, duration=d,
            ))
            clock += d
        d = step_duration()
        segments.append(_noisy_segment(sym, lang, cfg, rng, clock, d, inventory))
        clock += d
        return segments[-1].start, segments[-1].end

    for wi, word in enumerate(words):
        if wi > 0:
            emit(lang.separator)
        first = last = None
        for ch in word:
            s, e = emit(ch)
            first = s if first is None else first
            last = e
        word_records.append(Word(surface=word, start=first, end=last, in_vocabulary=True))

    cn = ConfusionNetwork(utt=utt_id, lang=lang.name, segments=segments)
    return cn, AlignedTranscript(utt=utt_id, words=word_records)


def _substring_filtered(candidates: list[tuple[str, tuple[str, ...]]], lexicon: list[str]) -> list[tuple[str, tuple[str, ...]]]:
    """Drop candidates that are substrings of each other or of other lexicon words.

    Applied per term kind: the in-lexicon and merged-pair lists are scored
    separately, so the no-substring rule holds within each list.
    """
    kept: list[tuple[str, tuple[str, ...]]] = []
    for surface, parts in sorted(candidates, key=lambda c: (-len(c[0]), c[0])):
        if any(surface != w and surface in w for w in lexicon):
            continue
        if any(surface in other and surface != other for other, _ in kept):
            continue
        kept.append((surface, parts))
    return kept


def _select_terms(split: list[CorpusRecord], lang: Language, cfg: SynthConfig,
                  rng: np.random.Generator) -> tuple[list[dict], list[RefOccurrence]]:
    """Pick evaluation terms occurring in the split and collect references."""
    single_counts: dict[str, int] = {}
    pair_counts: dict[tuple[str, str], int] = {}
    for _, tr in split:
        for i, w in enumerate(tr.words):
            single_counts[w.surface] = single_counts.get(w.surface, 0) + 1
            if i + 1 < len(tr.words):
                pair = (w.surface, tr.words[i + 1].surface)
                pair_counts[pair] = pair_counts.get(pair, 0) + 1

    pair_surfaces: dict[str, list[tuple[str, str]]] = {}
    for (a, b) in pair_counts:
        if len(a) + len(b) <= 16 and (a + b) not in single_counts:
            pair_surfaces.setdefault(a + b, []).append((a, b))
    single_candidates = [(s, (s,)) for s in single_counts]
    # pair surfaces readable as two different word splits are ambiguous; skip them
    pair_candidates = [(s, ps[0]) for s, ps in pair_surfaces.items() if len(ps) == 1]
    singles = _substring_filtered(single_candidates, lang.lexicon)
    pairs = _substring_filtered(pair_candidates, lang.lexicon)
    rng.shuffle(singles)
    rng.shuffle(pairs)
    chosen = [(s, p, "iv") for s, p in singles[:cfg.query_terms]]
    chosen += [(s, p, "oov") for s, p in pairs[:cfg.oov_terms]]

    terms = []
    refs = []
    for surface, parts, kind in chosen:
        qid = f"{lang.name}:{surface}"
        terms.append({
            "query": qid,
            "lang": lang.name,
            "text": surface,
            "graphemes": list(surface),
            "kind": kind,
        })
        for _, tr in split:
            for i in range(len(tr.words) - len(parts) + 1):
                if all(tr.words[i + k].surface == parts[k] for k in range(len(parts))):
                    refs.append(RefOccurrence(query_id=qid, utt=tr.utt,
                                              start=tr.words[i].start, end=tr.words[i + len(parts) - 1].end))
    return terms, refs


def gen_synthetic(cfg: SynthConfig) -> SynthCorpus:
    """Build corpora, splits, and query term/reference lists in memory."""
    rng = np.random.default_rng(cfg.seed)
    languages = [_build_language(cfg, i, rng) for i in range(len(cfg.languages))]
    inventory = GraphemeInventory({l.name: list(l.content) + [l.separator] for l in languages})

    train: list[CorpusRecord] = []
    dev: list[CorpusRecord] = []
    test: list[CorpusRecord] = []
    per_lang_split: dict[str, dict[str, list[CorpusRecord]]] = {}
    for lang in languages:
        records = [
            _make_utterance(f"{lang.name}-{i:04d}", lang, cfg, rng, inventory)
            for i in range(cfg.utterances)
        ]
        order = rng.permutation(cfg.utterances)
        n_test = round(cfg.utterances * cfg.test_fraction)
        n_dev = round(cfg.utterances * cfg.dev_fraction)
        test_ids = {int(i) for i in order[:n_test]}
        dev_ids = {int(i) for i in order[n_test:n_test + n_dev]}
        split = {
            "train": [r for i, r in enumerate(records) if i not in test_ids and i not in dev_ids],
            "dev": [r for i, r in enumerate(records) if i in dev_ids],
            "test": [r for i, r in enumerate(records) if i in test_ids],
        }
        per_lang_split[lang.name] = split
        train += split["train"]
        dev += split["dev"]
        test += split["test"]

    dev_terms: list[dict] = []
    test_terms: list[dict] = []
    dev_refs: list[RefOccurrence] = []
    test_refs: list[RefOccurrence] = []
    for lang in languages:
        t, r = _select_terms(per_lang_split[lang.name]["dev"], lang, cfg, rng)
        dev_terms += t
        dev_refs += r
        t, r = _select_terms(per_lang_split[lang.name]["test"], lang, cfg, rng)
        test_terms += t
        test_refs += r

    return SynthCorpus(
        inventory=inventory,
        languages=languages,
        train=train,
        dev=dev,
        test=test,
        dev_terms=dev_terms,
        test_terms=test_terms,
        dev_refs=dev_refs,
        test_refs=test_refs,
    )


def save_terms(terms: list[dict], path) -> None:
    with open(path, "w") as f:
        for t in terms:
            f.write(json.dumps(t, ensure_ascii=False) + "\n")


def load_terms(path, inventory: GraphemeInventory) -> list[Query]:
    queries = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read query list {path}: {e}") from e
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            graphemes = [inventory.id(s) for s in obj["graphemes"]]
            specials = {inventory.pad_id, inventory.cls_id}
            if any(g in specials for g in graphemes):
                raise DataError(f"{path}:{lineno}: query {obj['query']!r} contains reserved symbols")
            queries.append(Query(graphemes=graphemes, lang=obj["lang"], query_id=obj["query"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}:{lineno}: malformed query record: {e}") from e
    return queries


def write_corpus_files(corpus: SynthCorpus, out_dir, cfg: SynthConfig) -> dict[str, str]:
    """Write all generated artifacts under out_dir; returns name -> path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    corpus.inventory.save(out / "inventory.json")
    paths["inventory"] = str(out / "inventory.json")
    for name, records in (("train", corpus.train), ("dev", corpus.dev), ("test", corpus.test)):
        p = out / f"{name}.jsonl"
        save_corpus(records, p, corpus.inventory)
        paths[name] = str(p)
    texts = {t["query"]: t["text"] for t in corpus.dev_terms + corpus.test_terms}
    for name, terms, refs in (("dev", corpus.dev_terms, corpus.dev_refs),
                              ("test", corpus.test_terms, corpus.test_refs)):
        tp = out / f"terms_{name}.jsonl"
        save_terms(terms, tp)
        paths[f"terms_{name}"] = str(tp)
        rp = out / f"refs_{name}.jsonl"
        save_refs(refs, rp, texts)
        paths[f"refs_{name}"] = str(rp)
    snapshot = out / "synth_config.json"
    snapshot.write_text(json.dumps(asdict(cfg), ensure_ascii=False, indent=1))
    paths["config"] = str(snapshot)
    return paths
