"""Scoring, span finding (vs brute force), and windowed search tests."""

import numpy as np
import pytest

import termspot.autograd as ag
from termspot.autograd import Tensor
from termspot.confnet import GraphemeInventory, Query
from termspot.detector import (
    HypothesisIndex,
    SegmentProbs,
    deduplicate,
    find_hits,
    load_hits,
    minimum_length,
    per_segment_probs,
    save_hits,
    search,
    segment_logits,
)
from termspot.encoder import EncoderConfig, EncoderModel
from termspot.synth import SynthConfig, gen_synthetic
from termspot.trainer import Schedule, TrainConfig, train

from oracles import brute_force_hits, naive_segment_probs


def probs_of(r, pad=None):
    r = np.asarray(r, dtype=np.float64)
    n = len(r)
    pad = np.zeros(n, dtype=bool) if pad is None else np.asarray(pad, dtype=bool)
    starts = np.arange(n) * 0.1
    return SegmentProbs(r=r, pad=pad, starts=starts, ends=starts + 0.1, utt="u")


# ---------------------------------------------------------------------------
# per-segment probabilities (calibrated dot product)


def test_probs_zero_dots_give_half():
    out = per_segment_probs(np.zeros((4, 3)), np.zeros((2, 3)), 1.0, 0.0)
    np.testing.assert_allclose(out.r, 0.5)


def test_probs_saturate():
    hyp = np.array([[20.0]])
    q = np.array([[1.0]])
    out = per_segment_probs(hyp, q, 1.0, 0.0)
    assert abs(out.r[0] - 1.0) < 1e-8


def test_probs_match_scalar_oracle():
    rng = np.random.default_rng(0)
    hyp, q = rng.normal(size=(4, 3)), rng.normal(size=(2, 3))
    out = per_segment_probs(hyp, q, 0.5, -1.0)
    np.testing.assert_allclose(out.r, naive_segment_probs(hyp, q, 0.5, -1.0), atol=1e-6)


def test_segment_logits_matches_probs_path():
    rng = np.random.default_rng(1)
    hyp, q = rng.normal(size=(6, 5)).astype(np.float32), rng.normal(size=(3, 5)).astype(np.float32)
    alpha, beta = Tensor(np.array([0.7], np.float32)), Tensor(np.array([0.2], np.float32))
    z = segment_logits(Tensor(hyp), Tensor(q), alpha, beta)
    r = per_segment_probs(hyp, q, alpha, beta)
    np.testing.assert_allclose(1.0 / (1.0 + np.exp(-z.data.astype(np.float64))), r.r, atol=1e-6)


def test_probs_increase_with_max_dot():
    # with alpha > 0 the probability is strictly increasing in the best dot product
    q = np.array([[1.0, 0.0]])
    hyp = np.array([[0.1, 0.0], [0.5, 0.0], [2.0, 0.0]])
    out = per_segment_probs(hyp, q, 1.3, -0.2)
    assert out.r[0] < out.r[1] < out.r[2]


# ---------------------------------------------------------------------------
# span finding


def test_find_hits_plateau():
    spans = find_hits(probs_of([0.9, 0.9, 0.9, 0.2]), min_len=2, threshold=0.5)
    assert len(spans) == 1
    assert (spans[0].i, spans[0].j) == (0, 2)
    assert abs(spans[0].score - 0.9) < 1e-7


def test_find_hits_nothing_above_threshold():
    assert find_hits(probs_of([0.4, 0.5, 0.1]), min_len=1, threshold=0.5) == []


def test_find_hits_subspan_beats_full_run():
    spans = find_hits(probs_of([0.6, 0.9, 0.6]), min_len=1, threshold=0.5)
    assert len(spans) == 1
    assert (spans[0].i, spans[0].j) == (1, 1)
    assert abs(spans[0].score - 0.9) < 1e-7


def test_find_hits_skips_padding():
    pad = [False, False, True, False]
    spans = find_hits(probs_of([0.9, 0.9, 0.9, 0.9], pad), min_len=2, threshold=0.5)
    assert [(s.i, s.j) for s in spans] == [(0, 1)]


def test_find_hits_score_is_mean():
    r = [0.55, 0.8, 0.7, 0.95, 0.2, 0.9, 0.85]
    spans = find_hits(probs_of(r), min_len=2, threshold=0.5)
    for span in spans:
        assert abs(span.score - np.mean(r[span.i:span.j + 1])) < 1e-7


def test_find_hits_equals_brute_force():
    rng = np.random.default_rng(42)
    for _ in range(300):
        n = int(rng.integers(1, 65))
        r = np.round(rng.random(n), 3)
        pad = rng.random(n) < 0.1
        min_len = int(rng.integers(1, 7))
        got = find_hits(probs_of(r, pad), min_len, 0.5)
        want = brute_force_hits(r, pad, min_len, 0.5)
        assert [(s.i, s.j) for s in got] == [(i, j) for i, j, _ in want]
        for s, (_, _, mean) in zip(got, want):
            assert abs(s.score - mean) < 1e-9


def test_qualifying_spans_monotone_in_threshold():
    # the set of spans satisfying the detection conditions shrinks as t rises
    # (the emitted per-run winners need not: runs split; see the run oracle)
    rng = np.random.default_rng(7)
    r = rng.random(50)
    pad = np.zeros(50, dtype=bool)

    def qualifying(t, min_len=2):
        count = 0
        for i in range(len(r)):
            for j in range(i + min_len - 1, len(r)):
                if all(r[k] > t for k in range(i, j + 1)):
                    count += 1
        return count

    last = None
    for t in (0.1, 0.3, 0.5, 0.7, 0.9):
        count = qualifying(t)
        if last is not None:
            assert count <= last
        last = count


def test_score_filter_monotone_on_fixed_hit_list():
    rng = np.random.default_rng(8)
    r = np.round(rng.random(60), 3)
    spans = find_hits(probs_of(r), 1, 0.5)
    last = None
    for cutoff in (0.5, 0.6, 0.7, 0.8, 0.9):
        count = sum(1 for s in spans if s.score >= cutoff)
        if last is not None:
            assert count <= last
        last = count


def test_minimum_length_rounding():
    assert minimum_length(3.4) == 3
    assert minimum_length(3.6) == 4
    assert minimum_length(0.2) == 1
    assert minimum_length(2.0, length_scale=1.5) == 3


# ---------------------------------------------------------------------------
# search over a trained toy model


TOY_SYNTH = dict(seed=5, languages=("en",), inventory_size=10, lexicon_size=6,
                 word_len_min=3, word_len_max=4, words_per_utterance=6, utterances=12,
                 substitution_prob=0.0, eps_insertion_prob=0.0, extra_alt_prob=0.0,
                 dev_fraction=0.25, test_fraction=0.0, query_terms=4, oov_terms=2)


@pytest.fixture(scope="module")
def toy_world():
    corpus = gen_synthetic(SynthConfig(**TOY_SYNTH))
    model_cfg = EncoderConfig(layers=1, heads=2, d_model=16, d_ff=32, dropout=0.0,
                              n_input=16, m_query=16, languages=("en",))
    model = EncoderModel(model_cfg, corpus.inventory, seed=0)
    train_cfg = TrainConfig(seed=0, steps=800, batch_size=4,
                            schedule=Schedule(80, 800, 3e-3),
                            oov_merge_prob=0.2, checkpoint_interval=0, log_interval=0)
    train(model, [corpus.train], train_cfg, checkpoint_dir=None, log=lambda s: None)
    return corpus, model


def test_search_planted_occurrence(toy_world):
    corpus, model = toy_world
    cn, tr = corpus.train[0]
    word = tr.words[0]
    query = Query(graphemes=[model.inventory.id(c) for c in word.surface], lang="en",
                  query_id=f"en:{word.surface}")
    hits = search(model, [(cn, tr)], query, threshold=0.5)
    assert hits, "no hit for a training word in its own utterance"
    occurrences = [w for w in tr.words if w.surface == word.surface]
    top = hits[0]
    assert top.utt == cn.utt
    assert any(min(top.end, w.end) - max(top.start, w.start) > 0 for w in occurrences), \
        "top hit does not overlap any true occurrence"
    assert any(min(h.end, word.end) - max(h.start, word.start) > 0 for h in hits), \
        "planted occurrence missed entirely"
    assert hits == sorted(hits, key=lambda h: -h.score)


def test_search_suppressed_when_scores_low(toy_world):
    corpus, model = toy_world
    beta = model.params["calib.beta"]
    saved = beta.data.copy()
    try:
        beta.data[:] = -30.0  # push every probability to ~0
        cn, tr = corpus.train[0]
        query = Query(graphemes=[model.inventory.id(c) for c in tr.words[0].surface], lang="en")
        assert search(model, [(cn, tr)], query, threshold=0.5) == []
    finally:
        beta.data[:] = saved


def test_search_dedups_across_overlapping_windows(toy_world):
    # a mid-utterance occurrence falls inside several overlapping windows,
    # so the raw per-window candidates must collapse to one kept hit
    corpus, model = toy_world
    cn, tr = corpus.train[0]
    word = tr.words[2]
    query = Query(graphemes=[model.inventory.id(c) for c in word.surface], lang="en",
                  query_id=f"en:{word.surface}")

    index = HypothesisIndex.build(model, [(cn, tr)], overlap=12)
    assert len(index.windows) >= 2
    q, l_hat = model.encode_query(query, training=False)
    min_len = minimum_length(l_hat.item())
    raw = []
    for enc in index.windows:
        probs = per_segment_probs(enc.hyp, q.data, model.alpha, model.beta, window=enc.window)
        raw.extend((enc.window.start_index + s.i, enc.window.start_index + s.j)
                   for s in find_hits(probs, min_len, 0.5))
    assert len(raw) > len(set(raw)), "overlapping windows produced no duplicate candidates"

    hits = search(model, [(cn, tr)], query, threshold=0.5, overlap=12)
    assert len(hits) < len(raw)
    for a in hits:
        for b in hits:
            if a is b or a.utt != b.utt:
                continue
            inter = min(a.end, b.end) - max(a.start, b.start)
            assert inter <= 0.5 * min(a.end - a.start, b.end - b.start) + 1e-9


def test_index_reuse_matches_direct_search(toy_world):
    corpus, model = toy_world
    records = corpus.train[:3]
    index = HypothesisIndex.build(model, records, overlap=8)
    word = records[0][1].words[0]
    query = Query(graphemes=[model.inventory.id(c) for c in word.surface], lang="en", query_id="q")
    via_index = search(model, index, query)
    direct = search(model, records, query, overlap=8)
    assert [(h.utt, h.i, h.j, h.score) for h in via_index] == [(h.utt, h.i, h.j, h.score) for h in direct]


def test_deduplicate_keeps_higher_score():
    from termspot.detector import Hit

    a = Hit("q", "u", 0, 3, 0.9, 1.0, 1.4)
    b = Hit("q", "u", 1, 4, 0.8, 1.1, 1.5)  # overlaps a by > 50%
    c = Hit("q", "u", 9, 12, 0.7, 5.0, 5.4)  # far away
    kept = deduplicate([b, a, c])
    assert [(h.score) for h in kept] == [0.9, 0.7]


def test_hits_file_round_trip(tmp_path, toy_world):
    corpus, model = toy_world
    cn, tr = corpus.train[0]
    query = Query(graphemes=[model.inventory.id(c) for c in tr.words[0].surface], lang="en", query_id="en:q0")
    hits = search(model, [(cn, tr)], query)
    path = tmp_path / "hits.jsonl"
    save_hits(hits, path)
    loaded = load_hits(path)
    assert len(loaded) == len(hits)
    for h0, h1 in zip(hits, loaded):
        assert h0.query_id == h1.query_id and h0.utt == h1.utt
        assert h1.score == pytest.approx(h0.score, abs=1e-6)
