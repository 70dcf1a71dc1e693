import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xdomcap.data import SOURCE_TEMPLATES, TARGET_TEMPLATES, AttributeScene, render
from xdomcap.metrics import (EvalCorpus, MetricError, bleu, cider_d, content_fidelity, content_fidelity_sentence,
                             evaluate, lcs_length, rouge_l, rouge_l_sentence, style_match_rate, target_skeletons)

from conftest import DATA
import oracles

GOLD = json.loads((DATA / "golden_oracle.json").read_text())


def golden_corpus():
    items = json.loads((DATA / "golden_corpus.json").read_text())["items"]
    return EvalCorpus({it["id"]: it["candidate"] for it in items}, {it["id"]: it["references"] for it in items})


def corpus(pairs):
    return EvalCorpus({str(i): c for i, (c, _) in enumerate(pairs)}, {str(i): r for i, (_, r) in enumerate(pairs)})


@pytest.mark.parametrize("name,fn", [
    ("bleu1", lambda c: bleu(c, 1)), ("bleu2", lambda c: bleu(c, 2)), ("bleu3", lambda c: bleu(c, 3)),
    ("bleu4", lambda c: bleu(c, 4)), ("rougeL", rouge_l), ("ciderD", cider_d),
])
def test_golden_corpus(name, fn):
    assert abs(fn(golden_corpus()) - GOLD["golden"][name]) <= 1e-10


def test_toy_cider():
    c = corpus([("a red square", ["a red square", "one red square"]),
                ("a blue circle", ["the blue circle"]),
                ("green green triangle", ["a green triangle"])])
    assert abs(cider_d(c) - GOLD["toy_cider"]) <= 1e-10


def test_bleu1_repeated_word_is_clipped():
    # clipped precision 1/3; candidate longer than reference, so no brevity penalty
    assert bleu(corpus([("a a a", ["a b"])]), 1) == pytest.approx(1 / 3, abs=1e-12)
    assert GOLD["bleu1_aaa_ab"] == pytest.approx(1 / 3, abs=1e-12)


def test_bleu_brevity_penalty():
    # one-word candidate against a two-word reference: precision 1, BP = exp(1 - 2)
    assert bleu(corpus([("a", ["a b"])]), 1) == pytest.approx(math.exp(-1), abs=1e-12)


def test_rouge_hand_example():
    assert lcs_length("a b c d".split(), "a c d".split()) == 3
    assert rouge_l_sentence("a b c d", ["a c d"]) == pytest.approx(GOLD["rouge_abcd_acd"], abs=1e-12)
    assert GOLD["rouge_abcd_acd"] == pytest.approx(0.8798076923076923, abs=1e-15)


def test_perfect_match():
    c = corpus([("a red square on the left", ["a red square on the left"]),
                ("the blue circle is small", ["the blue circle is small"])])
    for n in range(1, 5):
        assert bleu(c, n) == pytest.approx(1.0, abs=1e-12)
    assert rouge_l(c) == pytest.approx(1.0, abs=1e-12)


def test_disjoint_candidates_score_zero():
    c = corpus([("x y z", ["a b c"]), ("u v", ["d e"])])
    assert bleu(c, 1) == 0.0
    assert rouge_l(c) == 0.0
    assert cider_d(c) == 0.0


def test_empty_corpus_and_missing_refs():
    with pytest.raises(MetricError):
        EvalCorpus({}, {})
    with pytest.raises(MetricError):
        EvalCorpus({"a": "x"}, {"b": ["x"]})
    with pytest.raises(MetricError):
        EvalCorpus({"a": "x"}, {"a": []})


words = st.sampled_from("a b c red blue square circle left".split())
sentences = st.lists(words, min_size=1, max_size=6).map(" ".join)


@given(st.lists(st.tuples(sentences, st.lists(sentences, min_size=1, max_size=3)), min_size=1, max_size=4))
@settings(max_examples=60, deadline=None)
def test_matches_bruteforce_oracles(items):
    c = corpus(items)
    for n in (1, 2):
        assert bleu(c, n) == pytest.approx(oracles.bleu(items, n), abs=1e-10)
    assert rouge_l(c) == pytest.approx(oracles.rouge_l(items), abs=1e-10)
    if len(items) > 1:
        assert cider_d(c) == pytest.approx(oracles.cider_d(items), abs=1e-10)


@given(st.lists(st.tuples(sentences, st.lists(sentences, min_size=1, max_size=3)), min_size=2, max_size=5),
       st.randoms(use_true_random=False))
@settings(max_examples=40, deadline=None)
def test_order_invariance(items, rnd):
    shuffled = list(items)
    rnd.shuffle(shuffled)
    a, b = corpus(items), corpus(shuffled)
    assert bleu(a, 4) == pytest.approx(bleu(b, 4), abs=1e-12)
    assert rouge_l(a) == pytest.approx(rouge_l(b), abs=1e-12)
    assert cider_d(a) == pytest.approx(cider_d(b), abs=1e-12)


@given(st.lists(st.tuples(sentences, st.lists(sentences, min_size=1, max_size=3)), min_size=1, max_size=4))
@settings(max_examples=40, deadline=None)
def test_ranges(items):
    c = corpus(items)
    assert 0 <= bleu(c, 4) <= 1 and 0 <= rouge_l(c) <= 1
    if len(items) > 1:
        assert cider_d(c) >= 0


def test_cider_needs_two_images():
    with pytest.raises(MetricError):
        cider_d(corpus([("a", ["a"])]))


def test_style_match():
    s = AttributeScene("red", "square", "large", "left")
    sk = target_skeletons()
    rng = np.random.default_rng(0)
    assert style_match_rate([render(t, s, rng) for t in TARGET_TEMPLATES], sk) == 1.0
    assert style_match_rate([render(t, s, rng) for t in SOURCE_TEMPLATES], sk) == 0.0
    assert style_match_rate([], sk) == 0.0
    with pytest.raises(MetricError):
        style_match_rate(["x"], [])


def test_content_fidelity():
    s = AttributeScene("red", "square", "large", "left")
    assert content_fidelity_sentence("a large red square on the left", s) == 1.0
    assert content_fidelity_sentence("a large blue square on the left", s) == 0.75
    assert content_fidelity_sentence("nothing here", s) == 0.0
    assert content_fidelity({"a": "red", "b": "blue"}, {"a": s, "b": s}) == 0.5


def test_evaluate_report():
    rep = evaluate(golden_corpus())
    assert rep.size == 10
    assert rep.bleu4 == pytest.approx(GOLD["golden"]["bleu4"], abs=1e-10)
    assert math.isnan(rep.content_fidelity)
    assert len(rep.row()) == 8
