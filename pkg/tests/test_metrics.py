import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lstmt.errors import ContractError
from lstmt.metrics import (
    EvalPair,
    bleu,
    cider_d,
    evaluate,
    meteor_lite,
    rouge_l,
    sentence_meteor_lite,
    stem,
)

from oracles import bleu_oracle, cider_oracle, meteor_oracle, rouge_oracle

GOLDEN = [
    EvalPair("g0", "a man is riding a horse", ("a man rides a horse", "a person riding a brown horse")),
    EvalPair("g1", "the dog runs in the field", ("a dog is running through the field",)),
    EvalPair("g2", "two women play the piano", ("two women are playing piano together", "women playing a piano")),
    EvalPair("g3", "a boy throws a ball", ("the boy threw the red ball", "a child throws a ball")),
    EvalPair("g4", "people dance on stage", ("a group of people dances on a stage",)),
    EvalPair("g5", "a cat sits on a table", ("a cat is sitting on the table", "the cat sits on a wooden table")),
    EvalPair("g6", "Someone cuts vegetables, quickly!", ("a person cuts vegetables in the kitchen",)),
    EvalPair("g7", "the man then jumps into water", ("a man jumps into the water", "then the man dives")),
    EvalPair("g8", "a woman holds a baby", ("a woman is holding a small baby",)),
    EvalPair("g9", "snow covers the street", ("the street is covered with snow", "snow on the street")),
]


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_bleu_matches_bruteforce(n):
    assert abs(bleu(GOLDEN, n) - bleu_oracle(GOLDEN, n)) < 1e-9


def test_rouge_matches_bruteforce():
    assert abs(rouge_l(GOLDEN) - rouge_oracle(GOLDEN)) < 1e-9


def test_cider_matches_bruteforce():
    assert abs(cider_d(GOLDEN) - cider_oracle(GOLDEN)) < 1e-9


def test_meteor_matches_bruteforce():
    assert abs(meteor_lite(GOLDEN) - meteor_oracle(GOLDEN)) < 1e-9


def test_bleu_identical_is_one():
    pairs = [EvalPair("a", "a dog runs fast", ("a dog runs fast",))]
    for n in range(1, 5):
        assert bleu(pairs, n) == 1.0


def test_bleu_no_overlap_is_zero():
    assert bleu([EvalPair("a", "xyz qqq", ("a dog runs",))], 1) == 0.0


def test_bleu_clipped_unigram_hand_value():
    # 4 candidate tokens, "the" clipped to 1 reference occurrence; c=4 >= r=3 so no brevity penalty
    pairs = [EvalPair("a", "the the the the", ("the cat sat",))]
    assert bleu(pairs, 1) == pytest.approx(0.25, abs=1e-15)


def test_bleu_brevity_penalty_hand_value():
    pairs = [EvalPair("a", "the cat", ("the cat sat on the mat",))]
    assert bleu(pairs, 1) == pytest.approx(math.exp(1 - 6 / 2), abs=1e-15)


def test_bleu_duplicate_pair_is_consistent_with_corpus_counts():
    doubled = GOLDEN + [GOLDEN[3]]
    for n in range(1, 5):
        assert abs(bleu(doubled, n) - bleu_oracle(doubled, n)) < 1e-9


def test_rouge_hand_value():
    p, r, beta = 3 / 4, 1.0, 1.2
    expected = (1 + beta ** 2) * p * r / (r + beta ** 2 * p)
    assert rouge_l([EvalPair("a", "a b c d", ("a c d",))]) == pytest.approx(expected, abs=1e-15)
    assert rouge_l([EvalPair("a", "a b", ("a b",))]) == 1.0
    assert rouge_l([EvalPair("a", "a b", ("c d",))]) == 0.0


def test_cider_ubiquitous_ngrams_contribute_nothing():
    pairs = [EvalPair("a", "a dog", ("a dog",)), EvalPair("b", "a dog", ("a dog runs",))]
    # every n-gram of "a dog" is in both documents, so its idf is ln(2/2) = 0
    assert cider_d(pairs[:1] + pairs[1:]) == 0.0


def test_cider_disjoint_is_zero():
    pairs = [EvalPair("a", "xx yy", ("a dog",)), EvalPair("b", "zz ww", ("a cat",))]
    assert cider_d(pairs) == 0.0


def test_cider_single_document_warns():
    with pytest.warns(UserWarning):
        value = cider_d([EvalPair("a", "a dog", ("a dog",))])
    # unigram and bigram cosines are 1, the sentence has no 3- or 4-grams
    assert value == pytest.approx(0.5, abs=1e-12)


def test_meteor_identical_hand_value():
    m = 5
    pairs = [EvalPair("a", "a b c d e", ("a b c d e",))]
    assert meteor_lite(pairs) == pytest.approx(1.0 * (1 - 0.5 * (1 / m) ** 3), abs=1e-15)


def test_meteor_no_match_and_reordering():
    assert meteor_lite([EvalPair("a", "x y", ("a b",))]) == 0.0
    same = sentence_meteor_lite("a b c d".split(), ["a b c d".split()])
    moved = sentence_meteor_lite("c d a b".split(), ["a b c d".split()])
    assert moved < same


def test_meteor_stem_stage():
    assert stem("runs") == "run" and stem("jumping") == "jump" and stem("is") == "is"
    with_stem = sentence_meteor_lite(["dog", "runs"], [["dog", "run"]])
    assert with_stem == sentence_meteor_lite(["dog", "run"], [["dog", "run"]])


def test_empty_corpus_rejected():
    for fn in (lambda p: bleu(p, 4), rouge_l, meteor_lite, cider_d, evaluate):
        with pytest.raises(ContractError):
            fn([])


def test_pair_needs_reference():
    with pytest.raises(ContractError):
        EvalPair("a", "x", ())


def test_identical_corpus_report():
    pairs = [EvalPair(p.id, p.references[0], p.references) for p in GOLDEN]
    rep = evaluate(pairs)
    pct = rep.percent()
    for col in ("B@1", "B@2", "B@3", "B@4", "R"):
        assert pct[col] == pytest.approx(100.0, abs=1e-9)
    assert "M-lite" in rep.table() and "B@4" in rep.table()


words = st.sampled_from("a the dog dogs cat runs run is on in red field".split())
sentence = st.lists(words, min_size=0, max_size=7).map(" ".join)
pair_lists = st.lists(
    st.tuples(sentence, st.lists(st.lists(words, min_size=1, max_size=7).map(" ".join), min_size=1, max_size=3)),
    min_size=2, max_size=5,
).map(lambda xs: [EvalPair(f"p{i}", c, tuple(r)) for i, (c, r) in enumerate(xs)])


@settings(max_examples=80, deadline=None)
@given(pair_lists, st.randoms(use_true_random=False))
def test_metrics_bounded_and_order_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    for fn in (lambda p: bleu(p, 4), lambda p: bleu(p, 1), rouge_l, meteor_lite, cider_d):
        a, b = fn(pairs), fn(shuffled)
        assert 0.0 <= a <= 1.0 + 1e-12
        assert abs(a - b) < 1e-12


@settings(max_examples=60, deadline=None)
@given(pair_lists)
def test_bleu_and_rouge_match_oracles_on_random_corpora(pairs):
    for n in (1, 2, 4):
        assert abs(bleu(pairs, n) - bleu_oracle(pairs, n)) < 1e-9
    assert abs(rouge_l(pairs) - rouge_oracle(pairs)) < 1e-9
    assert abs(cider_d(pairs) - cider_oracle(pairs)) < 1e-9


short_words = st.sampled_from("a the dog dogs run runs on".split())


@settings(max_examples=150, deadline=None)
@given(st.lists(short_words, min_size=0, max_size=6), st.lists(short_words, min_size=1, max_size=6))
def test_meteor_matches_oracle_on_random_sentences(cand, ref):
    pairs = [EvalPair("x", " ".join(cand), (" ".join(ref),))]
    assert abs(meteor_lite(pairs) - meteor_oracle(pairs)) < 1e-12
