import math

import pytest
from hypothesis import given, settings, strategies as st

from speechbridge.bleu import bleu, corpus_stats, tokenize

# hand-computed oracle values: geometric mean of clipped n-gram precisions times brevity penalty
ORACLE = [
    # precisions 4/5, 3/4, 2/3, 1/2 -> (1/5) ** 0.25
    (["a b c d e"], ["a b c d"], False, 66.87),
    # every precision 1, brevity exp(1 - 6/4)
    (["the cat sat on"], ["the cat sat on the mat"], False, 60.65),
    # pooled: 5/6, 3/4, 2/2, 1/1 over two sentences
    (["a b c d", "x y"], ["a b c d", "x z"], False, 88.91),
    # characters, spaces removed: 4 of 5 chars, brevity exp(1 - 5/4)
    (["猫が 好き"], ["猫が好きだ"], True, 77.88),
    # four word-level permutations that share no 4-gram
    (["a b d c"], ["a b c d"], False, 0.00),
]


@pytest.mark.parametrize("hyps,refs,char_level,expected", ORACLE)
def test_oracle_cases(hyps, refs, char_level, expected):
    assert round(bleu(hyps, refs, char_level), 2) == expected


def test_oracle_closed_forms():
    assert bleu(["a b c d e"], ["a b c d"]) == pytest.approx(100 * 0.2 ** 0.25)
    assert bleu(["the cat sat on"], ["the cat sat on the mat"]) == pytest.approx(100 * math.exp(-0.5))


def test_identical_corpus_is_100():
    refs = ["one two three four five", "six seven eight nine ."]
    assert bleu(refs, refs) == pytest.approx(100.0)


def test_tokenizer_splits_punctuation_and_is_case_sensitive():
    assert tokenize("Hello, world!") == ["Hello", ",", "world", "!"]
    assert bleu(["A b c d"], ["a b c d"]) == 0.0


def test_invalid_inputs():
    with pytest.raises(ValueError, match="empty"):
        bleu([], [])
    with pytest.raises(ValueError, match="references"):
        bleu(["a"], ["a", "b"])


def test_empty_hypothesis_scores_zero():
    assert bleu([""], ["a b c d"]) == 0.0


WORDS = st.lists(st.sampled_from("abcdef"), min_size=0, max_size=12).map(" ".join)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(WORDS, WORDS), min_size=1, max_size=5))
def test_bleu_in_range(pairs):
    hyps, refs = zip(*pairs)
    assert 0.0 <= bleu(hyps, refs) <= 100.0 + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(WORDS.filter(lambda s: len(s.split()) >= 4), min_size=1, max_size=4))
def test_self_bleu_is_100(refs):
    assert bleu(refs, refs) == pytest.approx(100.0)


def test_pooling_differs_from_averaging():
    st_ = corpus_stats(["a b c d", "x y"], ["a b c d", "x z"])
    assert st_.matches == [5, 3, 2, 1] and st_.totals == [6, 4, 2, 1]
