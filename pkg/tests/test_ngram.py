import json
import math
import random

import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from lclipscore.errors import ContractError
from lclipscore.ngram import CorpusIDF, build_idf, cider_d, extract_ngrams

TOY = [["a b c d"], ["a b e f"]]


def test_extract_examples():
    assert extract_ngrams(["a", "b", "a"], 1) == {("a",): 2, ("b",): 1}
    assert extract_ngrams(["a", "b", "a"], 2) == {("a", "b"): 1, ("b", "a"): 1}
    assert extract_ngrams(["a"], 2) == {}
    with pytest.raises(ValueError):
        extract_ngrams(["a"], 5)


@given(st.lists(st.sampled_from("abc"), max_size=12), st.integers(1, 4))
def test_total_count(tokens, n):
    assert sum(extract_ngrams(tokens, n).values()) == max(0, len(tokens) - n + 1)


def test_idf_counts_once_per_image():
    idf = build_idf([["a b", "a c"], ["a"]])
    assert idf.doc_count == 2
    assert idf.df[("a",)] == 2 and idf.df[("b",)] == 1 and idf.df[("a", "b")] == 1
    assert all(c == 1 for c in build_idf([["x y z"]]).df.values())
    with pytest.raises(ContractError):
        build_idf([])


def test_toy_df_table_matches_hand_count(golden_dir):
    frozen = json.loads((golden_dir / "ngram_toy.json").read_text())
    hand = {("a",): 2, ("b",): 2, ("a", "b"): 2}
    for gram in ["c", "d", "e", "f", "b c", "c d", "b e", "e f", "a b c", "b c d", "a b e", "b e f", "a b c d",
                 "a b e f"]:
        hand[tuple(gram.split())] = 1
    assert frozen["doc_count"] == 2
    assert {tuple(g): c for g, c in frozen["df"]} == hand


def test_idf_json_roundtrip():
    idf = build_idf(TOY)
    again = CorpusIDF.from_json(json.loads(idf.dumps()))
    assert again == idf
    assert_allclose(idf.idf(("zzz",)), math.log(2))


def test_identical_unique_caption_scores_ten():
    idf = build_idf(TOY)
    assert_allclose(cider_d("a b c d", ["a b c d"], idf), 10.0, atol=1e-12)


def test_half_overlap_hand_value():
    # orders 1-3 each have cosine 1/2 (shared weight log 2 of two), order 4 has none: 10 * 1.5 / 4
    idf = build_idf(TOY)
    assert_allclose(cider_d("a b c x", ["a b c d"], idf), 3.75, atol=1e-12)


def test_no_overlap_and_empty_candidate():
    idf = build_idf(TOY)
    assert cider_d("x y z", ["a b c d"], idf) == 0.0
    assert cider_d("", ["a b c d"], idf) == 0.0
    with pytest.raises(ContractError):
        cider_d("a", [], idf)


def test_length_penalty():
    idf = build_idf([["a b c d e f g h"], ["z"]])
    short = cider_d("a b c d", ["a b c d e f g h"], idf)
    assert 0 < short < 10.0


def test_clipping_caps_repetition():
    idf = build_idf([["red cat"], ["blue dog"]])
    once = cider_d("red cat", ["red cat"], idf)
    many = cider_d("red red red red cat", ["red cat"], idf)
    assert many < once


words = st.lists(st.sampled_from(["a", "b", "c", "d", "e"]), min_size=1, max_size=8).map(" ".join)


@given(words, st.lists(words, min_size=1, max_size=4), st.integers(0, 1000))
def test_reference_order_invariance_and_bounds(cand, refs, seed):
    idf = build_idf([refs, ["e d c"], ["q r"]])
    s = cider_d(cand, refs, idf)
    shuffled = refs[:]
    random.Random(seed).shuffle(shuffled)
    assert_allclose(cider_d(cand, shuffled, idf), s, rtol=1e-12, atol=1e-12)
    assert 0.0 <= s <= 10.0 + 1e-9
