import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy import stats

from lclipscore.errors import ContractError, DataError, UndefinedCorrelationError
from lclipscore.evalstats import (FoilRecord, PairRecord, RatingRecord, brute_force_tau, foil_accuracy,
                                  kendall_tau_b, kendall_tau_c, pascal_accuracy, rating_correlations,
                                  sample_references)


@pytest.mark.parametrize("x,y,expected", [
    ((1, 2, 3), (10, 20, 30), 1.0),
    ((1, 2, 3), (3, 2, 1), -1.0),
    ((1, 1, 2), (1, 2, 2), 0.5),
    ((1, 2), (2, 1), -1.0),
])
def test_tau_b_examples(x, y, expected):
    assert_allclose(kendall_tau_b(x, y), expected, atol=1e-15)
    assert_allclose(brute_force_tau(x, y, "b"), expected, atol=1e-15)


@pytest.mark.parametrize("x,y,expected", [
    ((1, 2, 3), (10, 20, 30), 1.0),
    ((1, 1, 2, 2), (1, 2, 1, 2), 0.0),
])
def test_tau_c_examples(x, y, expected):
    assert_allclose(kendall_tau_c(x, y), expected, atol=1e-15)


def test_undefined_and_malformed():
    with pytest.raises(UndefinedCorrelationError):
        brute_force_tau((5, 5), (1, 2))
    with pytest.raises(UndefinedCorrelationError):
        kendall_tau_b((5, 5), (1, 2))
    with pytest.raises(UndefinedCorrelationError):
        kendall_tau_c((1, 2, 3), (4, 4, 4))
    with pytest.raises(UndefinedCorrelationError):
        kendall_tau_b((1,), (1,))
    with pytest.raises(ContractError):
        kendall_tau_b((1, 2), (1, 2, 3))
    with pytest.raises(ContractError):
        kendall_tau_b((1, float("nan")), (1, 2))


tied = st.lists(st.integers(0, 4), min_size=2, max_size=60)


@given(tied, st.integers(0, 2**31))
def test_matches_oracle_and_scipy(x, seed):
    y = list(np.random.default_rng(seed).integers(0, 5, len(x)))
    try:
        b = kendall_tau_b(x, y)
    except UndefinedCorrelationError:
        with pytest.raises(UndefinedCorrelationError):
            brute_force_tau(x, y, "b")
        return
    assert abs(b - brute_force_tau(x, y, "b")) <= 1e-12
    assert abs(kendall_tau_c(x, y) - brute_force_tau(x, y, "c")) <= 1e-12
    assert_allclose(b, stats.kendalltau(x, y, variant="b").statistic, atol=1e-12)
    assert_allclose(kendall_tau_c(x, y), stats.kendalltau(x, y, variant="c").statistic, atol=1e-12)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=30, unique=True), st.integers(0, 2**31))
def test_symmetry_antisymmetry_and_monotone_invariance(x, seed):
    y = list(np.random.default_rng(seed).standard_normal(len(x)))
    b = kendall_tau_b(x, y)
    assert_allclose(kendall_tau_b(y, x), b, atol=1e-12)
    assert_allclose(kendall_tau_c(x, [-v for v in y]), -kendall_tau_c(x, y), atol=1e-12)
    # transforms that stay strictly increasing in floating point
    assert_allclose(kendall_tau_b([3.0 * v for v in x], [math.atan(v) for v in y]), b, atol=1e-12)


def test_rating_correlations_and_records():
    recs = [RatingRecord.from_json({"id": i, "rating": r, "score": s})
            for i, (r, s) in enumerate([(1, 0.1), (2, 0.3), (3, 0.2), (4, 0.9)])]
    out = rating_correlations(recs)
    assert out["n"] == 4
    assert_allclose(out["tau_b"], 4 / 6)
    with pytest.raises(DataError):
        RatingRecord("x", float("inf"), 0.0)


def test_record_validation():
    with pytest.raises(DataError):
        PairRecord("i", "a", "b", "XX", "A")
    with pytest.raises(DataError):
        PairRecord("i", "a", "b", "HC", "C")
    with pytest.raises(DataError):
        FoilRecord("i", "same", "same")


def _pairs():
    out = []
    for k, cat in enumerate(["HC", "HI", "HM", "MM"] * 3):
        out.append(PairRecord(f"img{k}", f"good {k}", f"bad {k}", cat, "A" if k % 2 else "B", ["r"] * 5))
    return out


def _oracle(pairs):
    pref = {(p.image_id, p.caption_a if p.human_choice == "A" else p.caption_b) for p in pairs}
    return lambda image, caption, refs: float((image, caption) in pref)


def test_pascal_oracle_negated_constant():
    pairs = _pairs()
    oracle = _oracle(pairs)
    assert pascal_accuracy(pairs, oracle) == {"HC": 1.0, "HI": 1.0, "HM": 1.0, "MM": 1.0, "mean": 1.0}
    assert pascal_accuracy(pairs, lambda *a: -oracle(*a))["mean"] == 0.0
    assert pascal_accuracy(pairs, lambda *a: 3.0) == {"HC": 0.5, "HI": 0.5, "HM": 0.5, "MM": 0.5, "mean": 0.5}


@given(st.integers(0, 2**31))
def test_protocols_invariant_to_increasing_transform(seed):
    rng = np.random.default_rng(seed)
    pairs = _pairs()
    table = {}
    scorer = lambda image, caption, refs: table.setdefault((image, caption), float(rng.standard_normal()))
    base = pascal_accuracy(pairs, scorer)
    assert pascal_accuracy(pairs, lambda *a: math.atan(scorer(*a)) * 3 + 1) == base


def _foils():
    return [FoilRecord(f"img{k}", f"true {k}", f"foil {k}", [f"r{j}" for j in range(4)]) for k in range(10)]


def test_foil_rules():
    recs = _foils()
    planted = lambda image, caption, refs: 1.0 if caption.startswith("true") else 0.2
    assert foil_accuracy(recs, planted) == 1.0
    assert foil_accuracy(recs, lambda *a: 0.5) == 0.0
    seen = []
    referenceless = lambda image, caption, refs: seen.append(len(refs)) or len(caption)
    assert foil_accuracy(recs, referenceless, "1-ref") == foil_accuracy(recs, referenceless, "4-ref")
    assert set(seen) == {1, 4}
    with pytest.raises(DataError):
        foil_accuracy([FoilRecord("i", "t", "f", ["r"])], planted, "4-ref")
    with pytest.raises(ContractError):
        foil_accuracy(recs, planted, "2-ref")


@given(st.integers(0, 2**31))
def test_foil_stable_under_small_jitter(seed):
    rng = np.random.default_rng(seed)
    recs = _foils()
    scores = {}
    for r in recs:
        scores[r.true_caption], scores[r.foil_caption] = rng.integers(0, 5, 2) / 4.0
    jitter = {k: v + rng.uniform(-0.1, 0.1) for k, v in scores.items()}
    base = foil_accuracy(recs, lambda i, c, refs: scores[c])
    # ties stay failures only if the jitter cannot create an ordering; compare on untied records
    untied = [r for r in recs if scores[r.true_caption] != scores[r.foil_caption]]
    if untied:
        assert foil_accuracy(untied, lambda i, c, refs: jitter[c]) == foil_accuracy(untied, lambda i, c, refs: scores[c])
    assert 0.0 <= base <= 1.0


def test_sample_references():
    refs = [f"r{i}" for i in range(48)]
    a = sample_references(refs, 5, seed=1)
    assert a == sample_references(refs, 5, seed=1) and len(set(a)) == 5
    assert sample_references(refs[:3], 5) == refs[:3]
