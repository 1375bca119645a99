import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from t2vscore.stats import (PairedSeries, UndefinedCorrelation, average_ranks, correlate, kendall,
                            kendall_counts, pearson, spearman)

from oracles import kendall_bruteforce, kendall_pair_counts, pearson_exact, ranks_by_counting, spearman_bruteforce

grid = st.sampled_from([0.0, 0.5, 1.0, 2.0, 3.0, -1.0])
reals = st.floats(-100, 100, allow_nan=False, allow_infinity=False).map(lambda v: round(v, 6))


@st.composite
def paired(draw, elems=grid, max_len=8):
    n = draw(st.integers(2, max_len))
    return draw(st.lists(elems, min_size=n, max_size=n)), draw(st.lists(elems, min_size=n, max_size=n))


def test_documented_exact_values():
    assert spearman([1, 2, 3, 4, 5], [5, 4, 3, 2, 1]) == -1.0
    assert kendall([1, 2, 3], [1, 3, 2]) == 1 / 3
    assert pearson([1, 2, 3], [2, 4, 6]) == 1.0
    assert pearson([0.1, 0.7, 0.3], [-0.1, -0.7, -0.3]) == -1.0


def test_average_ranks_ties():
    assert average_ranks([10, 20, 20, 5]).tolist() == [2.0, 3.5, 3.5, 1.0]


@pytest.mark.parametrize("fn", [spearman, kendall, pearson])
def test_constant_series_is_undefined(fn):
    with pytest.raises(UndefinedCorrelation):
        fn([1, 1, 1], [1, 2, 3])


def test_correlate_flags_undefined():
    c = correlate([1, 2, 3], [4, 4, 4])
    assert c.spearman is None and c.kendall is None and c.pearson is None
    assert c.flags == ["spearman:undefined", "kendall:undefined", "pearson:undefined"]


def test_paired_series_validation():
    with pytest.raises(ValueError):
        PairedSeries.of([1], [1])
    with pytest.raises(ValueError):
        PairedSeries.of([1, 2], [1])
    with pytest.raises(ValueError):
        PairedSeries.of([1, float("nan")], [1, 2])


@settings(max_examples=300, deadline=None)
@given(st.one_of(paired(), paired(st.integers(0, 9).map(float), max_len=64), paired(reals, max_len=64)))
def test_kendall_counts_match_enumeration(xy):
    xs, ys = xy
    c, d, n1, n2, _ = kendall_counts(xs, ys)
    bc, bd, _, btx, bty = kendall_pair_counts(xs, ys)
    assert (c, d, n1, n2) == (bc, bd, btx, bty)


@settings(max_examples=300, deadline=None)
@given(paired())
def test_against_bruteforce_with_ties(xy):
    xs, ys = xy
    for fast, slow in ((spearman, spearman_bruteforce), (kendall, kendall_bruteforce), (pearson, pearson_exact)):
        ref = slow(xs, ys)
        if ref is None:
            with pytest.raises(UndefinedCorrelation):
                fast(xs, ys)
        else:
            assert abs(fast(xs, ys) - ref) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(paired(reals))
def test_against_bruteforce_reals(xy):
    xs, ys = xy
    ref = pearson_exact(xs, ys)
    if ref is not None and ref == ref:
        assert abs(pearson(xs, ys) - ref) <= 1e-12
    assert average_ranks(xs).tolist() == [float(r) for r in ranks_by_counting(xs)]


@settings(max_examples=200, deadline=None)
@given(paired(reals, max_len=12))
def test_invariances(xy):
    xs, ys = xy
    try:
        s, k = spearman(xs, ys), kendall(xs, ys)
    except UndefinedCorrelation:
        return
    # rank statistics ignore strictly increasing transforms and are symmetric
    assert spearman(np.asarray(xs) ** 3, ys) == pytest.approx(s, abs=1e-12)
    assert kendall(ys, xs) == pytest.approx(k, abs=1e-12)
    assert -1.0 <= s <= 1.0 and -1.0 <= k <= 1.0


def test_kendall_large_input_matches_scipy():
    stats = pytest.importorskip("scipy.stats")
    rng = np.random.default_rng(0)
    xs = rng.integers(0, 20, 500).astype(float)
    ys = xs + rng.integers(0, 10, 500)
    assert kendall(xs, ys) == pytest.approx(stats.kendalltau(xs, ys).statistic, abs=1e-12)
    assert spearman(xs, ys) == pytest.approx(stats.spearmanr(xs, ys).statistic, abs=1e-12)
