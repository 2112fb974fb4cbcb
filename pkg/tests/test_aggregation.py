import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedgan import aggregation as agg
from fedgan.errors import AggregationError


# Independent oracles: plain Python over coordinates, no numpy reductions.

def mean_oracle(ws):
    return [sum(w[j] for w in ws) / len(ws) for j in range(len(ws[0]))]


def median_oracle(ws):
    out = []
    for j in range(len(ws[0])):
        col = sorted(w[j] for w in ws)
        m = len(col) // 2
        out.append(col[m] if len(col) % 2 else (col[m - 1] + col[m]) / 2)
    return out


def trimmed_oracle(ws, k):
    out = []
    for j in range(len(ws[0])):
        col = sorted(w[j] for w in ws)[k:len(ws) - k]
        out.append(sum(col) / len(col))
    return out


def krum_scores_oracle(ws, f):
    n = len(ws)
    scores = []
    for i in range(n):
        d = sorted(sum((a - b) ** 2 for a, b in zip(ws[i], ws[j])) for j in range(n) if j != i)
        scores.append(sum(d[:n - f - 2]))
    return scores


def rand_vectors(rng, n, dim):
    return [rng.normal(size=dim) for _ in range(n)]


def test_fedavg_examples():
    v = np.array([1.5, -2.0])
    assert np.array_equal(agg.fedavg([v, v, v]), v)
    assert agg.fedavg([np.array([0.0, 0.0]), np.array([2.0, 4.0])]).tolist() == [1.0, 2.0]


def test_fedavg_vs_oracle():
    rng = np.random.default_rng(0)
    ws = rand_vectors(rng, 7, 30)
    assert np.max(np.abs(agg.fedavg(ws) - mean_oracle(ws))) <= 1e-12


def test_weighted_fedavg():
    out = agg.fedavg([np.array([0.0]), np.array([4.0])], weights=[3, 1])
    assert out[0] == pytest.approx(1.0)
    with pytest.raises(AggregationError):
        agg.fedavg([np.zeros(1)], weights=[0])


def test_errors():
    with pytest.raises(AggregationError):
        agg.fedavg([])
    with pytest.raises(AggregationError):
        agg.coordinate_median([np.zeros(2), np.zeros(3)])
    with pytest.raises(AggregationError):
        agg.trimmed_mean([np.zeros(2)] * 4, 2)
    with pytest.raises(AggregationError):
        agg.krum([np.zeros(2)] * 4, 1)
    with pytest.raises(AggregationError):
        agg.select_best([])


def test_median_examples():
    assert agg.coordinate_median([np.array([0.0]), np.array([10.0]), np.array([1.0])]).tolist() == [1.0]
    v = np.array([3.0, 4.0])
    assert np.array_equal(agg.coordinate_median([v]), v)
    assert agg.coordinate_median([np.array([0.0]), np.array([1.0])]).tolist() == [0.5]


def test_median_vs_sort_oracle():
    rng = np.random.default_rng(1)
    ws = rand_vectors(rng, 9, 25)
    assert agg.coordinate_median(ws).tolist() == median_oracle(ws)


def test_trimmed_mean_examples():
    rng = np.random.default_rng(2)
    ws = rand_vectors(rng, 6, 10)
    assert np.array_equal(agg.trimmed_mean(ws, 0), agg.fedavg(ws))
    assert agg.trimmed_mean([np.array([0.0]), np.array([1.0]), np.array([100.0])], 1).tolist() == [1.0]


def test_trimmed_mean_vs_oracle():
    rng = np.random.default_rng(3)
    ws = rand_vectors(rng, 8, 20)
    assert np.max(np.abs(agg.trimmed_mean(ws, 2) - trimmed_oracle(ws, 2))) <= 1e-12


def test_krum_identical_picks_first():
    ws = [np.ones(3) for _ in range(5)]
    assert agg.krum_index(ws, 1) == 0


def test_krum_avoids_outlier():
    rng = np.random.default_rng(4)
    honest = [np.array([1.0, 1.0]) + 0.01 * rng.normal(size=2) for _ in range(5)]
    ws = honest + [np.array([50.0, -40.0])]
    idx = agg.krum_index(ws, 1)
    assert idx < 5
    assert idx == int(np.argmin(krum_scores_oracle(ws, 1)))


def test_krum_scores_match_bruteforce():
    rng = np.random.default_rng(5)
    ws = rand_vectors(rng, 5, 7)
    np.testing.assert_allclose(agg.krum_scores(ws, 1), krum_scores_oracle(ws, 1), rtol=1e-12)


def test_select_best():
    v = np.zeros(2)
    assert agg.select_best([(v, 0.3)]) is v
    a, b = np.zeros(1), np.ones(1)
    assert agg.select_best([(a, 1.0), (b, 4.95)]) is b
    assert agg.select_best([(a, 2.0), (b, 2.0)]) is a


def test_select_best_vs_scan():
    rng = np.random.default_rng(6)
    for _ in range(50):
        scores = list(rng.normal(size=rng.integers(1, 10)))
        best, best_i = -np.inf, -1
        for i, s in enumerate(scores):
            if s > best:
                best, best_i = s, i
        assert agg.best_index(scores) == best_i


def test_aggregator_kind_parse_and_call():
    ws = [np.array([0.0]), np.array([1.0]), np.array([100.0]), np.array([2.0]), np.array([3.0])]
    assert str(agg.AggregatorKind.parse("trimmed_mean(1)")) == "trimmed_mean(1)"
    assert agg.AggregatorKind.parse("median").name == "coordinate_median"
    assert agg.AggregatorKind.parse("krum").param == 1
    assert agg.AggregatorKind.parse("trimmed_mean(1)")(ws).tolist() == [2.0]
    assert agg.AggregatorKind.parse("coordinate_median")(ws).tolist() == [2.0]
    with pytest.raises(AggregationError):
        agg.AggregatorKind.parse("bulyan")


vectors = st.integers(2, 12).flatmap(
    lambda n: st.integers(1, 6).flatmap(
        lambda d: st.lists(st.lists(st.floats(-1e3, 1e3), min_size=d, max_size=d), min_size=n, max_size=n)))


@settings(max_examples=80, deadline=None)
@given(vectors, st.randoms(use_true_random=False))
def test_permutation_invariance_and_envelope(ws, rnd):
    ws = [np.array(w) for w in ws]
    perm = ws[:]
    rnd.shuffle(perm)
    lo = np.min(ws, axis=0)
    hi = np.max(ws, axis=0)
    trim = (len(ws) - 1) // 2
    for fn in (agg.fedavg, agg.coordinate_median, lambda x: agg.trimmed_mean(x, trim)):
        a, b = fn(ws), fn(perm)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-9)
        assert np.all(a >= lo - 1e-9) and np.all(a <= hi + 1e-9)
    if len(ws) >= 5:
        k = agg.krum(ws, 1)
        assert any(np.array_equal(k, w) for w in ws)
        scores = krum_scores_oracle([list(w) for w in ws], 1)
        assert krum_scores_oracle([list(w) for w in ws], 1)[agg.krum_index(ws, 1)] == min(scores)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 12), st.integers(0, 10**6))
def test_krum_minimal_score(n, seed):
    rng = np.random.default_rng(seed)
    ws = rand_vectors(rng, n, 4)
    f = (n - 3) // 2
    oracle = krum_scores_oracle([list(w) for w in ws], f)
    assert oracle[agg.krum_index(ws, f)] == pytest.approx(min(oracle), rel=1e-12)


def test_single_element_identities():
    v = np.array([4.0, -1.0])
    for fn in (agg.fedavg, agg.coordinate_median, lambda x: agg.trimmed_mean(x, 0)):
        assert np.array_equal(fn([v]), v)


def test_krum_exhaustive_small_tiebreak():
    # two exact clusters: all scores tie within a cluster, lowest index wins
    ws = [np.zeros(2), np.zeros(2), np.zeros(2), np.ones(2), np.ones(2)]
    for f in (0, 1):
        scores = krum_scores_oracle([list(w) for w in ws], f)
        expect = min(range(5), key=lambda i: (scores[i], i))
        assert agg.krum_index(ws, f) == expect
    assert list(itertools.islice(iter(ws), 1))
