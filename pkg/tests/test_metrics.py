import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from newsrec.metrics import (RankingResult, average_reports, coverage, format_table, hit_rate,
                             ild, ndcg, report, stratified_report, unexp)

TOPIC = {1: "A", 2: "A", 3: "B", 4: "C", 5: "B", 6: "A", 7: "C", 8: "D"}


def _r(rank, ranked=(1, 2, 3), label=1, prefix=(4,), cold=False, key="s"):
    return RankingResult(key, list(ranked), label, rank, list(prefix), cold)


# brute-force oracles: explicit loops over every pair / item, no shortcuts

def bf_hr(results, k):
    return sum(1 for r in results if r.label_rank is not None and r.label_rank <= k) / len(results)


def bf_ndcg(results, k):
    return sum((1 / math.log2(r.label_rank + 1)) if r.label_rank is not None and r.label_rank <= k
               else 0.0 for r in results) / len(results)


def bf_ild(items, topic):
    pairs = [(a, b) for i, a in enumerate(items) for j, b in enumerate(items) if i != j]
    return sum(topic[a] != topic[b] for a, b in pairs) / len(pairs)


def bf_unexp(items, prefix, topic):
    return sum(sum(topic[a] != topic[b] for b in prefix) / len(prefix) for a in items) / len(items)


def test_hit_rate_examples():
    assert hit_rate([_r(1), _r(1)], 20) == 1.0
    assert hit_rate([_r(None), _r(21)], 20) == 0.0
    assert hit_rate([_r(1), _r(25), _r(7)], 20) == 2 / 3


def test_ndcg_examples():
    assert ndcg([_r(1)]) == 1.0
    assert ndcg([_r(3)]) == 0.5
    assert ndcg([_r(1), _r(3), _r(None)]) == 0.5


def test_ild_examples():
    assert ild([1, 2, 6], TOPIC) == 0.0
    assert ild([1, 3], TOPIC) == 1.0
    assert abs(ild([1, 2, 3], TOPIC) - 2 / 3) <= 1e-12
    assert ild([1], TOPIC) is None


def test_unexp_examples():
    assert unexp([1, 2], [6], TOPIC) == 0.0
    assert unexp([3, 4], [1, 2], TOPIC) == 1.0
    assert unexp([1, 3], [2], TOPIC) == 0.5
    with pytest.raises(ValueError):
        unexp([1], [], TOPIC)


def test_coverage_examples():
    same = [_r(1, ranked=[1, 2], label=l) for l in (1, 3, 5)]
    assert coverage(same, k=2) == 2 / 3
    perfect = [_r(1, ranked=[l, 8], label=l) for l in (1, 3, 5)]
    assert coverage(perfect, k=1) == 1.0
    fixture = [_r(1, ranked=[1, 2, 3], label=1), _r(2, ranked=[2, 4, 5], label=4),
               _r(None, ranked=[6, 7, 8], label=7), _r(1, ranked=[1, 2, 3], label=1),
               _r(3, ranked=[3, 2, 1], label=1)]
    assert coverage(fixture, k=3) == 8 / 3
    assert coverage(fixture, k=1) == 4 / 3


ranks = st.one_of(st.none(), st.integers(1, 40))


@settings(max_examples=200)
@given(st.lists(ranks, min_size=1, max_size=10), st.integers(1, 30))
def test_accuracy_metrics_match_brute_force(rs, k):
    results = [_r(x) for x in rs]
    assert abs(hit_rate(results, k) - bf_hr(results, k)) <= 1e-12
    assert abs(ndcg(results, k) - bf_ndcg(results, k)) <= 1e-12


@settings(max_examples=200)
@given(st.lists(st.sampled_from(sorted(TOPIC)), min_size=2, max_size=10),
       st.lists(st.sampled_from(sorted(TOPIC)), min_size=1, max_size=6))
def test_diversity_metrics_match_brute_force(items, prefix):
    assert abs(ild(items, TOPIC) - bf_ild(items, TOPIC)) <= 1e-12
    assert abs(unexp(items, prefix, TOPIC) - bf_unexp(items, prefix, TOPIC)) <= 1e-12


@settings(max_examples=100)
@given(st.lists(st.sampled_from(sorted(TOPIC)), min_size=2, max_size=8), st.randoms())
def test_diversity_is_permutation_invariant(items, rnd):
    shuffled = list(items)
    rnd.shuffle(shuffled)
    assert abs(ild(items, TOPIC) - ild(shuffled, TOPIC)) <= 1e-12
    assert abs(unexp(items, [1, 3], TOPIC) - unexp(shuffled, [1, 3], TOPIC)) <= 1e-12


@settings(max_examples=200)
@given(st.lists(ranks, min_size=1, max_size=20))
def test_hr_monotone_in_k_and_bounds_ndcg(rs):
    results = [_r(x) for x in rs]
    hrs = [hit_rate(results, k) for k in range(1, 41)]
    assert all(a <= b for a, b in zip(hrs, hrs[1:]))
    for k in (1, 5, 20):
        assert ndcg(results, k) <= hit_rate(results, k) + 1e-15
        assert 0.0 <= ndcg(results, k) <= 1.0


@settings(max_examples=100)
@given(st.lists(ranks, min_size=1, max_size=10), st.lists(ranks, min_size=1, max_size=10))
def test_concatenation_is_size_weighted_mean(a, b):
    ra, rb = [_r(x) for x in a], [_r(x) for x in b]
    for fn in (hit_rate, ndcg):
        whole = fn(ra + rb, 20)
        parts = (len(ra) * fn(ra, 20) + len(rb) * fn(rb, 20)) / (len(ra) + len(rb))
        assert abs(whole - parts) <= 1e-12


def test_strata_sizes_and_absent_strata():
    results = [_r(1, label=1, prefix=[2]), _r(4, label=3, prefix=[1, 2, 4, 5, 6])]
    rep = stratified_report(results, train_articles={1, 2}, topic=TOPIC)
    assert rep["cold"]["cold"]["n"] == 1 and rep["cold"]["non_cold"]["n"] == 1
    assert set(rep["length"]) == {"1", "5+"}
    warm = stratified_report([_r(1, label=1)], train_articles={1}, topic=TOPIC)
    assert "cold" not in warm["cold"]


def test_cold_fraction_matches_injection_rate():
    rng = np.random.default_rng(7)
    train = set(range(1, 501))
    results, injected = [], 0
    for i in range(5000):
        cold = rng.random() < 0.3
        injected += cold
        label = int(rng.integers(1000, 2000)) if cold else int(rng.integers(1, 501))
        results.append(RankingResult(f"s{i}", [1, 2], label, None, [1], False))
    rep = stratified_report(results, train, topic=lambda a: a % 4)
    assert abs(rep["cold_fraction"] - 0.3) <= 0.01
    assert rep["cold_fraction"] == injected / 5000


def test_report_values_are_in_unit_range():
    results = [_r(1, ranked=[1, 3, 4]), _r(None, ranked=[2, 6, 1], label=8)]
    rep = report(results, TOPIC, k=3)
    for key in ("HR@3", "NDCG@3", "ILD@3", "unEXP@3"):
        assert 0.0 <= rep[key] <= 1.0
    assert report([], TOPIC) is None


def test_fold_average_uniform_and_weighted():
    out = average_reports([{"n": 10, "HR@20": 0.2}, {"n": 30, "HR@20": 0.6}])
    assert out["uniform"]["HR@20"] == pytest.approx(0.4, abs=1e-15)
    assert out["weighted"]["HR@20"] == pytest.approx(0.5, abs=1e-15)


def test_format_table_aligns():
    text = format_table({"HR@20": 0.25, "n": 4, "ILD@20": None}, "demo")
    lines = text.splitlines()
    assert lines[0] == "demo"
    assert len({len(l) for l in lines[1:]}) == 1
