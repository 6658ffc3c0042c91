import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from newsrec.errors import DataError
from newsrec.ingest import sessionize
from newsrec.negsample import (PublishIndex, compare_strategies, jaccard, jaccard_eval,
                               reconstruct_impressions, sample_negatives, write_negatives)
from newsrec.synthetic import SyntheticConfig, generate_synthetic


def test_index_breaks_ties_by_article_id():
    idx = PublishIndex(np.array([5, 3, 5, 1]), np.array([40, 30, 20, 10]))
    assert idx.order.tolist() == [3, 1, 2, 0]
    assert idx.position.tolist() == [3, 1, 2, 0]


def test_small_catalog_window_covers_everything_else():
    idx = PublishIndex(np.array([1, 2, 3]))
    assert reconstruct_impressions([1], idx, 300).tolist() == [0, 2]


def test_window_boundary_arithmetic():
    idx = PublishIndex(np.arange(20))
    assert reconstruct_impressions([10], idx, 4).tolist() == [8, 9, 11, 12]
    assert reconstruct_impressions([0], idx, 4).tolist() == [1, 2]
    assert reconstruct_impressions([10], idx, 4, exclude=[9]).tolist() == [8, 11, 12]


def test_bad_window():
    with pytest.raises(DataError):
        reconstruct_impressions([0], PublishIndex(np.arange(3)), 0)


@settings(max_examples=100)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.integers(1, 5))
def test_pool_within_position_bounds(seed, window, n_clicks):
    rng = np.random.default_rng(seed)
    ts = rng.integers(0, 50, size=60)
    idx = PublishIndex(ts)
    clicked = rng.choice(60, size=n_clicks, replace=False)
    pool = reconstruct_impressions(clicked, idx, window)
    assert not set(pool) & set(clicked)
    half = window // 2
    for a in pool:
        assert min(abs(idx.position[a] - idx.position[c]) for c in clicked) <= half
    # oracle: brute-force scan of positions
    want = {int(idx.order[q]) for c in clicked for q in range(len(ts))
            if abs(q - idx.position[c]) <= half} - set(clicked.tolist())
    assert set(pool.tolist()) == want
    again = reconstruct_impressions(clicked, idx, window)
    assert again.tolist() == pool.tolist()


def test_sample_exact_size_pool_is_the_pool():
    pool = np.array([4, 8, 15, 16])
    assert sorted(sample_negatives(pool, 4, 0).tolist()) == [4, 8, 15, 16]


def test_sample_is_seeded():
    pool = np.arange(100)
    assert sample_negatives(pool, 10, 3).tolist() == sample_negatives(pool, 10, 3).tolist()


def test_small_pool_is_topped_up_from_catalog():
    out = sample_negatives(np.array([3]), 5, 0, fallback=np.arange(8), exclude=[0, 1])
    assert len(out) == 5 and len(set(out)) == 5
    assert 3 in out and not {0, 1} & set(out.tolist())
    with pytest.raises(DataError):
        sample_negatives(np.empty(0, dtype=int), 3, 0, fallback=np.array([1]), exclude=[1])


def test_inclusion_frequencies_are_hypergeometric():
    rng = np.random.default_rng(0)
    pool, size, draws = np.arange(100), 20, 10_000
    counts = np.zeros(100)
    for _ in range(draws):
        counts[sample_negatives(pool, size, rng)] += 1
    p = size / len(pool)
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) <= 3 * sigma)
    assert counts.sum() == draws * size
    # overall dispersion: chi-square with 99 dof, far tails only
    chi2 = np.sum((counts - draws * p) ** 2) / (draws * p * (1 - p))
    assert 50 < chi2 < 160


def test_jaccard_examples():
    assert jaccard({1, 2}, {1, 2}) == 1.0
    assert jaccard({1}, {2}) == 0.0
    assert jaccard({1, 2, 3}, {2, 3, 4}) == 0.5
    with pytest.raises(DataError):
        jaccard_eval({"a": [1]}, {"b": [1]})


def test_window_beats_random_on_planted_impressions(tmp_path):
    corp = generate_synthetic(SyntheticConfig(n_sessions=2000, n_articles=2000, days=4))
    sessions = sessionize(corp.events, corp.catalog)
    for s in sessions:
        s.impressions = corp.impressions[s.key]
    out = compare_strategies(sessions, corp.catalog, size=100, window=300, seed=0)
    assert out["sessions"] == len(sessions)
    assert out["window"] > out["random"]
    write_negatives(tmp_path / "neg.csv", {"a#0": [0, 1]}, corp.catalog)
    assert (tmp_path / "neg.csv").read_text().strip() == "a#0,1,2"
