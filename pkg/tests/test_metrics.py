import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_level
from levelsmith.metrics import (DIST_TILES, DimensionMismatch, EmptySet, EvalResult, TileDistanceDist, aggregate,
                                gen_gap, iqm, jsd, marginal_tile_dist, over_gap, point_estimate,
                                tile_distance_dist)
from levelsmith.grid_env import TileType


def res(*returns, tag=""):
    r = np.array(returns, dtype=float)
    return EvalResult(r, (r > 0).astype(float), tag)


def test_gen_gap_examples():
    assert gen_gap(res(0.8), res(0.6)) == pytest.approx(0.2, abs=1e-12)
    a = res(0.1, 0.5, 0.9)
    assert gen_gap(a, a) == 0.0
    assert gen_gap(res(0.2), res(0.7)) < 0
    with pytest.raises(EmptySet):
        gen_gap(res(), res(0.3))


def test_over_gap_examples():
    train = res(0.2, 0.4, 0.9)
    assert over_gap(np.full(3, 1 / 3), train.returns, train) == pytest.approx(0.0, abs=1e-15)
    assert over_gap([1.0, 0.0], [1.0, 0.3], res(0.4)) == pytest.approx(0.6, abs=1e-12)
    assert over_gap([0.5, 0.5], [0.0, 0.0], res(0.5)) == pytest.approx(-0.5, abs=1e-12)
    with pytest.raises(DimensionMismatch):
        over_gap([1.0], [0.2, 0.3], train)


def test_returns_must_be_normalised():
    with pytest.raises(ValueError):
        EvalResult(np.array([1.5]), np.array([1.0]))


def test_jsd_examples():
    assert jsd([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert jsd([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.log(2), abs=1e-12)
    direct = 0.5 * (0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25)) + 0.5 * math.log(1 / 0.75)
    assert jsd([0.5, 0.5], [1.0, 0.0]) == pytest.approx(direct, abs=1e-12)
    assert direct == pytest.approx(0.2158, abs=1e-4)
    with pytest.raises(DimensionMismatch):
        jsd([1.0], [0.5, 0.5])


def test_jsd_bounds_and_symmetry_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        k = int(rng.integers(1, 12))
        p = rng.dirichlet(np.full(k, 0.5))
        q = rng.dirichlet(np.full(k, 0.5))
        p[rng.random(k) < 0.2] = 0
        if p.sum() == 0:
            p[0] = 1
        p /= p.sum()
        d = jsd(p, q)
        assert -1e-15 <= d <= math.log(2) + 1e-12
        assert d == jsd(q, p)


def test_corridor_start_in_bucket_two():
    lv = make_level("S.G")
    c = tile_distance_dist(lv)
    start_row = DIST_TILES.index(TileType.START)
    assert c.probs[start_row, 2] == 0.5
    assert c.probs[DIST_TILES.index(TileType.EMPTY), 1] == 0.5
    assert c.probs.sum() == 1.0


def test_overflow_bucket_holds_unreachable_cells():
    lv = make_level("S.G#", "####", "#..#")
    c = tile_distance_dist(lv, d_cap=3)
    assert c.probs.shape == (len(DIST_TILES), 5)
    # the pocket in the bottom row has no navigable path and no wall hop to a finite distance
    assert c.probs[:, -1].sum() > 0


def test_marginal_examples():
    a, b = make_level("S.G", "#m."), make_level("G#", "LS", "..")
    single = marginal_tile_dist([a], d_cap=5)
    assert np.array_equal(single.probs, tile_distance_dist(a, 5).probs)
    twice = marginal_tile_dist([a, a], [0.3, 0.7], d_cap=5)
    np.testing.assert_allclose(twice.probs, single.probs, atol=1e-15)
    mix = marginal_tile_dist([a, b], [0.25, 0.75], d_cap=5)
    np.testing.assert_allclose(mix.probs, 0.25 * tile_distance_dist(a, 5).probs
                               + 0.75 * tile_distance_dist(b, 5).probs, atol=1e-15)
    assert isinstance(mix, TileDistanceDist) and mix.probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert jsd(mix, mix) == 0.0
    with pytest.raises(EmptySet):
        marginal_tile_dist([])


def test_iqm_examples():
    assert iqm([0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.0, 1.0]) == pytest.approx(0.7, abs=1e-12)
    assert iqm([1.0] * 5) == 1.0
    with pytest.raises(EmptySet):
        iqm([])


def _brute_iqm(x):
    # replicate each score 4 times; then the middle half is an exact slice
    rep = np.sort(np.repeat(np.asarray(x, dtype=float), 4))
    n = len(rep)
    return rep[n // 4: 3 * n // 4].mean()


def test_iqm_matches_replication_oracle():
    rng = np.random.default_rng(3)
    for n in range(1, 30):
        x = rng.random(n)
        assert iqm(x) == pytest.approx(_brute_iqm(x), abs=1e-12)


def test_aggregate_examples():
    ones = res(1.0, 1.0, 1.0)
    assert point_estimate(ones, "IQM") == 1.0 and point_estimate(ones, "OptimalityGap") == 0.0
    assert point_estimate(res(0, 0, 1, 1), "Mean") == 0.5
    assert point_estimate(res(0, 0, 1, 1), "SolvedRate") == 0.5
    mean, se = aggregate([res(0.2, 0.4), res(0.6, 0.8)], "Mean")
    assert mean == pytest.approx(0.5) and se == pytest.approx(0.2)  # seed means 0.3, 0.7
    with pytest.raises(EmptySet):
        aggregate([], "Mean")
    with pytest.raises(ValueError):
        point_estimate(ones, "Median")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=20), st.randoms())
def test_mean_permutation_invariant(xs, rnd):
    ys = list(xs)
    rnd.shuffle(ys)
    a = point_estimate(res(*xs), "Mean")
    b = point_estimate(res(*ys), "Mean")
    assert a == pytest.approx(b, abs=1e-12)
    assert point_estimate(res(*xs), "IQM") == pytest.approx(point_estimate(res(*ys), "IQM"), abs=1e-12)


def test_joint_sums_to_one_over_all_tiny_levels():
    # every 2x2 grid built from Empty/Wall/Moss/Lava with a Start and a Goal
    for cells in itertools.product([0, 1, 2, 3], repeat=2):
        grid = np.array([[TileType.START, cells[0]], [cells[1], TileType.GOAL]], dtype=np.int8)
        c = tile_distance_dist(make_level("S.", ".G").copy(grid=grid))
        assert c.probs.sum() == pytest.approx(1.0, abs=1e-12) and (c.probs >= 0).all()
