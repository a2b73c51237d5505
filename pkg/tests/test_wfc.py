import itertools

import numpy as np
import pytest

from conftest import make_level
from levelsmith.grid_env import LevelParams, TileType, bfs_distances, solvable
from levelsmith.wfc import (EDGE_PATTERNS, TRAIN_PATTERNS, BasePattern, ContradictionExhausted, DegenerateLayout,
                            GenConfig, adjacency_violations, available_patterns, distance_field, edge_case_config,
                            generate_set, load_pattern, moss_lava_distance_correlations, place_goal_start,
                            generation_problems, prune_to_component, sample_semantics, wfc_collapse,
                            window_violations)

E, W = TileType.EMPTY, TileType.WALL
CHECKER = BasePattern(np.array([[0, 1], [1, 0]]), "checker")


def test_patterns_ship_with_package():
    names = available_patterns()
    for p in TRAIN_PATTERNS + EDGE_PATTERNS:
        assert p in names
        assert load_pattern(p).grid.ndim == 2


@pytest.mark.parametrize("model", ["simple", "overlapping"])
def test_all_empty_pattern_gives_all_empty(model):
    out = wfc_collapse(BasePattern(np.zeros((2, 2)), "empty"), (6, 7), 0, model=model)
    assert out.shape == (6, 7) and (out == E).all()


def _checkerboard_tilings(n):
    """Brute force: every n x n {E, W} grid whose 4-neighbours always differ."""
    out = []
    for bits in itertools.product((0, 1), repeat=n * n):
        g = np.array(bits).reshape(n, n)
        if (g[1:] != g[:-1]).all() and (g[:, 1:] != g[:, :-1]).all():
            out.append(g)
    return out


@pytest.mark.parametrize("model", ["simple", "overlapping"])
def test_checkerboard_pattern_tiles_checkerboards(model):
    allowed = _checkerboard_tilings(4)
    assert len(allowed) == 2
    for seed in range(10):
        out = wfc_collapse(CHECKER, (4, 4), seed, model=model)
        assert any(np.array_equal(out, a) for a in allowed)


def test_contradiction_exhausted():
    # non-periodic vertical bars: Empty only ever has Wall to its east and Wall only
    # Empty to its west, so no row three cells wide exists
    bars = BasePattern(np.array([[0, 1], [0, 1]]), "bars")
    with pytest.raises(ContradictionExhausted):
        wfc_collapse(bars, (2, 3), 0, model="simple", periodic=False, max_restarts=3)


@pytest.mark.parametrize("pattern", TRAIN_PATTERNS)
def test_collapse_is_adjacency_sound(pattern):
    pat = load_pattern(pattern)
    for seed in range(3):
        out = wfc_collapse(pat, (11, 11), seed)
        assert adjacency_violations(out, pat) == []


def test_collapse_deterministic():
    pat = load_pattern("caves")
    assert np.array_equal(wfc_collapse(pat, (9, 9), 5), wfc_collapse(pat, (9, 9), 5))


def test_prune_walls_smaller_pocket():
    layout = np.array([
        [0, 0, 0, 1, 0],
        [0, 0, 1, 1, 0],
        [1, 1, 1, 1, 0],
    ], dtype=np.int8)
    out = prune_to_component(layout)
    assert (out[:, 4] == W).all()
    assert (out[:2, :2] == E).all() and out[0, 2] == E


def test_prune_single_component_unchanged():
    layout = np.array([[0, 0], [1, 0]], dtype=np.int8)
    assert np.array_equal(prune_to_component(layout), layout)


def test_prune_tie_break_first_in_row_major():
    layout = np.array([[0, 1, 0]], dtype=np.int8)
    # both components have size 1: enumerate the choices and check the rule picks the left one
    choices = [np.array([[0, 1, 1]]), np.array([[1, 1, 0]])]
    out = prune_to_component(layout)
    assert np.array_equal(out, choices[0])


def test_place_start_at_lower_median():
    level = place_goal_start(np.zeros((1, 5), dtype=np.int8), 0, goal=(0, 4))
    assert level.goal == (0, 4) and level.start == (0, 2)
    # brute-force oracle on a random cave layout
    layout = prune_to_component(wfc_collapse(load_pattern("caves"), (9, 9), 2))
    for seed in range(5):
        lv = place_goal_start(layout, seed)
        dist = bfs_distances(lv.grid, lv.goal)
        ds = sorted(d for d in dist[dist > 0])
        assert dist[lv.start] == ds[(len(ds) - 1) // 2]


def test_place_two_and_one_cells():
    lv = place_goal_start(np.array([[0, 0, 1]], dtype=np.int8), 0, goal=(0, 0))
    assert lv.start == (0, 1)
    with pytest.raises(DegenerateLayout):
        place_goal_start(np.array([[0, 1, 1]], dtype=np.int8), 0)


def test_distance_field_rules():
    lv = make_level("G..", "##.", "S..")
    d = distance_field(lv)
    assert d[0, 0] == 0 and d[2, 0] == 6
    # (1,0): nearest navigable cells at one hop are (0,0) geo 0 and (2,0) geo 6 -> prefers 0
    assert d[1, 0] == 1
    assert d[1, 1] == 2  # one hop to (0,1) which is at distance 1


def test_semantics_fraction_zero():
    lv = place_goal_start(np.zeros((5, 5), dtype=np.int8), 0)
    cfg = GenConfig(size=(5, 5), moss_fraction=0.0, lava_fraction=0.0)
    out = sample_semantics(lv, cfg, 1)
    assert out.count(TileType.MOSS) == 0 and out.count(TileType.LAVA) == 0
    assert out.is_valid()


def test_semantics_moss_frequency_by_distance():
    lv = make_level("G...S")
    cfg = GenConfig(size=(1, 5), moss_fraction=0.6, lava_fraction=0.0)
    n = 10_000
    rng = np.random.default_rng(0)
    hits = np.zeros(5)
    for _ in range(n):
        hits += sample_semantics(lv, cfg, rng).grid[0] == TileType.MOSS
    freq = hits / n
    for d in (1, 2, 3):
        assert freq[d] == pytest.approx(0.6 * (1 - d / 4), abs=0.02)
    assert freq[0] == 0 and freq[4] == 0  # goal and start untouched


def test_generate_set_solvable_sound_and_deterministic():
    cfgs = [GenConfig(size=(9, 9), pattern=p) for p in TRAIN_PATTERNS]
    a = generate_set(cfgs, 8, seed=11)
    b = generate_set(cfgs, 8, seed=11)
    assert len(a) == 8
    assert [x.tags["pattern"] for x in a] == [p for p in TRAIN_PATTERNS for _ in range(2)]
    for x, y in zip(a, b):
        assert np.array_equal(x.grid, y.grid)
        assert generation_problems(x) == []


def test_window_checker_catches_foreign_windows():
    pat = load_pattern("corridors")
    raw = wfc_collapse(pat, (9, 9), 4)
    assert window_violations(raw, pat) == []
    broken = raw.copy()
    broken[3:6, 3:6] = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    assert window_violations(broken, pat)


def test_generation_audit_detects_tampering():
    (lv,) = generate_set(GenConfig(size=(9, 9)), 1, seed=2)
    assert generation_problems(lv) == []
    walls = np.argwhere(lv.grid == TileType.WALL)
    bad = lv.copy()
    bad.grid[tuple(walls[0])] = TileType.EMPTY
    assert "layout differs from the pruned collapse" in generation_problems(bad)


def test_edge_case_configs():
    base = GenConfig(size=(9, 9))
    e1 = edge_case_config(base, "islands", lava=False)
    e2 = edge_case_config(base, "islands", lava=True)
    assert e1.moss_fraction == pytest.approx(base.moss_fraction / 3)
    assert e2.lava_fraction == pytest.approx(base.lava_fraction * 3)
    levels = generate_set([e1, e2], 4, seed=0)
    assert all(solvable(lv) for lv in levels)


def test_correlation_signs_small_sample():
    levels = generate_set(GenConfig(size=(9, 9)), 120, seed=1)
    moss_r, lava_r = moss_lava_distance_correlations(levels)
    assert moss_r < 0 < lava_r


def test_generate_single_level():
    (lv,) = generate_set(GenConfig(size=(5, 5), pattern="caves"), 1, seed=0)
    assert isinstance(lv, LevelParams) and solvable(lv)
