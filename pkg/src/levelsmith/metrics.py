"""Generalisation metrics, tile-distance divergences and score aggregation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid_env import LevelParams, TileType
from .wfc import distance_field


class EmptySet(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass
class EvalResult:
    """Per-level evaluation of one agent on one level set."""
    returns: np.ndarray
    solved: np.ndarray
    tag: str = ""
    level_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.returns = np.asarray(self.returns, dtype=np.float64)
        self.solved = np.asarray(self.solved, dtype=np.float64)
        if self.returns.shape != self.solved.shape:
            raise DimensionMismatch("returns and solved rates differ in length")
        if self.returns.size and (self.returns.min() < 0 or self.returns.max() > 1):
            raise ValueError("returns must lie in [0, 1]")

    def __len__(self):
        return len(self.returns)

    @property
    def mean_return(self) -> float:
        if len(self) == 0:
            raise EmptySet(f"evaluation set {self.tag!r} is empty")
        return float(self.returns.mean())


def gen_gap(train: EvalResult, test: EvalResult) -> float:
    return train.mean_return - test.mean_return


def over_gap(buffer_dist, buffer_returns, train: EvalResult) -> float:
    """Buffer-weighted return minus the mean training-set return."""
    p = np.asarray(buffer_dist, dtype=np.float64)
    v = np.asarray(buffer_returns, dtype=np.float64)
    if p.shape != v.shape:
        raise DimensionMismatch(f"distribution has {p.shape}, returns have {v.shape}")
    if not np.isclose(p.sum(), 1.0, atol=1e-9):
        raise ValueError(f"buffer distribution sums to {p.sum()}")
    return float(p @ v) - train.mean_return


# -- tile-distance distributions ----------------------------------------------

# tile types counted against their distance to the goal (the goal itself is the origin)
DIST_TILES = (TileType.EMPTY, TileType.WALL, TileType.MOSS, TileType.LAVA, TileType.START)


@dataclass
class TileDistanceDist:
    """Joint categorical over (tile type, distance bucket); the last bucket is overflow."""
    probs: np.ndarray

    @property
    def d_cap(self) -> int:
        return self.probs.shape[1] - 2

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or self.probs.shape[0] != len(DIST_TILES):
            raise DimensionMismatch(f"expected ({len(DIST_TILES)}, d_cap + 2), got {self.probs.shape}")


def tile_distance_dist(level: LevelParams, d_cap: int | None = None) -> TileDistanceDist:
    """c(t, d) for one level; undefined distances fall in the overflow bucket."""
    if d_cap is None:
        d_cap = level.width + level.height
    dist = distance_field(level)
    counts = np.zeros((len(DIST_TILES), d_cap + 2))
    for row, tile in enumerate(DIST_TILES):
        d = dist[level.grid == tile]
        d = np.where((d < 0) | (d > d_cap), d_cap + 1, d)
        counts[row] += np.bincount(d, minlength=d_cap + 2)
    return TileDistanceDist(counts / counts.sum())


def marginal_tile_dist(levels, weights=None, d_cap: int | None = None) -> TileDistanceDist:
    levels = list(levels)
    if not levels:
        raise EmptySet("no levels")
    if weights is None:
        weights = np.full(len(levels), 1.0 / len(levels))
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(levels),):
        raise DimensionMismatch("one weight per level required")
    if not np.isclose(w.sum(), 1.0, atol=1e-9):
        raise ValueError(f"weights sum to {w.sum()}")
    if d_cap is None:
        d_cap = max(lv.width + lv.height for lv in levels)
    acc = np.zeros((len(DIST_TILES), d_cap + 2))
    for lv, wi in zip(levels, w):
        if wi > 0:
            acc += wi * tile_distance_dist(lv, d_cap).probs
    return TileDistanceDist(acc)


def _kl_to(p: np.ndarray, m: np.ndarray) -> float:
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / m[nz])).sum())


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats."""
    p = p.probs if isinstance(p, TileDistanceDist) else np.asarray(p, dtype=np.float64)
    q = q.probs if isinstance(q, TileDistanceDist) else np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionMismatch(f"supports differ: {p.shape} vs {q.shape}")
    p, q = p.ravel(), q.ravel()
    m = 0.5 * (p + q)
    # rounding can push near-identical pairs a few ulps below zero
    return float(min(max(0.5 * _kl_to(p, m) + 0.5 * _kl_to(q, m), 0.0), math.log(2)))


# -- aggregation --------------------------------------------------------------

AGGREGATES = ("Mean", "IQM", "SolvedRate", "OptimalityGap")


def iqm(x) -> float:
    """Mean of the middle half; fractional end points are weighted like rliable's trim."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = len(x)
    if n == 0:
        raise EmptySet("no scores")
    lo, hi = 0.25 * n, 0.75 * n
    # weight of each sorted sample inside [lo, hi)
    idx = np.arange(n)
    w = np.clip(np.minimum(idx + 1, hi) - np.maximum(idx, lo), 0.0, 1.0)
    return float((w * x).sum() / w.sum())


def point_estimate(result: EvalResult, kind: str) -> float:
    if len(result) == 0:
        raise EmptySet(f"evaluation set {result.tag!r} is empty")
    if kind == "Mean":
        return result.mean_return
    if kind == "IQM":
        return iqm(result.returns)
    if kind == "SolvedRate":
        return float(result.solved.mean())
    if kind == "OptimalityGap":
        return 1.0 - result.mean_return
    raise ValueError(f"unknown aggregate {kind!r}; expected one of {AGGREGATES}")


def aggregate(results, kind: str) -> tuple[float, float]:
    """Mean over seeds of a per-seed point estimate, with its standard error."""
    if isinstance(results, EvalResult):
        results = [results]
    results = list(results)
    if not results:
        raise EmptySet("no results")
    vals = np.array([point_estimate(r, kind) for r in results])
    se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return float(vals.mean()), se
