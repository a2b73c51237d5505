"""Cave Escape level generation.

Pipeline per level: wave function collapse over {Empty, Wall} from a base
pattern, keep the largest navigable component, drop the goal at random and
the start at the (lower) median geodesic distance, then sample moss on
navigable cells (more likely near the goal) and lava on wall cells (more
likely far from it).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from importlib import resources

import numpy as np

from . import seeding
from .grid_env import DIRECTIONS, LevelParams, TileType, bfs_distances, navigable, solvable


class ContradictionExhausted(RuntimeError):
    pass


class DegenerateLayout(ValueError):
    pass


# -- base patterns ----------------------------------------------------------

@dataclass(frozen=True)
class BasePattern:
    grid: np.ndarray  # 0 = Empty, 1 = Wall
    id: str = ""

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.int8)
        object.__setattr__(self, "grid", g)
        if g.ndim != 2 or min(g.shape) < 2:
            raise ValueError(f"pattern {self.id!r} must be at least 2x2")
        if not np.isin(g, (TileType.EMPTY, TileType.WALL)).all():
            raise ValueError(f"pattern {self.id!r} may only hold Empty/Wall codes")
        if not (g == TileType.EMPTY).any():
            raise ValueError(f"pattern {self.id!r} has no Empty cell")


TRAIN_PATTERNS = ("caves", "rooms", "corridors", "pillars")
EDGE_PATTERNS = ("diagonals", "islands", "zigzag", "crosses")


def load_pattern(pattern_id: str) -> BasePattern:
    from .levelio import loads_text

    text = resources.files("levelsmith").joinpath("patterns", f"{pattern_id}.txt").read_text()
    (lv,) = loads_text(text)
    return BasePattern(lv.grid, pattern_id)


def available_patterns() -> list[str]:
    root = resources.files("levelsmith").joinpath("patterns")
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".txt"))


# -- wave function collapse ------------------------------------------------

@dataclass(frozen=True)
class _Model:
    weights: np.ndarray  # (P,)
    agree: np.ndarray  # (4, P, P): agree[d, a, b] -> b may sit at offset DIRECTIONS[d] from a
    cell_value: np.ndarray  # (P, k, k) pixel block each pattern stamps
    k: int  # block size (1 for simple-tiled)


def _simple_model(sample: np.ndarray, periodic: bool) -> _Model:
    tiles = np.unique(sample)
    index = {int(t): i for i, t in enumerate(tiles)}
    h, w = sample.shape
    counts = np.zeros(len(tiles))
    agree = np.zeros((4, len(tiles), len(tiles)), dtype=bool)
    for r in range(h):
        for c in range(w):
            a = index[int(sample[r, c])]
            counts[a] += 1
            for d, (dr, dc) in enumerate(DIRECTIONS):
                nr, nc = r + dr, c + dc
                if periodic:
                    nr, nc = nr % h, nc % w
                elif not (0 <= nr < h and 0 <= nc < w):
                    continue
                agree[d, a, index[int(sample[nr, nc])]] = True
    # uniform tile weights
    return _Model(np.ones(len(tiles)), agree, tiles.reshape(-1, 1, 1).astype(np.int8), 1)


def _overlapping_model(sample: np.ndarray, n: int, periodic: bool) -> _Model:
    h, w = sample.shape
    rows = range(h) if periodic else range(h - n + 1)
    cols = range(w) if periodic else range(w - n + 1)
    found: dict[bytes, int] = {}
    blocks, counts = [], []
    for r in rows:
        for c in cols:
            idx_r = np.arange(r, r + n) % h
            idx_c = np.arange(c, c + n) % w
            block = sample[np.ix_(idx_r, idx_c)]
            key = block.tobytes()
            if key not in found:
                found[key] = len(blocks)
                blocks.append(block)
                counts.append(0)
            counts[found[key]] += 1
    blocks = np.stack(blocks)
    p = len(blocks)
    agree = np.zeros((4, p, p), dtype=bool)
    for d, (dr, dc) in enumerate(DIRECTIONS):
        # overlap of a (at origin) with b shifted by (dr, dc)
        ra = slice(max(0, dr), n + min(0, dr))
        ca = slice(max(0, dc), n + min(0, dc))
        rb = slice(max(0, -dr), n + min(0, -dr))
        cb = slice(max(0, -dc), n + min(0, -dc))
        ov_a = blocks[:, ra, ca].reshape(p, -1)
        ov_b = blocks[:, rb, cb].reshape(p, -1)
        agree[d] = (ov_a[:, None, :] == ov_b[None, :, :]).all(axis=2)
    return _Model(np.asarray(counts, dtype=np.float64), agree, blocks.astype(np.int8), n)


def _collapse_once(model: _Model, shape: tuple[int, int], rng: np.random.Generator):
    h, w = shape
    p = len(model.weights)
    wave = np.ones((h, w, p), dtype=bool)
    weights = model.weights
    wlogw = weights * np.log(weights)
    while True:
        counts = wave.sum(axis=2)
        if (counts == 0).any():
            return None
        open_cells = counts > 1
        if not open_cells.any():
            break
        sw = wave @ weights
        ent = np.log(sw) - (wave @ wlogw) / sw
        ent = np.where(open_cells, ent + 1e-6 * rng.random((h, w)), np.inf)
        r, c = np.unravel_index(int(np.argmin(ent)), (h, w))
        options = np.flatnonzero(wave[r, c])
        probs = weights[options] / weights[options].sum()
        choice = options[rng.choice(len(options), p=probs)]
        wave[r, c] = False
        wave[r, c, choice] = True
        stack = [(r, c)]
        while stack:
            r0, c0 = stack.pop()
            cur = wave[r0, c0]
            for d, (dr, dc) in enumerate(DIRECTIONS):
                nr, nc = r0 + int(dr), c0 + int(dc)
                if not (0 <= nr < h and 0 <= nc < w):
                    continue
                allowed = model.agree[d][cur].any(axis=0)
                nxt = wave[nr, nc] & allowed
                if not np.array_equal(nxt, wave[nr, nc]):
                    wave[nr, nc] = nxt
                    if not nxt.any():
                        return None
                    stack.append((nr, nc))
    return wave.argmax(axis=2)


def _render(model: _Model, chosen: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    out = np.empty((h, w), dtype=np.int8)
    ph, pw = chosen.shape
    for r in range(h):
        for c in range(w):
            wr, wc = min(r, ph - 1), min(c, pw - 1)
            out[r, c] = model.cell_value[chosen[wr, wc], r - wr, c - wc]
    return out


def wfc_collapse(pattern: BasePattern, size, seed, *, model: str = "overlapping", n: int = 3,
                 periodic: bool = True, max_restarts: int = 20) -> np.ndarray:
    """Collapse a ``size`` layout over {Empty, Wall} consistent with ``pattern``.

    ``model="simple"`` uses single-tile adjacency rules; ``"overlapping"``
    uses every ``n x n`` window of the pattern as a tile, which implies the
    simple adjacency rules but keeps much more of the pattern's structure.
    """
    h, w = (size, size) if np.isscalar(size) else tuple(size)
    if model == "simple":
        m = _simple_model(pattern.grid, periodic)
        wave_shape = (h, w)
    elif model == "overlapping":
        n = min(n, h, w)
        m = _overlapping_model(pattern.grid, n, periodic)
        wave_shape = (h - n + 1, w - n + 1)
    else:
        raise ValueError(f"unknown WFC model {model!r}")
    for attempt in range(max_restarts):
        chosen = _collapse_once(m, wave_shape, seeding.rng(seed, "wfc", attempt))
        if chosen is not None:
            return _render(m, chosen, (h, w))
    raise ContradictionExhausted(
        f"pattern {pattern.id!r}: no consistent {h}x{w} layout after {max_restarts} attempts"
    )


def pattern_adjacencies(pattern: BasePattern, periodic: bool = True) -> set[tuple[int, int, int]]:
    """All (direction, tile, neighbour) triples occurring in the pattern."""
    m = _simple_model(pattern.grid, periodic)
    tiles = m.cell_value[:, 0, 0]
    d, a, b = np.nonzero(m.agree)
    return {(int(di), int(tiles[ai]), int(tiles[bi])) for di, ai, bi in zip(d, a, b)}


def adjacency_violations(layout: np.ndarray, pattern: BasePattern, periodic: bool = True) -> list:
    """Adjacent pairs of ``layout`` whose (direction, a, b) never occurs in the pattern."""
    allowed = pattern_adjacencies(pattern, periodic)
    h, w = layout.shape
    bad = []
    for r in range(h):
        for c in range(w):
            for d, (dr, dc) in enumerate(DIRECTIONS):
                nr, nc = r + int(dr), c + int(dc)
                if 0 <= nr < h and 0 <= nc < w:
                    trip = (d, int(layout[r, c]), int(layout[nr, nc]))
                    if trip not in allowed:
                        bad.append(((r, c), trip))
    return bad


def window_violations(layout: np.ndarray, pattern: BasePattern, n: int = 3, periodic: bool = True) -> list:
    """Top-left corners of ``n x n`` windows of ``layout`` that never occur in the pattern.

    This is the constraint the overlapping model enforces; it implies the
    single-tile adjacency rules.
    """
    allowed = {b.tobytes() for b in _overlapping_model(pattern.grid, n, periodic).cell_value}
    layout = np.asarray(layout, dtype=np.int8)
    h, w = layout.shape
    return [(r, c) for r in range(h - n + 1) for c in range(w - n + 1)
            if layout[r:r + n, c:c + n].tobytes() not in allowed]


def layout_of(level: LevelParams) -> np.ndarray:
    """Empty/Wall layout underlying a level (navigable cells map to Empty)."""
    return np.where(navigable(level.grid), TileType.EMPTY, TileType.WALL).astype(np.int8)


def generation_problems(level: LevelParams) -> list[str]:
    """Re-derive a generated level's raw collapse from its tags and audit the pipeline.

    Checks the raw collapse against the pattern (windows for the overlapping
    model, adjacencies for the simple one), that pruning reproduces the
    level's layout, and that the level is valid and solvable.
    """
    t = level.tags
    pattern = load_pattern(t["pattern"])
    raw = wfc_collapse(pattern, level.grid.shape, t["layout_seed"], model=t["wfc_model"], n=t["wfc_n"],
                       max_restarts=t.get("max_restarts", 20))
    problems = []
    if t["wfc_model"] == "overlapping":
        if window_violations(raw, pattern, min(t["wfc_n"], *level.grid.shape)):
            problems.append("raw collapse has windows absent from the pattern")
    elif adjacency_violations(raw, pattern):
        problems.append("raw collapse has adjacencies absent from the pattern")
    if not np.array_equal(layout_of(level), prune_to_component(raw)):
        problems.append("layout differs from the pruned collapse")
    if not level.is_valid() or not solvable(level):
        problems.append("level is invalid or unsolvable")
    return problems


# -- layout post-processing -------------------------------------------------

def _components(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    """4-connected components of ``mask`` in row-major order of their first cell."""
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                dist = bfs_distances(mask.astype(np.int8), (r, c), passable=mask)
                cells = list(zip(*np.nonzero(dist >= 0)))
                for cell in cells:
                    seen[cell] = True
                comps.append([(int(a), int(b)) for a, b in cells])
    return comps


def prune_to_component(layout: np.ndarray) -> np.ndarray:
    """Wall off every navigable cell outside the largest navigable component.

    Ties between equal-size components go to the one whose first cell in
    row-major order comes first.
    """
    layout = np.asarray(layout, dtype=np.int8)
    nav = navigable(layout)
    if not nav.any():
        raise DegenerateLayout("layout has no navigable cell")
    comps = _components(nav)
    best = max(range(len(comps)), key=lambda i: (len(comps[i]), -i))
    out = layout.copy()
    keep = np.zeros_like(nav)
    for cell in comps[best]:
        keep[cell] = True
    out[nav & ~keep] = TileType.WALL
    return out


def place_goal_start(layout: np.ndarray, seed, *, goal=None, level_id: str = "") -> LevelParams:
    """Goal uniformly at random, start at the lower-median distance from it."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    grid = np.asarray(layout, dtype=np.int8).copy()
    grid[(grid == TileType.START) | (grid == TileType.GOAL)] = TileType.EMPTY
    cells = np.argwhere(navigable(grid))
    if len(cells) < 2:
        raise DegenerateLayout(f"need at least 2 navigable cells, found {len(cells)}")
    if goal is None:
        goal = tuple(int(v) for v in cells[rng.integers(len(cells))])
    dist = bfs_distances(grid, goal)
    others = [(int(r), int(c)) for r, c in cells if (r, c) != goal and dist[r, c] > 0]
    if not others:
        raise DegenerateLayout("goal is isolated")
    ds = sorted(dist[cell] for cell in others)
    median = ds[(len(ds) - 1) // 2]
    candidates = [cell for cell in others if dist[cell] == median]
    start = candidates[rng.integers(len(candidates))]
    grid[goal] = TileType.GOAL
    grid[start] = TileType.START
    return LevelParams(grid, level_id)


# -- semantics ---------------------------------------------------------------

def distance_field(level: LevelParams) -> np.ndarray:
    """Per-cell distance to goal; -1 where undefined.

    Navigable cells reachable from the goal get their BFS distance. Other
    cells take the nearest reachable navigable cell (Manhattan hops, ties to
    the smaller geodesic distance) and add the hop count.
    """
    grid = level.grid
    geo = bfs_distances(grid, level.goal)
    out = geo.copy()
    src = np.argwhere(geo >= 0)
    rest = np.argwhere(geo < 0)
    if len(rest):
        hops = np.abs(rest[:, None, :] - src[None, :, :]).sum(axis=2)
        src_geo = geo[src[:, 0], src[:, 1]]
        # lexicographic (hops, geo) minimum
        key = hops * (int(src_geo.max()) + 1) + src_geo[None, :]
        best = key.argmin(axis=1)
        vals = hops[np.arange(len(rest)), best] + src_geo[best]
        reachable_nav = navigable(grid)
        for (r, c), v in zip(rest, vals):
            # unreachable navigable cells stay undefined
            out[r, c] = -1 if reachable_nav[r, c] else v
    return out


@dataclass
class GenConfig:
    size: tuple = (13, 13)
    moss_fraction: float = 0.5
    lava_fraction: float = 0.25
    max_restarts: int = 20
    pattern: str = "caves"
    wfc_model: str = "overlapping"
    wfc_n: int = 3

    def __post_init__(self):
        if np.isscalar(self.size):
            self.size = (int(self.size), int(self.size))
        self.size = tuple(int(s) for s in self.size)
        for name in ("moss_fraction", "lava_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.max_restarts < 1:
            raise ValueError("max_restarts must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size"] = list(self.size)
        return d


def edge_case_config(cfg: GenConfig, pattern: str, lava: bool) -> GenConfig:
    """Train config with moss density divided by 3 (and lava tripled if ``lava``)."""
    return replace(cfg, pattern=pattern, moss_fraction=cfg.moss_fraction / 3,
                   lava_fraction=min(1.0, cfg.lava_fraction * 3) if lava else cfg.lava_fraction)


def sample_semantics(level: LevelParams, cfg: GenConfig, seed) -> LevelParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dist = distance_field(level)
    d_max = max(int(dist.max()), 1)
    closeness = 1.0 - np.clip(dist, 0, None) / d_max
    u = rng.random(level.grid.shape)
    grid = level.grid.copy()
    moss_ok = (grid == TileType.EMPTY) & (dist >= 0)
    lava_ok = (grid == TileType.WALL) & (dist >= 0)
    grid[moss_ok & (u < cfg.moss_fraction * closeness)] = TileType.MOSS
    grid[lava_ok & (u < cfg.lava_fraction * (1.0 - closeness))] = TileType.LAVA
    return LevelParams(grid, level.id, dict(level.tags))


def generate_level(cfg: GenConfig, seed: int, level_id: str = "") -> LevelParams:
    pattern = load_pattern(cfg.pattern)
    layout_seed = seeding.derive_seed(seed, "layout")
    layout = wfc_collapse(pattern, cfg.size, layout_seed, model=cfg.wfc_model, n=cfg.wfc_n,
                          max_restarts=cfg.max_restarts)
    layout = prune_to_component(layout)
    level = place_goal_start(layout, seeding.rng(seed, "placement"), level_id=level_id)
    level = sample_semantics(level, cfg, seeding.rng(seed, "semantics"))
    level.tags = {"pattern": cfg.pattern, "generator": "wfc", "layout_seed": layout_seed,
                  "wfc_model": cfg.wfc_model, "wfc_n": cfg.wfc_n, "max_restarts": cfg.max_restarts}
    return level


def generate_set(cfgs, count: int, seed: int, prefix: str = "lvl", max_rejects: int = 1000) -> list[LevelParams]:
    """``count`` solvable levels, split as evenly as possible over ``cfgs``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if isinstance(cfgs, GenConfig):
        cfgs = [cfgs]
    cfgs = list(cfgs)
    per = [count // len(cfgs) + (1 if i < count % len(cfgs) else 0) for i in range(len(cfgs))]
    levels = []
    for ci, (cfg, k) in enumerate(zip(cfgs, per)):
        made, attempt = 0, 0
        while made < k:
            if attempt - made > max_rejects:
                raise ContradictionExhausted(f"config {ci}: too many rejected draws")
            s = seeding.derive_seed(seed, "level", ci, attempt)
            attempt += 1
            try:
                lv = generate_level(cfg, s, f"{prefix}{len(levels):05d}")
            except DegenerateLayout:
                continue
            if solvable(lv):
                levels.append(lv)
                made += 1
    return levels


def moss_lava_distance_correlations(levels) -> tuple[float, float]:
    """Pooled Pearson correlations with distance-to-goal.

    Moss indicator over navigable cells, lava indicator over non-navigable
    cells.
    """
    nav_d, moss, wall_d, lava = [], [], [], []
    for lv in levels:
        dist = distance_field(lv)
        nav = navigable(lv.grid) & (dist >= 0)
        solid = ~navigable(lv.grid) & (dist >= 0)
        nav_d.append(dist[nav])
        moss.append(lv.grid[nav] == TileType.MOSS)
        wall_d.append(dist[solid])
        lava.append(lv.grid[solid] == TileType.LAVA)

    def corr(x, y):
        return float(np.corrcoef(np.concatenate(x).astype(float), np.concatenate(y).astype(float))[0, 1])

    return corr(moss, nav_d), corr(lava, wall_d)
