"""Partially observable gridworld with one level per ``LevelParams``.

The agent sees a 5x5 egocentric window (two cells to each side, four ahead)
and a one-hot heading. Only three actions exist: turn left, turn right and
move forward.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class TileType(IntEnum):
    EMPTY = 0
    WALL = 1
    MOSS = 2
    LAVA = 3
    GOAL = 4
    START = 5
    OUT_OF_BOUNDS = 6


N_TILE_TYPES = len(TileType)
NAVIGABLE = frozenset({TileType.EMPTY, TileType.MOSS, TileType.START, TileType.GOAL})
# lookup table indexed by tile code
NAVIGABLE_MASK = np.array([t in NAVIGABLE for t in TileType], dtype=bool)


class Action(IntEnum):
    TURN_LEFT = 0
    TURN_RIGHT = 1
    FORWARD = 2


N_ACTIONS = len(Action)


class Heading(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3


DIRECTIONS = np.array([(-1, 0), (0, 1), (1, 0), (0, -1)], dtype=np.int64)

VIEW_AHEAD = 4
VIEW_SIDE = 2
VIEW_SIZE = 5


class Outcome(IntEnum):
    IN_PROGRESS = 0
    SUCCESS = 1
    LAVA_DEATH = 2
    TIMEOUT = 3


class InvalidLevel(ValueError):
    pass


class SteppedAfterDone(RuntimeError):
    pass


@dataclass
class LevelParams:
    """Tile grid (row-major, shape ``(height, width)``) plus an opaque id."""

    grid: np.ndarray
    id: str = ""
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int8)
        if self.grid.ndim != 2:
            raise InvalidLevel(f"grid must be 2D, got shape {self.grid.shape}")

    @property
    def height(self) -> int:
        return int(self.grid.shape[0])

    @property
    def width(self) -> int:
        return int(self.grid.shape[1])

    def count(self, tile: TileType) -> int:
        return int(np.count_nonzero(self.grid == tile))

    def find(self, tile: TileType) -> tuple[int, int]:
        rows, cols = np.nonzero(self.grid == tile)
        if len(rows) != 1:
            raise InvalidLevel(f"expected exactly one {tile.name}, found {len(rows)}")
        return int(rows[0]), int(cols[0])

    @property
    def start(self) -> tuple[int, int]:
        return self.find(TileType.START)

    @property
    def goal(self) -> tuple[int, int]:
        return self.find(TileType.GOAL)

    def is_valid(self) -> bool:
        return self.count(TileType.START) == 1 and self.count(TileType.GOAL) == 1

    def validate(self) -> None:
        if not self.is_valid():
            raise InvalidLevel(
                f"level {self.id!r}: {self.count(TileType.START)} start and "
                f"{self.count(TileType.GOAL)} goal tiles"
            )
        if self.grid.min() < 0 or self.grid.max() >= TileType.OUT_OF_BOUNDS:
            raise InvalidLevel(f"level {self.id!r}: tile codes out of range")

    def copy(self, **changes) -> "LevelParams":
        out = LevelParams(self.grid.copy(), self.id, dict(self.tags))
        for k, v in changes.items():
            setattr(out, k, v)
        return out

    def key(self) -> bytes:
        """Hashable identity of the layout (ignores id and tags)."""
        return self.grid.shape[0].to_bytes(2, "little") + self.grid.tobytes()

    def __eq__(self, other):
        if not isinstance(other, LevelParams):
            return NotImplemented
        return self.grid.shape == other.grid.shape and bool(np.array_equal(self.grid, other.grid))

    __hash__ = None


def navigable(grid: np.ndarray) -> np.ndarray:
    return NAVIGABLE_MASK[grid]


def bfs_distances(grid: np.ndarray, source: tuple[int, int], passable: np.ndarray | None = None) -> np.ndarray:
    """4-connected BFS hop counts from ``source``; -1 where unreachable."""
    if passable is None:
        passable = navigable(grid)
    h, w = grid.shape
    dist = np.full((h, w), -1, dtype=np.int64)
    if not passable[source]:
        return dist
    dist[source] = 0
    queue = deque([source])
    while queue:
        r, c = queue.popleft()
        d = dist[r, c] + 1
        for dr, dc in DIRECTIONS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and passable[nr, nc] and dist[nr, nc] < 0:
                dist[nr, nc] = d
                queue.append((nr, nc))
    return dist


def solvable(level: LevelParams) -> bool:
    """True iff Start and Goal are joined by a 4-connected navigable path."""
    level.validate()
    dist = bfs_distances(level.grid, level.goal)
    return bool(dist[level.start] >= 0)


def max_steps(level: LevelParams) -> int:
    return 2 * level.width * level.height


@dataclass
class EnvState:
    agent_pos: tuple[int, int]
    heading: int
    t: int = 0
    outcome: Outcome = Outcome.IN_PROGRESS

    @property
    def done(self) -> bool:
        return self.outcome != Outcome.IN_PROGRESS


@dataclass(frozen=True)
class Observation:
    window: np.ndarray  # (5, 5) tile codes, row 0 is furthest ahead, agent at (4, 2)
    heading_onehot: np.ndarray  # (4,)


def _padded(grid: np.ndarray) -> np.ndarray:
    pad = VIEW_AHEAD
    return np.pad(grid, pad, mode="constant", constant_values=int(TileType.OUT_OF_BOUNDS))


# offsets (ahead, lateral) for every window cell, in window order
_AHEAD = np.repeat(np.arange(VIEW_AHEAD, -1, -1), VIEW_SIZE)
_LATERAL = np.tile(np.arange(-VIEW_SIDE, VIEW_SIDE + 1), VIEW_SIZE)


def view_window(padded: np.ndarray, pos: tuple[int, int], heading: int) -> np.ndarray:
    fwd = DIRECTIONS[heading]
    right = DIRECTIONS[(heading + 1) % 4]
    rows = pos[0] + VIEW_AHEAD + _AHEAD * fwd[0] + _LATERAL * right[0]
    cols = pos[1] + VIEW_AHEAD + _AHEAD * fwd[1] + _LATERAL * right[1]
    return padded[rows, cols].reshape(VIEW_SIZE, VIEW_SIZE)


def observe(level: LevelParams, pos: tuple[int, int], heading: int, padded: np.ndarray | None = None) -> Observation:
    if padded is None:
        padded = _padded(level.grid)
    onehot = np.zeros(4)
    onehot[heading] = 1.0
    return Observation(view_window(padded, pos, heading), onehot)


class GridEnv:
    """Single-level simulator. Deterministic given the reset seed."""

    def __init__(self, level: LevelParams):
        level.validate()
        self.level = level
        self.t_max = max_steps(level)
        self._padded = _padded(level.grid)
        self.state: EnvState | None = None

    def reset(self, seed) -> tuple[EnvState, Observation]:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        heading = int(rng.integers(4))
        self.state = EnvState(self.level.start, heading)
        return self.state, self.observation()

    def observation(self) -> Observation:
        s = self.state
        return observe(self.level, s.agent_pos, s.heading, self._padded)

    def step(self, action: int) -> tuple[EnvState, Observation, float, bool]:
        s = self.state
        if s is None or s.done:
            raise SteppedAfterDone("step() called on a finished episode")
        reward = 0.0
        t = s.t + 1
        pos, heading, outcome = s.agent_pos, s.heading, Outcome.IN_PROGRESS
        if action == Action.TURN_LEFT:
            heading = (heading + 3) % 4
        elif action == Action.TURN_RIGHT:
            heading = (heading + 1) % 4
        elif action == Action.FORWARD:
            dr, dc = DIRECTIONS[heading]
            r, c = pos[0] + int(dr), pos[1] + int(dc)
            tile = self._padded[r + VIEW_AHEAD, c + VIEW_AHEAD]
            if tile == TileType.LAVA:
                outcome = Outcome.LAVA_DEATH
            elif tile == TileType.GOAL:
                pos, outcome = (r, c), Outcome.SUCCESS
                reward = 1.0 - 0.9 * (t / self.t_max)
            elif NAVIGABLE_MASK[tile]:
                pos = (r, c)
        else:
            raise ValueError(f"unknown action {action}")
        if outcome == Outcome.IN_PROGRESS and t >= self.t_max:
            outcome = Outcome.TIMEOUT
        self.state = EnvState(pos, heading, t, outcome)
        return self.state, self.observation(), reward, self.state.done
