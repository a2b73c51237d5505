"""Level buffer with rank prioritisation, staleness and mixed sampling.

The replay distribution is

    P = (1 - rho) * ((1 - eta) * P_S + eta * P_S2) + rho * P_R

where ``P_S`` and ``P_R`` can be restricted to the training set ("dataset"
support) while ``P_S2`` ranks the whole buffer.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .grid_env import LevelParams
from .levelio import _grid_string, _parse_grid


class Provenance(str, Enum):
    TRAIN = "TrainSet"
    GENERATED = "Generated"


class EmptyBuffer(ValueError):
    pass


class EmptyTrajectory(ValueError):
    pass


class UnknownLevelId(KeyError):
    pass


UNSEEN_SCORE = math.inf


@dataclass
class BufferEntry:
    params: LevelParams
    score_S: float = UNSEEN_SCORE
    score_S2: float = UNSEEN_SCORE
    last_sampled_at: int = 0
    provenance: Provenance = Provenance.TRAIN
    ever_solved: bool = False


@dataclass
class SamplingConfig:
    rho: float = 0.3
    eta: float = 0.0
    temperature: float = 0.1
    secondary_temperature: float = 1.0
    capacity: int = 512
    prioritisation: str = "rank"
    score_support: str = "dataset"
    staleness_support: str = "dataset"
    secondary_support: str = "buffer"

    def __post_init__(self):
        for name in ("rho", "eta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.temperature <= 0 or self.secondary_temperature <= 0:
            raise ValueError("temperatures must be > 0")
        if self.prioritisation != "rank":
            raise ValueError("only rank prioritisation is supported")
        for name in ("score_support", "staleness_support", "secondary_support"):
            if getattr(self, name) not in ("dataset", "buffer"):
                raise ValueError(f"{name} must be 'dataset' or 'buffer'")


# -- scores ------------------------------------------------------------------

def score_value_loss(values, returns) -> float:
    """Mean absolute gap between value predictions and return targets."""
    values = np.asarray(values, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    if values.size == 0:
        raise EmptyTrajectory("trajectory has no steps")
    return float(np.mean(np.abs(values - returns)))


def score_positive_value_loss(advantages) -> float:
    adv = np.asarray(advantages, dtype=np.float64)
    if adv.size == 0:
        raise EmptyTrajectory("trajectory has no steps")
    return float(np.mean(np.clip(adv, 0.0, None)))


def score_mi(log_probs) -> float:
    """Summed log-probability the probe gives the true level over a trajectory."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.size == 0:
        raise EmptyTrajectory("trajectory has no steps")
    return float(lp.sum())


# -- distributions -----------------------------------------------------------

def rank_distribution(scores, temperature: float) -> np.ndarray:
    """P(i) proportional to (1 / rank_i) ** (1 / temperature); rank 1 = highest.

    Ties keep insertion order (stable sort).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise EmptyBuffer("no scores to rank")
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    ranks[order] = np.arange(1, len(scores) + 1)
    w = (1.0 / ranks) ** (1.0 / temperature)
    return w / w.sum()


def staleness_distribution(last_sampled, counter: int) -> np.ndarray:
    """P(i) proportional to ``counter - last_sampled_i``; uniform if all zero."""
    last = np.asarray(last_sampled, dtype=np.float64)
    if last.size == 0:
        raise EmptyBuffer("no entries")
    if counter < last.max():
        raise ValueError("counter is behind an entry's last_sampled_at")
    stale = counter - last
    total = stale.sum()
    if total <= 0:
        return np.full(len(last), 1.0 / len(last))
    return stale / total


def mix(p_s, p_s2, p_r, rho: float, eta: float) -> np.ndarray:
    return (1 - rho) * ((1 - eta) * p_s + eta * p_s2) + rho * p_r


def eta_schedule(progress: float) -> float:
    return float(min(1.0, max(0.0, progress)))


def _on_support(fn, mask: np.ndarray, *args) -> np.ndarray:
    out = np.zeros(len(mask))
    if mask.any():
        out[mask] = fn(*args, mask)
    return out


class LevelBuffer:
    """The level buffer. TrainSet entries are permanent; Generated ones compete
    for ``capacity - n_train`` slots by secondary score."""

    def __init__(self, cfg: SamplingConfig, train_levels=()):
        self.cfg = cfg
        self.entries: list[BufferEntry] = [BufferEntry(lv) for lv in train_levels]
        self.counter = 0
        if cfg.capacity < self.n_train:
            raise ValueError(f"capacity {cfg.capacity} < {self.n_train} training levels")

    # -- bookkeeping
    def __len__(self):
        return len(self.entries)

    @property
    def n_train(self) -> int:
        return sum(e.provenance == Provenance.TRAIN for e in self.entries)

    @property
    def generated_capacity(self) -> int:
        return self.cfg.capacity - self.n_train

    def train_mask(self) -> np.ndarray:
        return np.array([e.provenance == Provenance.TRAIN for e in self.entries], dtype=bool)

    def generated_indices(self) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.provenance == Provenance.GENERATED]

    def levels(self) -> list[LevelParams]:
        return [e.params for e in self.entries]

    # -- sampling
    def _support(self, kind: str) -> np.ndarray:
        if kind == "dataset" and self.train_mask().any():
            return self.train_mask()
        return np.ones(len(self.entries), dtype=bool)

    def score_dist(self) -> np.ndarray:
        s = np.array([e.score_S for e in self.entries])
        return _on_support(lambda m: rank_distribution(s[m], self.cfg.temperature),
                           self._support(self.cfg.score_support))

    def secondary_dist(self) -> np.ndarray:
        s = np.array([e.score_S2 for e in self.entries])
        return _on_support(lambda m: rank_distribution(s[m], self.cfg.secondary_temperature),
                           self._support(self.cfg.secondary_support))

    def staleness_dist(self) -> np.ndarray:
        last = np.array([e.last_sampled_at for e in self.entries])
        return _on_support(lambda m: staleness_distribution(last[m], self.counter),
                           self._support(self.cfg.staleness_support))

    def sample_dist(self, eta: float | None = None) -> np.ndarray:
        if not self.entries:
            raise EmptyBuffer("buffer is empty")
        eta = self.cfg.eta if eta is None else eta
        p_s2 = self.secondary_dist() if eta > 0 else np.zeros(len(self.entries))
        p = mix(self.score_dist(), p_s2, self.staleness_dist(), self.cfg.rho, eta)
        return p

    def tick(self) -> int:
        """Advance the sampling counter (once per replay round)."""
        self.counter += 1
        return self.counter

    def mark_sampled(self, index: int) -> None:
        self.entries[index].last_sampled_at = self.counter

    def update_scores(self, index: int, score_S: float, score_S2: float, solved: bool = False) -> None:
        e = self.entries[index]
        e.score_S, e.score_S2 = float(score_S), float(score_S2)
        e.ever_solved = e.ever_solved or bool(solved)

    # -- insertion
    def insert_generated(self, entry: BufferEntry):
        """Insert a generated level; returns the slot index or None when rejected."""
        if entry.provenance != Provenance.GENERATED:
            raise ValueError("insert_generated expects a Generated entry")
        if not entry.ever_solved:
            return None
        gen = self.generated_indices()
        entry.last_sampled_at = self.counter
        if len(gen) < self.generated_capacity:
            self.entries.append(entry)
            return len(self.entries) - 1
        if not gen:
            return None
        worst = min(gen, key=lambda i: self.entries[i].score_S2)
        if entry.score_S2 > self.entries[worst].score_S2:
            self.entries[worst] = entry
            return worst
        return None

    def insert_scored(self, entry: BufferEntry):
        """Robust-PLR style insertion scored on ``score_S`` (no TrainSet region)."""
        entry.last_sampled_at = self.counter
        if len(self.entries) < self.cfg.capacity:
            self.entries.append(entry)
            return len(self.entries) - 1
        cand = [i for i, e in enumerate(self.entries) if e.provenance != Provenance.TRAIN]
        if not cand:
            return None
        worst = min(cand, key=lambda i: self.entries[i].score_S)
        if entry.score_S > self.entries[worst].score_S:
            self.entries[worst] = entry
            return worst
        return None

    # -- persistence
    def to_dict(self) -> dict:
        return {
            "counter": self.counter,
            "config": dict(self.cfg.__dict__),
            "entries": [
                {
                    "id": e.params.id,
                    "width": e.params.width,
                    "height": e.params.height,
                    "grid": _grid_string(e.params.grid),
                    "tags": e.params.tags,
                    "score_S": e.score_S,
                    "score_S2": e.score_S2,
                    "last_sampled_at": e.last_sampled_at,
                    "provenance": e.provenance.value,
                    "ever_solved": e.ever_solved,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LevelBuffer":
        buf = cls(SamplingConfig(**d["config"]))
        buf.counter = d["counter"]
        for r in d["entries"]:
            lv = LevelParams(_parse_grid(r["grid"], r["width"], r["height"]), r["id"], r.get("tags", {}))
            buf.entries.append(BufferEntry(lv, float(r["score_S"]), float(r["score_S2"]), int(r["last_sampled_at"]),
                                           Provenance(r["provenance"]), bool(r["ever_solved"])))
        return buf

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "LevelBuffer":
        return cls.from_dict(json.loads(Path(path).read_text()))
