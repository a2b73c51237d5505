"""Training curricula: replay phases, generative phases and the method schedules.

Methods
  Uniform    uniform replay over the training set
  PLR        prioritised replay over the training set
  DR         fresh random levels every episode
  RPLR       replay buffer filled with random levels (no gradients on new ones)
  AccelEdit  RPLR whose buffer is also grown by editing easy buffer levels
  SSED       PLR plus VAE-interpolated levels mixed in through a secondary score
  SSED_EL    SSED with random edits of training levels in place of the VAE
"""
from __future__ import annotations

import collections
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import nn_core, seeding
from .grid_env import LevelParams, Outcome, TileType
from .level_store import (BufferEntry, LevelBuffer, Provenance, SamplingConfig, eta_schedule,
                          score_mi, score_positive_value_loss, score_value_loss)
from .metrics import jsd, marginal_tile_dist, tile_distance_dist
from .ppo import PPOAgent, PpoConfig, RolloutBatch, Workers, rollout_episodes
from .probe import LinearProbe
from .vae import NoNavigableCell, interpolate_codes

METHODS = ("Uniform", "PLR", "DR", "RPLR", "AccelEdit", "SSED", "SSED_EL")
SCORES = ("value_loss", "positive_value_loss", "mi")
_TRAIN_BUFFER = ("Uniform", "PLR", "SSED", "SSED_EL")
_GENERATIVE = ("DR", "RPLR", "AccelEdit", "SSED", "SSED_EL")

METRIC_COLUMNS = (
    "update", "env_steps", "eval_env_steps", "mean_return", "solved_rate", "episodes",
    "policy_loss", "value_loss", "entropy", "mi_estimate", "probe_accuracy", "eta",
    "buffer_size", "generated_in_buffer", "insertions", "jsd",
)

ACCEL_TYPES = (TileType.EMPTY, TileType.MOSS, TileType.WALL, TileType.LAVA, TileType.START, TileType.GOAL)
DR_TYPES = (TileType.MOSS, TileType.WALL, TileType.LAVA)


class ConfigError(ValueError):
    pass


@dataclass
class MethodConfig:
    method: str = "PLR"
    score: str = "value_loss"
    M: int = 16
    K: int = 4
    replay_rate: float = 1.0
    edit_rate: float = 1.0
    eta_mode: str = "schedule"  # "schedule" ramps 0 -> 1, "fixed" uses sampling.eta
    generation: bool = True
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    dr_max_tiles: int = 60
    dr_window: int = 512
    probe_lr: float = 1e-2
    probe_steps: int = 1
    log_every: int = 10

    def __post_init__(self):
        if isinstance(self.sampling, dict):
            self.sampling = SamplingConfig(**self.sampling)
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.score not in SCORES:
            raise ConfigError(f"unknown score {self.score!r}; expected one of {SCORES}")
        if self.eta_mode not in ("schedule", "fixed"):
            raise ConfigError("eta_mode must be 'schedule' or 'fixed'")
        if self.M < 1 or self.K < 1:
            raise ConfigError("M and K must be >= 1")
        if not (0 < self.replay_rate <= 1 and 0 <= self.edit_rate <= 1):
            raise ConfigError("replay_rate must lie in (0, 1] and edit_rate in [0, 1]")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")

    @property
    def generates(self) -> bool:
        return self.method in _GENERATIVE and self.generation

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["sampling"] = dict(self.sampling.__dict__)
        return d


def method_defaults(method: str, n_train: int = 0, **overrides) -> MethodConfig:
    """Per-method defaults (buffer sizes, replay and edit rates, scores)."""
    samp = {}
    kw: dict = {"method": method}
    if method in ("PLR", "SSED", "SSED_EL", "Uniform"):
        samp = {"capacity": max(512, n_train)}
        if method in ("PLR", "Uniform"):
            kw.update(eta_mode="fixed", generation=False)
    elif method == "RPLR":
        samp = {"capacity": 4000, "score_support": "buffer", "staleness_support": "buffer"}
        kw.update(score="positive_value_loss", replay_rate=0.5, eta_mode="fixed")
    elif method == "AccelEdit":
        samp = {"capacity": 4000, "score_support": "buffer", "staleness_support": "buffer"}
        kw.update(score="positive_value_loss", replay_rate=0.8, edit_rate=1.0, eta_mode="fixed")
    elif method == "DR":
        kw.update(eta_mode="fixed")
    else:
        raise ConfigError(f"unknown method {method!r}")
    samp.update(overrides.pop("sampling", {}) or {})
    kw.update(overrides)
    kw["sampling"] = SamplingConfig(**samp)
    return MethodConfig(**kw)


@dataclass
class PhaseReport:
    phase: str  # "Replay" or "Generative"
    levels_touched: int = 0
    insertions: int = 0
    scores_computed: int = 0
    agent_updated: bool = False
    stats: dict = field(default_factory=dict)


# -- level proposals -----------------------------------------------------------

def dr_generate(size, seed, max_tiles: int = 60) -> LevelParams:
    """Random level: Start and Goal anywhere, then up to ``max_tiles`` random obstacles."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h, w = size
    grid = np.full((h, w), TileType.EMPTY, dtype=np.int8)
    cells = rng.permutation(h * w)
    grid.flat[cells[0]] = TileType.START
    grid.flat[cells[1]] = TileType.GOAL
    n = min(int(rng.integers(0, max_tiles + 1)), h * w - 2)
    kinds = rng.integers(0, len(DR_TYPES), size=n)
    for cell, k in zip(cells[2:2 + n], kinds):
        grid.flat[cell] = DR_TYPES[k]
    return LevelParams(grid, tags={"generator": "dr"})


def _place(grid: np.ndarray, tile: TileType, rng: np.random.Generator) -> None:
    free = np.flatnonzero((grid.ravel() == TileType.EMPTY) | (grid.ravel() == TileType.MOSS))
    if len(free) == 0:
        free = np.flatnonzero((grid.ravel() != TileType.START) & (grid.ravel() != TileType.GOAL))
    grid.flat[free[rng.integers(len(free))]] = tile


def apply_edits(grid: np.ndarray, edits, rng: np.random.Generator) -> np.ndarray:
    """Apply ``(flat cell, tile)`` edits, then restore a missing Start or Goal."""
    grid = grid.copy()
    for cell, tile in edits:
        if tile in (TileType.START, TileType.GOAL):
            grid[grid == tile] = TileType.EMPTY
        grid.flat[cell] = tile
    for tile in (TileType.START, TileType.GOAL):
        if not (grid == tile).any():
            _place(grid, tile, rng)
    return grid


def accel_edit(level: LevelParams, seed, n_random: int = 3) -> LevelParams:
    """Three random tile edits, then Start and Goal re-placed if an edit removed them.

    Writing a Start or Goal clears the previous one so the grid never holds two.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    edits = [(int(rng.integers(level.grid.size)), ACCEL_TYPES[int(rng.integers(len(ACCEL_TYPES)))])
             for _ in range(n_random)]
    grid = apply_edits(level.grid, edits, rng)
    tags = dict(level.tags)
    tags["generator"] = "edit"
    return LevelParams(grid, tags=tags)


# -- runner --------------------------------------------------------------------

def _segment_scores(kind: str, values, returns, adv, log_probs=None) -> float:
    if kind == "value_loss":
        return score_value_loss(values, returns)
    if kind == "positive_value_loss":
        return score_positive_value_loss(adv)
    # least identifiable levels get the highest priority
    return -score_mi(log_probs)


class CurriculumRunner:
    """Holds the agent, buffer, probe and RNG streams for one training run."""

    def __init__(self, cfg: MethodConfig, train_levels, ppo_cfg: PpoConfig | None = None, seed: int = 0,
                 vae=None, level_size=None):
        self.cfg = cfg
        self.ppo_cfg = ppo_cfg or PpoConfig()
        self.seed = seed
        self.train_levels = list(train_levels)
        if cfg.method in _TRAIN_BUFFER and not self.train_levels:
            raise ConfigError(f"{cfg.method} needs a non-empty training set")
        if cfg.method in ("SSED",) and cfg.generation and vae is None:
            raise ConfigError("SSED needs a pretrained VAE")
        if cfg.score == "mi" and cfg.method not in ("PLR", "SSED"):
            raise ConfigError("mi scoring is defined for training-set replay only")
        self.size = tuple(level_size) if level_size else self.train_levels[0].grid.shape
        self.vae = vae
        self.agent = PPOAgent(self.ppo_cfg, seed=seeding.derive_seed(seed, "agent"))
        self.workers = Workers(self.ppo_cfg.workers, self.ppo_cfg.hidden_size)
        # streams are named by role, not by method, so methods share common random numbers
        self.rng_replay = seeding.rng(seed, "replay")
        self.rng_sample = seeding.rng(seed, "sample")
        self.rng_gen = seeding.rng(seed, "generate")
        self.rng_sched = seeding.rng(seed, "schedule")
        self.rng_dr = seeding.rng(seed, "dr")
        initial = self.train_levels if cfg.method in _TRAIN_BUFFER else []
        self.buffer = LevelBuffer(cfg.sampling, initial) if cfg.method != "DR" else None
        self.dr_window: collections.deque = collections.deque(maxlen=cfg.dr_window)
        self.train_index: dict[bytes, int] = {}
        for i, lv in enumerate(self.train_levels):
            self.train_index.setdefault(lv.key(), i)
        self.probe = (LinearProbe(n_levels=len(self.train_levels), lr=cfg.probe_lr,
                                  seed=seeding.derive_seed(seed, "probe"))
                      if self.train_levels else None)
        if vae is not None and cfg.method == "SSED":
            self.train_codes = vae.encode(self.train_levels)
        self.d_cap = self.size[0] + self.size[1]
        self._train_tiles = (marginal_tile_dist(self.train_levels, d_cap=self.d_cap)
                             if self.train_levels else None)
        self._tile_cache: dict[bytes, np.ndarray] = {}
        self.updates = 0
        self.env_steps = 0
        self.eval_env_steps = 0
        self.insertions = 0
        self.eta = 0.0

    # -- sampling
    def replay_distribution(self, eta: float) -> np.ndarray:
        if self.cfg.method == "Uniform":
            mask = self.buffer.train_mask().astype(np.float64)
            return mask / mask.sum()
        return self.buffer.sample_dist(eta)

    def level_distribution(self) -> tuple[list[LevelParams], np.ndarray]:
        """Current P over the level set the agent trains on (the buffer, or DR's recent window)."""
        if self.buffer is None:
            levels = list(self.dr_window)
            return levels, np.full(len(levels), 1.0 / max(1, len(levels)))
        if not len(self.buffer):
            return [], np.zeros(0)
        return self.buffer.levels(), self.replay_distribution(self.eta)

    def _replay_sampler(self, p: np.ndarray):
        entries = list(self.buffer.entries)
        counter = self.buffer.counter

        def sampler():
            i = int(self.rng_sample.choice(len(p), p=p))
            e = entries[i]
            e.last_sampled_at = counter
            return e, e.params

        return sampler

    def _dr_sampler(self):
        def sampler():
            lv = dr_generate(self.size, self.rng_dr, self.cfg.dr_max_tiles)
            self.dr_window.append(lv)
            return None, lv

        return sampler

    def _in_buffer(self, entry) -> bool:
        return any(e is entry for e in self.buffer.entries)

    # -- probe
    def _labels(self, batch: RolloutBatch) -> np.ndarray:
        labels = np.full(batch.actions.shape, -1, dtype=np.int64)
        for seg in batch.segments:
            idx = self.train_index.get(seg.level.key(), -1) if isinstance(seg.level, LevelParams) else -1
            labels[seg.start:seg.end, seg.worker] = idx
        return labels

    def _probe_phase(self, batch: RolloutBatch, labels: np.ndarray) -> dict:
        mask = labels >= 0
        if self.probe is None or not mask.any():
            return {"mi_estimate": math.nan, "probe_accuracy": math.nan, "log_probs": None}
        X = batch.trunk[mask]
        y = labels[mask]
        out = {"mi_estimate": math.nan, "probe_accuracy": math.nan}
        lp_grid = np.full(labels.shape, math.nan)
        if hasattr(self.probe, "linear_"):
            est = self.probe.mi_estimate(X, y)
            out["mi_estimate"], out["probe_accuracy"] = est.estimate, est.classifier_accuracy
            lp_grid[mask] = self.probe.true_log_probs(X, y)
        else:
            # an untrained probe is uniform
            lp_grid[mask] = -math.log(self.probe.n_levels)
            out["mi_estimate"], out["probe_accuracy"] = 0.0, float(np.mean(y == 0))
        out["log_probs"] = lp_grid
        for _ in range(self.cfg.probe_steps):
            self.probe.partial_fit(X, y)
        return out

    # -- phases
    def replay_phase(self, eta: float) -> PhaseReport:
        cfg, pcfg = self.cfg, self.ppo_cfg
        if self.buffer is not None:
            self.buffer.tick()
            sampler = self._replay_sampler(self.replay_distribution(eta))
        else:
            sampler = self._dr_sampler()
        batch = self.agent.collect(self.workers, sampler, pcfg.rollout_length, self.rng_replay)
        labels = self._labels(batch)
        probe = self._probe_phase(batch, labels)
        touched, scored = set(), 0
        finished = [s for s in batch.segments if s.finished]
        if self.buffer is not None:
            for seg in batch.segments:
                entry = seg.tag
                if entry is None or not self._in_buffer(entry):
                    continue
                touched.add(id(entry))
                sl = slice(seg.start, seg.end)
                lp = probe["log_probs"][sl, seg.worker] if cfg.score == "mi" else None
                if cfg.score == "mi" and (lp is None or np.isnan(lp).any()):
                    continue
                s = _segment_scores(cfg.score, batch.values[sl, seg.worker], batch.returns[sl, seg.worker],
                                    batch.advantages[sl, seg.worker], lp)
                solved = entry.ever_solved or seg.outcome == Outcome.SUCCESS
                entry.score_S = s
                entry.score_S2 = s if solved else 0.0
                entry.ever_solved = solved
                scored += 1
        losses = self.agent.update(batch)
        self.updates += 1
        self.env_steps += batch.n_steps
        stats = dict(losses)
        stats.update(eta=eta, mi_estimate=probe["mi_estimate"], probe_accuracy=probe["probe_accuracy"],
                     returns=[s.ret for s in finished],
                     solved=[float(s.outcome == Outcome.SUCCESS) for s in finished])
        return PhaseReport("Replay", len(touched) or len(batch.segments), 0, scored, True, stats)

    def _evaluate_candidates(self, candidates) -> list:
        episodes = rollout_episodes(self.agent, candidates, self.rng_gen)
        self.eval_env_steps += sum(len(e.rewards) for e in episodes)
        out = []
        for ep in episodes:
            adv, ret = ep.advantages(self.ppo_cfg.gamma, self.ppo_cfg.gae_lambda)
            if self.cfg.score == "positive_value_loss":
                s = score_positive_value_loss(adv)
            else:
                s = score_value_loss(ep.values, ret)
            out.append((ep, s))
        return out

    def _insert(self, level: LevelParams, s: float, solved: bool, scored_insert: bool) -> bool:
        entry = BufferEntry(level, s, s if solved else 0.0, provenance=Provenance.GENERATED, ever_solved=solved)
        slot = self.buffer.insert_scored(entry) if scored_insert else self.buffer.insert_generated(entry)
        return slot is not None

    def generative_phase(self, kind: str) -> PhaseReport:
        """``kind``: "vae", "edit_train", "dr" or "edit_buffer". Never updates the agent."""
        cfg = self.cfg
        rng = self.rng_gen
        if kind == "vae":
            n = len(self.train_levels)
            picks = rng.choice(n, size=2 * cfg.M, replace=2 * cfg.M > n)
            codes = []
            for a, b in zip(picks[0::2], picks[1::2]):
                codes += interpolate_codes(self.train_codes[a], self.train_codes[b], cfg.K)
            candidates = []
            for c in codes:
                try:
                    candidates.append(self.vae.decode_valid(c.sample(rng), rng))
                except NoNavigableCell:
                    continue
            for lv in candidates:
                lv.tags = {"generator": "vae"}
        elif kind == "edit_train":
            picks = rng.choice(len(self.train_levels), size=cfg.M * cfg.K)
            candidates = [accel_edit(self.train_levels[i], rng) for i in picks]
        elif kind == "dr":
            candidates = [dr_generate(self.size, rng, cfg.dr_max_tiles) for _ in range(self.ppo_cfg.workers)]
        elif kind == "edit_buffer":
            scores = np.array([e.score_S for e in self.buffer.entries])
            easy = np.flatnonzero(scores <= np.median(scores))
            picks = rng.choice(easy, size=self.ppo_cfg.workers)
            candidates = [accel_edit(self.buffer.entries[i].params, rng) for i in picks]
        else:
            raise ValueError(f"unknown generative phase {kind!r}")
        inserted = 0
        scored_insert = cfg.method in ("RPLR", "AccelEdit")
        for ep, s in self._evaluate_candidates(candidates) if candidates else []:
            inserted += self._insert(ep.level, s, ep.solved, scored_insert)
        self.insertions += inserted
        return PhaseReport("Generative", len(candidates), inserted, len(candidates), False)

    # -- metrics
    def _tiles(self, lv: LevelParams) -> np.ndarray:
        k = lv.key()
        if k not in self._tile_cache:
            self._tile_cache[k] = tile_distance_dist(lv, self.d_cap).probs
        return self._tile_cache[k]

    def current_jsd(self) -> float:
        levels, p = self.level_distribution()
        if not levels or self._train_tiles is None:
            return math.nan
        acc = sum(pi * self._tiles(lv) for lv, pi in zip(levels, p) if pi > 0)
        return jsd(acc, self._train_tiles)

    def generated_in_buffer(self) -> int:
        if self.buffer is None:
            return len(self.dr_window)
        return len(self.buffer.generated_indices())

    # -- persistence
    def save(self, out_dir) -> dict:
        from pathlib import Path

        from .levelio import save_levels

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"agent": nn_core.save_module(self.agent.net, out / "agent.ckpt",
                                              {"ppo": dict(self.ppo_cfg.__dict__), "updates": self.updates})}
        if self.buffer is not None:
            paths["buffer"] = self.buffer.save(out / "buffer.json")
        levels, p = self.level_distribution()
        named = [lv.copy(id=lv.id or f"lam{i:05d}") for i, lv in enumerate(levels)]
        paths["lambda_levels"] = save_levels(named, out / "lambda_levels.jsonl")
        (out / "lambda_probs.txt").write_text("".join(f"{float(x)!r}\n" for x in p))
        paths["lambda_probs"] = out / "lambda_probs.txt"
        return paths


def _window_row(runner: CurriculumRunner, window: list[PhaseReport]) -> dict:
    returns = [r for ph in window for r in ph.stats.get("returns", [])]
    solved = [r for ph in window for r in ph.stats.get("solved", [])]

    def mean_of(key):
        vals = [ph.stats[key] for ph in window if not math.isnan(ph.stats.get(key, math.nan))]
        return float(np.mean(vals)) if vals else math.nan

    return {
        "update": runner.updates,
        "env_steps": runner.env_steps,
        "eval_env_steps": runner.eval_env_steps,
        "mean_return": float(np.mean(returns)) if returns else math.nan,
        "solved_rate": float(np.mean(solved)) if solved else math.nan,
        "episodes": len(returns),
        "policy_loss": mean_of("policy_loss"),
        "value_loss": mean_of("value_loss"),
        "entropy": mean_of("entropy"),
        "mi_estimate": mean_of("mi_estimate"),
        "probe_accuracy": mean_of("probe_accuracy"),
        "eta": runner.eta,
        "buffer_size": len(runner.buffer) if runner.buffer is not None else len(runner.dr_window),
        "generated_in_buffer": runner.generated_in_buffer(),
        "insertions": runner.insertions,
        "jsd": runner.current_jsd(),
    }


def run_method(cfg: MethodConfig, train_levels, budget_updates: int, seed: int = 0,
               ppo_cfg: PpoConfig | None = None, vae=None, level_size=None, on_phase=None):
    """Train for ``budget_updates`` replay phases; returns (metric rows, runner).

    ``on_phase`` (optional) is called with every PhaseReport.
    """
    if budget_updates < 1:
        raise ConfigError("budget_updates must be >= 1")
    runner = CurriculumRunner(cfg, train_levels, ppo_cfg, seed, vae, level_size)
    rows, window = [], []
    m = cfg.method
    min_fill = runner.ppo_cfg.workers

    def emit(rep):
        if on_phase is not None:
            on_phase(rep)

    while runner.updates < budget_updates:
        u = runner.updates
        if m in ("RPLR", "AccelEdit"):
            replay = len(runner.buffer) >= min_fill and runner.rng_sched.random() < cfg.replay_rate
            if not replay:
                emit(runner.generative_phase("dr"))
                continue
        if cfg.eta_mode == "schedule":
            runner.eta = eta_schedule(u / max(1, budget_updates - 1))
        else:
            runner.eta = cfg.sampling.eta
        rep = runner.replay_phase(runner.eta)
        emit(rep)
        window.append(rep)
        if cfg.generates:
            if m == "SSED":
                emit(runner.generative_phase("vae"))
            elif m == "SSED_EL":
                emit(runner.generative_phase("edit_train"))
            elif m == "AccelEdit" and runner.rng_sched.random() < cfg.edit_rate:
                emit(runner.generative_phase("edit_buffer"))
        if runner.updates % cfg.log_every == 0 or runner.updates == budget_updates:
            rows.append(_window_row(runner, window))
            window = []
    return rows, runner


def format_rows(rows) -> str:
    """CSV text with a fixed header; floats use their shortest round-trip repr."""
    lines = [",".join(METRIC_COLUMNS)]
    for r in rows:
        lines.append(",".join(repr(float(r[c])) if isinstance(r[c], float) else str(r[c]) for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"
