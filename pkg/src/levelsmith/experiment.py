"""Declarative experiments: config schema, stages, manifest and report."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import subprocess
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, nn_core, seeding
from .curricula import METHODS, format_rows, method_defaults, run_method
from .grid_env import LevelParams
from .levelio import load_levels, save_levels
from .metrics import EvalResult, gen_gap, iqm, jsd, marginal_tile_dist, over_gap
from .ppo import PPOAgent, PpoConfig, evaluate
from .vae import LevelVAE
from .wfc import EDGE_PATTERNS, GenConfig, edge_case_config, generate_set

log = logging.getLogger(__name__)

LEVEL_SETS = ("train", "test", "edge", "large")
REPORT_COLUMNS = (
    "method", "seed", "level_set", "n_levels", "mean_return", "iqm", "solved_rate", "optimality_gap",
    "gen_gap", "over_gap", "jsd", "mi_estimate", "probe_accuracy",
)
REPORT_HEADER = ",".join(REPORT_COLUMNS)


class ConfigInvalid(ValueError):
    pass


class MissingArtifacts(FileNotFoundError):
    pass


# -- schema ----------------------------------------------------------------------

@dataclass
class LevelsSection:
    size: list = field(default_factory=lambda: [9, 9])
    pattern: str = "caves"
    n_train: int = 32
    n_test: int = 64
    n_edge: int = 32
    n_large: int = 32
    large_size: list = field(default_factory=lambda: [15, 15])
    edge_patterns: list = field(default_factory=lambda: list(EDGE_PATTERNS))
    moss_fraction: float = 0.5
    lava_fraction: float = 0.25
    seed: int = 0


@dataclass
class VaeSection:
    latent_dim: int = 64
    epochs: int = 200
    batch_size: int = 32
    lr: float = 4e-4
    beta: float = 0.0448
    layout_coef: float = 0.04
    startgoal_coef: float = 0.013
    seed: int = 0


@dataclass
class MethodSection:
    method: str = "PLR"
    name: str = ""
    overrides: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return self.name or self.method


@dataclass
class EvalSection:
    episodes: int = 10
    lambda_samples: int = 64


@dataclass
class ExperimentConfig:
    out_dir: str = "runs/experiment"
    seeds: list = field(default_factory=lambda: [0])
    budget_updates: int = 100
    stages: list = field(default_factory=lambda: ["gen-levels", "pretrain-vae", "train", "eval", "report"])
    levels: LevelsSection = field(default_factory=LevelsSection)
    vae: VaeSection = field(default_factory=VaeSection)
    ppo: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: [MethodSection()])
    eval: EvalSection = field(default_factory=EvalSection)

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(**self.ppo)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


STAGES = ("gen-levels", "pretrain-vae", "train", "eval", "report")


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{path or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            where = f"{path}.{key}" if path else key
            raise ConfigInvalid(f"unknown key {where!r}")
    kw = {}
    for name, value in data.items():
        where = f"{path}.{name}" if path else name
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kw[name] = _build(hint, value, where)
        elif cls is ExperimentConfig and name == "methods":
            if not isinstance(value, list) or not value:
                raise ConfigInvalid("methods: expected a non-empty list")
            kw[name] = [_build(MethodSection, v, f"methods[{i}]") for i, v in enumerate(value)]
        else:
            kw[name] = value
    return cls(**kw)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    ppo_known = {f.name for f in dataclasses.fields(PpoConfig)}
    for k in cfg.ppo:
        if k not in ppo_known:
            raise ConfigInvalid(f"unknown key 'ppo.{k}'")
    for st in cfg.stages:
        if st not in STAGES:
            raise ConfigInvalid(f"unknown stage {st!r} in 'stages'")
    if not cfg.seeds or len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigInvalid("'seeds' must be a non-empty list of distinct integers")
    if cfg.budget_updates < 1:
        raise ConfigInvalid("'budget_updates' must be >= 1")
    labels = [m.label for m in cfg.methods]
    if len(set(labels)) != len(labels):
        raise ConfigInvalid("method labels must be unique (set 'name')")
    for i, m in enumerate(cfg.methods):
        if m.method not in METHODS:
            raise ConfigInvalid(f"methods[{i}].method: unknown method {m.method!r}")
        try:
            method_defaults(m.method, cfg.levels.n_train, **m.overrides)
        except TypeError as e:
            raise ConfigInvalid(f"methods[{i}].overrides: {e}") from None
        except ValueError as e:
            raise ConfigInvalid(f"methods[{i}]: {e}") from None
    if cfg.levels.n_train < 2:
        raise ConfigInvalid("'levels.n_train' must be >= 2")
    return cfg


def config_from_dict(data: dict) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, data, ""))


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigInvalid(f"{path}: not valid JSON ({e})") from None
    return config_from_dict(data)


# -- stages ----------------------------------------------------------------------

def _csv_float(x) -> str:
    return repr(float(x))


def version_string() -> str:
    """Package version plus ``git describe`` when run from a checkout."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class Experiment:
    def __init__(self, cfg: ExperimentConfig, out_dir=None):
        self.cfg = cfg
        self.out = Path(out_dir or cfg.out_dir)
        self.seeds_used: dict[str, int] = {}

    # paths
    def level_path(self, name: str) -> Path:
        return self.out / "levels" / f"{name}.jsonl"

    def vae_path(self) -> Path:
        return self.out / "vae" / "vae.ckpt"

    def run_dir(self, label: str, seed: int) -> Path:
        return self.out / "train" / label / f"seed{seed}"

    def eval_dir(self, label: str, seed: int) -> Path:
        return self.out / "eval" / label / f"seed{seed}"

    def _seed(self, *names) -> int:
        s = seeding.derive_seed(*names)
        self.seeds_used["/".join(str(n) for n in names)] = s
        return s

    def load_set(self, name: str) -> list[LevelParams]:
        p = self.level_path(name)
        if not p.exists():
            raise MissingArtifacts(f"missing level set {p}")
        return load_levels(p)

    # stages
    def gen_levels(self):
        lc = self.cfg.levels
        base = GenConfig(size=tuple(lc.size), pattern=lc.pattern, moss_fraction=lc.moss_fraction,
                         lava_fraction=lc.lava_fraction)
        # train and test share one stream so the test set is disjoint draws of the same distribution
        both = generate_set(base, lc.n_train + lc.n_test, self._seed(lc.seed, "levels", "train"), prefix="train")
        train = both[:lc.n_train]
        test = [lv.copy(id=f"test{i:05d}") for i, lv in enumerate(both[lc.n_train:])]
        edge_cfgs = [edge_case_config(base, p, lava) for p in lc.edge_patterns for lava in (False, True)]
        edge = generate_set(edge_cfgs, lc.n_edge, self._seed(lc.seed, "levels", "edge"), prefix="edge")
        large_cfg = dataclasses.replace(base, size=tuple(lc.large_size))
        large = generate_set(large_cfg, lc.n_large, self._seed(lc.seed, "levels", "large"), prefix="large")
        for name, levels in zip(LEVEL_SETS, (train, test, edge, large)):
            save_levels(levels, self.level_path(name))

    def pretrain_vae(self):
        if not any(m.method == "SSED" for m in self.cfg.methods):
            return None
        vc = self.cfg.vae
        seed = self._seed(vc.seed, "vae")
        vae = LevelVAE(latent_dim=vc.latent_dim, epochs=vc.epochs, batch_size=vc.batch_size, lr=vc.lr, beta=vc.beta,
                       layout_coef=vc.layout_coef, startgoal_coef=vc.startgoal_coef, seed=seed)
        vae.fit(self.load_set("train"))
        vae.save(self.vae_path())
        curve = "epoch,elbo\n" + "".join(f"{i + 1},{_csv_float(v)}\n" for i, v in enumerate(vae.elbo_curve_))
        (self.out / "vae" / "elbo.csv").write_text(curve)
        return vae

    def train(self):
        train = self.load_set("train")
        vae = None
        for m in self.cfg.methods:
            if m.method == "SSED" and m.overrides.get("generation", True):
                if vae is None:
                    if not self.vae_path().exists():
                        raise MissingArtifacts(f"SSED needs {self.vae_path()}; run pretrain-vae first")
                    vae = LevelVAE.load(self.vae_path())
            mcfg = method_defaults(m.method, len(train), **m.overrides)
            for s in self.cfg.seeds:
                seed = self._seed(s, "train")
                log.info("training %s seed %s", m.label, s)
                rows, runner = run_method(mcfg, train, self.cfg.budget_updates, seed, self.cfg.ppo_config(),
                                          vae=vae if m.method == "SSED" else None)
                d = self.run_dir(m.label, s)
                runner.save(d)
                (d / "metrics.csv").write_text(format_rows(rows))

    def evaluate(self):
        sets = {name: self.load_set(name) for name in LEVEL_SETS}
        ec = self.cfg.eval
        d_cap = self.cfg.levels.size[0] + self.cfg.levels.size[1]
        train_tiles = marginal_tile_dist(sets["train"], d_cap=d_cap)
        for m in self.cfg.methods:
            for s in self.cfg.seeds:
                rd = self.run_dir(m.label, s)
                if not (rd / "agent.ckpt").exists():
                    raise MissingArtifacts(f"missing agent checkpoint in {rd}")
                agent = load_agent(rd / "agent.ckpt")
                ed = self.eval_dir(m.label, s)
                ed.mkdir(parents=True, exist_ok=True)
                results = {}
                for name, levels in sets.items():
                    ret, solved = evaluate(agent, levels, ec.episodes, self._seed(s, "eval", name))
                    results[name] = EvalResult(ret, solved, name, [lv.id for lv in levels])
                    write_eval_csv(ed / f"{name}.csv", results[name])
                lam_levels = load_levels(rd / "lambda_levels.jsonl")
                lam_p = np.array([float(x) for x in (rd / "lambda_probs.txt").read_text().split()])
                summary = {"over_gap": math.nan, "jsd": math.nan}
                if lam_levels:
                    lam_p = lam_p / lam_p.sum()
                    summary["over_gap"] = self._lambda_over_gap(agent, sets["train"], results["train"],
                                                                lam_levels, lam_p, s)
                    lam_tiles = marginal_tile_dist(lam_levels, lam_p, d_cap=d_cap)
                    summary["jsd"] = jsd(lam_tiles, train_tiles)
                final = _last_metrics_row(rd / "metrics.csv")
                summary["mi_estimate"] = float(final.get("mi_estimate", "nan"))
                summary["probe_accuracy"] = float(final.get("probe_accuracy", "nan"))
                (ed / "summary.json").write_text(json.dumps({k: _csv_float(v) for k, v in summary.items()},
                                                            sort_keys=True, indent=1) + "\n")

    def _lambda_over_gap(self, agent, train, train_result, lam_levels, lam_p, seed) -> float:
        """OverGap with training levels in Lambda scored by their training-set returns.

        Only the generated part of Lambda is estimated, from a Monte Carlo
        sample of ``eval.lambda_samples`` levels drawn in proportion to P.
        """
        ec = self.cfg.eval
        train_ret = {lv.key(): r for lv, r in zip(train, train_result.returns)}
        known = np.array([lv.key() in train_ret for lv in lam_levels])
        values = np.array([train_ret.get(lv.key(), 0.0) for lv in lam_levels])
        gen_mass = float(lam_p[~known].sum())
        if gen_mass <= 0:
            return over_gap(lam_p, values, train_result)
        rng = seeding.rng(self._seed(seed, "eval", "lambda"))
        gen_idx = np.flatnonzero(~known)
        pick = rng.choice(gen_idx, size=ec.lambda_samples, p=lam_p[gen_idx] / gen_mass)
        ret, _ = evaluate(agent, [lam_levels[i] for i in pick], ec.episodes,
                          self._seed(seed, "eval", "lambda_returns"))
        # weights: exact mass on training levels, equal shares of the generated mass on the sample
        p = np.concatenate([lam_p[known], np.full(len(pick), gen_mass / len(pick))])
        v = np.concatenate([values[known], ret])
        return over_gap(p / p.sum(), v, train_result)

    def report(self) -> Path:
        text = build_report(self.out, [m.label for m in self.cfg.methods], self.cfg.seeds)
        path = self.out / "report.csv"
        path.write_text(text)
        return path

    def write_manifest(self):
        manifest = {
            "version": version_string(),
            "config_hash": self.cfg.digest(),
            "config": self.cfg.to_dict(),
            "seeds": dict(sorted(self.seeds_used.items())),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")

    def run(self, stages=None):
        nn_core.configure_threads()
        self.out.mkdir(parents=True, exist_ok=True)
        steps = {"gen-levels": self.gen_levels, "pretrain-vae": self.pretrain_vae, "train": self.train,
                 "eval": self.evaluate, "report": self.report}
        for st in stages or self.cfg.stages:
            log.info("stage %s", st)
            try:
                steps[st]()
            except (MissingArtifacts, ConfigInvalid):
                raise
            except Exception as e:
                raise RuntimeError(f"stage {st!r} failed: {e}") from e
        self.write_manifest()


# -- helpers shared with the CLI -------------------------------------------------

def load_agent(path) -> PPOAgent:
    _, meta = nn_core.load_arrays(path)
    agent = PPOAgent(PpoConfig(**meta["ppo"]))
    nn_core.load_module(agent.net, path)
    return agent


def write_eval_csv(path, result: EvalResult) -> None:
    lines = ["level_id,mean_return,solved_rate"]
    for lid, r, s in zip(result.level_ids, result.returns, result.solved):
        lines.append(f"{lid},{_csv_float(r)},{_csv_float(s)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_eval_csv(path, tag: str = "") -> EvalResult:
    path = Path(path)
    if not path.exists():
        raise MissingArtifacts(f"missing evaluation output {path}")
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    return EvalResult([float(r["mean_return"]) for r in rows], [float(r["solved_rate"]) for r in rows], tag,
                      [r["level_id"] for r in rows])


def aggregate_csv(result: EvalResult) -> str:
    return ("n_levels,mean_return,iqm,solved_rate,optimality_gap\n"
            f"{len(result)},{_csv_float(result.mean_return)},{_csv_float(iqm(result.returns))},"
            f"{_csv_float(result.solved.mean())},{_csv_float(1.0 - result.mean_return)}\n")


def _last_metrics_row(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifacts(f"missing {path}")
    rows = list(csv.DictReader(io.StringIO(path.read_text())))
    return rows[-1] if rows else {}


def build_report(out_dir, labels, seeds) -> str:
    """One row per (method, seed, level set). ``gen_gap`` is train mean minus that set's mean."""
    out_dir = Path(out_dir)
    lines = [REPORT_HEADER]
    for label in labels:
        for s in seeds:
            ed = out_dir / "eval" / label / f"seed{s}"
            if not (ed / "summary.json").exists():
                raise MissingArtifacts(f"missing evaluation summary in {ed}")
            summary = {k: float(v) for k, v in json.loads((ed / "summary.json").read_text()).items()}
            results = {name: read_eval_csv(ed / f"{name}.csv", name) for name in LEVEL_SETS}
            for name in LEVEL_SETS:
                r = results[name]
                vals = [label, str(s), name, str(len(r)), _csv_float(r.mean_return), _csv_float(iqm(r.returns)),
                        _csv_float(r.solved.mean()), _csv_float(1.0 - r.mean_return),
                        _csv_float(gen_gap(results["train"], r)), _csv_float(summary["over_gap"]),
                        _csv_float(summary["jsd"]), _csv_float(summary["mi_estimate"]),
                        _csv_float(summary["probe_accuracy"])]
                lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def run(config_path, out_dir=None) -> Experiment:
    exp = Experiment(load_config(config_path), out_dir)
    exp.run()
    return exp


__all__ = ["ConfigInvalid", "MissingArtifacts", "ExperimentConfig", "Experiment", "config_from_dict", "load_config",
           "run", "build_report", "REPORT_HEADER"]
