"""Command-line entry point: ``levelsmith <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import nn_core
from .curricula import METHODS, format_rows, method_defaults, run_method
from .experiment import (ConfigInvalid, Experiment, MissingArtifacts, aggregate_csv, build_report,
                         config_from_dict, load_agent, load_config, write_eval_csv)
from .levelio import load_levels, save_levels
from .metrics import EvalResult
from .ppo import PpoConfig, evaluate
from .vae import LevelVAE
from .wfc import GenConfig, available_patterns, generate_set


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().replace(",", "x").split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 9x9, got {text!r}") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) < 2:
        raise argparse.ArgumentTypeError(f"size must look like 9x9, got {text!r}")
    return dims


def _path(args, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(args.out_dir) / p


def cmd_gen_levels(args):
    cfg = GenConfig(size=args.size, pattern=args.pattern, moss_fraction=args.moss, lava_fraction=args.lava)
    levels = generate_set(cfg, args.count, args.seed, prefix=args.prefix)
    out = save_levels(levels, _path(args, args.out))
    print(f"wrote {len(levels)} levels to {out}")


def cmd_pretrain_vae(args):
    levels = load_levels(_path(args, args.levels))
    vae = LevelVAE(latent_dim=args.latent_dim, epochs=args.epochs, seed=args.seed)
    vae.fit(levels)
    out = vae.save(_path(args, args.out))
    print(f"final ELBO {vae.elbo_curve_[-1]:.4f}; checkpoint {out}")


def cmd_train(args):
    levels = load_levels(_path(args, args.levels))
    overrides = json.loads(args.overrides) if args.overrides else {}
    mcfg = method_defaults(args.method, len(levels), **overrides)
    ppo = PpoConfig(**(json.loads(args.ppo) if args.ppo else {}))
    vae = LevelVAE.load(_path(args, args.vae)) if args.vae else None
    rows, runner = run_method(mcfg, levels, args.updates, args.seed, ppo, vae=vae)
    out = Path(args.out_dir)
    runner.save(out)
    (out / "metrics.csv").write_text(format_rows(rows))
    print(f"{runner.updates} updates, {runner.env_steps} env steps; outputs in {out}")


def cmd_eval(args):
    agent = load_agent(_path(args, args.agent))
    levels = load_levels(_path(args, args.levels))
    ret, solved = evaluate(agent, levels, args.episodes, args.seed)
    result = EvalResult(ret, solved, "eval", [lv.id for lv in levels])
    out = _path(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_eval_csv(out, result)
    agg = out.with_name(out.stem + "_aggregate.csv")
    agg.write_text(aggregate_csv(result))
    print(f"mean return {result.mean_return:.4f}; wrote {out} and {agg}")


def cmd_report(args):
    run_dir = Path(args.out_dir)
    manifest = run_dir / "manifest.json"
    if not manifest.exists():
        raise MissingArtifacts(f"missing {manifest}")
    cfg = config_from_dict(json.loads(manifest.read_text())["config"])
    text = build_report(run_dir, [m.label for m in cfg.methods], cfg.seeds)
    (run_dir / "report.csv").write_text(text)
    print(text, end="")


def cmd_run(args):
    cfg = load_config(args.config)
    exp = Experiment(cfg, args.out_dir)
    exp.run()
    print(f"run complete: {exp.out}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="levelsmith", description="Level generation and curriculum experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out-dir", default=".", help="base directory for relative paths and outputs")
        p.set_defaults(fn=fn)
        return p

    p = add("gen-levels", cmd_gen_levels, "generate a solvable level set with WFC")
    p.add_argument("--pattern", default="caves", choices=available_patterns())
    p.add_argument("--size", type=_size, default=(13, 13))
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--moss", type=float, default=0.5)
    p.add_argument("--lava", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="lvl")
    p.add_argument("--out", default="levels.jsonl", help=".txt for the text format, .jsonl for records")

    p = add("pretrain-vae", cmd_pretrain_vae, "pre-train the level VAE")
    p.add_argument("--levels", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--latent-dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="vae.ckpt")

    p = add("train", cmd_train, "train an agent under one curriculum method")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--levels", required=True)
    p.add_argument("--vae")
    p.add_argument("--updates", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overrides", help="JSON object of method config overrides")
    p.add_argument("--ppo", help="JSON object of PPO config overrides")

    p = add("eval", cmd_eval, "evaluate an agent checkpoint on a level set")
    p.add_argument("--agent", required=True)
    p.add_argument("--levels", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="eval.csv")

    add("report", cmd_report, "summarise a completed run directory (--out-dir)")

    p = sub.add_parser("run", help="run an experiment config end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", help="override the config's out_dir")
    p.set_defaults(fn=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    nn_core.configure_threads()
    try:
        args.fn(args)
    except (ConfigInvalid, MissingArtifacts) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
