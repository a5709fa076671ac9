"""Command line: ``train``, ``evaluate`` and ``plot``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .consensus import write_diagnostics
from .diffkit import ShapeError
from .reporting import CsvLog, plot_runs
from .trainers import TrainState, check_compatible, evaluate_learners, load_checkpoint, policy_iteration, save_checkpoint

log = logging.getLogger("matrpo")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class RunFailed(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def environment_record() -> dict:
    """Build metadata with no host-specific paths."""
    return {"matrpo": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "platform": platform.system(), "machine": platform.machine()}


def _attach_log(path: Path) -> logging.Handler:
    handler = logging.FileHandler(path, mode="a", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("matrpo")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def train_config(cfg: RunConfig, text: str, run_dir: Path, progress=None) -> TrainState:
    """Train to completion inside ``run_dir``; partial results survive a failure."""
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    (run_dir / "config.ini").write_text(text, encoding="utf-8")
    (run_dir / "environment.json").write_text(json.dumps(environment_record(), indent=1) + "\n", encoding="utf-8")
    handler = _attach_log(run_dir / "run.log")
    try:
        state = TrainState.initial(cfg)
        metrics = CsvLog(run_dir / "metrics.csv", state.metric_columns())
        timing = CsvLog(run_dir / "timing.csv", ["iter", "wall_ms"])
        admm_path = run_dir / "admm.csv"
        log.info("training %s seed=%d for %d iterations", cfg.algorithm, cfg.seed, cfg.iterations)
        while state.iteration < cfg.iterations:
            t0 = time.perf_counter()
            try:
                new_state, info = policy_iteration(state)
            except Exception as exc:
                log.error("iteration %d failed: %s: %s", state.iteration, type(exc).__name__, exc)
                save_checkpoint(state, run_dir / "checkpoints" / "last_good")
                raise RunFailed(f"iteration {state.iteration} failed: {exc}") from exc
            wall_ms = 1000.0 * (time.perf_counter() - t0)
            row = new_state.metrics[-1]
            metrics.append(row)
            timing.append({"iter": state.iteration, "wall_ms": round(wall_ms, 3)})
            if info.consensus is not None:
                write_diagnostics(info.consensus.diagnostics, admm_path, extra={"policy_iter": state.iteration},
                                  append=state.iteration > 0)
            state = new_state
            if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                save_checkpoint(state, run_dir / "checkpoints" / f"iter_{state.iteration:05d}")
            if progress is not None:
                progress(state)
        save_checkpoint(state, run_dir / "checkpoints" / "final")
        log.info("finished after %d iterations", state.iteration)
        return state
    finally:
        logging.getLogger("matrpo").removeHandler(handler)
        handler.close()


def train(config_path, output_dir=None) -> Path:
    cfg, text = load_config(config_path)
    run_dir = Path(output_dir if output_dir is not None else cfg.output_dir)
    train_config(cfg, text, run_dir)
    return run_dir


def evaluate(checkpoint, episodes: int, seed: int, config_path=None, out=None) -> dict:
    if episodes < 1:
        raise UsageError(f"episodes must be a positive integer, got {episodes}")
    state = load_checkpoint(checkpoint)
    cfg = state.config
    if config_path is not None:
        cfg, _ = load_config(config_path)
        check_compatible(state.learners, cfg)
    summary = evaluate_learners(state.learners, cfg, episodes, seed)
    summary["iteration"] = state.iteration
    summary["algorithm"] = cfg.algorithm
    out = Path(out) if out is not None else Path(checkpoint) / f"evaluation_seed{seed}_ep{episodes}.json"
    out.write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    return summary


def _nonneg_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="matrpo", description="Decentralized multi-agent trust region policy optimization.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train from an INI config")
    p.add_argument("config")
    p.add_argument("--output-dir", help="override run.output_dir")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint with stochastic episodes")
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=_nonneg_int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="evaluate in the environment of another config")
    p.add_argument("--out", help="summary JSON path")

    p = sub.add_parser("plot", help="merge run directories into learning-curve tables")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", default="curves")
    p.add_argument("--no-image", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command == "train":
            run_dir = train(args.config, args.output_dir)
            print(f"run directory: {run_dir}")
        elif args.command == "evaluate":
            print(json.dumps(evaluate(args.checkpoint, args.episodes, args.seed, args.config, args.out), indent=1))
        else:
            for name, path in plot_runs(args.runs, args.out, image=not args.no_image).items():
                print(f"{name}: {path}")
    except (UsageError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (RunFailed, ShapeError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
