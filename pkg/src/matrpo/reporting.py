"""Metrics CSV I/O and learning-curve aggregation across seeds."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import load_config

Z95 = 1.96
LONG_FIELDS = ("algorithm", "seed", "iter", "joint_return")
AGGREGATE_FIELDS = ("algorithm", "iter", "n_runs", "mean", "ci_half_width", "lower", "upper")


def fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


class CsvLog:
    """Append-only CSV writer with a fixed header, UTF-8 and LF endings."""

    def __init__(self, path, columns: Sequence[str]):
        self.path = Path(path)
        self.columns = list(columns)
        with open(self.path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(self.columns)

    def append(self, row: dict) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow([fmt(row[c]) for c in self.columns])


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"metrics file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def load_run(run_dir) -> list[dict]:
    """Long-format rows ``(algorithm, seed, iter, joint_return)`` of one run directory."""
    run_dir = Path(run_dir)
    metrics = read_metrics(run_dir / "metrics.csv")
    cfg_path = run_dir / "config.ini"
    if not cfg_path.is_file():
        raise FileNotFoundError(f"config snapshot not found: {cfg_path}")
    cfg, _ = load_config(cfg_path)
    return [{"algorithm": cfg.algorithm, "seed": cfg.seed, "iter": int(r["iter"]),
             "joint_return": r["joint_return_mean"]} for r in metrics]


def ci_half_width(values: Sequence[float]) -> float:
    """Normal-approximation 95% half-width ``1.96 s / sqrt(n)``; zero for a single value."""
    n = len(values)
    if n < 2:
        return 0.0
    return Z95 * float(np.std(values, ddof=1)) / math.sqrt(n)


def aggregate(long_rows: Iterable[dict]) -> list[dict]:
    groups: dict[tuple[str, int], list[float]] = defaultdict(list)
    for row in long_rows:
        groups[(row["algorithm"], int(row["iter"]))].append(float(row["joint_return"]))
    out = []
    for (alg, it), vals in sorted(groups.items()):
        mean = float(np.mean(vals))
        half = ci_half_width(vals)
        out.append({"algorithm": alg, "iter": it, "n_runs": len(vals), "mean": mean,
                    "ci_half_width": half, "lower": mean - half, "upper": mean + half})
    return out


def write_rows(path, fields: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([fmt(row[f]) for f in fields])


def plot_runs(run_dirs: Sequence, out_dir, image: bool = True) -> dict:
    """Write ``long.csv`` and ``aggregate.csv`` (and ``curves.png`` when matplotlib is present)."""
    if not run_dirs:
        raise ValueError("plot needs at least one run directory")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    long_rows = [row for d in run_dirs for row in load_run(d)]
    agg = aggregate(long_rows)
    write_rows(out_dir / "long.csv", LONG_FIELDS, long_rows)
    write_rows(out_dir / "aggregate.csv", AGGREGATE_FIELDS, agg)
    written = {"long": out_dir / "long.csv", "aggregate": out_dir / "aggregate.csv"}
    if image:
        png = _render(agg, out_dir / "curves.png")
        if png is not None:
            written["image"] = png
    return written


def _render(agg: list[dict], path: Path) -> Path | None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    for alg in sorted({r["algorithm"] for r in agg}):
        rows = [r for r in agg if r["algorithm"] == alg]
        it = [r["iter"] for r in rows]
        ax.plot(it, [r["mean"] for r in rows], label=alg)
        ax.fill_between(it, [r["lower"] for r in rows], [r["upper"] for r in rows], alpha=0.25)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean joint return")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
