#!/usr/bin/env python3
"""
Metrics Report Module
Learning curves (SVG) and R/S/C summary tables from run directories.
A run directory holds metrics.csv, eval.csv and run_config.txt; runs sharing
algorithm and scenario are averaged with a min-max band across seeds.
"""

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from particle_env import PREDATOR_PREY
from run_config import CONFIG_FILENAME, ConfigError, load_config

logger = logging.getLogger(__name__)

METRICS_FILENAME = "metrics.csv"
EVAL_FILENAME = "eval.csv"
REQUIRED_COLUMNS = ("iteration", "env_steps", "mean_episode_reward", "comm_rate")

# Published full-scale TEM result on predator-prey 7-3, kept as context only
PAPER_REFERENCE: Dict[str, Any] = {
    "name": "published TEM",
    "scenario": "pp:7-3",
    "R": -40.5, "R_std": 4.7,
    "S": 61.6, "S_std": 18.3,
    "C": 1.4, "C_std": 0.6,
}


class ReportError(RuntimeError):
    """Raised for a missing or unreadable metrics file"""


@dataclass
class RunData:
    path: str
    algo: str
    scenario: str
    seed: int
    metrics: Dict[str, np.ndarray]
    evals: Optional[Dict[str, np.ndarray]] = None


@dataclass
class ReportResult:
    table: str
    figures: List[str] = field(default_factory=list)
    groups: Dict[str, int] = field(default_factory=dict)


def read_csv_columns(path: str, required: Sequence[str] = ()) -> Dict[str, np.ndarray]:
    """Numeric CSV -> column name -> float array"""
    if not os.path.exists(path):
        raise ReportError(f"Missing metrics file: {path}")
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            header = reader.fieldnames or []
            missing = [c for c in required if c not in header]
            if missing:
                raise ReportError(f"Corrupt metrics file {path}: missing columns {missing}")
            rows = list(reader)
        return {name: np.array([float(row[name]) for row in rows], dtype=np.float64) for name in header}
    except (ValueError, TypeError, csv.Error) as e:
        raise ReportError(f"Corrupt metrics file {path}: {e}")


def load_run(run_dir: str) -> RunData:
    metrics = read_csv_columns(os.path.join(run_dir, METRICS_FILENAME), REQUIRED_COLUMNS)
    algo, scenario, seed = "unknown", "unknown", 0
    config_path = os.path.join(run_dir, CONFIG_FILENAME)
    if os.path.exists(config_path):
        try:
            config = load_config(config_path)
            algo, scenario, seed = config.algo, config.scenario.label, config.seed
        except ConfigError as e:
            logger.warning(f"Ignoring unreadable {config_path}: {e}")
    evals = None
    eval_path = os.path.join(run_dir, EVAL_FILENAME)
    if os.path.exists(eval_path):
        evals = read_csv_columns(eval_path)
    return RunData(run_dir, algo, scenario, seed, metrics, evals)


def discover_runs(root: str) -> List[str]:
    """Every directory under root (root included) holding a metrics.csv"""
    found = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        if METRICS_FILENAME in filenames:
            found.append(dirpath)
    return found


def aggregate(curves: Sequence[np.ndarray]):
    """(mean, min, max) over runs, truncated to the shortest run"""
    length = min(len(c) for c in curves)
    stacked = np.stack([c[:length] for c in curves])
    return stacked.mean(axis=0), stacked.min(axis=0), stacked.max(axis=0)


def plot_metric(groups: Dict[str, List[RunData]], metric: str, ylabel: str, path: str) -> str:
    fig, ax = plt.subplots(figsize=(8, 5))
    for label, runs in groups.items():
        length = min(len(r.metrics["env_steps"]) for r in runs)
        if length == 0:
            continue
        steps = runs[0].metrics["env_steps"][:length]
        mean, low, high = aggregate([r.metrics[metric] for r in runs])
        ax.plot(steps, mean, label=f"{label} (n={len(runs)})")
        if len(runs) > 1:
            ax.fill_between(steps, low, high, alpha=0.2)
    ax.set_xlabel("environment steps")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def _fmt(row: Dict[str, Any], key: str) -> str:
    value = row.get(key)
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return "-"
    std = row.get(f"{key}_std")
    return f"{value:.2f} ± {std:.2f}" if std is not None else f"{value:.2f}"


TOTAL_KEYS = ("R_total", "S_total", "C_total")


def summary_table(rows: Sequence[Dict[str, Any]], reference: Optional[Dict[str, Any]] = None) -> str:
    """Fixed-width table: per-episode R / S / C, their sums over all evaluation episodes, comm_rate"""
    totals_header = "".join(f"{key:>10}" for key in TOTAL_KEYS)
    header = f"{'name':<16}{'scenario':<10}{'R':>18}{'S':>18}{'C':>16}{totals_header}{'comm_rate':>11}"
    lines = [header, "-" * len(header)]
    for row in rows:
        rate = row.get("comm_rate")
        totals = "".join(f"{_fmt(row, key):>10}" for key in TOTAL_KEYS)
        lines.append(f"{str(row['name']):<16}{str(row['scenario']):<10}{_fmt(row, 'R'):>18}"
                     f"{_fmt(row, 'S'):>18}{_fmt(row, 'C'):>16}{totals}"
                     f"{'-' if rate is None else f'{rate:.3f}':>11}")
    if reference:
        lines.append("")
        lines.append(f"reference ({reference['name']}, full scale, not a threshold):")
        totals = "".join(f"{_fmt(reference, key):>10}" for key in TOTAL_KEYS)
        lines.append(f"{str(reference['name']):<16}{reference['scenario']:<10}{_fmt(reference, 'R'):>18}"
                     f"{_fmt(reference, 'S'):>18}{_fmt(reference, 'C'):>16}{totals}{'-':>11}")
    return "\n".join(lines) + "\n"


def final_row(run: RunData) -> Dict[str, Any]:
    """Last greedy evaluation if present, else the last training iteration"""
    if run.evals is not None and len(run.evals.get("R", [])):
        return {"R": run.evals["R"][-1], "S": run.evals["S"][-1], "C": run.evals["C"][-1],
                "comm_rate": run.evals["comm_rate"][-1]}
    m = run.metrics
    if not len(m["iteration"]):
        return {}
    s_column = "capture_events" if run.scenario.startswith(PREDATOR_PREY) else "occupied_landmarks"
    return {"R": m["mean_episode_reward"][-1], "S": m[s_column][-1] if s_column in m else None,
            "C": m["collision_events"][-1] if "collision_events" in m else None,
            "comm_rate": m["comm_rate"][-1]}


def report(run_dir: str) -> ReportResult:
    """reward_curve.svg, comm_rate_curve.svg and summary.txt for every run under run_dir"""
    if not os.path.isdir(run_dir):
        raise ReportError(f"No runs found: {run_dir} is not a directory")
    run_dirs = discover_runs(run_dir)
    if not run_dirs:
        raise ReportError(f"No runs found under {run_dir}")

    groups: Dict[str, List[RunData]] = {}
    for path in run_dirs:
        run = load_run(path)
        groups.setdefault(f"{run.algo} {run.scenario}", []).append(run)

    figures = [
        plot_metric(groups, "mean_episode_reward", "mean episode reward",
                    os.path.join(run_dir, "reward_curve.svg")),
        plot_metric(groups, "comm_rate", "sends per agent-step", os.path.join(run_dir, "comm_rate_curve.svg")),
    ]

    rows = []
    for label, runs in groups.items():
        finals = [f for f in (final_row(r) for r in runs) if f]
        if not finals:
            continue
        row: Dict[str, Any] = {"name": runs[0].algo, "scenario": runs[0].scenario}
        for key in ("R", "S", "C", "comm_rate"):
            values = [f[key] for f in finals if f.get(key) is not None]
            row[key] = float(np.mean(values)) if values else None
            if key != "comm_rate" and len(values) > 1:
                row[f"{key}_std"] = float(np.std(values))
        rows.append(row)
    table = summary_table(rows)
    with open(os.path.join(run_dir, "summary.txt"), "w", encoding="utf-8") as f:
        f.write(table)
    logger.info(f"Report for {len(run_dirs)} runs in {len(groups)} groups written to {run_dir}")
    return ReportResult(table=table, figures=figures, groups={k: len(v) for k, v in groups.items()})
