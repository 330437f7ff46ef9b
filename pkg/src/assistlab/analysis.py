"""Conversion-gap grid and the run report (CSV tables plus SVG figures)."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .game_model import DataError, Dataset, atomic_write_text

log = logging.getLogger(__name__)

MIN_CELL = 30


@dataclass
class GapGrid:
    n_values: list[int]
    alpha_values: list[float]
    c_engine: np.ndarray
    c_human: np.ndarray
    counts_engine: np.ndarray
    counts_human: np.ndarray
    min_cell: int = MIN_CELL
    filters: dict = field(default_factory=dict)

    @property
    def delta(self) -> np.ndarray:
        return self.c_engine - self.c_human

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.delta)

    @property
    def mean_delta(self) -> float:
        return float(np.mean(self.delta[self.defined]))

    def to_dict(self) -> dict:
        def nan_list(a):
            return [[None if np.isnan(x) else float(x) for x in row] for row in a]

        return {
            "n_values": self.n_values,
            "alpha_values": self.alpha_values,
            "c_engine": nan_list(self.c_engine),
            "c_human": nan_list(self.c_human),
            "delta": nan_list(self.delta),
            "counts_engine": self.counts_engine.tolist(),
            "counts_human": self.counts_human.tolist(),
            "min_cell": self.min_cell,
            "mean_delta": self.mean_delta,
            "filters": self.filters,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GapGrid:
        def arr(x):
            return np.array([[np.nan if v is None else v for v in row] for row in x], dtype=float)

        return cls(
            list(d["n_values"]),
            list(d["alpha_values"]),
            arr(d["c_engine"]),
            arr(d["c_human"]),
            np.array(d["counts_engine"], dtype=int),
            np.array(d["counts_human"], dtype=int),
            d.get("min_cell", MIN_CELL),
            d.get("filters", {}),
        )


def _elo_ok(rec, min_elo, max_elo) -> bool:
    elo = rec.white_elo
    if min_elo is None and max_elo is None:
        return True
    if elo is None:
        return False
    return (min_elo is None or elo >= min_elo) and (max_elo is None or elo <= max_elo)


def conditional_means(
    dataset: Dataset, n_values: Sequence[int], alpha_values: Sequence[float], min_cell: int = MIN_CELL,
    min_elo: int | None = None, max_elo: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean final score over games whose calibrated White score at move ``n`` is at least ``alpha``.

    Cells with fewer than ``min_cell`` games are NaN.
    """
    means = np.full((len(n_values), len(alpha_values)), np.nan)
    counts = np.zeros((len(n_values), len(alpha_values)), dtype=int)
    records = [r for r in dataset.records if _elo_ok(r, min_elo, max_elo)]
    for i, n in enumerate(n_values):
        pw, y = [], []
        for rec in records:
            p = rec.point_at(n)
            if p is None:
                continue
            if p.pw is None:
                raise DataError(f"{rec.game_id}: move {n} is not calibrated")
            pw.append(p.pw)
            y.append(rec.result)
        pw, y = np.array(pw), np.array(y)
        for j, a in enumerate(alpha_values):
            member = pw >= a
            counts[i, j] = int(member.sum())
            if counts[i, j] >= min_cell:
                means[i, j] = float(y[member].mean())
    return means, counts


def gap_grid(
    engine_dataset: Dataset,
    human_dataset: Dataset,
    n_values: Sequence[int],
    alpha_values: Sequence[float],
    min_cell: int = MIN_CELL,
    min_elo: int | None = None,
    max_elo: int | None = None,
) -> GapGrid:
    if len(engine_dataset) == 0 or len(human_dataset) == 0:
        raise DataError("gap grid needs two non-empty datasets")
    ce, ne = conditional_means(engine_dataset, n_values, alpha_values, min_cell)
    ch, nh = conditional_means(human_dataset, n_values, alpha_values, min_cell, min_elo, max_elo)
    grid = GapGrid(list(n_values), list(map(float, alpha_values)), ce, ch, ne, nh, min_cell,
                   {"min_elo": min_elo, "max_elo": max_elo})
    if not grid.defined.any():
        raise DataError(f"no gap-grid cell has {min_cell} games in both datasets")
    return grid


# -- report --------------------------------------------------------------------------------

# artifacts the report knows how to render, relative to the run directory
KNOWN_ARTIFACTS = {
    "play": "play/*.summary.json",
    "calibration": "calibration.json",
    "simulate": "simulate*.json",
    "optimize": "optimize/trials.jsonl",
    "gap_grid": "gap_grid.json",
}


class ReportError(RuntimeError):
    pass


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _provenance(doc: dict) -> tuple[str, object]:
    prov = doc.get("provenance", {})
    return prov.get("config_hash", ""), prov.get("seed", "")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "assistlab"
    plt.rcParams["svg.fonttype"] = "none"
    return plt


def _save(fig, path: Path) -> None:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    atomic_write_text(path, buf.getvalue())


def _load_json(path: Path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def report_budget_scores(run_dir: Path, out: Path, plt) -> list[str]:
    rows = []
    for path in sorted(run_dir.glob(KNOWN_ARTIFACTS["play"])):
        doc = _load_json(path)
        h, seed = _provenance(doc)
        thresholds = " ".join(f"{x:g}" for x in doc.get("thresholds") or [])
        # oracle rows hold best-over-moves scores, hindsight rows the committed branch
        rows.append([doc["policy"], doc.get("mode", "game"), doc["budget"], thresholds, doc["games"], doc["mean"],
                     doc["std_error"], doc.get("aborted", 0), h, seed])
    if not rows:
        return []
    rows.sort(key=lambda r: (r[1], r[0], r[2], r[3]))
    header = ["policy", "mode", "budget", "thresholds", "games", "mean_score", "std_error", "aborted", "config_hash",
              "seed"]
    atomic_write_text(out / "budget_scores.csv", _csv_text(header, rows))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    games = [r for r in rows if r[1] == "game"]
    for policy in sorted({r[0] for r in games}):
        sel = [r for r in games if r[0] == policy]
        ax.errorbar([r[2] for r in sel], [r[5] for r in sel], yerr=[1.96 * r[6] for r in sel], marker="o",
                    capsize=3, label=policy)
    ax.set_xlabel("intervention budget")
    ax.set_ylabel("mean score (White)")
    ax.legend()
    fig.tight_layout()
    _save(fig, out / "budget_scores.svg")
    plt.close(fig)
    return ["budget_scores.csv", "budget_scores.svg"]


def report_calibration(run_dir: Path, out: Path, plt, moves=(5, 30)) -> list[str]:
    path = run_dir / KNOWN_ARTIFACTS["calibration"]
    if not path.exists():
        return []
    from .calibration import CalibrationBank

    doc = _load_json(path)
    bank = CalibrationBank.from_dict(doc)
    h, seed = _provenance(doc)
    x = np.linspace(0, 1, 101)
    rows = []
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--", label="identity")
    for t in moves:
        y = bank.calibrate(np.full_like(x, t, dtype=int), x)
        rows += [[t, bank.bucket_of(t), f"{xi:.2f}", float(yi), h, seed] for xi, yi in zip(x, y)]
        ax.step(x, y, where="post", label=f"move {t} (bucket {bank.bucket_of(t)})")
    ax.set_xlabel("raw engine score")
    ax.set_ylabel("calibrated win probability")
    ax.legend()
    fig.tight_layout()
    _save(fig, out / "calibration_curves.svg")
    plt.close(fig)
    atomic_write_text(out / "calibration_curves.csv",
                      _csv_text(["move", "bucket", "raw_score", "calibrated", "config_hash", "seed"], rows))
    return ["calibration_curves.csv", "calibration_curves.svg"]


def report_simulation(run_dir: Path, out: Path, plt) -> list[str]:
    rows = []
    for path in sorted(run_dir.glob(KNOWN_ARTIFACTS["simulate"])):
        doc = _load_json(path)
        h, seed = _provenance(doc)
        T = doc["thresholds"]
        for k, (frac, move) in enumerate(zip(doc["frac_fired"], doc["avg_move"]), start=1):
            rows.append([" ".join(f"{x:g}" for x in T), k, T[k - 1], frac, move, doc["avg_score"],
                         doc["std_error"], doc["runs"], h, seed])
    if not rows:
        return []
    header = ["thresholds", "k", "threshold_k", "frac_fired", "avg_move", "avg_score", "std_error", "runs",
              "config_hash", "seed"]
    atomic_write_text(out / "sim_diagnostics.csv", _csv_text(header, rows))
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.5))
    for label in dict.fromkeys(r[0] for r in rows):
        sel = [r for r in rows if r[0] == label]
        a1.plot([r[1] for r in sel], [r[3] for r in sel], marker="o", label=f"T = {label}")
        a2.plot([r[1] for r in sel], [np.nan if r[4] is None else r[4] for r in sel], marker="o")
    a1.set_xlabel("assist k")
    a1.set_ylabel("fraction of games where assist k fires")
    a2.set_xlabel("assist k")
    a2.set_ylabel("mean move of assist k")
    a1.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, out / "sim_diagnostics.svg")
    plt.close(fig)
    return ["sim_diagnostics.csv", "sim_diagnostics.svg"]


def report_optimize(run_dir: Path, out: Path, plt) -> list[str]:
    path = run_dir / KNOWN_ARTIFACTS["optimize"]
    if not path.exists():
        return []
    best_path = path.parent / "best.json"
    h, seed = _provenance(_load_json(best_path)) if best_path.exists() else ("", "")
    trials = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    rows = [[t["index"], t["phase"], " ".join(f"{x:.6g}" for x in t["params"]), t["value"], t["noise"],
             t["backend"], t["failed"], h, seed] for t in trials]
    atomic_write_text(out / "optimize_trials.csv", _csv_text(
        ["index", "phase", "params", "value", "noise", "backend", "failed", "config_hash", "seed"], rows))
    vals = [t["value"] for t in trials if not t["failed"]]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(1, len(vals) + 1), vals, ".", label="trial")
    ax.plot(range(1, len(vals) + 1), np.maximum.accumulate(vals), label="incumbent")
    ax.set_xlabel("evaluation")
    ax.set_ylabel("objective")
    ax.legend()
    fig.tight_layout()
    _save(fig, out / "optimize_trace.svg")
    plt.close(fig)
    return ["optimize_trials.csv", "optimize_trace.svg"]


def report_gap_grid(run_dir: Path, out: Path, plt) -> list[str]:
    path = run_dir / KNOWN_ARTIFACTS["gap_grid"]
    if not path.exists():
        return []
    doc = _load_json(path)
    grid = GapGrid.from_dict(doc)
    h, seed = _provenance(doc)
    rows = []
    for i, n in enumerate(grid.n_values):
        for j, a in enumerate(grid.alpha_values):
            rows.append([n, a, grid.c_engine[i, j], grid.c_human[i, j], grid.delta[i, j],
                         grid.counts_engine[i, j], grid.counts_human[i, j], h, seed])
    rows = [[("" if isinstance(v, float) and np.isnan(v) else v) for v in r] for r in rows]
    atomic_write_text(out / "gap_grid.csv", _csv_text(
        ["n", "alpha", "c_engine", "c_human", "delta", "count_engine", "count_human", "config_hash", "seed"], rows))
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(np.ma.masked_invalid(grid.delta), origin="lower", aspect="auto", cmap="coolwarm",
                   vmin=-0.2, vmax=0.2)
    ax.set_xticks(range(len(grid.alpha_values)), [f"{a:g}" for a in grid.alpha_values])
    ax.set_yticks(range(len(grid.n_values)), [str(n) for n in grid.n_values])
    ax.set_xlabel("alpha (calibrated White score at move n)")
    ax.set_ylabel("move n")
    fig.colorbar(im, ax=ax, label="engine minus human conversion")
    fig.tight_layout()
    _save(fig, out / "gap_grid.svg")
    plt.close(fig)
    return ["gap_grid.csv", "gap_grid.svg"]


def report(run_dir, out_dir=None) -> list[str]:
    """Render every known artifact in ``run_dir``; returns written file names."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    missing = ", ".join(f"{k} ({v})" for k, v in KNOWN_ARTIFACTS.items())
    if not run_dir.is_dir():
        raise ReportError(f"run directory {run_dir} does not exist; expected any of: {missing}")
    plt = _pyplot()
    written = []
    for part in (report_budget_scores, report_calibration, report_simulation, report_optimize, report_gap_grid):
        written += part(run_dir, out, plt)
    if not written:
        raise ReportError(f"nothing to report in {run_dir}; expected any of: {missing}")
    return written
