"""Engine-free threshold simulator.

Games are stitched together from per-move banks of calibrated ``(p_w, p_s)``
pairs logged without interventions.  Each fired assist adds the estimated
uplift ``Delta(t, d)`` to the baseline mean result, clipped to ``[0, 1]``.

Monte Carlo runs are processed in fixed blocks of :data:`BLOCK` runs; block
``b`` draws from ``default_rng([seed, b])``, so a report depends only on
``(seed, runs)`` and not on scheduling.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .calibration import fit_isotonic
from .game_model import Dataset, atomic_write_text

log = logging.getLogger(__name__)

BLOCK = 8192
SIDECAR_VERSION = 1


class SimError(ValueError):
    pass


@dataclass
class SimConfig:
    horizon: int = 200
    runs: int = 200_000
    seed: int = 0
    uplift_scales: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.horizon < 1:
            raise SimError("horizon must be >= 1")
        if self.runs < 1:
            raise SimError("runs must be >= 1")
        if self.uplift_scales is not None:
            self.uplift_scales = tuple(float(x) for x in self.uplift_scales)
            if any(x < 0 for x in self.uplift_scales):
                raise SimError("uplift scales must be >= 0")

    def scales(self, K: int) -> np.ndarray:
        if self.uplift_scales is None:
            return np.ones(K)
        if len(self.uplift_scales) < K:
            raise SimError(f"need {K} uplift scales, got {len(self.uplift_scales)}")
        return np.asarray(self.uplift_scales[:K])


# -- banks ---------------------------------------------------------------------------


@dataclass
class MoveBank:
    """``pairs[t-1]`` is an ``(n_t, 2)`` array of ``(p_w, p_s)`` seen at White move ``t``."""

    pairs: list[np.ndarray]
    baseline_mean: float

    def __post_init__(self):
        self.pairs = [np.asarray(p, dtype=float).reshape(-1, 2) for p in self.pairs]
        for p in self.pairs:
            if p.size and (p.min() < 0 or p.max() > 1):
                raise SimError("bank pairs must lie in [0, 1]^2")
        self._gaps = [np.maximum(0.0, p[:, 1] - p[:, 0]) for p in self.pairs]

    @property
    def horizon(self) -> int:
        return len(self.pairs)

    def gaps(self, t: int) -> np.ndarray:
        if t > len(self._gaps):
            return np.zeros(0)
        return self._gaps[t - 1]

    def sizes(self) -> list[int]:
        return [len(p) for p in self.pairs]

    def to_dict(self) -> dict:
        return {
            "kind": "move-bank",
            "sidecar_version": SIDECAR_VERSION,
            "baseline_mean": self.baseline_mean,
            "pairs": [p.tolist() for p in self.pairs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MoveBank:
        return cls([np.asarray(p, float) for p in d["pairs"]], float(d["baseline_mean"]))


def build_banks(dataset: Dataset, horizon: int = 200) -> MoveBank:
    if len(dataset.records) == 0:
        raise SimError("empty dataset")
    buckets: list[list[tuple[float, float]]] = [[] for _ in range(horizon)]
    for rec in dataset.records:
        for p in rec.points:
            if not p.calibrated:
                raise SimError(f"{rec.game_id}: banks need calibrated points")
            if p.t <= horizon:
                buckets[p.t - 1].append((p.pw, p.ps))
    results = np.array([r.result for r in dataset.records], dtype=float)
    return MoveBank([np.array(b).reshape(-1, 2) for b in buckets], float(results.mean()))


# -- uplift --------------------------------------------------------------------------


@dataclass
class UpliftTable:
    """``delta[b, j]`` is the uplift for move bin ``b`` at gap ``grid[j]``."""

    bin_width: int
    grid: np.ndarray
    mu1: np.ndarray
    mu0: np.ndarray
    delta: np.ndarray
    populated: np.ndarray
    empty_bins: list[int] = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    @property
    def n_bins(self) -> int:
        return self.delta.shape[0]

    def bin_of(self, t):
        return np.minimum((np.asarray(t) - 1) // self.bin_width, self.n_bins - 1)

    def lookup(self, t, d):
        """Linear interpolation in ``d`` within the bin of ``t``."""
        t = np.asarray(t)
        d = np.clip(np.asarray(d, dtype=float), 0.0, 1.0)
        b = self.bin_of(t)
        G = len(self.grid)
        pos = d * (G - 1)
        lo = np.minimum(np.floor(pos).astype(int), G - 2)
        frac = pos - lo
        row = self.delta[b]
        if row.ndim == 1:
            out = row[lo] * (1 - frac) + row[lo + 1] * frac
        else:
            out = row[np.arange(len(lo)), lo] * (1 - frac) + row[np.arange(len(lo)), lo + 1] * frac
        return np.clip(out, -1.0, 1.0)

    def populated_values(self) -> np.ndarray:
        return self.delta[self.populated]

    def to_dict(self) -> dict:
        return {
            "kind": "uplift-table",
            "sidecar_version": SIDECAR_VERSION,
            "bin_width": self.bin_width,
            "grid": self.grid.tolist(),
            "mu1": self.mu1.tolist(),
            "mu0": self.mu0.tolist(),
            "delta": self.delta.tolist(),
            "populated": self.populated.astype(int).tolist(),
            "empty_bins": self.empty_bins,
            "counts": self.counts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> UpliftTable:
        return cls(
            d["bin_width"],
            np.asarray(d["grid"], float),
            np.asarray(d["mu1"], float),
            np.asarray(d["mu0"], float),
            np.asarray(d["delta"], float),
            np.asarray(d["populated"], bool),
            list(d.get("empty_bins", [])),
            d.get("counts", {}),
        )

    @classmethod
    def constant(cls, value: float, n_bins: int = 1, bin_width: int = 200, grid_size: int = 101) -> UpliftTable:
        grid = np.linspace(0, 1, grid_size)
        delta = np.full((n_bins, grid_size), float(value))
        zeros = np.zeros_like(delta)
        return cls(bin_width, grid, zeros + value, zeros, delta, np.ones_like(delta, bool))


def _gap_outcomes_d0(d0: Dataset):
    t, d, y = [], [], []
    for rec in d0.records:
        for p in rec.points:
            if p.gap is None:
                raise SimError(f"{rec.game_id}: D0 must be calibrated")
            t.append(p.t)
            d.append(p.gap)
            y.append(rec.result)
    return np.array(t, int), np.array(d, float), np.array(y, float)


def _gap_outcomes_di(di: Dataset):
    t, d, y = [], [], []
    for rec in di.records:
        fired = rec.fired
        if len(fired) != 1:
            continue
        ev = fired[0]
        p = rec.point_at(ev.t)
        gap = p.gap if p is not None and p.gap is not None else ev.gap
        if gap is None:
            raise SimError(f"{rec.game_id}: DI intervention has no calibrated gap")
        t.append(ev.t)
        d.append(gap)
        y.append(rec.result)
    return np.array(t, int), np.array(d, float), np.array(y, float)


def _fit_on_grid(d: np.ndarray, y: np.ndarray, grid: np.ndarray) -> np.ndarray:
    if len(d) == 0:
        return np.full(len(grid), np.nan)
    if len(np.unique(d)) == 1 or len(d) < 2:
        return np.full(len(grid), float(y.mean()))
    return fit_isotonic((d, y))(grid)


def fit_uplift(
    d0: Dataset,
    di: Dataset,
    bin_width: int = 10,
    d_grid_size: int = 101,
    horizon: int = 200,
    min_di_per_bin: int = 30,
    support_quantile: float = 0.05,
) -> UpliftTable:
    """Per move bin, isotonic-in-gap fits of the mean result with (``mu1``, from
    DI at the intervened move) and without (``mu0``, every D0 point) an
    intervention.  ``delta = mu1 - mu0`` on a uniform gap grid.

    A grid cell counts as populated when its gap lies between the
    ``support_quantile`` and ``1 - support_quantile`` quantiles of both
    samples in the bin and the bin holds at least ``min_di_per_bin`` DI games.
    Bins without DI data get ``delta = 0`` and are listed in ``empty_bins``.
    """
    grid = np.linspace(0.0, 1.0, d_grid_size)
    n_bins = (horizon - 1) // bin_width + 1
    t0, g0, y0 = _gap_outcomes_d0(d0)
    t1, g1, y1 = _gap_outcomes_di(di)
    if len(t0) == 0:
        raise SimError("D0 has no points")
    b0 = (np.minimum(t0, horizon) - 1) // bin_width
    b1 = (np.minimum(t1, horizon) - 1) // bin_width
    mu1 = np.zeros((n_bins, d_grid_size))
    mu0 = np.zeros((n_bins, d_grid_size))
    delta = np.zeros((n_bins, d_grid_size))
    populated = np.zeros((n_bins, d_grid_size), bool)
    empty = []
    counts = {"d0": [], "di": []}
    for b in range(n_bins):
        m0, m1 = b0 == b, b1 == b
        counts["d0"].append(int(m0.sum()))
        counts["di"].append(int(m1.sum()))
        if m1.sum() == 0 or m0.sum() == 0:
            empty.append(b)
            continue
        mu0[b] = _fit_on_grid(g0[m0], y0[m0], grid)
        mu1[b] = _fit_on_grid(g1[m1], y1[m1], grid)
        delta[b] = np.clip(mu1[b] - mu0[b], -1.0, 1.0)
        if m1.sum() >= min_di_per_bin:
            q = support_quantile
            lo = max(np.quantile(g0[m0], q), np.quantile(g1[m1], q))
            hi = min(np.quantile(g0[m0], 1 - q), np.quantile(g1[m1], 1 - q))
            populated[b] = (grid >= lo) & (grid <= hi)
    if empty:
        log.warning("uplift bins without data (delta set to 0): %s", empty)
    return UpliftTable(bin_width, grid, mu1, mu0, delta, populated, empty, counts)


# -- simulation ------------------------------------------------------------------------


@dataclass
class SimEvent:
    k: int
    t: int
    d: float


@dataclass
class SimReport:
    avg_score: float
    frac_fired: list[float]
    avg_move: list[float]
    runs: int
    std_error: float
    seed: int = 0
    thresholds: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "avg_score": self.avg_score,
            "frac_fired": self.frac_fired,
            "avg_move": [None if np.isnan(x) else x for x in self.avg_move],
            "runs": self.runs,
            "std_error": self.std_error,
            "seed": self.seed,
            "thresholds": self.thresholds,
        }


def _check_thresholds(thresholds) -> np.ndarray:
    T = np.asarray(list(thresholds), dtype=float)
    if T.ndim != 1:
        raise SimError("thresholds must be a flat sequence")
    return T


def simulate_batch(banks: MoveBank, uplift: UpliftTable, thresholds, config: SimConfig, rng, n: int):
    """Simulate ``n`` games at once.

    Returns ``(v, fired_count, event_t, event_d)`` with ``event_*`` shaped ``(K, n)``.
    """
    T = _check_thresholds(thresholds)
    K = len(T)
    scales = config.scales(K)
    v = np.full(n, banks.baseline_mean, dtype=float)
    used = np.zeros(n, dtype=int)
    ev_t = np.zeros((K, n), dtype=int)
    ev_d = np.zeros((K, n), dtype=float)
    if K == 0:
        return v, used, ev_t, ev_d
    cols = np.arange(n)
    for t in range(1, config.horizon + 1):
        gaps = banks.gaps(t)
        if len(gaps) == 0:
            break
        d = gaps[rng.integers(0, len(gaps), size=n)]
        fire = (used < K) & (d >= T[np.minimum(used, K - 1)])
        if fire.any():
            k_idx = used[fire]
            ev_t[k_idx, cols[fire]] = t
            ev_d[k_idx, cols[fire]] = d[fire]
            used += fire
    for k in range(K):
        hit = used > k
        if hit.any() and scales[k] != 0:
            v[hit] = np.clip(v[hit] + scales[k] * uplift.lookup(ev_t[k, hit], ev_d[k, hit]), 0.0, 1.0)
    return v, used, ev_t, ev_d


def simulate_game(banks: MoveBank, uplift: UpliftTable, thresholds, config: SimConfig, rng):
    """One simulated game: ``(v, [SimEvent, ...])``."""
    v, used, ev_t, ev_d = simulate_batch(banks, uplift, thresholds, config, rng, 1)
    events = [SimEvent(k + 1, int(ev_t[k, 0]), float(ev_d[k, 0])) for k in range(int(used[0]))]
    return float(v[0]), events


def _block_stats(banks, uplift, T, config, block: int):
    n = min(BLOCK, config.runs - block * BLOCK)
    rng = np.random.default_rng([config.seed, block])
    v, used, ev_t, _ = simulate_batch(banks, uplift, T, config, rng, n)
    K = len(T)
    fired = np.array([(used > k).sum() for k in range(K)], dtype=float)
    move_sum = np.array([ev_t[k, used > k].sum() for k in range(K)], dtype=float)
    return v.sum(), (v * v).sum(), fired, move_sum


def n_blocks(runs: int) -> int:
    return (runs + BLOCK - 1) // BLOCK


def reduce_blocks(stats: Sequence[tuple], runs: int, K: int, seed: int = 0, thresholds=()) -> SimReport:
    """Combine per-block sums given in block order."""
    total = sq = 0.0
    fired = np.zeros(K)
    move_sum = np.zeros(K)
    for s, s2, f, m in stats:
        total += s
        sq += s2
        fired += f
        move_sum += m
    mean = total / runs
    var = max(sq / runs - mean * mean, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        avg_move = np.where(fired > 0, move_sum / np.maximum(fired, 1), np.nan)
    return SimReport(
        avg_score=float(mean),
        frac_fired=(fired / runs).tolist(),
        avg_move=avg_move.tolist(),
        runs=runs,
        std_error=float(np.sqrt(var / runs)),
        seed=seed,
        thresholds=[float(x) for x in thresholds],
    )


def avg_score(banks: MoveBank, uplift: UpliftTable, thresholds, config: SimConfig) -> SimReport:
    T = _check_thresholds(thresholds)
    stats = [_block_stats(banks, uplift, T, config, b) for b in range(n_blocks(config.runs))]
    return reduce_blocks(stats, config.runs, len(T), config.seed, T)


# -- sidecars ----------------------------------------------------------------------------


def save_sidecar(obj, path, extra: dict | None = None) -> None:
    atomic_write_text(path, json.dumps(obj.to_dict() | (extra or {})))


def load_banks(path) -> MoveBank:
    with open(path) as fh:
        return MoveBank.from_dict(json.load(fh))


def load_uplift(path) -> UpliftTable:
    with open(path) as fh:
        return UpliftTable.from_dict(json.load(fh))
