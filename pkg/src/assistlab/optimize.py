"""Gaussian-process Bayesian optimization with expected improvement.

The acquisition is maximized over a scrambled Sobol candidate set instead of
by gradient ascent.  Observations are standardized; length scales (one per
dimension) and the noise level are picked by grid search on the log marginal
likelihood.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm, qmc

log = logging.getLogger(__name__)

LENGTH_GRID = np.array([0.03, 0.06, 0.1, 0.2, 0.35, 0.6, 1.0, 2.0])
NOISE_GRID = np.array([1e-6, 1e-4, 1e-3, 1e-2, 0.05, 0.2])
N_CANDIDATES = 4096

# objective(params) -> value or (value, standard error)
Objective = Callable[[np.ndarray], "float | tuple[float, float]"]


@dataclass
class SearchSpace:
    lower: np.ndarray
    upper: np.ndarray
    ordered: bool = False

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("bounds must be 1-D and aligned")
        if not (np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper))):
            raise ValueError("bounds must be finite")
        if np.any(self.lower >= self.upper):
            raise ValueError("lower bound must be below upper bound in every dimension")

    @classmethod
    def thresholds(cls, K: int, low: float = 0.0, high: float = 0.6, ordered: bool = False) -> SearchSpace:
        return cls(np.full(K, low), np.full(K, high), ordered)

    @property
    def dims(self) -> int:
        return len(self.lower)

    def to_unit(self, x):
        return (np.asarray(x) - self.lower) / (self.upper - self.lower)

    def from_unit(self, u):
        x = self.lower + np.asarray(u) * (self.upper - self.lower)
        if self.ordered:
            x = np.sort(x, axis=-1)
        return np.clip(x, self.lower, self.upper)


@dataclass
class Trial:
    params: list[float]
    value: float | None
    noise_estimate: float | None = None
    backend: str = "simfree"
    cost: float = 0.0
    failed: bool = False
    error: str | None = None
    index: int = 0
    phase: str = "init"

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "phase": self.phase,
            "params": self.params,
            "value": self.value,
            "noise": self.noise_estimate,
            "backend": self.backend,
            "cost": self.cost,
            "failed": self.failed,
            "error": self.error,
        }


@dataclass
class OptResult:
    best_params: list[float] | None
    best_value: float | None
    trials: list[Trial] = field(default_factory=list)


# -- GP ------------------------------------------------------------------------------


def _sq_dists(A: np.ndarray, B: np.ndarray, ls: np.ndarray) -> np.ndarray:
    A, B = A / ls, B / ls
    return np.maximum((A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2 * A @ B.T, 0.0)


def rbf(A, B, ls) -> np.ndarray:
    return np.exp(-0.5 * _sq_dists(A, B, ls))


@dataclass
class GaussianProcess:
    """Zero-mean GP on standardized targets with a unit-variance SE-ARD kernel."""

    length_scales: np.ndarray
    noise: float
    X: np.ndarray = None
    y_mean: float = 0.0
    y_std: float = 1.0
    _chol: tuple = None
    _alpha: np.ndarray = None

    @staticmethod
    def log_marginal_likelihood(X, z, ls, noise, noise_floor=None) -> float:
        n = len(z)
        K = rbf(X, X, ls)
        diag = noise + (noise_floor if noise_floor is not None else 0.0)
        K[np.diag_indices(n)] += diag + 1e-10
        try:
            c = cho_factor(K, lower=True)
        except np.linalg.LinAlgError:
            return -np.inf
        alpha = cho_solve(c, z)
        return float(-0.5 * z @ alpha - np.log(np.diag(c[0])).sum() - 0.5 * n * math.log(2 * math.pi))

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray, noise_floor: np.ndarray | None = None) -> GaussianProcess:
        X = np.asarray(X, float)
        y = np.asarray(y, float)
        y_mean, y_std = float(y.mean()), float(y.std())
        if y_std <= 0:
            raise ValueError("degenerate targets")
        z = (y - y_mean) / y_std
        floor = None if noise_floor is None else np.asarray(noise_floor, float) ** 2 / y_std**2
        d = X.shape[1]
        best = (-np.inf, None, None)
        for l0 in LENGTH_GRID:
            for nz in NOISE_GRID:
                lml = cls.log_marginal_likelihood(X, z, np.full(d, l0), nz, floor)
                if lml > best[0]:
                    best = (lml, np.full(d, l0), nz)
        _, ls, nz = best
        if d > 1:
            for _ in range(2):
                for j in range(d):
                    for l0 in LENGTH_GRID:
                        trial = ls.copy()
                        trial[j] = l0
                        lml = cls.log_marginal_likelihood(X, z, trial, nz, floor)
                        if lml > best[0]:
                            best = (lml, trial, nz)
                            ls = trial
        gp = cls(best[1], float(best[2]), X, y_mean, y_std)
        K = rbf(X, X, gp.length_scales)
        K[np.diag_indices(len(X))] += gp.noise + (floor if floor is not None else 0.0) + 1e-10
        gp._chol = cho_factor(K, lower=True)
        gp._alpha = cho_solve(gp._chol, z)
        return gp

    def predict(self, Xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and standard deviation in original units."""
        Ks = rbf(np.asarray(Xs, float), self.X, self.length_scales)
        mu = Ks @ self._alpha
        v = cho_solve(self._chol, Ks.T)
        var = np.maximum(1.0 - np.einsum("ij,ji->i", Ks, v), 1e-12)
        return mu * self.y_std + self.y_mean, np.sqrt(var) * self.y_std


def expected_improvement(mu, sigma, best: float, xi: float = 0.0) -> np.ndarray:
    imp = mu - best - xi
    z = imp / sigma
    return imp * norm.cdf(z) + sigma * norm.pdf(z)


# -- loop ------------------------------------------------------------------------------


def _evaluate(objective: Objective, x: np.ndarray) -> tuple[float, float | None]:
    out = objective(x)
    if isinstance(out, tuple):
        value, se = out
    else:
        value, se = out, None
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"objective returned {value}")
    return value, (None if se is None else float(se))


def bayes_opt(
    objective: Objective,
    space: SearchSpace,
    init_points: int = 8,
    iterations: int = 25,
    seed: int = 0,
    backend: str = "simfree",
    on_trial: Callable[[Trial], None] | None = None,
    n_candidates: int = N_CANDIDATES,
) -> OptResult:
    """Maximize ``objective`` over ``space``.

    The first ``init_points`` points are uniform random; each later point is
    the EI maximizer over a fresh Sobol candidate set.  Failed evaluations are
    recorded and skipped.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    trials: list[Trial] = []
    X_ok: list[np.ndarray] = []
    y_ok: list[float] = []
    se_ok: list[float] = []

    def record(x: np.ndarray, phase: str) -> None:
        t0 = time.perf_counter()
        trial = Trial(params=[float(v) for v in x], value=None, backend=backend, index=len(trials), phase=phase)
        try:
            value, se = _evaluate(objective, x)
            trial.value, trial.noise_estimate = value, se
            X_ok.append(space.to_unit(x))
            y_ok.append(value)
            se_ok.append(se or 0.0)
        except Exception as exc:  # objective failure is logged, never fatal
            trial.failed, trial.error = True, f"{type(exc).__name__}: {exc}"
            log.warning("trial %d failed: %s", trial.index, trial.error)
        trial.cost = time.perf_counter() - t0
        trials.append(trial)
        if on_trial:
            on_trial(trial)

    for _ in range(init_points):
        record(space.from_unit(rng.uniform(size=space.dims)), "init")

    for it in range(iterations):
        sobol = qmc.Sobol(space.dims, scramble=True, seed=rng)
        cand_u = sobol.random(n_candidates)
        cand_x = space.from_unit(cand_u)
        cand_u = space.to_unit(cand_x)
        if len(y_ok) < 2 or np.ptp(y_ok) == 0:
            if y_ok:
                log.info("flat observations; proposing a random candidate")
            x_next = cand_x[rng.integers(len(cand_x))]
            record(x_next, "random")
            continue
        floor = np.array(se_ok) if any(se_ok) else None
        gp = GaussianProcess.fit(np.array(X_ok), np.array(y_ok), floor)
        mu, sigma = gp.predict(cand_u)
        ei = expected_improvement(mu, sigma, max(y_ok))
        record(cand_x[int(np.argmax(ei))], "ei")

    ok = [t for t in trials if not t.failed]
    if not ok:
        return OptResult(None, None, trials)
    best = max(ok, key=lambda t: t.value)
    return OptResult(best.params, best.value, trials)


def random_search(objective: Objective, space: SearchSpace, evaluations: int, seed: int = 0) -> OptResult:
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(evaluations):
        x = space.from_unit(rng.uniform(size=space.dims))
        value, se = _evaluate(objective, x)
        trials.append(Trial([float(v) for v in x], value, se, index=i, phase="random"))
    best = max(trials, key=lambda t: t.value)
    return OptResult(best.params, best.value, trials)


# -- objectives ----------------------------------------------------------------------------


def make_simfree_objective(banks, uplift, sim_config) -> Objective:
    """Threshold vector -> (engine-free average score, its standard error)."""
    from .simfree import avg_score

    def objective(params):
        report = avg_score(banks, uplift, list(params), sim_config)
        return report.avg_score, report.std_error

    return objective


def make_engine_objective(
    match_config, games_per_eval: int, bank=None, workers: int = 1, factory=None, status=None, policy_factory=None
) -> Objective:
    """Parameter vector -> (mean result over fresh engine games, binomial-style standard error).

    Parameters are thresholds unless ``policy_factory`` maps them to another
    policy, e.g. slacks of a maximal-delta-sum policy.
    """
    from dataclasses import replace

    from .engine_bridge import start_engine
    from .orchestrator import play_games
    from .policies import ThresholdPolicy

    calls = {"n": 0}
    build = policy_factory or (lambda params: ThresholdPolicy(tuple(params)))

    def objective(params):
        calls["n"] += 1
        policy = build(params)
        cfg = replace(
            match_config, games=games_per_eval, budget=policy.budget, seed=match_config.seed * 100_003 + calls["n"]
        )
        records, _ = play_games(
            cfg, policy, bank, workers, factory or start_engine, status, tag=f"opt{calls['n']}"
        )
        if not records:
            raise RuntimeError("every game aborted")
        y = np.array([r.result for r in records])
        se = float(y.std(ddof=1) / np.sqrt(len(y))) if len(y) > 1 else 0.5
        return float(y.mean()), se

    return objective


def write_trials(trials: Sequence[Trial], path) -> None:
    from .game_model import atomic_write_text

    atomic_write_text(path, "".join(json.dumps(t.to_dict()) + "\n" for t in trials))
