"""Intervention rules: when should the strong engine replace White's move?

Policies are pure functions of a :class:`DecisionContext`; per-game counters
live in the context, owned by the game loop.  ``start_game(rng)`` returns the
policy instance for one game (the random policy draws its plan there).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np


class Decision(str, Enum):
    INTERVENE = "intervene"
    PASS = "pass"


@dataclass(frozen=True)
class DecisionContext:
    move_number: int
    p_w: float
    p_s: float
    assists_used: int = 0
    last_intervention_move: int | None = None
    past_gaps: tuple[float, ...] = ()

    @property
    def delta(self) -> float:
        return self.p_s - self.p_w

    @property
    def gap(self) -> float:
        return max(0.0, self.p_s - self.p_w)


class Policy:
    tag = "policy"
    # False when decisions never look at p_w / p_s, so the game loop may skip sampling
    needs_evaluations = True

    def start_game(self, rng: np.random.Generator) -> Policy:
        return self

    def decide(self, ctx: DecisionContext) -> Decision:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"policy": self.tag, "budget": self.budget}


@dataclass(frozen=True)
class NoPolicy(Policy):
    tag = "none"
    budget: int = 0
    needs_evaluations = False

    def decide(self, ctx):
        return Decision.PASS


@dataclass(frozen=True)
class AlwaysPolicy(Policy):
    """Intervene at every move until the budget is spent."""

    budget: int
    tag = "always"
    needs_evaluations = False

    def decide(self, ctx):
        return Decision.INTERVENE if ctx.assists_used < self.budget else Decision.PASS


# -- random --------------------------------------------------------------------


@dataclass(frozen=True)
class RandomPolicy(Policy):
    budget: int
    horizon: int
    planned_moves: frozenset[int] | None = None
    tag = "random"
    needs_evaluations = False

    def start_game(self, rng):
        return draw_random_plan(self.budget, self.horizon, rng)

    def decide(self, ctx):
        return decide_random(self, ctx)

    def to_dict(self):
        d = {"policy": self.tag, "budget": self.budget, "horizon": self.horizon}
        if self.planned_moves is not None:
            d["planned_moves"] = sorted(self.planned_moves)
        return d


def draw_random_plan(K: int, H: int, rng: np.random.Generator) -> RandomPolicy:
    if K > H:
        raise ValueError(f"budget {K} exceeds horizon {H}")
    if K < 0:
        raise ValueError("budget must be >= 0")
    planned = rng.choice(np.arange(1, H + 1), size=K, replace=False) if K else []
    return RandomPolicy(K, H, frozenset(int(t) for t in planned))


def decide_random(policy: RandomPolicy, ctx: DecisionContext) -> Decision:
    if policy.planned_moves is None:
        raise ValueError("random policy has no plan; call start_game first")
    if ctx.assists_used < policy.budget and ctx.move_number in policy.planned_moves:
        return Decision.INTERVENE
    return Decision.PASS


# -- fixed thresholds ------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdPolicy(Policy):
    """Fire assist ``k`` when the gap reaches ``thresholds[k-1]``."""

    thresholds: tuple[float, ...]
    tag = "threshold"

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(x) for x in self.thresholds))

    @property
    def budget(self) -> int:
        return len(self.thresholds)

    def decide(self, ctx):
        return decide_threshold(self, ctx)

    def to_dict(self):
        return {"policy": self.tag, "budget": self.budget, "thresholds": list(self.thresholds)}


def decide_threshold(policy: ThresholdPolicy, ctx: DecisionContext) -> Decision:
    k = ctx.assists_used
    if k >= len(policy.thresholds):
        return Decision.PASS
    return Decision.INTERVENE if ctx.gap >= policy.thresholds[k] else Decision.PASS


# -- maximal delta sum --------------------------------------------------------------

# predictor(side, j, ctx) -> predicted top-j suffix sum; side is "W" or "S"
Predictor = Callable[[DecisionContext], float]


@dataclass(frozen=True)
class MaxDeltaPolicy(Policy):
    """Intervene when the current delta plus the predicted best remaining
    ``r-1`` deltas after a strong move beats the predicted best ``r`` deltas
    from waiting (``r`` = assists left).

    ``predictors_weak[j-1]`` predicts the top-``j`` sum given White's weak move,
    ``predictors_strong[j-1]`` given the strong move.
    """

    predictors_weak: tuple[Predictor, ...]
    predictors_strong: tuple[Predictor, ...]
    slacks: tuple[float, ...] = ()
    tag = "maxdelta"

    def __post_init__(self):
        K = len(self.predictors_weak)
        if len(self.predictors_strong) < K - 1:
            raise ValueError(f"need {K - 1} strong-side predictors, got {len(self.predictors_strong)}")
        slacks = tuple(self.slacks) or (0.0,) * K
        if len(slacks) != K:
            raise ValueError(f"need {K} slacks, got {len(slacks)}")
        object.__setattr__(self, "slacks", tuple(float(s) for s in slacks))

    @property
    def budget(self) -> int:
        return len(self.predictors_weak)

    def predictions(self, ctx: DecisionContext) -> dict[tuple[str, int], float]:
        """Monotone-in-``j`` predictions: S_j := max(S_j, S_{j-1}), S_0 = 0."""
        out: dict[tuple[str, int], float] = {("W", 0): 0.0, ("S", 0): 0.0}
        for side, preds in (("W", self.predictors_weak), ("S", self.predictors_strong)):
            running = 0.0
            for j, pred in enumerate(preds, start=1):
                running = max(running, max(0.0, float(pred(ctx))))
                out[(side, j)] = running
        return out

    def decide(self, ctx, bank_predictions=None):
        return decide_maxdelta(self, ctx, bank_predictions)

    def to_dict(self):
        return {"policy": self.tag, "budget": self.budget, "slacks": list(self.slacks)}


def decide_maxdelta(
    policy: MaxDeltaPolicy, ctx: DecisionContext, bank_predictions: dict | None = None
) -> Decision:
    K = policy.budget
    r = K - ctx.assists_used
    if r <= 0:
        return Decision.PASS
    if ctx.last_intervention_move is not None and ctx.move_number <= ctx.last_intervention_move:
        return Decision.PASS
    preds = bank_predictions if bank_predictions is not None else policy.predictions(ctx)
    strong_rest = preds.get(("S", r - 1), 0.0) if r > 1 else 0.0
    wait_value = preds[("W", r)]
    slack = policy.slacks[K - r]
    if ctx.delta + strong_rest + slack >= wait_value:
        return Decision.INTERVENE
    return Decision.PASS


# -- wrappers used by the orchestrator ------------------------------------------------


@dataclass(frozen=True)
class ForcedPolicy(Policy):
    """Intervene exactly at ``moves`` (budget = len(moves))."""

    moves: frozenset[int]
    tag = "forced"
    needs_evaluations = False

    @property
    def budget(self) -> int:
        return len(self.moves)

    def decide(self, ctx):
        return Decision.INTERVENE if ctx.move_number in self.moves else Decision.PASS


@dataclass(frozen=True)
class DeferredPolicy(Policy):
    """Pass up to and including move ``skip_through``, then defer to ``inner``."""

    inner: Policy
    skip_through: int
    tag = "deferred"

    @property
    def budget(self) -> int:
        return self.inner.budget

    @property
    def needs_evaluations(self) -> bool:
        return self.inner.needs_evaluations

    def start_game(self, rng):
        return DeferredPolicy(self.inner.start_game(rng), self.skip_through)

    def decide(self, ctx):
        if ctx.move_number <= self.skip_through:
            return Decision.PASS
        return self.inner.decide(ctx)


def policy_from_dict(d: dict, predictor_loader: Callable[[dict], MaxDeltaPolicy] | None = None) -> Policy:
    kind = d["policy"]
    if kind == "none":
        return NoPolicy()
    if kind == "always":
        return AlwaysPolicy(int(d["budget"]))
    if kind == "random":
        planned = d.get("planned_moves")
        return RandomPolicy(int(d["budget"]), int(d["horizon"]), frozenset(planned) if planned is not None else None)
    if kind == "threshold":
        return ThresholdPolicy(tuple(d["thresholds"]))
    if kind == "maxdelta":
        if predictor_loader is None:
            raise ValueError("maxdelta policy needs a predictor loader")
        return predictor_loader(d)
    raise ValueError(f"unknown policy {kind!r}")
