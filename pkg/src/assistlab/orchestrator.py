"""Engine-vs-engine games with an intervention policy in the loop.

White and Black are the same weak engine setting; a third, stronger session
(the oracle) is consulted before each White move and may replace it.  Forking a
game means replaying its move prefix into fresh sessions, since UCI has no way
to snapshot engine state.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import sys
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import chess
import numpy as np

from .engine_bridge import EngineConfig, EngineError, EngineSession, MoveSample, start_engine
from .game_model import Dataset, DatasetKind, GameRecord, InterventionEvent, MovePoint, Termination
from .policies import Decision, DecisionContext, DeferredPolicy, ForcedPolicy, NoPolicy, Policy

log = logging.getLogger(__name__)

FAST_SAMPLES = 3
FULL_STRENGTH_ELO = 3190


@dataclass(frozen=True)
class MatchConfig:
    weak_elo: int = 1500
    strong_elo: int = 3190
    budget: int = 0
    samples_per_decision: int = 10
    horizon: int = 200
    seed: int = 0
    games: int = 1
    engine: tuple[str, ...] = ("stockfish",)
    movetime_ms: int | None = 100
    # search time of the assisting engine; defaults to twice the weak one
    strong_movetime_ms: int | None = None
    depth: int | None = None
    threads: int = 1
    search_timeout: float = 60.0
    # log weak/strong samples at every White move even if the policy ignores them
    log_points: bool = True
    # adjudicate a win once this many consecutive played-move evaluations are this lopsided
    resign_score: float | None = None
    resign_plies: int = 6
    # upper end of the uniform intervention move for DI games (defaults to horizon)
    di_max_move: int | None = None

    def __post_init__(self):
        if self.strong_elo < self.weak_elo:
            raise ValueError("strong_elo must be >= weak_elo")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.budget < 0:
            raise ValueError("budget must be >= 0")
        if self.samples_per_decision < 1:
            raise ValueError("samples_per_decision must be >= 1")
        if self.games < 0:
            raise ValueError("games must be >= 0")
        if not self.engine:
            raise ValueError("engine command is empty")
        if self.resign_score is not None and not 0.5 < self.resign_score <= 1.0:
            raise ValueError("resign_score must be in (0.5, 1]")
        if self.di_max_move is not None and self.di_max_move < 1:
            raise ValueError("di_max_move must be >= 1")

    def engine_config(self, elo: int, strong: bool = False) -> EngineConfig:
        movetime = self.movetime_ms
        if strong and movetime is not None:
            movetime = self.strong_movetime_ms or 2 * movetime
        return EngineConfig(
            self.engine[0],
            elo=elo,
            limit_strength=not (strong and elo >= FULL_STRENGTH_ELO),
            args=tuple(self.engine[1:]),
            movetime_ms=movetime,
            depth=self.depth,
            threads=self.threads,
            search_timeout=self.search_timeout,
        )

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["engine"] = list(self.engine)
        return d


@dataclass
class Sessions:
    white: EngineSession
    black: EngineSession
    oracle: EngineSession

    def all(self):
        return (self.white, self.black, self.oracle)

    def new_game(self):
        for s in self.all():
            s.new_game()

    def close(self):
        for s in self.all():
            try:
                s.shutdown()
            except Exception:  # best effort on teardown
                log.debug("shutdown failed", exc_info=True)


def open_sessions(config: MatchConfig, factory: Callable[[EngineConfig], EngineSession] = start_engine) -> Sessions:
    opened = []
    try:
        for elo, strong in ((config.weak_elo, False), (config.weak_elo, False), (config.strong_elo, True)):
            opened.append(factory(config.engine_config(elo, strong)))
    except BaseException:
        for s in opened:
            s.shutdown()
        raise
    return Sessions(*opened)


@dataclass
class Tally:
    completed: int = 0
    aborted: int = 0
    restarts: int = 0
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"completed": self.completed, "aborted": self.aborted, "restarts": self.restarts, "errors": self.errors[:20]}


# -- one game ------------------------------------------------------------------------


def _push(board: chess.Board, moves: list[str], uci: str) -> None:
    try:
        move = chess.Move.from_uci(uci)
    except (chess.InvalidMoveError, ValueError):
        raise EngineError(f"engine played malformed move {uci!r}") from None
    if move not in board.legal_moves:
        raise EngineError(f"engine played illegal move {uci!r}")
    board.push(move)
    moves.append(uci)


def _outcome(board: chess.Board) -> tuple[float, Termination] | None:
    outcome = board.outcome(claim_draw=True)
    if outcome is None:
        return None
    if outcome.termination is chess.Termination.CHECKMATE:
        return (1.0 if outcome.winner == chess.WHITE else 0.0), Termination.CHECKMATE
    return 0.5, Termination.DRAW_RULE


def round_result(p: float) -> float:
    """Nearest of {0, 0.5, 1}; ties round up."""
    return min(1.0, max(0.0, math.floor(2 * p + 0.5) / 2))


def _mean(samples: Sequence[MoveSample]) -> float:
    return sum(s.score_raw for s in samples) / len(samples)


def play_game(
    config: MatchConfig,
    policy: Policy,
    bank,
    sessions: Sessions,
    rng: np.random.Generator,
    game_id: str = "game",
    prefix: GameRecord | None = None,
    prefix_through: int = 0,
    event_tag: str | None = None,
) -> GameRecord:
    """Play one game to the end or to the horizon.

    With ``prefix``, White moves ``1..prefix_through - 1`` (and Black's
    replies) are replayed from that record, together with its points and
    interventions in that range, before live play resumes.

    Raises EngineError on any engine failure; the caller discards the game.
    """
    game_policy = policy.start_game(rng)
    tag = event_tag or policy.tag
    n = config.samples_per_decision
    full = config.log_points or game_policy.needs_evaluations
    board = chess.Board()
    moves: list[str] = []
    points: list[MovePoint] = []
    events: list[InterventionEvent] = []
    recent: list[float] = []  # White-POV score of each played move's search

    sessions.new_game()
    t = 1
    if prefix is not None and prefix_through > 1:
        for uci in prefix.moves[: 2 * (prefix_through - 1)]:
            _push(board, moves, uci)
        points = [replace(p) for p in prefix.points if p.t < prefix_through]
        events = [replace(e) for e in prefix.interventions if e.t < prefix_through and e.fired]
        t = prefix_through
        if _outcome(board) is not None:
            raise ValueError(f"prefix through move {prefix_through} already ends the game")

    def calibrate(tt, x):
        return float(bank(tt, x)) if bank is not None else x

    def adjudicate(result, term):
        return GameRecord(
            game_id,
            result,
            term,
            moves,
            points,
            events,
            white_elo=config.weak_elo,
            black_elo=config.weak_elo,
            oracle_elo=config.strong_elo,
            budget=game_policy.budget,
        )

    def resigned() -> float | None:
        if config.resign_score is None or len(recent) < config.resign_plies:
            return None
        window = recent[-config.resign_plies :]
        if min(window) >= config.resign_score:
            return 1.0
        if max(window) <= 1.0 - config.resign_score:
            return 0.0
        return None

    while True:
        if t > config.horizon:
            last = next((p for p in reversed(points) if p.pw_raw is not None), None)
            if last is not None:
                p_final = calibrate(last.t, last.pw_raw)
            else:
                p_final = calibrate(config.horizon, _mean(sessions.white.sample_moves(moves, n)))
            return adjudicate(round_result(p_final), Termination.HORIZON)

        weak = strong = None
        ctx_p = (math.nan, math.nan)
        if full:
            weak = sessions.white.sample_moves(moves, n)
            strong = sessions.oracle.sample_moves(moves, n)
            point = MovePoint(t, _mean(weak), _mean(strong), weak_move=weak[0].move_uci)
            point.strong_move = max(strong, key=lambda s: s.score_raw).move_uci
            if bank is not None:
                point.pw, point.ps = calibrate(t, point.pw_raw), calibrate(t, point.ps_raw)
            points.append(point)
            ctx_p = (calibrate(t, point.pw_raw), calibrate(t, point.ps_raw))

        past_gaps = tuple(
            max(0.0, calibrate(p.t, p.ps_raw) - calibrate(p.t, p.pw_raw))
            for p in points
            if p.t < t and p.pw_raw is not None and p.ps_raw is not None
        )
        fired = [e for e in events if e.fired]
        ctx = DecisionContext(
            t,
            ctx_p[0],
            ctx_p[1],
            assists_used=len(fired),
            last_intervention_move=fired[-1].t if fired else None,
            past_gaps=past_gaps,
        )
        decision = game_policy.decide(ctx) if len(fired) < game_policy.budget else Decision.PASS

        if decision is Decision.INTERVENE:
            if not full:
                weak = sessions.white.sample_moves(moves, n)
                strong = sessions.oracle.sample_moves(moves, n)
                points.append(
                    MovePoint(
                        t,
                        _mean(weak),
                        _mean(strong),
                        weak_move=weak[0].move_uci,
                        strong_move=max(strong, key=lambda s: s.score_raw).move_uci,
                    )
                )
                if bank is not None:
                    points[-1].pw = calibrate(t, points[-1].pw_raw)
                    points[-1].ps = calibrate(t, points[-1].ps_raw)
            best = max(strong, key=lambda s: s.score_raw)
            gap = max(0.0, calibrate(t, _mean(strong)) - calibrate(t, _mean(weak))) if bank is not None else None
            events.append(InterventionEvent(len(fired) + 1, t, gap, tag))
            played = best
        else:
            played = weak[0] if weak else sessions.white.evaluate(moves)
        _push(board, moves, played.move_uci)
        recent.append(played.score_raw)
        if (done := _outcome(board)) is not None:
            return adjudicate(*done)
        if (res := resigned()) is not None:
            return adjudicate(res, Termination.RESIGNATION_PROXY)

        reply = sessions.black.evaluate(moves)
        _push(board, moves, reply.move_uci)
        recent.append(reply.score_raw)
        if (done := _outcome(board)) is not None:
            return adjudicate(*done)
        if (res := resigned()) is not None:
            return adjudicate(res, Termination.RESIGNATION_PROXY)
        t += 1


# -- many games ------------------------------------------------------------------------


def game_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def game_id(tag: str, seed: int, index: int) -> str:
    return f"{tag}-s{seed}-g{index:06d}"


def _summary(rec) -> dict:
    if isinstance(rec, GameRecord):
        return {
            "game_id": rec.game_id,
            "result": rec.result,
            "termination": Termination(rec.termination).value,
            "fired": len(rec.fired),
        }
    return rec.to_dict()


# graceful drain: set by the CLI on Ctrl-C
STOP = threading.Event()


# job(index, sessions, rng) -> GameRecord (or another per-game result)
Job = Callable[[int, Sessions, np.random.Generator], GameRecord]


def run_games(
    config: MatchConfig,
    job: Job,
    indices: Sequence[int],
    workers: int = 1,
    factory: Callable[[EngineConfig], EngineSession] = start_engine,
    status=None,
) -> tuple[dict[int, GameRecord], Tally]:
    """Run ``job`` for every index.  Each worker owns one session triple and
    restarts it after an engine failure; failed games are tallied, not retried.

    Setting :data:`STOP` lets in-flight games finish and skips the rest."""
    status = sys.stderr if status is None else status
    todo: queue.Queue = queue.Queue()
    for i in indices:
        todo.put(i)
    results: dict[int, GameRecord] = {}
    tally = Tally()
    lock = threading.Lock()

    def emit(obj):
        with lock:
            status.write(json.dumps(obj) + "\n")
            status.flush()

    def worker():
        sessions = None
        try:
            while True:
                if STOP.is_set():
                    return
                try:
                    i = todo.get_nowait()
                except queue.Empty:
                    return
                try:
                    if sessions is None:
                        sessions = open_sessions(config, factory)
                    rec = job(i, sessions, game_rng(config.seed, i))
                except EngineError as exc:
                    with lock:
                        tally.aborted += 1
                        tally.errors.append(f"game {i}: {type(exc).__name__}: {exc}")
                        done, aborted = tally.completed, tally.aborted
                    emit({"event": "abort", "index": i, "error": str(exc), "completed": done, "aborted": aborted})
                    if sessions is not None:
                        sessions.close()
                        sessions = None
                        with lock:
                            tally.restarts += 1
                    continue
                with lock:
                    results[i] = rec
                    tally.completed += 1
                    done, aborted = tally.completed, tally.aborted
                emit({"event": "game", "index": i, **_summary(rec), "completed": done, "aborted": aborted})
        finally:
            if sessions is not None:
                sessions.close()

    workers = max(1, min(workers, len(indices) or 1))
    if workers == 1:
        worker()
    else:
        threads = [threading.Thread(target=worker, daemon=True) for _ in range(workers)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
    return results, tally


def play_games(
    config: MatchConfig,
    policy: Policy,
    bank=None,
    workers: int = 1,
    factory: Callable[[EngineConfig], EngineSession] = start_engine,
    status=None,
    tag: str = "play",
    event_tag: str | None = None,
) -> tuple[list[GameRecord], Tally]:
    if policy.budget != config.budget:
        raise ValueError(f"policy budget {policy.budget} != config budget {config.budget}")

    def job(i, sessions, rng):
        return play_game(config, policy, bank, sessions, rng, game_id(tag, config.seed, i), event_tag=event_tag)

    results, tally = run_games(config, job, range(config.games), workers, factory, status)
    return [results[i] for i in sorted(results)], tally


def _meta(config: MatchConfig, tally: Tally, **extra) -> dict:
    meta = {"match": config.to_dict(), "tally": tally.to_dict()}
    if config.samples_per_decision < 10:
        meta["fidelity"] = f"reduced: {config.samples_per_decision} samples per decision"
    meta.update(extra)
    return meta


def generate_d0(config: MatchConfig, bank=None, workers: int = 1, factory=start_engine, status=None) -> Dataset:
    cfg = replace(config, budget=0, log_points=True)
    records, tally = play_games(cfg, NoPolicy(), bank, workers, factory, status, tag="d0")
    return Dataset(DatasetKind.D0, records, _meta(cfg, tally))


def draw_intervention_move(config: MatchConfig, rng: np.random.Generator) -> int:
    upper = min(config.di_max_move or config.horizon, config.horizon)
    return int(rng.integers(1, upper + 1))


def generate_di(config: MatchConfig, bank=None, workers: int = 1, factory=start_engine, status=None) -> Dataset:
    """One uniformly drawn intervention move per game.  Games that end before
    it keep a single unfired event so they can be excluded from uplift fits."""
    cfg = replace(config, budget=1)

    def job(i, sessions, rng):
        t_star = draw_intervention_move(cfg, rng)
        rec = play_game(
            cfg, ForcedPolicy(frozenset({t_star})), bank, sessions, rng, game_id("di", cfg.seed, i), event_tag="random-single"
        )
        if not rec.interventions:
            rec.interventions = [InterventionEvent(1, t_star, None, "random-single", fired=False)]
        return rec

    results, tally = run_games(cfg, job, range(cfg.games), workers, factory, status)
    records = [results[i] for i in sorted(results)]
    unfired = sum(1 for r in records if not r.fired)
    return Dataset(DatasetKind.DI, records, _meta(cfg, tally, unfired=unfired))


# -- counterfactuals ----------------------------------------------------------------------


@dataclass
class OracleBound:
    game_id: str
    base_result: float
    per_move_scores: list[float]
    best_score: float

    def to_dict(self) -> dict:
        return {
            "game_id": self.game_id,
            "base_result": self.base_result,
            "per_move_scores": self.per_move_scores,
            "best_score": self.best_score,
        }


def oracle_upper_bound_game(config: MatchConfig, sessions: Sessions, rng, bank=None, gid: str = "oracle") -> OracleBound:
    """Play a clean base game, then one alternative per White move with a
    forced intervention there.  An engine failure anywhere aborts the whole unit."""
    base_cfg = replace(config, budget=0, log_points=False)
    base = play_game(base_cfg, NoPolicy(), bank, sessions, rng, gid)
    alt_cfg = replace(config, budget=1, log_points=False)
    white_moves = (len(base.moves) + 1) // 2
    scores: list[float] = []
    for t in range(1, white_moves + 1):
        rec = play_game(
            alt_cfg, ForcedPolicy(frozenset({t})), bank, sessions, rng, f"{gid}-alt{t}", prefix=base, prefix_through=t
        )
        scores.append(rec.result)
    best = max([base.result, *scores])
    return OracleBound(gid, base.result, scores, best)


def oracle_upper_bound(config: MatchConfig, bank=None, workers: int = 1, factory=start_engine, status=None):
    results, tally = run_games(
        config,
        lambda i, s, rng: oracle_upper_bound_game(config, s, rng, bank, game_id("oracle", config.seed, i)),
        range(config.games),
        workers,
        factory,
        status,
    )
    return [results[i] for i in sorted(results)], tally


@dataclass
class HindsightResult:
    game_id: str
    committed_result: float
    deferred_result: float
    max_result: float
    first_trigger: int | None

    def to_dict(self) -> dict:
        return {
            "game_id": self.game_id,
            "committed_result": self.committed_result,
            "deferred_result": self.deferred_result,
            "max_result": self.max_result,
            "first_trigger": self.first_trigger,
        }


def hindsight_game(config: MatchConfig, policy: Policy, sessions: Sessions, rng, bank=None, gid: str = "hs"):
    """Branch A commits at the first trigger; branch B replays the prefix,
    passes at that move and lets the policy fire at its next trigger."""
    if policy.budget != 1:
        raise ValueError("hindsight branching needs a budget-1 policy")
    cfg = replace(config, budget=1)
    committed = play_game(cfg, policy, bank, sessions, rng, f"{gid}-a")
    if not committed.fired:
        return HindsightResult(gid, committed.result, committed.result, committed.result, None)
    t1 = committed.fired[0].t
    deferred = play_game(
        cfg, DeferredPolicy(policy, t1), bank, sessions, rng, f"{gid}-b", prefix=committed, prefix_through=t1
    )
    return HindsightResult(gid, committed.result, deferred.result, max(committed.result, deferred.result), t1)


def hindsight_play(config: MatchConfig, policy: Policy, bank=None, workers: int = 1, factory=start_engine, status=None):
    results, tally = run_games(
        config,
        lambda i, s, rng: hindsight_game(config, policy, s, rng, bank, game_id("hs", config.seed, i)),
        range(config.games),
        workers,
        factory,
        status,
    )
    return [results[i] for i in sorted(results)], tally
