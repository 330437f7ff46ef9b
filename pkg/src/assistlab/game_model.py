"""Games, per-move evaluation points and datasets; JSONL persistence and PGN import."""

from __future__ import annotations

import io
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import chess
import chess.pgn

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RESULTS = (0.0, 0.5, 1.0)


class DataError(ValueError):
    """Invalid record or file content.  ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class Termination(str, Enum):
    CHECKMATE = "checkmate"
    DRAW_RULE = "draw-rule"
    RESIGNATION_PROXY = "resignation-proxy"
    HORIZON = "horizon"


class DatasetKind(str, Enum):
    D0 = "D0"
    DI = "DI"
    HUMAN_PGN = "human-pgn"
    PLAY = "play"


@dataclass
class MovePoint:
    """Evaluation at White's ``t``-th move: weak vs strong expected score for White."""

    t: int
    pw_raw: float | None = None
    ps_raw: float | None = None
    pw: float | None = None
    ps: float | None = None
    weak_move: str = ""
    strong_move: str = ""

    @property
    def calibrated(self) -> bool:
        return self.pw is not None and self.ps is not None

    @property
    def delta(self) -> float | None:
        if not self.calibrated:
            return None
        return self.ps - self.pw

    @property
    def gap(self) -> float | None:
        if not self.calibrated:
            return None
        return max(0.0, self.ps - self.pw)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "pw_raw": self.pw_raw,
            "ps_raw": self.ps_raw,
            "pw": self.pw,
            "ps": self.ps,
            "gap": self.gap,
            "weak_move": self.weak_move,
            "strong_move": self.strong_move,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MovePoint:
        point = cls(
            t=int(d["t"]),
            pw_raw=d.get("pw_raw"),
            ps_raw=d.get("ps_raw"),
            pw=d.get("pw"),
            ps=d.get("ps"),
            weak_move=d.get("weak_move", ""),
            strong_move=d.get("strong_move", ""),
        )
        stored = d.get("gap")
        if stored is not None and (point.gap is None or not math.isclose(stored, point.gap, abs_tol=1e-12)):
            raise DataError(f"gap {stored} inconsistent with pw/ps at t={point.t}")
        return point


@dataclass
class InterventionEvent:
    ordinal: int
    t: int
    gap: float | None
    policy_tag: str
    fired: bool = True

    def to_dict(self) -> dict:
        return {
            "k": self.ordinal,
            "t": self.t,
            "gap": self.gap,
            "policy_tag": self.policy_tag,
            "fired": self.fired,
        }

    @classmethod
    def from_dict(cls, d: dict) -> InterventionEvent:
        return cls(int(d["k"]), int(d["t"]), d.get("gap"), d["policy_tag"], bool(d.get("fired", True)))


@dataclass
class GameRecord:
    game_id: str
    result: float
    termination: Termination
    moves: list[str] = field(default_factory=list)
    points: list[MovePoint] = field(default_factory=list)
    interventions: list[InterventionEvent] = field(default_factory=list)
    white_elo: int | None = None
    black_elo: int | None = None
    oracle_elo: int | None = None
    budget: int = 0

    @property
    def fired(self) -> list[InterventionEvent]:
        return [e for e in self.interventions if e.fired]

    @property
    def length(self) -> int:
        """Number of White moves with an evaluation point."""
        return len(self.points)

    def point_at(self, t: int) -> MovePoint | None:
        if 1 <= t <= len(self.points) and self.points[t - 1].t == t:
            return self.points[t - 1]
        for p in self.points:
            if p.t == t:
                return p
        return None

    def validate(self) -> None:
        if self.result not in RESULTS:
            raise DataError(f"{self.game_id}: result {self.result} not in {{0, 0.5, 1}}")
        term = Termination(self.termination)
        if term is Termination.CHECKMATE and self.result == 0.5:
            raise DataError(f"{self.game_id}: checkmate cannot be a draw")
        if term is Termination.DRAW_RULE and self.result != 0.5:
            raise DataError(f"{self.game_id}: draw-rule termination needs result 0.5")
        if term is Termination.RESIGNATION_PROXY and self.result == 0.5:
            raise DataError(f"{self.game_id}: resignation cannot be a draw")
        ts = [p.t for p in self.points]
        if any(b <= a for a, b in zip(ts, ts[1:])) or any(t < 1 for t in ts):
            raise DataError(f"{self.game_id}: move numbers must be positive and increasing")
        ev_t = [e.t for e in self.interventions]
        if any(b <= a for a, b in zip(ev_t, ev_t[1:])):
            raise DataError(f"{self.game_id}: interventions must be sorted with distinct moves")
        ords = [e.ordinal for e in self.interventions]
        if ords != list(range(1, len(ords) + 1)):
            raise DataError(f"{self.game_id}: intervention ordinals must be 1..n in move order")
        if len(self.fired) > self.budget:
            raise DataError(f"{self.game_id}: {len(self.fired)} interventions exceed budget {self.budget}")

    def to_dict(self) -> dict:
        return {
            "game_id": self.game_id,
            "white_elo": self.white_elo,
            "black_elo": self.black_elo,
            "oracle_elo": self.oracle_elo,
            "budget": self.budget,
            "result": self.result,
            "termination": Termination(self.termination).value,
            "moves": list(self.moves),
            "points": [p.to_dict() for p in self.points],
            "interventions": [e.to_dict() for e in self.interventions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> GameRecord:
        return cls(
            game_id=str(d["game_id"]),
            result=float(d["result"]),
            termination=Termination(d["termination"]),
            moves=list(d.get("moves", [])),
            points=[MovePoint.from_dict(p) for p in d.get("points", [])],
            interventions=[InterventionEvent.from_dict(e) for e in d.get("interventions", [])],
            white_elo=d.get("white_elo"),
            black_elo=d.get("black_elo"),
            oracle_elo=d.get("oracle_elo"),
            budget=int(d.get("budget", 0)),
        )


@dataclass
class Dataset:
    kind: DatasetKind
    records: list[GameRecord] = field(default_factory=list)
    source_meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def validate_record(self, rec: GameRecord) -> None:
        rec.validate()
        kind = DatasetKind(self.kind)
        if kind is DatasetKind.D0 and rec.interventions:
            raise DataError(f"{rec.game_id}: D0 records carry no interventions")
        if kind is DatasetKind.DI:
            if len(rec.interventions) != 1:
                raise DataError(f"{rec.game_id}: DI records carry exactly one intervention")
            if rec.interventions[0].policy_tag != "random-single":
                raise DataError(f"{rec.game_id}: DI intervention must be tagged random-single")

    def validate(self) -> None:
        for rec in self.records:
            self.validate_record(rec)

    def results(self) -> list[float]:
        return [r.result for r in self.records]


# -- JSONL ---------------------------------------------------------------------


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_dataset(dataset: Dataset, extra_header: dict | None = None) -> str:
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": DatasetKind(dataset.kind).value,
        "source_meta": dataset.source_meta,
    }
    if extra_header:
        header.update(extra_header)
    lines = [json.dumps(header, sort_keys=True)]
    for rec in dataset.records:
        row = rec.to_dict()
        row["schema_version"] = SCHEMA_VERSION
        lines.append(json.dumps(row, sort_keys=True))
    return "\n".join(lines) + "\n"


def write_jsonl(dataset: Dataset, path: str | os.PathLike, extra_header: dict | None = None) -> None:
    atomic_write_text(path, dumps_dataset(dataset, extra_header))


def read_jsonl(path: str | os.PathLike) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return loads_dataset(fh)


def loads_dataset(lines: Iterable[str]) -> Dataset:
    it = iter(lines)
    try:
        header = json.loads(next(it))
    except StopIteration:
        raise DataError("empty file: missing header line", line=1) from None
    except json.JSONDecodeError as exc:
        raise DataError(f"bad header: {exc}", line=1) from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"schema version {header.get('schema_version')} != {SCHEMA_VERSION}", line=1)
    try:
        dataset = Dataset(DatasetKind(header["kind"]), [], header.get("source_meta", {}))
    except (KeyError, ValueError) as exc:
        raise DataError(f"bad dataset kind: {exc}", line=1) from exc
    for lineno, raw in enumerate(it, start=2):
        if not raw.strip():
            continue
        try:
            row = json.loads(raw)
            if row.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
                raise DataError(f"schema version {row.get('schema_version')}")
            rec = GameRecord.from_dict(row)
            dataset.validate_record(rec)
        except DataError as exc:
            raise DataError(str(exc), line=lineno) from exc
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{type(exc).__name__}: {exc}", line=lineno) from exc
        dataset.records.append(rec)
    return dataset


# -- PGN -----------------------------------------------------------------------

_RESULT_TAGS = {"1-0": 1.0, "0-1": 0.0, "1/2-1/2": 0.5}


@dataclass
class PgnFilters:
    min_elo: int | None = None
    max_elo: int | None = None
    result_required: bool = True


@dataclass
class PgnStats:
    accepted: int = 0
    unparseable: int = 0
    missing_result: int = 0
    illegal: int = 0
    filtered: int = 0


def _elo(headers, key: str) -> int | None:
    try:
        return int(headers.get(key, ""))
    except ValueError:
        return None


def _in_band(elo: int | None, filters: PgnFilters) -> bool:
    if filters.min_elo is None and filters.max_elo is None:
        return True
    if elo is None:
        return False
    if filters.min_elo is not None and elo < filters.min_elo:
        return False
    if filters.max_elo is not None and elo > filters.max_elo:
        return False
    return True


def parse_pgn(
    path: str | os.PathLike | io.TextIOBase, filters: PgnFilters | None = None, stats: PgnStats | None = None
) -> Dataset:
    """Import a (multi-game) PGN file; evaluation fields stay empty until annotated."""
    filters = filters or PgnFilters()
    stats = stats if stats is not None else PgnStats()
    fh = open(path, encoding="utf-8", errors="replace") if not hasattr(path, "read") else path
    records = []
    try:
        index = 0
        while True:
            try:
                game = chess.pgn.read_game(fh)
            except (ValueError, UnicodeDecodeError):
                stats.unparseable += 1
                continue
            if game is None:
                break
            index += 1
            if any("illegal" in str(e).lower() for e in game.errors):
                stats.illegal += 1
                continue
            if game.errors:
                stats.unparseable += 1
                continue
            result = _RESULT_TAGS.get(game.headers.get("Result", "*"))
            if result is None and filters.result_required:
                stats.missing_result += 1
                continue
            white_elo, black_elo = _elo(game.headers, "WhiteElo"), _elo(game.headers, "BlackElo")
            if not (_in_band(white_elo, filters) and _in_band(black_elo, filters)):
                stats.filtered += 1
                continue
            moves = [m.uci() for m in game.mainline_moves()]
            board = game.end().board()
            term = _pgn_termination(board, result)
            n_white = (len(moves) + 1) // 2
            records.append(
                GameRecord(
                    game_id=game.headers.get("Site") or f"pgn-{index:06d}",
                    result=result if result is not None else 0.5,
                    termination=term,
                    moves=moves,
                    points=[MovePoint(t) for t in range(1, n_white + 1)],
                    white_elo=white_elo,
                    black_elo=black_elo,
                )
            )
            stats.accepted += 1
    finally:
        if fh is not path:
            fh.close()
    ids = [r.game_id for r in records]
    if len(set(ids)) != len(ids):
        for i, r in enumerate(records):
            r.game_id = f"{r.game_id}#{i}"
    meta = {"source": str(getattr(path, "name", path)), "stats": stats.__dict__}
    return Dataset(DatasetKind.HUMAN_PGN, records, meta)


def _pgn_termination(board: chess.Board, result: float | None) -> Termination:
    if board.is_checkmate():
        return Termination.CHECKMATE
    if result == 0.5 or result is None:
        return Termination.DRAW_RULE
    return Termination.RESIGNATION_PROXY


def replay(moves: Sequence[str]) -> chess.Board:
    """Replay coordinate moves from the start position; raises on an illegal move."""
    board = chess.Board()
    for i, mv in enumerate(moves):
        move = chess.Move.from_uci(mv)
        if move not in board.legal_moves:
            raise DataError(f"illegal move {mv} at ply {i + 1}")
        board.push(move)
    return board


# -- annotation ----------------------------------------------------------------


class AnnotationInterrupted(RuntimeError):
    """Engine failure mid-annotation.  ``partial`` holds everything annotated so far;
    pass ``cursor`` back to :func:`annotate` as ``resume_from`` to continue."""

    def __init__(self, partial: Dataset, cursor: tuple[int, int], cause: Exception):
        self.partial = partial
        self.cursor = cursor
        super().__init__(f"annotation stopped at record {cursor[0]}, move {cursor[1]}: {cause}")


def annotate(
    dataset: Dataset,
    weak_session,
    strong_session,
    samples_per_move: int = 10,
    resume_from: tuple[int, int] = (0, 1),
) -> Dataset:
    """Fill ``pw_raw`` / ``ps_raw`` at every White move from engine samples.

    Values are mean White scores over ``samples_per_move`` searches of the
    position before White's move.  Calibrated fields are reset.
    """
    from .engine_bridge import EngineError

    records = [replace(r, points=[replace(p) for p in r.points]) for r in dataset.records]
    out = Dataset(dataset.kind, records, dict(dataset.source_meta))
    start_rec, start_t = resume_from
    for ri in range(start_rec, len(records)):
        rec = records[ri]
        for p in rec.points:
            if ri == start_rec and p.t < start_t:
                continue
            prefix = rec.moves[: 2 * (p.t - 1)]
            try:
                weak = weak_session.sample_moves(prefix, samples_per_move)
                strong = strong_session.sample_moves(prefix, samples_per_move)
            except EngineError as exc:
                raise AnnotationInterrupted(out, (ri, p.t), exc) from exc
            p.pw_raw = sum(s.score_raw for s in weak) / len(weak)
            p.ps_raw = sum(s.score_raw for s in strong) / len(strong)
            p.weak_move = weak[0].move_uci
            p.strong_move = max(strong, key=lambda s: s.score_raw).move_uci
            p.pw = p.ps = None
    out.source_meta["annotated_samples_per_move"] = samples_per_move
    return out
