"""UCI engine processes: handshake, strength limiting, move sampling and WDL parsing.

All scores leaving this module are expected scores for White, so callers never
branch on the side to move.
"""

from __future__ import annotations

import logging
import queue
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import chess

log = logging.getLogger(__name__)

NULL_MOVE = "0000"


class EngineError(RuntimeError):
    """Base class for engine failures."""


class EngineSpawnError(EngineError):
    pass


class EngineTimeout(EngineError):
    pass


class EngineDead(EngineError):
    pass


class IllegalPosition(EngineError):
    pass


@dataclass(frozen=True)
class WdlTriple:
    win: int
    draw: int
    lose: int

    def __post_init__(self):
        for v in (self.win, self.draw, self.lose):
            if not 0 <= v <= 1000:
                raise ValueError(f"WDL component out of range: {self}")
        if self.win + self.draw + self.lose != 1000:
            raise ValueError(f"WDL must sum to 1000, got {self}")

    def flipped(self) -> WdlTriple:
        return WdlTriple(self.lose, self.draw, self.win)

    @property
    def score(self) -> float:
        return (self.win + 0.5 * self.draw) / 1000.0


@dataclass(frozen=True)
class MoveSample:
    move_uci: str
    wdl: WdlTriple

    @property
    def score_raw(self) -> float:
        return self.wdl.score


@dataclass(frozen=True)
class EngineConfig:
    """How to launch and configure one engine process.

    ``executable_path`` may be followed by ``args`` for engines that run under an
    interpreter (``node stockfish.js``, ``python -m ...``).  Exactly one of
    ``depth`` and ``movetime_ms`` must be set.
    """

    executable_path: str
    elo: int = 1500
    limit_strength: bool = True
    show_wdl: bool = True
    depth: int | None = None
    movetime_ms: int | None = 100
    threads: int = 1
    args: tuple[str, ...] = ()
    handshake_timeout: float = 10.0
    search_timeout: float = 60.0
    quit_timeout: float = 2.0

    def __post_init__(self):
        if (self.depth is None) == (self.movetime_ms is None):
            raise ValueError("set exactly one of depth / movetime_ms")
        if self.depth is not None and self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.movetime_ms is not None and self.movetime_ms < 1:
            raise ValueError("movetime_ms must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @property
    def go_command(self) -> str:
        if self.depth is not None:
            return f"go depth {self.depth}"
        return f"go movetime {self.movetime_ms}"

    def to_dict(self) -> dict:
        return {
            "executable_path": self.executable_path,
            "args": list(self.args),
            "elo": self.elo,
            "limit_strength": self.limit_strength,
            "show_wdl": self.show_wdl,
            "depth": self.depth,
            "movetime_ms": self.movetime_ms,
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EngineConfig:
        d = dict(d)
        d["args"] = tuple(d.get("args", ()))
        return cls(**d)


def parse_wdl(line: str) -> WdlTriple | None:
    """Pull the ``wdl w d l`` triple out of an ``info`` line, if any."""
    tokens = line.split()
    try:
        i = tokens.index("wdl")
    except ValueError:
        return None
    try:
        w, d, l = (int(x) for x in tokens[i + 1 : i + 4])
    except ValueError as exc:
        raise EngineError(f"malformed wdl in: {line!r}") from exc
    return WdlTriple(w, d, l)


def parse_score(line: str) -> WdlTriple | None:
    """Fallback for engines without UCI_ShowWDL: map ``score cp``/``score mate``."""
    tokens = line.split()
    try:
        i = tokens.index("score")
        kind, value = tokens[i + 1], int(tokens[i + 2])
    except (ValueError, IndexError):
        return None
    if kind == "mate":
        return WdlTriple(1000, 0, 0) if value > 0 else WdlTriple(0, 0, 1000)
    win = round(1000 / (1 + 10 ** (-value / 400)))
    return WdlTriple(win, 0, 1000 - win)


def _first_pv_move(line: str) -> str | None:
    tokens = line.split()
    if "pv" in tokens:
        i = tokens.index("pv")
        if i + 1 < len(tokens):
            return tokens[i + 1]
    return None


@dataclass
class _SearchResult:
    bestmove: str
    wdl: WdlTriple | None
    score: WdlTriple | None


@dataclass
class EngineSession:
    config: EngineConfig
    process: subprocess.Popen
    elo_min: int | None = None
    elo_max: int | None = None
    options: dict[str, str] = field(default_factory=dict)
    go_count: int = 0
    dead: bool = False
    _lines: queue.Queue = field(default_factory=queue.Queue, repr=False)

    # -- wire ---------------------------------------------------------------
    def send(self, command: str) -> None:
        self._check_alive()
        log.debug(">> %s", command)
        try:
            self.process.stdin.write(command + "\n")
            self.process.stdin.flush()
        except (BrokenPipeError, OSError, ValueError) as exc:
            self.dead = True
            raise EngineDead(f"engine pipe closed: {exc}") from exc

    def read_line(self, deadline: float) -> str:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise EngineTimeout("engine did not answer in time")
        try:
            line = self._lines.get(timeout=remaining)
        except queue.Empty:
            raise EngineTimeout("engine did not answer in time") from None
        if line is None:
            self.dead = True
            raise EngineDead("engine exited")
        log.debug("<< %s", line)
        return line

    def wait_for(self, token: str, timeout: float) -> list[str]:
        deadline = time.monotonic() + timeout
        seen = []
        while True:
            line = self.read_line(deadline)
            if line.strip() == token:
                return seen
            seen.append(line)

    def _check_alive(self):
        if self.dead:
            raise EngineDead("session is dead")

    # -- protocol -----------------------------------------------------------
    def _search(self, moves: Sequence[str]) -> _SearchResult:
        self._check_alive()
        moves_part = " moves " + " ".join(moves) if moves else ""
        self.send("position startpos" + moves_part)
        self.send(self.config.go_command)
        self.go_count += 1
        deadline = time.monotonic() + self.config.search_timeout
        wdl = score = None
        # multipv output: remember the latest line per first pv move
        by_move: dict[str, tuple[WdlTriple | None, WdlTriple | None]] = {}
        try:
            while True:
                line = self.read_line(deadline)
                if line.startswith("info"):
                    line_wdl, line_score = parse_wdl(line), parse_score(line)
                    wdl = line_wdl or wdl
                    score = line_score or score
                    first = _first_pv_move(line)
                    if first is not None and (line_wdl or line_score):
                        by_move[first] = (line_wdl, line_score)
                elif line.startswith("bestmove"):
                    parts = line.split()
                    if len(parts) < 2:
                        raise EngineError(f"malformed bestmove line: {line!r}")
                    if parts[1] in by_move:
                        m_wdl, m_score = by_move[parts[1]]
                        wdl, score = m_wdl or wdl, m_score or score
                    return _SearchResult(parts[1], wdl, score)
        except EngineTimeout:
            self.dead = True
            raise

    def new_game(self) -> None:
        self.send("ucinewgame")
        self.send("isready")
        self.wait_for("readyok", self.config.handshake_timeout)

    def evaluate(self, moves: Sequence[str]) -> MoveSample:
        return evaluate(self, moves)

    def sample_moves(self, moves: Sequence[str], count: int) -> list[MoveSample]:
        return sample_moves(self, moves, count)

    def shutdown(self) -> None:
        shutdown(self)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        shutdown(self)


def _pump(stream, sink: queue.Queue) -> None:
    for raw in stream:
        sink.put(raw.rstrip("\r\n"))
    sink.put(None)


def start_engine(config: EngineConfig) -> EngineSession:
    cmd = [config.executable_path, *config.args]
    if not Path(config.executable_path).exists() and "/" in config.executable_path:
        raise EngineSpawnError(f"engine binary not found: {config.executable_path}")
    try:
        proc = subprocess.Popen(
            cmd,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            text=True,
            bufsize=1,
        )
    except OSError as exc:
        raise EngineSpawnError(f"cannot start {cmd}: {exc}") from exc

    session = EngineSession(config=config, process=proc)
    threading.Thread(target=_pump, args=(proc.stdout, session._lines), daemon=True).start()
    try:
        session.send("uci")
        for line in session.wait_for("uciok", config.handshake_timeout):
            _record_option(session, line)
        _apply_options(session)
        session.send("isready")
        session.wait_for("readyok", config.handshake_timeout)
    except EngineError:
        _kill(session)
        raise
    return session


def _record_option(session: EngineSession, line: str) -> None:
    if not line.startswith("option name "):
        return
    rest = line[len("option name ") :]
    name, _, option_type = rest.partition(" type ")
    session.options[name.strip()] = option_type
    if name.strip() == "UCI_Elo":
        tokens = option_type.split()
        for key in ("min", "max"):
            if key in tokens:
                setattr(session, f"elo_{key}", int(tokens[tokens.index(key) + 1]))


def _apply_options(session: EngineSession) -> None:
    cfg = session.config
    if cfg.limit_strength:
        if session.elo_min is not None and not session.elo_min <= cfg.elo <= session.elo_max:
            raise EngineError(
                f"elo {cfg.elo} outside engine range [{session.elo_min}, {session.elo_max}]"
            )
    commands = [("UCI_LimitStrength", "true" if cfg.limit_strength else "false")]
    if cfg.limit_strength:
        commands.append(("UCI_Elo", str(cfg.elo)))
    if cfg.show_wdl:
        commands.append(("UCI_ShowWDL", "true"))
    commands.append(("Threads", str(cfg.threads)))
    for name, value in commands:
        if session.options and name not in session.options:
            raise EngineError(f"engine rejected option {name}: not advertised")
        session.send(f"setoption name {name} value {value}")


def _board(moves: Sequence[str]) -> chess.Board:
    board = chess.Board()
    for i, mv in enumerate(moves):
        try:
            move = chess.Move.from_uci(mv)
        except (chess.InvalidMoveError, ValueError) as exc:
            raise IllegalPosition(f"bad move {mv!r} at ply {i + 1}") from exc
        if move not in board.legal_moves:
            raise IllegalPosition(f"illegal move {mv!r} at ply {i + 1}")
        board.push(move)
    return board


def _terminal_sample(board: chess.Board) -> MoveSample | None:
    if board.is_checkmate():
        # side to move is mated
        wdl = WdlTriple(0, 0, 1000) if board.turn == chess.WHITE else WdlTriple(1000, 0, 0)
        return MoveSample(NULL_MOVE, wdl)
    if board.is_stalemate():
        return MoveSample(NULL_MOVE, WdlTriple(0, 1000, 0))
    return None


def evaluate(session: EngineSession, moves: Sequence[str]) -> MoveSample:
    """One search from the position after ``moves``; WDL is from White's side."""
    session._check_alive()
    board = _board(moves)
    terminal = _terminal_sample(board)
    if terminal is not None:
        return terminal
    result = session._search(list(moves))
    wdl = result.wdl
    if wdl is None:
        if session.config.show_wdl:
            raise EngineError("engine reported no WDL although UCI_ShowWDL was requested")
        wdl = result.score
        if wdl is None:
            raise EngineError("engine reported neither WDL nor score")
    if board.turn == chess.BLACK:
        wdl = wdl.flipped()
    return MoveSample(result.bestmove, wdl)


def sample_moves(session: EngineSession, moves: Sequence[str], count: int) -> list[MoveSample]:
    if count < 1:
        raise ValueError("count must be >= 1")
    return [evaluate(session, moves) for _ in range(count)]


def _kill(session: EngineSession) -> None:
    session.dead = True
    if session.process.poll() is None:
        session.process.kill()
    try:
        session.process.wait(timeout=session.config.quit_timeout)
    except subprocess.TimeoutExpired:
        pass


def shutdown(session: EngineSession) -> None:
    """Best effort: ``quit``, wait, then kill."""
    if session.process.poll() is not None:
        session.dead = True
        return
    try:
        if not session.dead:
            session.process.stdin.write("quit\n")
            session.process.stdin.flush()
    except (BrokenPipeError, OSError, ValueError):
        pass
    session.dead = True
    try:
        session.process.wait(timeout=session.config.quit_timeout)
    except subprocess.TimeoutExpired:
        log.warning("engine ignored quit; killing pid %s", session.process.pid)
        _kill(session)
