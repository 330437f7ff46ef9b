"""A small UCI engine for tests and dry runs.

Two modes:

* play mode (default): a one-ply material searcher with an ELO-dependent
  softmax over moves, so weak and strong settings behave differently.  It is a
  toy and says nothing about real engine strength.
* script mode (``--script FILE``): replays canned ``go`` responses from a JSON
  transcript, for protocol tests (hangs, crashes, missing WDL, ...).

Every received command can be appended to ``--log FILE``.

    python -m assistlab.mock_engine [--seed N] [--script FILE] [--log FILE]
"""

from __future__ import annotations

import argparse
import json
import math
import random
import sys
import time

import chess

ELO_MIN, ELO_MAX = 1320, 3190
PIECE_CP = {chess.PAWN: 100, chess.KNIGHT: 300, chess.BISHOP: 320, chess.ROOK: 500, chess.QUEEN: 900}


def material(board: chess.Board, color: chess.Color) -> int:
    total = 0
    for piece, cp in PIECE_CP.items():
        total += cp * (len(board.pieces(piece, color)) - len(board.pieces(piece, not color)))
    return total


def move_value(board: chess.Board, move: chess.Move) -> float:
    """Centipawns for the mover after ``move`` and the opponent's best capture."""
    me = board.turn
    board.push(move)
    try:
        if board.is_checkmate():
            return 100_000.0
        if board.is_stalemate() or board.is_insufficient_material():
            return 0.0
        base = material(board, me)
        worst = base
        for reply in board.generate_legal_captures():
            board.push(reply)
            worst = min(worst, material(board, me))
            board.pop()
        center = 5 if move.to_square in (chess.D4, chess.E4, chess.D5, chess.E5) else 0
        return 0.7 * worst + 0.3 * base + center
    finally:
        board.pop()


def wdl_from_cp(cp: float) -> tuple[int, int, int]:
    if cp >= 50_000:
        return 1000, 0, 0
    if cp <= -50_000:
        return 0, 0, 1000
    draw = int(round(400 * math.exp(-abs(cp) / 250)))
    win_share = 1 / (1 + math.exp(-cp / 150))
    win = int(round((1000 - draw) * win_share))
    return win, draw, 1000 - draw - win


class PlayEngine:
    def __init__(self, seed: int | None):
        self.rng = random.Random(seed)
        self.board = chess.Board()
        self.limit = False
        self.elo = ELO_MAX
        self.show_wdl = False

    def options(self) -> list[str]:
        return [
            "option name Threads type spin default 1 min 1 max 1024",
            "option name UCI_LimitStrength type check default false",
            f"option name UCI_Elo type spin default {ELO_MIN} min {ELO_MIN} max {ELO_MAX}",
            "option name UCI_ShowWDL type check default false",
        ]

    def setoption(self, name: str, value: str) -> None:
        if name == "UCI_LimitStrength":
            self.limit = value.lower() == "true"
        elif name == "UCI_Elo":
            self.elo = int(value)
        elif name == "UCI_ShowWDL":
            self.show_wdl = value.lower() == "true"

    def position(self, tokens: list[str]) -> None:
        self.board = chess.Board()
        if "moves" in tokens:
            for mv in tokens[tokens.index("moves") + 1 :]:
                self.board.push_uci(mv)

    def temperature(self) -> float:
        if not self.limit:
            return 1.0
        return 10.0 + 250.0 * (ELO_MAX - self.elo) / (ELO_MAX - ELO_MIN)

    def go(self) -> list[str]:
        moves = list(self.board.legal_moves)
        if not moves:
            mated = self.board.is_checkmate()
            line = "info depth 0 score mate 0" if mated else "info depth 0 score cp 0"
            if self.show_wdl:
                line += " wdl 0 0 1000" if mated else " wdl 0 1000 0"
            return [line, "bestmove (none)"]
        values = [move_value(self.board, m) + self.rng.gauss(0, 2.0) for m in moves]
        temp = self.temperature()
        top = max(values)
        weights = [math.exp((v - top) / temp) for v in values]
        chosen = self.rng.choices(range(len(moves)), weights=weights)[0]
        ranked = sorted(range(len(moves)), key=lambda i: -values[i])[:3]
        if chosen not in ranked:
            ranked.append(chosen)
        out = []
        for rank, i in enumerate(ranked, start=1):
            cp = values[i]
            score = f"mate 1" if cp >= 50_000 else f"cp {int(round(cp))}"
            line = f"info depth 1 multipv {rank} score {score}"
            if self.show_wdl:
                line += " wdl {} {} {}".format(*wdl_from_cp(cp))
            out.append(line + f" nodes {len(moves)} pv {moves[i].uci()}")
        out.append(f"bestmove {moves[chosen].uci()}")
        return out


def run_play(args, log_cmd) -> None:
    engine = PlayEngine(args.seed)
    for raw in sys.stdin:
        line = raw.strip()
        log_cmd(line)
        tokens = line.split()
        if not tokens:
            continue
        cmd = tokens[0]
        if cmd == "uci":
            emit("id name assistlab-mock")
            for opt in engine.options():
                emit(opt)
            emit("uciok")
        elif cmd == "isready":
            emit("readyok")
        elif cmd == "setoption":
            name = " ".join(tokens[2 : tokens.index("value")])
            engine.setoption(name, tokens[tokens.index("value") + 1])
        elif cmd == "ucinewgame":
            engine.board = chess.Board()
        elif cmd == "position":
            engine.position(tokens)
        elif cmd == "go":
            for out in engine.go():
                emit(out)
        elif cmd == "quit":
            return


def run_script(args, log_cmd) -> None:
    """Scripted transcript.  Keys: options, responses (list of line lists),
    crash_on_go (1-based index), hang_on_go, hang_on_quit, silent_handshake."""
    with open(args.script) as fh:
        script = json.load(fh)
    responses = list(script.get("responses", []))
    n_go = 0
    for raw in sys.stdin:
        line = raw.strip()
        log_cmd(line)
        tokens = line.split()
        if not tokens:
            continue
        cmd = tokens[0]
        if cmd == "uci":
            if script.get("silent_handshake"):
                continue
            for opt in script.get("options", []):
                emit(opt)
            emit("uciok")
        elif cmd == "isready":
            emit("readyok")
        elif cmd == "go":
            n_go += 1
            if script.get("crash_on_go") == n_go:
                sys.exit(3)
            if script.get("hang_on_go") == n_go:
                time.sleep(3600)
            reply = responses[(n_go - 1) % len(responses)] if responses else ["bestmove 0000"]
            for out in reply:
                emit(out)
        elif cmd == "quit":
            if script.get("hang_on_quit"):
                time.sleep(3600)
            return


def emit(line: str) -> None:
    sys.stdout.write(line + "\n")
    sys.stdout.flush()


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--script", default=None)
    parser.add_argument("--log", default=None)
    args = parser.parse_args(argv)

    log_fh = open(args.log, "a") if args.log else None

    def log_cmd(line: str) -> None:
        if log_fh:
            log_fh.write(line + "\n")
            log_fh.flush()

    try:
        if args.script:
            run_script(args, log_cmd)
        else:
            run_play(args, log_cmd)
    finally:
        if log_fh:
            log_fh.close()


if __name__ == "__main__":
    main()
