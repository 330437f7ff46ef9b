import json
import sys

import numpy as np
import pytest

from assistlab.engine_bridge import EngineConfig
from assistlab.game_model import Dataset, DatasetKind, GameRecord, InterventionEvent, MovePoint, Termination

MOCK = (sys.executable, "-m", "assistlab.mock_engine")


def mock_config(*extra, **kw) -> EngineConfig:
    kw.setdefault("movetime_ms", 5)
    kw.setdefault("handshake_timeout", 20.0)
    kw.setdefault("search_timeout", 20.0)
    return EngineConfig(MOCK[0], args=(*MOCK[1:], *extra), **kw)


@pytest.fixture
def scripted(tmp_path):
    """Build an EngineConfig for a scripted mock engine; returns (config, log_path)."""

    def make(script: dict, **kw):
        path = tmp_path / f"script{len(list(tmp_path.glob('script*')))}.json"
        path.write_text(json.dumps(script))
        log = tmp_path / (path.stem + ".log")
        return mock_config("--script", str(path), "--log", str(log), **kw), log

    return make


MOCK_OPTIONS = [
    "option name Threads type spin default 1 min 1 max 1024",
    "option name UCI_LimitStrength type check default false",
    "option name UCI_Elo type spin default 1320 min 1320 max 3190",
    "option name UCI_ShowWDL type check default false",
]


def synthetic_games(n, rng, kind="D0", effect=0.0, length=10, slope=0.1):
    """Calibrated games whose result depends on a latent quality that also
    shifts the gap distribution, so D0 carries confounding but no treatment.

    DI games get one intervention at a uniform move and ``effect`` added to the
    expected result.
    """
    recs = []
    for i in range(n):
        q = rng.uniform()
        pw = rng.uniform(0.2, 0.8, size=length)
        gap = rng.beta(1 + 2 * q, 4, size=length) * 0.5
        below = rng.uniform(size=length) < 0.2
        ps = np.where(below, pw - rng.uniform(0, 0.05, size=length), np.minimum(1, pw + gap))
        ps = np.clip(ps, 0, 1)
        pts = [MovePoint(t + 1, pw[t], ps[t], pw[t], ps[t]) for t in range(length)]
        mean = 0.4 + slope * q
        events = []
        if kind == "DI":
            ts = int(rng.integers(1, length + 1))
            mean += effect
            events = [InterventionEvent(1, ts, pts[ts - 1].gap, "random-single")]
        u = rng.uniform()
        p_win = mean - 0.15
        y = 1.0 if u < p_win else (0.5 if u < p_win + 0.3 else 0.0)
        term = Termination.DRAW_RULE if y == 0.5 else Termination.RESIGNATION_PROXY
        recs.append(GameRecord(f"{kind}-{i}", y, term, points=pts, interventions=events, budget=len(events)))
    return Dataset(DatasetKind(kind), recs)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.LINES, key=lambda s: int(s.split("]")[1].split()[0])):
            terminalreporter.write_line(line)
