import io
import json

import pytest
from hypothesis import given, settings, strategies as st

from assistlab.game_model import (
    DataError,
    Dataset,
    DatasetKind,
    GameRecord,
    InterventionEvent,
    MovePoint,
    PgnFilters,
    PgnStats,
    Termination,
    dumps_dataset,
    loads_dataset,
    parse_pgn,
    read_jsonl,
    replay,
    write_jsonl,
)

prob = st.one_of(st.none(), st.floats(0, 1))


@st.composite
def records(draw):
    result = draw(st.sampled_from([0.0, 0.5, 1.0]))
    term = Termination.DRAW_RULE if result == 0.5 else draw(
        st.sampled_from([Termination.CHECKMATE, Termination.RESIGNATION_PROXY, Termination.HORIZON])
    )
    n = draw(st.integers(0, 6))
    points = []
    for t in range(1, n + 1):
        pw, ps = draw(prob), draw(prob)
        if (pw is None) != (ps is None):
            ps = pw
        points.append(MovePoint(t, draw(prob), draw(prob), pw, ps, draw(st.sampled_from(["", "e2e4"])), "d2d4"))
    ts = sorted(draw(st.sets(st.integers(1, 10), max_size=3)))
    events = [InterventionEvent(i + 1, t, draw(prob), "threshold", draw(st.booleans())) for i, t in enumerate(ts)]
    return GameRecord(
        draw(st.text(min_size=1, max_size=8)),
        result,
        term,
        moves=["e2e4", "e7e5"][: draw(st.integers(0, 2))],
        points=points,
        interventions=events,
        white_elo=draw(st.one_of(st.none(), st.integers(800, 3200))),
        budget=len(events) + draw(st.integers(0, 2)),
    )


@settings(max_examples=60, deadline=None)
@given(st.lists(records(), max_size=4))
def test_jsonl_round_trip_is_lossless(recs):
    ds = Dataset(DatasetKind.PLAY, recs, {"note": "x"})
    back = loads_dataset(dumps_dataset(ds).splitlines())
    assert back == ds


def d0(n=2):
    return Dataset(
        DatasetKind.D0,
        [GameRecord(f"g{i}", 1.0, Termination.CHECKMATE, points=[MovePoint(1, 0.5, 0.6, 0.5, 0.7)]) for i in range(n)],
    )


def test_empty_and_two_record_files(tmp_path):
    path = tmp_path / "e.jsonl"
    write_jsonl(Dataset(DatasetKind.D0), path)
    assert len(path.read_text().splitlines()) == 1
    assert len(read_jsonl(path)) == 0
    write_jsonl(d0(), path)
    assert len(path.read_text().splitlines()) == 3
    assert read_jsonl(path) == d0()


def test_intervention_in_d0_names_the_line(tmp_path):
    lines = dumps_dataset(d0()).splitlines()
    row = json.loads(lines[2])
    row["interventions"] = [{"k": 1, "t": 1, "gap": 0.2, "policy_tag": "x"}]
    row["budget"] = 1
    lines[2] = json.dumps(row)
    with pytest.raises(DataError) as err:
        loads_dataset(lines)
    assert err.value.line == 3 and "line 3" in str(err.value)


def test_reader_rejects_bad_header_and_schema():
    with pytest.raises(DataError):
        loads_dataset([])
    with pytest.raises(DataError):
        loads_dataset(['{"schema_version": 99, "kind": "D0"}'])
    lines = dumps_dataset(d0(1)).splitlines()
    row = json.loads(lines[1])
    row["points"][0]["gap"] = 0.9
    with pytest.raises(DataError, match="inconsistent"):
        loads_dataset([lines[0], json.dumps(row)])


def test_record_invariants():
    with pytest.raises(DataError):
        GameRecord("a", 0.5, Termination.CHECKMATE).validate()
    with pytest.raises(DataError):
        GameRecord("a", 1.0, Termination.DRAW_RULE).validate()
    with pytest.raises(DataError):
        GameRecord("a", 0.3, Termination.HORIZON).validate()
    ev = [InterventionEvent(1, 2, 0.1, "x"), InterventionEvent(2, 5, 0.1, "x")]
    with pytest.raises(DataError, match="exceed budget"):
        GameRecord("a", 1.0, Termination.CHECKMATE, interventions=ev, budget=1).validate()
    GameRecord("a", 1.0, Termination.CHECKMATE, interventions=ev, budget=2).validate()


def test_di_requires_single_random_event():
    rec = GameRecord("a", 1.0, Termination.CHECKMATE, interventions=[InterventionEvent(1, 2, 0.1, "threshold")], budget=1)
    with pytest.raises(DataError):
        Dataset(DatasetKind.DI, [rec]).validate()
    rec.interventions[0].policy_tag = "random-single"
    Dataset(DatasetKind.DI, [rec]).validate()


def test_gap_and_delta():
    p = MovePoint(3, pw=0.6, ps=0.4)
    assert p.delta == pytest.approx(-0.2) and p.gap == 0.0
    assert MovePoint(3).gap is None


SPECIAL = """[Event "t"]
[Site "special"]
[WhiteElo "1500"]
[BlackElo "1600"]
[Result "1-0"]

1. e4 d5 2. e5 f5 3. exf6 Nc6 4. fxg7 Be6 5. gxh8=Q Qd6 6. Nf3 O-O-O 7. Bc4 h6 8. O-O 1-0
"""

# coordinate moves worked out by hand on a board
SPECIAL_UCI = (
    "e2e4 d7d5 e4e5 f7f5 e5f6 b8c6 f6g7 c8e6 g7h8q d8d6 g1f3 e8c8 f1c4 h7h6 e1g1"
).split()


def test_pgn_castling_en_passant_promotion():
    ds = parse_pgn(io.StringIO(SPECIAL))
    (rec,) = ds.records
    assert rec.moves == SPECIAL_UCI
    assert rec.result == 1.0 and rec.white_elo == 1500 and rec.black_elo == 1600
    assert [p.t for p in rec.points] == list(range(1, 9))
    assert all(p.pw_raw is None for p in rec.points)
    assert ds.kind == DatasetKind.HUMAN_PGN


MULTI = """[Event "a"]
[Result "1-0"]

1. e4 e5 2. Qh5 Nc6 1-0

[Event "b"]
[Result "*"]

1. d4 d5 *

[Event "c"]
[Result "0-1"]

1. e4 e5 2. Ke3 Nc6 0-1

[Event "d"]
[WhiteElo "2500"]
[BlackElo "2400"]
[Result "1/2-1/2"]

1. c4 c5 1/2-1/2
"""


def test_pgn_skips_and_counts():
    stats = PgnStats()
    ds = parse_pgn(io.StringIO(MULTI), stats=stats)
    assert [r.moves for r in ds.records] == [["e2e4", "e7e5", "d1h5", "b8c6"], ["c2c4", "c7c5"]]
    assert len(ds.records[0].points) == 2
    assert stats.missing_result == 1 and stats.illegal == 1 and stats.accepted == 2
    for rec in ds.records:
        replay(rec.moves)

    band = parse_pgn(io.StringIO(MULTI), PgnFilters(min_elo=2000))
    assert [r.result for r in band.records] == [0.5]

    loose = parse_pgn(io.StringIO(MULTI), PgnFilters(result_required=False))
    assert len(loose.records) == 3


def test_replay_rejects_illegal():
    with pytest.raises(DataError):
        replay(["e2e4", "e2e4"])


def test_annotate_fills_raw_values_and_resumes(scripted):
    from assistlab.engine_bridge import start_engine
    from assistlab.game_model import AnnotationInterrupted, annotate

    from conftest import MOCK_OPTIONS, mock_config

    ds = parse_pgn(io.StringIO(MULTI))
    weak = start_engine(mock_config("--seed", "3"))
    strong = start_engine(mock_config("--seed", "4", elo=3190, limit_strength=False))
    try:
        out = annotate(ds, weak, strong, samples_per_move=2)
        assert weak.go_count == strong.go_count == 2 * 3
        assert all(p.pw_raw is not None and p.ps_raw is not None for r in out for p in r.points)
        again = annotate(out, weak, strong, samples_per_move=2)
        assert [len(r.points) for r in again] == [len(r.points) for r in out]
    finally:
        weak.shutdown()
        strong.shutdown()

    ok = "info depth 1 score cp 0 wdl 400 200 400 pv e2e4"
    cfg, _ = scripted({"options": MOCK_OPTIONS, "crash_on_go": 3, "responses": [[ok, "bestmove e2e4"]]})
    flaky = start_engine(cfg)
    other = start_engine(mock_config())
    try:
        with pytest.raises(AnnotationInterrupted) as err:
            annotate(ds, flaky, other, samples_per_move=1)
        assert err.value.cursor == (1, 1)
        assert err.value.partial.records[0].points[0].pw_raw == 0.5
    finally:
        flaky.shutdown()
        other.shutdown()
    fresh = start_engine(mock_config())
    try:
        done = annotate(err.value.partial, fresh, fresh, samples_per_move=1, resume_from=err.value.cursor)
        assert done.records[0].points[0].pw_raw == 0.5
        assert all(p.pw_raw is not None for r in done for p in r.points)
    finally:
        fresh.shutdown()
