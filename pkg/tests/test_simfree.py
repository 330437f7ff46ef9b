import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from assistlab.game_model import Dataset, DatasetKind, GameRecord, MovePoint, Termination
from assistlab.simfree import (
    BLOCK,
    MoveBank,
    SimConfig,
    SimError,
    UpliftTable,
    _block_stats,
    avg_score,
    build_banks,
    fit_uplift,
    load_banks,
    load_uplift,
    n_blocks,
    reduce_blocks,
    save_sidecar,
    simulate_game,
)

from conftest import synthetic_games
from oracles import enumerate_sim

TWO_MOVE = [[(0.5, 0.9), (0.5, 0.55), (0.4, 0.3)], [(0.2, 0.5), (0.6, 0.6)]]


def linear_uplift(bin_width=1, n_bins=2, base=(0.1, 0.05), slope=0.2):
    """Delta(t, d) = base[bin] + slope * d, exact under linear interpolation."""
    grid = np.linspace(0, 1, 101)
    delta = np.array([b + slope * grid for b in base[:n_bins]])
    ones = np.ones_like(delta, bool)
    return UpliftTable(bin_width, grid, delta, np.zeros_like(delta), delta, ones)


def game(y, pairs):
    term = Termination.DRAW_RULE if y == 0.5 else Termination.CHECKMATE
    return GameRecord("g", y, term, points=[MovePoint(t + 1, pw, ps, pw, ps) for t, (pw, ps) in enumerate(pairs)])


def test_build_banks():
    b = build_banks(Dataset(DatasetKind.D0, [game(1.0, [(0.5, 0.6)] * 3)]), horizon=5)
    assert b.sizes() == [1, 1, 1, 0, 0] and b.baseline_mean == 1.0
    two = Dataset(DatasetKind.D0, [game(1.0, [(0.5, 0.6)] * 3), game(0.0, [(0.4, 0.4)] * 2)])
    b = build_banks(two, horizon=10)
    assert b.baseline_mean == 0.5 and sum(b.sizes()) == 5
    with pytest.raises(SimError):
        build_banks(Dataset(DatasetKind.D0, []))
    raw = Dataset(DatasetKind.D0, [GameRecord("r", 1.0, Termination.CHECKMATE, points=[MovePoint(1, 0.5, 0.6)])])
    with pytest.raises(SimError):
        build_banks(raw)
    with pytest.raises(SimError):
        MoveBank([[(0.5, 1.2)]], 0.5)


def test_lookup_interpolates():
    u = linear_uplift()
    assert u.lookup(1, 0.333) == pytest.approx(0.1 + 0.2 * 0.333)
    assert u.lookup(2, 0.5) == pytest.approx(0.15)
    assert u.lookup(7, 0.5) == pytest.approx(0.15)  # beyond the last bin uses the last bin


def test_no_thresholds_and_clip():
    bank = MoveBank(TWO_MOVE, 0.51)
    rng = np.random.default_rng(0)
    cfg = SimConfig(horizon=2, runs=10)
    assert simulate_game(bank, linear_uplift(), [], cfg, rng) == (0.51, [])
    hit = MoveBank([[(0.2, 0.9)]], 0.51)
    v, events = simulate_game(hit, UpliftTable.constant(0.6), [0.5], SimConfig(horizon=1), rng)
    assert v == 1.0 and len(events) == 1 and events[0].t == 1


def test_enumeration_two_move_bank():
    bank = MoveBank(TWO_MOVE, 0.5)
    u = linear_uplift()
    fn = lambda t, d: (0.1, 0.05)[t - 1] + 0.2 * d
    for T in ([0.1], [0.05, 0.2], [0.0, 0.0]):
        exact = enumerate_sim(TWO_MOVE, 0.5, T, fn)
        rep = avg_score(bank, u, T, SimConfig(horizon=2, runs=100_000, seed=3))
        assert abs(rep.avg_score - exact) <= 4 * rep.std_error + 1e-12


def test_unreachable_and_zero_scales():
    bank = MoveBank(TWO_MOVE, 0.37)
    rep = avg_score(bank, linear_uplift(), [1.01, 1.01], SimConfig(horizon=2, runs=5000))
    assert rep.avg_score == pytest.approx(0.37, abs=1e-15) and rep.frac_fired == [0.0, 0.0]
    rep = avg_score(bank, linear_uplift(), [0.0, 0.0], SimConfig(horizon=2, runs=5000, uplift_scales=(0, 0)))
    assert rep.avg_score == pytest.approx(0.37, abs=1e-15) and rep.frac_fired == [1.0, 1.0]
    with pytest.raises(SimError):
        SimConfig(uplift_scales=(-1,))
    with pytest.raises(SimError):
        SimConfig(horizon=2, uplift_scales=(1,)).scales(2)


def test_empty_bank_ends_game():
    bank = MoveBank([[(0.5, 0.5)], [], [(0.0, 1.0)]], 0.5)
    rep = avg_score(bank, UpliftTable.constant(0.3), [0.5], SimConfig(horizon=3, runs=100))
    assert rep.frac_fired == [0.0] and rep.avg_score == 0.5


def test_determinism_and_block_independence():
    bank = MoveBank(TWO_MOVE, 0.5)
    cfg = SimConfig(horizon=2, runs=3 * BLOCK + 17, seed=11)
    a = avg_score(bank, linear_uplift(), [0.1, 0.2], cfg).to_dict()
    b = avg_score(bank, linear_uplift(), [0.1, 0.2], cfg).to_dict()
    assert a == b
    T = np.array([0.1, 0.2])
    stats = [_block_stats(bank, linear_uplift(), T, cfg, i) for i in range(n_blocks(cfg.runs))]
    shuffled = [stats[i] for i in (2, 0, 3, 1)]
    assert reduce_blocks(shuffled, cfg.runs, 2).avg_score == pytest.approx(a["avg_score"], abs=1e-15)
    alone = _block_stats(bank, linear_uplift(), T, cfg, 2)
    assert alone[0] == stats[2][0]


gaps = st.lists(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=4), min_size=1, max_size=6)


@settings(max_examples=40, deadline=None)
@given(gaps, st.lists(st.floats(0, 0.6), min_size=1, max_size=3), st.integers(0, 2**31))
def test_events_increasing_and_bounded(pairs, T, seed):
    bank = MoveBank(pairs, 0.5)
    v, events = simulate_game(bank, UpliftTable.constant(0.1), sorted(T), SimConfig(horizon=len(pairs)), np.random.default_rng(seed))
    assert len(events) <= len(T)
    assert all(a.t < b.t for a, b in zip(events, events[1:]))
    assert [e.k for e in events] == list(range(1, len(events) + 1))
    assert 0 <= v <= 1


@settings(max_examples=30, deadline=None)
@given(gaps, st.lists(st.floats(0, 0.6), min_size=1, max_size=3), st.integers(0, 2), st.floats(0, 0.3), st.floats(0, 0.2))
def test_raising_a_threshold_cannot_help_with_constant_uplift(pairs, T, j, bump, effect):
    j = j % len(T)
    bank = MoveBank(pairs, 0.45)
    u = UpliftTable.constant(effect)
    cfg = SimConfig(horizon=len(pairs), runs=2000, seed=5)
    raised = list(T)
    raised[j] += bump
    assert avg_score(bank, u, raised, cfg).avg_score <= avg_score(bank, u, T, cfg).avg_score + 1e-12


def test_uplift_fit_shapes_and_monotone_curves(tmp_path):
    rng = np.random.default_rng(0)
    d0 = synthetic_games(2000, rng)
    di = synthetic_games(2000, rng, kind="DI", effect=0.1)
    u = fit_uplift(d0, di, bin_width=5, horizon=10, min_di_per_bin=30)
    assert u.delta.shape == (2, 101) and u.populated.any()
    assert np.all(np.diff(u.mu0, axis=1) >= -1e-12) and np.all(np.diff(u.mu1, axis=1) >= -1e-12)
    assert np.all(np.abs(u.delta) <= 1)
    save_sidecar(u, tmp_path / "u.json")
    back = load_uplift(tmp_path / "u.json")
    np.testing.assert_array_equal(back.delta, u.delta)
    np.testing.assert_array_equal(back.populated, u.populated)
    bank = build_banks(d0, horizon=10)
    save_sidecar(bank, tmp_path / "b.json")
    assert load_banks(tmp_path / "b.json").sizes() == bank.sizes()


def test_uplift_empty_bins_and_unfired():
    rng = np.random.default_rng(1)
    d0 = synthetic_games(50, rng)
    di = synthetic_games(50, rng, kind="DI")
    for rec in di.records[:10]:
        rec.interventions[0].fired = False
    u = fit_uplift(d0, di, bin_width=10, horizon=30)
    assert u.empty_bins == [1, 2]
    assert u.counts["di"][0] == 40
    assert np.all(u.delta[1:] == 0)
