import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from assistlab.game_model import Dataset, DatasetKind, GameRecord, MovePoint, Termination
from assistlab.policies import DecisionContext
from assistlab.predictors import (
    N_FEATURES,
    PredictorError,
    TrainingSet,
    build_training_set,
    features,
    fit,
    load_model,
    make_maxdelta_policy,
    mse,
    save_model,
    top_k_delta_sum,
    train_maxdelta_predictors,
)

from conftest import synthetic_games


def brute_top_k(deltas, k):
    clipped = [max(0.0, d) for d in deltas]
    if not clipped:
        return 0.0
    return max(sum(c) for c in itertools.combinations(clipped, min(k, len(clipped))))


@given(st.lists(st.floats(-1, 1), max_size=10), st.integers(1, 4))
def test_top_k_matches_subset_search(deltas, k):
    assert top_k_delta_sum(deltas, k) == pytest.approx(brute_top_k(deltas, k), abs=1e-12)
    if k > 1:
        assert top_k_delta_sum(deltas, k) >= top_k_delta_sum(deltas, k - 1)


def test_top_k_examples():
    assert top_k_delta_sum([0.1, 0.3, 0.2], 2) == pytest.approx(0.5)
    assert top_k_delta_sum([-0.2, 0.1], 2) == pytest.approx(0.1)
    assert top_k_delta_sum([], 3) == 0.0
    with pytest.raises(ValueError):
        top_k_delta_sum([0.1], 0)


def one_game(deltas, pw=0.4):
    pts = [MovePoint(t + 1, pw, pw + d, pw, pw + d) for t, d in enumerate(deltas)]
    return GameRecord("g", 1.0, Termination.CHECKMATE, points=pts)


def test_training_set_shape_and_targets():
    ds = Dataset(DatasetKind.D0, [one_game([0.1, -0.1, 0.3, 0.2, 0.05])])
    ts1 = build_training_set(ds, 1)
    assert len(ts1) == 4 and ts1.X.shape == (4, N_FEATURES)
    np.testing.assert_allclose(ts1.y, [0.3, 0.3, 0.2, 0.05])
    ts2 = build_training_set(ds, 2)
    np.testing.assert_allclose(ts2.y, [0.5, 0.5, 0.25, 0.05])
    assert np.all(ts2.y >= ts1.y)
    # running gap stats at t=3: past gaps 0.1, 0
    np.testing.assert_allclose(ts1.X[2], [3, 0.4, 0.7, 0.3, 0.05, 0.1, 2])
    assert np.isfinite(ts1.X).all()
    strong = build_training_set(ds, 1, "S")
    np.testing.assert_allclose(strong.X[:, 3], 0.0)
    np.testing.assert_allclose(strong.y, ts1.y)


def test_training_set_errors():
    with pytest.raises(PredictorError):
        build_training_set(Dataset(DatasetKind.D0, []), 1)
    with pytest.raises(PredictorError):
        build_training_set(Dataset(DatasetKind.D0, [one_game([0.1])]), 1)
    raw = GameRecord("r", 1.0, Termination.CHECKMATE, points=[MovePoint(1, 0.5, 0.6), MovePoint(2, 0.5, 0.6)])
    with pytest.raises(PredictorError):
        build_training_set(Dataset(DatasetKind.D0, [raw]), 1)
    with pytest.raises(ValueError):
        build_training_set(Dataset(DatasetKind.D0, [raw]), 1, side="X")


def random_set(n=300, seed=0, y=None):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, N_FEATURES))
    return TrainingSet(X, y(X) if y else np.full(n, 0.3), 1, "W")


def test_constant_target():
    model = fit("linear-L2", random_set())
    np.testing.assert_allclose(model.predict(np.random.default_rng(9).uniform(size=(20, 7))), 0.3, atol=1e-9)


def test_linear_recovers_coefficient():
    ts = random_set(y=lambda X: 0.5 * X[:, 3])
    model = fit("linear-L2", ts, {"ridge": 1e-8})
    coef = model.params["coef"] / model.params["scale"]
    ref, *_ = np.linalg.lstsq(np.c_[ts.X, np.ones(len(ts))], ts.y, rcond=None)
    assert abs(coef[3] - 0.5) < 1e-6
    np.testing.assert_allclose(coef, ref[:7], atol=1e-6)
    with pytest.raises(PredictorError):
        fit("linear-L2", TrainingSet(np.ones((5, 7)), np.ones(5), 1, "W"), {"ridge": 0})


@pytest.mark.filterwarnings("ignore::sklearn.exceptions.ConvergenceWarning")
@pytest.mark.parametrize("family", ["linear-L2", "random-forest", "mlp"])
def test_families_clip_and_round_trip(family, tmp_path):
    ts = random_set(200, y=lambda X: 3 * X[:, 0] - 1)
    hp = {"n_estimators": 10} if family == "random-forest" else ({"max_iter": 50} if family == "mlp" else None)
    model = fit(family, ts, hp, seed=2)
    pred = model.predict(np.random.default_rng(1).uniform(-2, 3, size=(100, 7)))
    assert pred.min() >= 0 and pred.max() <= 1
    path = tmp_path / "m.json"
    save_model(model, path)
    back = load_model(path)
    np.testing.assert_array_equal(back.predict(ts.X), model.predict(ts.X))
    assert mse(back, ts) == mse(model, ts)


def test_artifact_checksum(tmp_path):
    import json

    model = fit("linear-L2", random_set())
    path = tmp_path / "m.json"
    save_model(model, path)
    doc = json.loads(path.read_text())
    doc["blob"] = doc["blob"].replace("0", "1", 1)
    path.write_text(json.dumps(doc))
    with pytest.raises(PredictorError, match="checksum"):
        load_model(path)
    with pytest.raises(ValueError):
        fit("svm", random_set())


def test_forest_beats_linear_on_nonlinear_target():
    ts = random_set(600, y=lambda X: np.where(X[:, 1] > 0.5, 0.8, 0.1))
    lin = fit("linear-L2", ts)
    rf = fit("random-forest", ts, {"n_estimators": 30})
    assert mse(rf, ts) <= mse(lin, ts)


def test_trained_policy_runs_on_contexts():
    ds = synthetic_games(60, np.random.default_rng(0))
    weak, strong = train_maxdelta_predictors(ds, 2, family="linear-L2")
    assert len(weak) == 2 and len(strong) == 1
    pol = make_maxdelta_policy(weak, strong)
    ctx = DecisionContext(3, 0.4, 0.6, 0, None, (0.1, 0.0))
    pred = pol.predictions(ctx)
    assert pred[("W", 2)] >= pred[("W", 1)] >= 0
    assert len({pol.decide(ctx) for _ in range(3)}) == 1
    np.testing.assert_allclose(features(3, 0.4, 0.6, (0.1, 0.0)), [3, 0.4, 0.6, 0.2, 0.05, 0.1, 2])
