"""Predict the sum of the ``k`` largest future deltas from the game so far.

Three families share one 7-feature summary of the prefix: ridge regression
(closed form), random forest and a two-layer ReLU MLP (scikit-learn).
"""

from __future__ import annotations

import hashlib
import json
import pickle
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .game_model import Dataset, GameRecord, atomic_write_text
from .policies import DecisionContext, MaxDeltaPolicy

FAMILIES = ("linear-L2", "random-forest", "mlp")
SIDES = ("W", "S")
N_FEATURES = 7
ARTIFACT_VERSION = 1


class PredictorError(ValueError):
    pass


def top_k_delta_sum(deltas: Sequence[float], k: int) -> float:
    """Sum of the ``k`` largest deltas after clipping at zero."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(deltas) == 0:
        return 0.0
    clipped = np.maximum(np.asarray(deltas, dtype=float), 0.0)
    if k >= len(clipped):
        return float(clipped.sum())
    return float(np.sort(clipped)[::-1][:k].sum())


def features(t: int, p_w: float, p_s: float, past_gaps: Sequence[float], side: str = "W") -> np.ndarray:
    """``[t, p_w, p_s, delta, mean past gap, max past gap, n past]``.

    For the strong side the strong move is treated as the one played, so the
    weak slot carries ``p_s`` and the delta is zero.
    """
    if side == "S":
        p_w = p_s
    past = np.asarray(past_gaps, dtype=float)
    mean_gap = float(past.mean()) if len(past) else 0.0
    max_gap = float(past.max()) if len(past) else 0.0
    return np.array([t, p_w, p_s, p_s - p_w, mean_gap, max_gap, len(past)], dtype=float)


def context_features(ctx: DecisionContext, side: str) -> np.ndarray:
    return features(ctx.move_number, ctx.p_w, ctx.p_s, ctx.past_gaps, side)


@dataclass
class TrainingSet:
    X: np.ndarray
    y: np.ndarray
    k: int
    side: str
    game_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return len(self.y)


def _calibrated_points(rec: GameRecord):
    pts = [p for p in rec.points if p.calibrated]
    if len(pts) != len(rec.points):
        raise PredictorError(f"{rec.game_id}: dataset must be calibrated")
    return pts


def build_training_set(dataset: Dataset, k: int, side: str = "W") -> TrainingSet:
    """One example per ``(game, t)`` with ``t`` before the last White move;
    the target is the top-``k`` sum over the strictly later deltas."""
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}")
    if len(dataset.records) == 0:
        raise PredictorError("empty dataset")
    X, y, gi, ts = [], [], [], []
    for g, rec in enumerate(dataset.records):
        pts = _calibrated_points(rec)
        deltas = [p.ps - p.pw for p in pts]
        gaps = [max(0.0, d) for d in deltas]
        for i in range(len(pts) - 1):
            p = pts[i]
            X.append(features(p.t, p.pw, p.ps, gaps[:i], side))
            y.append(top_k_delta_sum(deltas[i + 1 :], k))
            gi.append(g)
            ts.append(p.t)
    if not X:
        raise PredictorError("no game has two or more White moves")
    return TrainingSet(np.array(X), np.array(y), k, side, np.array(gi), np.array(ts))


@dataclass
class PredictorModel:
    family: str
    target_k: int
    target_side: str
    params: dict
    estimator: object = None

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.family == "linear-L2":
            raw = (X - self.params["mean"]) / self.params["scale"] @ self.params["coef"] + self.params["intercept"]
        else:
            raw = self.estimator.predict(X)
        return np.clip(raw, 0.0, float(self.target_k))

    def __call__(self, ctx: DecisionContext) -> float:
        return float(self.predict(context_features(ctx, self.target_side))[0])


def _fit_ridge(X: np.ndarray, y: np.ndarray, ridge: float) -> dict:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (X - mean) / scale
    y_mean = y.mean()
    A = Z.T @ Z + ridge * np.eye(Z.shape[1])
    if ridge <= 0:
        if np.linalg.matrix_rank(Z.T @ Z) < Z.shape[1]:
            raise PredictorError("singular design matrix; use a positive ridge term")
    coef = np.linalg.solve(A, Z.T @ (y - y_mean))
    return {"coef": coef, "intercept": y_mean, "mean": mean, "scale": scale, "ridge": ridge}


DEFAULTS = {
    "linear-L2": {"ridge": 1e-3},
    "random-forest": {"n_estimators": 200, "max_depth": 12, "bootstrap": True, "min_samples_leaf": 5},
    "mlp": {"hidden_layer_sizes": (32, 32), "alpha": 1e-4, "max_iter": 300},
}


def fit(family: str, training_set: TrainingSet, hyperparams: dict | None = None, seed: int = 0) -> PredictorModel:
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}")
    if len(training_set) == 0:
        raise PredictorError("empty training set")
    hp = {**DEFAULTS[family], **(hyperparams or {})}
    X, y = training_set.X, training_set.y
    model = PredictorModel(family, training_set.k, training_set.side, {})
    if family == "linear-L2":
        model.params = _fit_ridge(X, y, float(hp["ridge"]))
    elif family == "random-forest":
        from sklearn.ensemble import RandomForestRegressor

        est = RandomForestRegressor(random_state=seed, n_jobs=1, **hp)
        model.estimator = est.fit(X, y)
        model.params = {"hyperparams": hp}
    else:
        from sklearn.neural_network import MLPRegressor
        from sklearn.pipeline import make_pipeline
        from sklearn.preprocessing import StandardScaler

        est = make_pipeline(
            StandardScaler(),
            MLPRegressor(activation="relu", random_state=seed, early_stopping=False, **hp),
        )
        model.estimator = est.fit(X, y)
        model.params = {"hyperparams": {k: list(v) if isinstance(v, tuple) else v for k, v in hp.items()}}
    return model


def predict(model: PredictorModel, X) -> np.ndarray:
    return model.predict(X)


def mse(model: PredictorModel, training_set: TrainingSet) -> float:
    return float(np.mean((model.predict(training_set.X) - training_set.y) ** 2))


# -- artifacts -------------------------------------------------------------------------


def save_model(model: PredictorModel, path) -> None:
    """Family-tagged JSON with a base64 pickle blob for sklearn estimators and a sha256 self-check."""
    import base64

    if model.family == "linear-L2":
        blob = json.dumps({k: np.asarray(v).tolist() for k, v in model.params.items()})
    else:
        blob = base64.b64encode(pickle.dumps(model.estimator)).decode()
    doc = {
        "artifact_version": ARTIFACT_VERSION,
        "family": model.family,
        "target_k": model.target_k,
        "target_side": model.target_side,
        "blob": blob,
        "sha256": hashlib.sha256(blob.encode()).hexdigest(),
    }
    atomic_write_text(path, json.dumps(doc))


def load_model(path) -> PredictorModel:
    import base64

    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("artifact_version") != ARTIFACT_VERSION:
        raise PredictorError(f"{path}: unsupported artifact version {doc.get('artifact_version')}")
    if hashlib.sha256(doc["blob"].encode()).hexdigest() != doc["sha256"]:
        raise PredictorError(f"{path}: checksum mismatch")
    model = PredictorModel(doc["family"], doc["target_k"], doc["target_side"], {})
    if model.family == "linear-L2":
        model.params = {k: np.asarray(v) if isinstance(v, list) else v for k, v in json.loads(doc["blob"]).items()}
    else:
        model.estimator = pickle.loads(base64.b64decode(doc["blob"]))
    return model


def train_maxdelta_predictors(
    dataset: Dataset, budget: int, family: str = "random-forest", seed: int = 0, hyperparams: dict | None = None
) -> tuple[list[PredictorModel], list[PredictorModel]]:
    """Weak-side models for ``k = 1..K`` and strong-side models for ``k = 1..K-1``."""
    weak = [fit(family, build_training_set(dataset, k, "W"), hyperparams, seed) for k in range(1, budget + 1)]
    strong = [fit(family, build_training_set(dataset, k, "S"), hyperparams, seed) for k in range(1, budget)]
    return weak, strong


def make_maxdelta_policy(weak, strong, slacks: Sequence[float] = ()) -> MaxDeltaPolicy:
    return MaxDeltaPolicy(tuple(weak), tuple(strong), tuple(slacks))
