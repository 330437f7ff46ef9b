"""Monotone maps from raw engine score to empirical expected result.

Two fitters: pool-adjacent-violators (isotonic step function) and a small
network with nonnegative weights.  A :class:`CalibrationBank` holds one fitted
curve per move-number bucket.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .game_model import Dataset, atomic_write_text

log = logging.getLogger(__name__)

SCORES = (0.0, 0.5, 1.0)


class CalibrationError(ValueError):
    pass


class DivergenceError(CalibrationError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"monotone net diverged (loss is NaN) at epoch {epoch}")


@dataclass(frozen=True)
class CalibrationPair:
    alpha: float
    score: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if self.score not in SCORES:
            raise ValueError(f"score {self.score} not in {{0, 0.5, 1}}")


def _as_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pairs, tuple) and len(pairs) == 2 and isinstance(pairs[0], np.ndarray):
        return np.asarray(pairs[0], float), np.asarray(pairs[1], float)
    x = np.array([p.alpha for p in pairs], dtype=float)
    y = np.array([p.score for p in pairs], dtype=float)
    return x, y


# -- isotonic ------------------------------------------------------------------


def pava(y: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """Weighted least-squares nondecreasing fit of the sequence ``y``."""
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    n = len(y)
    means = np.empty(n)
    weights = np.empty(n)
    sizes = np.empty(n, dtype=int)
    top = -1
    for i in range(n):
        top += 1
        means[top], weights[top], sizes[top] = y[i], w[i], 1
        while top > 0 and means[top - 1] > means[top]:
            wt = weights[top - 1] + weights[top]
            means[top - 1] = (weights[top - 1] * means[top - 1] + weights[top] * means[top]) / wt
            weights[top - 1] = wt
            sizes[top - 1] += sizes[top]
            top -= 1
    return np.repeat(means[: top + 1], sizes[: top + 1])


@dataclass
class IsotonicCurve:
    """Right-continuous step function; flat outside the breakpoint range."""

    breakpoints: np.ndarray
    values: np.ndarray
    bucket: int = 0
    degenerate: bool = False
    n_train: int = 0

    def __post_init__(self):
        self.breakpoints = np.asarray(self.breakpoints, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if len(self.breakpoints) != len(self.values) or len(self.values) == 0:
            raise CalibrationError("breakpoints and values must be non-empty and aligned")
        if np.any(np.diff(self.breakpoints) <= 0):
            raise CalibrationError("breakpoints must be strictly increasing")
        if np.any(np.diff(self.values) < 0):
            raise CalibrationError("values must be nondecreasing")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.breakpoints, x, side="right") - 1
        out = self.values[np.clip(idx, 0, len(self.values) - 1)]
        out = np.clip(out, 0.0, 1.0)
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {
            "type": "isotonic",
            "bucket": self.bucket,
            "breakpoints": self.breakpoints.tolist(),
            "values": self.values.tolist(),
            "degenerate": self.degenerate,
            "n_train": self.n_train,
        }

    @classmethod
    def from_dict(cls, d: dict) -> IsotonicCurve:
        return cls(d["breakpoints"], d["values"], d.get("bucket", 0), d.get("degenerate", False), d.get("n_train", 0))


def fit_isotonic(pairs, bucket: int = 0) -> IsotonicCurve:
    """MSE-optimal nondecreasing step function through ``(alpha, score)`` pairs.

    Equal alphas are pooled into their mean first, weighted by multiplicity.
    """
    x, y = _as_arrays(pairs)
    if len(x) < 2:
        raise CalibrationError("need at least 2 pairs")
    ux, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=y)
    fitted = pava(sums / counts, counts.astype(float))
    if len(ux) == 1:
        log.warning("all alphas identical; isotonic fit is the constant mean")
    # collapse runs of equal values to their first breakpoint
    keep = np.r_[True, np.diff(fitted) != 0]
    return IsotonicCurve(ux[keep], fitted[keep], bucket, degenerate=len(ux) == 1, n_train=len(x))


def eval_curve(curve, x):
    return curve(x)


# -- monotone network ------------------------------------------------------------


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class MonotoneNet:
    """``sigmoid(g(x))`` where ``g`` is a softplus MLP with nonnegative weights."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    bucket: int = 0
    n_train: int = 0

    def _forward(self, x: np.ndarray):
        h = (2.0 * x - 1.0)[:, None]
        acts = [h]
        pre = []
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            pre.append(z)
            h = _softplus(z) if i < len(self.weights) - 1 else z
            acts.append(h)
        return pre, acts

    def __call__(self, x):
        arr = np.atleast_1d(np.asarray(x, dtype=float))
        _, acts = self._forward(arr)
        out = _sigmoid(acts[-1][:, 0])
        return float(out[0]) if np.ndim(x) == 0 else out

    def to_dict(self) -> dict:
        return {
            "type": "monotone-net",
            "bucket": self.bucket,
            "n_train": self.n_train,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> MonotoneNet:
        return cls(
            [np.asarray(W, float) for W in d["weights"]],
            [np.asarray(b, float) for b in d["biases"]],
            d.get("bucket", 0),
            d.get("n_train", 0),
        )


def fit_monotone_net(
    pairs,
    hidden_layers: Sequence[int] = (16, 16),
    epochs: int = 2000,
    learning_rate: float = 0.01,
    seed: int = 0,
    bucket: int = 0,
) -> MonotoneNet:
    """Full-batch Adam on MSE; weights are projected onto ``>= 0`` after every step."""
    x, y = _as_arrays(pairs)
    if len(x) < 10:
        raise CalibrationError("need at least 10 pairs")
    rng = np.random.default_rng(seed)
    sizes = [1, *hidden_layers, 1]
    weights = [np.abs(rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b))) for a, b in zip(sizes, sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    net = MonotoneNet(weights, biases, bucket, len(x))
    params = [*net.weights, *net.biases]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    n = len(x)
    n_layers = len(weights)
    for epoch in range(1, epochs + 1):
        pre, acts = net._forward(x)
        out = _sigmoid(acts[-1][:, 0])
        loss = float(np.mean((out - y) ** 2))
        if not np.isfinite(loss):
            raise DivergenceError(epoch)
        grad = (2.0 / n) * (out - y) * out * (1.0 - out)
        delta = grad[:, None]
        grads_w = [None] * n_layers
        grads_b = [None] * n_layers
        for i in range(n_layers - 1, -1, -1):
            grads_w[i] = acts[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ net.weights[i].T) * _sigmoid(pre[i - 1])
        grads = [*grads_w, *grads_b]
        for j, (p, g) in enumerate(zip(params, grads)):
            m[j] = beta1 * m[j] + (1 - beta1) * g
            v[j] = beta2 * v[j] + (1 - beta2) * g * g
            mhat = m[j] / (1 - beta1**epoch)
            vhat = v[j] / (1 - beta2**epoch)
            p -= learning_rate * mhat / (np.sqrt(vhat) + eps)
        for W in net.weights:
            np.maximum(W, 0.0, out=W)
    return net


def mse(curve, pairs) -> float:
    x, y = _as_arrays(pairs)
    return float(np.mean((np.asarray(curve(x)) - y) ** 2))


def compare_mse(pairs_holdout, curve_a, curve_b) -> dict:
    """Holdout MSE of two curves.  ``curve_a`` is the isotonic side and wins ties."""
    x, y = _as_arrays(pairs_holdout)
    if len(x) == 0:
        raise CalibrationError("empty holdout")
    mse_a, mse_b = mse(curve_a, (x, y)), mse(curve_b, (x, y))
    return {"mse_a": mse_a, "mse_b": mse_b, "winner": "a" if mse_a <= mse_b else "b"}


# -- per-move banks ----------------------------------------------------------------


def curve_from_dict(d: dict):
    return IsotonicCurve.from_dict(d) if d["type"] == "isotonic" else MonotoneNet.from_dict(d)


@dataclass
class CalibrationBank:
    """One curve per bucket of ``bucket_width`` White moves (bucket 0 = moves 1..width)."""

    curves: dict[int, object]
    bucket_width: int = 5
    horizon: int = 200
    method: str = "isotonic"
    borrowed: dict[int, int] = field(default_factory=dict)

    def bucket_of(self, t: int) -> int:
        return (max(1, min(int(t), self.horizon)) - 1) // self.bucket_width

    def curve_for(self, t: int):
        return self.curves[self.bucket_of(t)]

    def __call__(self, t: int, x):
        return self.curve_for(t)(x)

    def calibrate(self, t, x):
        """Vectorized over paired arrays of move numbers and raw scores."""
        t = np.atleast_1d(np.asarray(t, dtype=int))
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        buckets = (np.clip(t, 1, self.horizon) - 1) // self.bucket_width
        for b in np.unique(buckets):
            mask = buckets == b
            out[mask] = self.curves[int(b)](x[mask])
        return out

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "method": self.method,
            "bucket_width": self.bucket_width,
            "horizon": self.horizon,
            "borrowed": {str(k): v for k, v in self.borrowed.items()},
            "curves": [c.to_dict() | {"bucket": b} for b, c in sorted(self.curves.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> CalibrationBank:
        curves = {int(c["bucket"]): curve_from_dict(c) for c in d["curves"]}
        return cls(
            curves,
            d["bucket_width"],
            d["horizon"],
            d.get("method", "isotonic"),
            {int(k): v for k, v in d.get("borrowed", {}).items()},
        )

    def save(self, path, extra: dict | None = None) -> None:
        atomic_write_text(path, json.dumps(self.to_dict() | (extra or {})))

    @classmethod
    def load(cls, path) -> CalibrationBank:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def calibration_pairs(dataset: Dataset) -> list[tuple[int, float, float]]:
    """``(t, pw_raw, result)`` for every annotated point."""
    rows = []
    for rec in dataset.records:
        for p in rec.points:
            if p.pw_raw is not None:
                rows.append((p.t, p.pw_raw, rec.result))
    return rows


def build_bank(
    dataset: Dataset,
    method: str = "isotonic",
    bucket_width: int = 5,
    horizon: int = 200,
    min_samples: int = 20,
    net_kwargs: dict | None = None,
) -> CalibrationBank:
    """Fit one curve per move bucket; sparse buckets borrow the nearest populated one.

    Pairs are the weak-side raw score at each White move and the game's result.
    """
    rows = calibration_pairs(dataset)
    if not rows:
        raise CalibrationError("dataset has no annotated points")
    arr = np.array(rows, dtype=float)
    t, x, y = arr[:, 0].astype(int), arr[:, 1], arr[:, 2]
    n_buckets = (horizon - 1) // bucket_width + 1
    buckets = (np.clip(t, 1, horizon) - 1) // bucket_width
    curves: dict[int, object] = {}
    for b in range(n_buckets):
        mask = buckets == b
        if mask.sum() < max(min_samples, 2 if method == "isotonic" else 10):
            continue
        if method == "isotonic":
            curves[b] = fit_isotonic((x[mask], y[mask]), bucket=b)
        elif method in ("monotone-net", "net"):
            curves[b] = fit_monotone_net((x[mask], y[mask]), bucket=b, **(net_kwargs or {}))
        else:
            raise CalibrationError(f"unknown calibration method {method!r}")
    if not curves:
        raise CalibrationError(f"no bucket has {min_samples} samples")
    populated = np.array(sorted(curves))
    borrowed = {}
    for b in range(n_buckets):
        if b not in curves:
            src = int(populated[np.argmin(np.abs(populated - b))])
            curves[b] = curves[src]
            borrowed[b] = src
    return CalibrationBank(curves, bucket_width, horizon, "isotonic" if method == "isotonic" else "monotone-net", borrowed)


def apply_calibration(dataset: Dataset, bank: CalibrationBank) -> Dataset:
    """Copy of ``dataset`` with calibrated ``pw`` / ``ps`` on every annotated point."""
    from dataclasses import replace

    records = []
    for rec in dataset.records:
        points = []
        for p in rec.points:
            q = replace(p)
            if p.pw_raw is not None and p.ps_raw is not None:
                q.pw = float(bank(p.t, p.pw_raw))
                q.ps = float(bank(p.t, p.ps_raw))
            points.append(q)
        records.append(replace(rec, points=points, interventions=[replace(e) for e in rec.interventions]))
    for rec in records:
        for ev in rec.interventions:
            if ev.fired:
                p = rec.point_at(ev.t)
                if p is not None and p.gap is not None:
                    ev.gap = p.gap
    meta = dict(dataset.source_meta)
    meta["calibration"] = {"method": bank.method, "bucket_width": bank.bucket_width}
    return Dataset(dataset.kind, records, meta)
