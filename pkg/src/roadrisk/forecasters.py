"""Incident-likelihood models: empirical naive baseline, logistic regression, zero-inflated Poisson.

All models map a cell's feature vector to P(at least one incident). Logistic
and ZIP models work on z-scored features whose statistics come from the
training fold and travel with the fitted :class:`ModelParams`.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .domain import CellRecord, ModelParams
from .errors import ConvergenceError, DataError, SchemaError

log = logging.getLogger(__name__)

MODEL_KINDS = ("Naive", "LR", "ZIP")
NAIVE_KEYS = ("segment_id", "window_index", "weekend")
THRESHOLD_GRID = np.arange(1, 100) / 100.0
FORMAT_HEADER = "roadrisk-model v1"


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# --------------------------------------------------------------------------- design matrices


def standardization(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


def design(X: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    Z = np.empty((X.shape[0], X.shape[1] + 1))
    Z[:, 0] = 1.0
    Z[:, 1:] = (X - mean) / std
    return Z


def _features(data, names: Sequence[str]) -> np.ndarray:
    if isinstance(data, CellRecord):
        got = tuple(k for k, _ in data.features)
        if set(got) != set(names):
            raise SchemaError(f"record features {got} do not match model schema {tuple(names)}")
        d = dict(data.features)
        return np.array([[d[n] for n in names]], dtype=float)
    missing = [n for n in names if n not in data.columns]
    if missing:
        raise SchemaError(f"missing feature columns {missing}")
    return data[list(names)].to_numpy(dtype=float)


# --------------------------------------------------------------------------- logistic regression


def logistic_loss(w: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> float:
    """Mean negative log-likelihood plus l2 * ||w[1:]||^2 (intercept unpenalized)."""
    z = X @ w
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + l2 * np.dot(w[1:], w[1:]))


def logistic_grad(w: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> np.ndarray:
    g = X.T @ (sigmoid(X @ w) - y) / len(y)
    g[1:] += 2.0 * l2 * w[1:]
    return g


def _gd_logistic(X, y, l2, tol=1e-8, max_iter=500):
    """Full-batch gradient descent with Armijo backtracking.

    The first trial step of each iteration is the Barzilai-Borwein estimate;
    backtracking halves it until the sufficient-decrease test passes, so the
    loss sequence never increases.
    """
    n, d = X.shape
    w = np.zeros(d)
    ybar = float(np.clip(y.mean(), 1e-12, 1 - 1e-12))
    w[0] = math.log(ybar / (1 - ybar))
    loss = logistic_loss(w, X, y, l2)
    g = logistic_grad(w, X, y, l2)
    if not np.isfinite(loss) or not np.all(np.isfinite(g)):
        raise ConvergenceError("non-finite loss at iteration 0")
    trace = [loss]
    step = 1.0
    for it in range(1, max_iter + 1):
        gg = float(g @ g)
        if gg == 0.0:
            break
        for _ in range(60):
            w_new = w - step * g
            loss_new = logistic_loss(w_new, X, y, l2)
            if np.isfinite(loss_new) and loss_new <= loss - 1e-4 * step * gg:
                break
            step *= 0.5
        else:
            break  # no decrease possible at machine precision
        g_new = logistic_grad(w_new, X, y, l2)
        if not np.all(np.isfinite(g_new)):
            raise ConvergenceError(f"non-finite gradient at iteration {it}")
        s = w_new - w
        yv = g_new - g
        sy = float(s @ yv)
        step = float(s @ s) / sy if sy > 0 else step * 2.0
        rel = abs(loss - loss_new) / max(abs(loss), 1e-12)
        w, g, loss = w_new, g_new, loss_new
        trace.append(loss)
        if rel < tol:
            break
    return w, trace


# --------------------------------------------------------------------------- Poisson / ZIP


def _lgamma_counts(y: np.ndarray) -> np.ndarray:
    table = np.array([math.lgamma(k + 1.0) for k in range(int(y.max(initial=0)) + 1)])
    return table[y.astype(int)]


def _eta(X, beta):
    return np.clip(X @ beta, -30.0, 30.0)


def poisson_loglik(beta, X, y, lgam=None, weights=None) -> float:
    eta = _eta(X, beta)
    lgam = _lgamma_counts(y) if lgam is None else lgam
    terms = y * eta - np.exp(eta) - lgam
    return float(np.sum(terms if weights is None else weights * terms))


def _weighted_poisson_newton(X, y, weights, beta, max_steps=25, tol=1e-12):
    """Maximize sum w_i (y_i eta_i - exp(eta_i)) by damped Newton steps."""

    def q(b):
        e = _eta(X, b)
        return float(np.sum(weights * (y * e - np.exp(e))))

    cur = q(beta)
    for _ in range(max_steps):
        lam = np.exp(_eta(X, beta))
        beta, cur, improvement = _newton_step(X, y, weights, beta, lam, cur, q)
        if improvement <= tol * max(1.0, abs(cur)):
            break
    return beta


def _newton_step(X, y, weights, beta, lam, cur, q):
    """One damped Newton step on the weighted Poisson objective ``q``.

    Halves the step until ``q`` does not decrease; returns (beta, q, gain),
    with a zero gain and the old beta when no step helps.
    """
    d = X.shape[1]
    g = X.T @ (weights * (y - lam))
    H = X.T @ (X * (weights * lam)[:, None]) + 1e-10 * np.eye(d)
    try:
        direction = np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        direction = np.linalg.lstsq(H, g, rcond=None)[0]
    t = 1.0
    for _ in range(40):
        cand = beta + t * direction
        new = q(cand)
        if np.isfinite(new) and new >= cur:
            return cand, new, new - cur
        t *= 0.5
    return beta, cur, 0.0


def fit_poisson(X, y, max_steps=100, weights=None):
    beta = np.zeros(X.shape[1])
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    beta[0] = math.log(max(float(np.sum(w * y) / np.sum(w)), 1e-8))
    return _weighted_poisson_newton(X, np.asarray(y, dtype=float), w, beta, max_steps=max_steps)


def _zip_terms(eta, lam, pi, y, zero, lgam):
    out = np.empty(len(y))
    out[zero] = np.log(pi + (1 - pi) * np.exp(-lam[zero]))
    nz = ~zero
    out[nz] = math.log1p(-pi) + y[nz] * eta[nz] - lam[nz] - lgam[nz]
    return out


def zip_loglik(beta, pi, X, y, lgam=None, weights=None) -> float:
    """Observed-data log-likelihood of the zero-inflated Poisson model."""
    y = np.asarray(y)
    eta = _eta(X, beta)
    lgam = _lgamma_counts(y) if lgam is None else lgam
    terms = _zip_terms(eta, np.exp(eta), pi, y, y == 0, lgam)
    return float(np.sum(terms if weights is None else weights * terms))


class _ZipEM:
    """One generalized EM map for the ZIP model on fixed data.

    The M-step for beta is a single damped Newton step, which still raises
    the expected complete-data objective, so no map application can lower
    the observed log-likelihood.
    """

    def __init__(self, X, y, weights):
        self.X = X
        self.y = y
        self.yf = y.astype(float)
        self.zero = y == 0
        self.lgam = _lgamma_counts(y)
        self.m = weights
        self.total = float(weights.sum())

    def state(self, beta, pi):
        eta = _eta(self.X, beta)
        lam = np.exp(eta)
        ll = float(self.m @ _zip_terms(eta, lam, pi, self.y, self.zero, self.lgam))
        return beta, pi, eta, lam, ll

    def step(self, st):
        beta, pi, eta, lam, _ = st
        resp = np.zeros(len(self.y))
        resp[self.zero] = pi / (pi + (1 - pi) * np.exp(-lam[self.zero]))
        pi = float(np.clip((self.m @ resp) / self.total, 1e-10, 1 - 1e-10))
        w = self.m * (1.0 - resp)
        X, yf = self.X, self.yf

        def q(b):
            e = _eta(X, b)
            return float(w @ (yf * e - np.exp(e)))

        beta, _, _ = _newton_step(X, yf, w, beta, lam, float(w @ (yf * eta - lam)), q)
        return self.state(beta, pi)


def _pack(st):
    return np.append(st[0], math.log(st[1] / (1 - st[1])))


def _em_zip(X, y, beta, pi, tol, max_iter, weights=None):
    """EM with squared extrapolation (SQUAREM) and a monotone safeguard.

    Each cycle takes two plain EM steps, extrapolates along them, and applies
    one more EM step to the extrapolated point. That point is kept only when
    its log-likelihood is at least the plain two-step value, so the recorded
    trace never decreases. ``max_iter`` bounds the number of EM map
    applications; convergence is tested on the change in log-likelihood per
    unit of weight over a cycle.
    """
    m = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    em = _ZipEM(X, y, m)
    cur = em.state(beta, pi)
    trace = [cur[4]]
    used = 0
    while used < max_iter:
        s1 = em.step(cur)
        trace.append(s1[4])
        used += 1
        if used >= max_iter:
            cur = s1
            break
        s2 = em.step(s1)
        trace.append(s2[4])
        used += 1
        best = s2
        t0, t1, t2 = _pack(cur), _pack(s1), _pack(s2)
        r = t1 - t0
        v = t2 - 2 * t1 + t0
        nv = float(np.linalg.norm(v))
        if nv > 0 and used < max_iter:
            alpha = min(-1.0, -float(np.linalg.norm(r)) / nv)
            t = t0 - 2 * alpha * r + alpha * alpha * v
            if np.all(np.isfinite(t)):
                pi_x = float(np.clip(1 / (1 + math.exp(-np.clip(t[-1], -700, 700))), 1e-10, 1 - 1e-10))
                s3 = em.step(em.state(t[:-1], pi_x))
                used += 1
                if np.isfinite(s3[4]) and s3[4] >= s2[4]:
                    best = s3
                    trace.append(s3[4])
        if not np.isfinite(best[4]):
            raise ConvergenceError(f"non-finite ZIP log-likelihood after {used} EM steps")
        done = abs(best[4] - cur[4]) / em.total < tol
        cur = best
        if done:
            break
    return cur[0], cur[1], trace


def _collapse(X, y):
    """Merge identical (row, count) pairs into frequency weights."""
    rows = np.column_stack([X, y.astype(float)])
    uniq, counts = np.unique(rows, axis=0, return_counts=True)
    return uniq[:, :-1], uniq[:, -1].astype(int), counts.astype(float)


def fit_zip(X, y, tol=1e-8, max_iter=200, weights=None):
    """EM for a ZIP model with constant zero-state probability.

    ``weights`` are frequency weights; without them, duplicate rows (as left
    by over-sampling) are merged first, which leaves the likelihood unchanged.
    """
    y = np.asarray(y).astype(int)
    if weights is None:
        X, y, weights = _collapse(np.asarray(X, dtype=float), y)
    w = np.asarray(weights, dtype=float)
    beta0 = fit_poisson(X, y, weights=w)
    lam0 = np.exp(_eta(X, beta0))
    p0 = float(w @ (y == 0) / w.sum())
    e0 = float(w @ np.exp(-lam0) / w.sum())
    pi0 = float(np.clip((p0 - e0) / max(1 - e0, 1e-12), 0.01, 0.99))
    beta, pi, trace = _em_zip(X, y, beta0, pi0, tol, max_iter, w)
    ll_pois = poisson_loglik(beta0, X, y, weights=w)
    if trace[-1] < ll_pois:
        # start next to the Poisson fit; monotone EM then cannot end below it
        beta2, pi2, trace2 = _em_zip(X, y, beta0, 1e-6, tol, max_iter, w)
        if trace2[-1] > trace[-1]:
            beta, pi, trace = beta2, pi2, trace2
    return beta, pi, trace


# --------------------------------------------------------------------------- public API


def fit(kind: str, frame: pd.DataFrame, features: Sequence[str], l2: float = 1e-4,
        tol: float = 1e-8, max_iter: Optional[int] = None, seed: int = 0) -> ModelParams:
    """Train one model on the given cell frame.

    ``seed`` is accepted for interface symmetry; all three fits are
    deterministic.
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    features = tuple(features)
    if len(frame) == 0:
        raise DataError("empty training set")
    y = frame["label"].to_numpy()
    if kind in ("Naive", "LR") and (y.min() == y.max()):
        raise DataError(f"{kind}: training data holds a single class")
    if kind == "Naive":
        return _fit_naive(frame, features)
    X = _features(frame, features)
    mean, std = standardization(X)
    Z = design(X, mean, std)
    if kind == "LR":
        w, trace = _gd_logistic(Z, y.astype(float), l2, tol, max_iter or 500)
        return ModelParams("LR", features, mean, std, w, l2=l2, loss_trace=trace)
    counts = frame["incident_count"].to_numpy()
    beta, pi, trace = fit_zip(Z, counts, tol, max_iter or 200)
    return ModelParams("ZIP", features, mean, std, beta, pi=pi, loss_trace=trace)


def _fit_naive(frame, features):
    rates = frame.groupby(list(NAIVE_KEYS), sort=True)["label"].mean()
    buckets = {(str(s), int(w), int(we)): float(r) for (s, w, we), r in rates.items()}
    empty = np.zeros(0)
    return ModelParams("Naive", tuple(features), empty, empty, empty,
                       buckets=buckets, fallback=float(frame["label"].mean()))


def predict_proba(model: ModelParams, data) -> np.ndarray | float:
    """P(at least one incident) for a frame (array out) or a single CellRecord (float out)."""
    single = isinstance(data, CellRecord)
    if model.kind == "Naive":
        if single:
            key = (data.segment_id, data.window.window_index, int(data.feature("weekend")))
            return model.buckets.get(key, model.fallback)
        missing = [c for c in NAIVE_KEYS if c not in data.columns]
        if missing:
            raise SchemaError(f"naive model needs columns {missing}")
        keys = zip(data["segment_id"].astype(str), data["window_index"].astype(int), data["weekend"].astype(int))
        return np.array([model.buckets.get(k, model.fallback) for k in keys], dtype=float)
    X = _features(data, model.feature_names)
    Z = design(X, model.mean, model.std)
    if model.kind == "LR":
        p = sigmoid(Z @ model.coef)
    else:
        lam = np.exp(_eta(Z, model.coef))
        p = (1.0 - model.pi) * -np.expm1(-lam)
    return float(p[0]) if single else p


def best_threshold(scores, labels, grid=THRESHOLD_GRID) -> float:
    """Grid threshold maximizing F1 of (score >= t); ties go to the smaller t."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    tp = len(pos) - np.searchsorted(pos, grid, side="left")
    fp = len(neg) - np.searchsorted(neg, grid, side="left")
    fn = len(pos) - tp
    den = 2 * tp + fp + fn
    f1 = np.where(den > 0, 2 * tp / np.maximum(den, 1), 0.0)
    return float(grid[int(np.argmax(f1))])


def tune_threshold(model: ModelParams, frame: pd.DataFrame) -> float:
    labels = frame["label"].to_numpy()
    if len(labels) == 0 or labels.min() == labels.max():
        warnings.warn("validation set holds a single class; using threshold 0.5")
        return 0.5
    return best_threshold(predict_proba(model, frame), labels)


def with_threshold(model: ModelParams, tau: float) -> ModelParams:
    return replace(model, threshold=tau)


def classify(model: ModelParams, data):
    p = predict_proba(model, data)
    if isinstance(p, float):
        return int(p >= model.threshold)
    return (p >= model.threshold).astype(int)


# --------------------------------------------------------------------------- serialization


def _vec(v) -> str:
    return " ".join(repr(float(x)) for x in v)


def dumps(model: ModelParams) -> str:
    lines = [FORMAT_HEADER, f"kind = {model.kind}", f"features = {','.join(model.feature_names)}",
             f"threshold = {model.threshold!r}", f"l2 = {model.l2!r}"]
    if model.kind != "Naive":
        lines += [f"mean = {_vec(model.mean)}", f"std = {_vec(model.std)}", f"coef = {_vec(model.coef)}"]
    if model.pi is not None:
        lines.append(f"pi = {model.pi!r}")
    if model.kind == "Naive":
        lines.append(f"fallback = {model.fallback!r}")
        for (s, w, we), r in sorted(model.buckets.items()):
            lines.append(f"bucket {s}|{w}|{we} = {r!r}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> ModelParams:
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_HEADER:
        raise DataError("not a roadrisk model file (bad header)")
    kv, buckets = {}, {}
    for line in lines[1:]:
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        if key.startswith("bucket "):
            s, w, we = key[len("bucket "):].rsplit("|", 2)
            buckets[(s, int(w), int(we))] = float(value)
        else:
            kv[key.strip()] = value.strip()
    vec = lambda k: np.array([float(x) for x in kv[k].split()]) if kv.get(k) else np.zeros(0)  # noqa: E731
    feats = tuple(f for f in kv.get("features", "").split(",") if f)
    return ModelParams(
        kind=kv["kind"], feature_names=feats, mean=vec("mean"), std=vec("std"), coef=vec("coef"),
        threshold=float(kv["threshold"]), l2=float(kv.get("l2", 0.0)),
        pi=float(kv["pi"]) if "pi" in kv else None, buckets=buckets,
        fallback=float(kv["fallback"]) if "fallback" in kv else None,
    )


def save_model(model: ModelParams, path) -> None:
    Path(path).write_text(dumps(model))


def load_model(path) -> ModelParams:
    return loads(Path(path).read_text())
