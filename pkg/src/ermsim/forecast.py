"""Incident likelihood models over (cell, window) rows and their evaluation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import expit, gammaln

from .errors import DegenerateLabels, InvalidArgument
from .incidents import ClusterAssignment, Dataset


class Prediction(NamedTuple):
    p_incident: float
    expected_count: float


@dataclass(frozen=True)
class ForecastMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    spatial_correlation: float

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "spatial_correlation": self.spatial_correlation,
        }


@dataclass(frozen=True, eq=False)
class Scaling:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Scaling":
        mean = X.mean(axis=0) if len(X) else np.zeros(X.shape[1])
        std = X.std(axis=0) if len(X) else np.ones(X.shape[1])
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std

    def fold(self, w: np.ndarray, b: float) -> tuple[np.ndarray, float]:
        """Weights acting on raw features that reproduce ``w @ apply(x) + b``."""
        return w / self.std, float(b - np.sum(w * self.mean / self.std))


@dataclass(frozen=True, eq=False)
class ForecastModel:
    variant: str
    feature_names: tuple[str, ...]

    @property
    def arity(self) -> int:
        return len(self.feature_names)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.arity:
            raise InvalidArgument(f"model expects {self.arity} features, got {X.shape[1]}")
        return X

    def predict_many(
        self, X: np.ndarray, cells: np.ndarray, clusters: ClusterAssignment | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)


@dataclass(frozen=True, eq=False)
class FrequencyModel(ForecastModel):
    rates: dict[int, float] = field(default_factory=dict)
    overall: float = 0.0

    def predict_many(self, X, cells, clusters=None):
        self._check(X)
        if self.rates and clusters is None:
            raise InvalidArgument("frequency model needs the cluster assignment it was fit with")
        lookup = clusters.cluster_of if clusters is not None else {}
        p = np.array([self.rates.get(lookup.get(int(c), -1), self.overall) for c in cells], dtype=float)
        return p, p.copy()

    def to_json(self):
        return {
            "variant": self.variant,
            "feature_names": list(self.feature_names),
            "scaling": None,
            "weights": {"rates": {str(k): v for k, v in sorted(self.rates.items())}, "overall": self.overall},
        }


@dataclass(frozen=True, eq=False)
class LogisticModel(ForecastModel):
    scaling: Scaling = None  # type: ignore[assignment]
    weights: np.ndarray = None  # type: ignore[assignment]
    bias: float = 0.0
    loss_history: tuple[float, ...] = ()

    def predict_many(self, X, cells=None, clusters=None):
        X = self._check(X)
        p = expit(self.scaling.apply(X) @ self.weights + self.bias)
        return p, p.copy()

    def predict_raw(self, X: np.ndarray) -> np.ndarray:
        """Probabilities from weights folded onto unstandardized features."""
        w, b = self.scaling.fold(self.weights, self.bias)
        return expit(self._check(X) @ w + b)

    def to_json(self):
        return {
            "variant": self.variant,
            "feature_names": list(self.feature_names),
            "scaling": {"mean": self.scaling.mean.tolist(), "std": self.scaling.std.tolist()},
            "weights": {"w": self.weights.tolist(), "b": self.bias},
        }


@dataclass(frozen=True, eq=False)
class ZIPModel(ForecastModel):
    """Zero-inflated Poisson: ``pi = sigmoid(zero head)``, ``lambda = exp(rate head)``."""

    scaling: Scaling = None  # type: ignore[assignment]
    zero_weights: np.ndarray = None  # type: ignore[assignment]
    zero_bias: float = 0.0
    rate_weights: np.ndarray = None  # type: ignore[assignment]
    rate_bias: float = 0.0
    loglik_history: tuple[float, ...] = ()

    def components(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        Xs = self.scaling.apply(self._check(X))
        pi = expit(Xs @ self.zero_weights + self.zero_bias)
        lam = np.exp(Xs @ self.rate_weights + self.rate_bias)
        return pi, lam

    def predict_many(self, X, cells=None, clusters=None):
        pi, lam = self.components(X)
        return (1.0 - pi) * -np.expm1(-lam), (1.0 - pi) * lam

    def to_json(self):
        return {
            "variant": self.variant,
            "feature_names": list(self.feature_names),
            "scaling": {"mean": self.scaling.mean.tolist(), "std": self.scaling.std.tolist()},
            "weights": {
                "zero_w": self.zero_weights.tolist(),
                "zero_b": self.zero_bias,
                "rate_w": self.rate_weights.tolist(),
                "rate_b": self.rate_bias,
            },
        }


def load_model(path: str | Path) -> ForecastModel:
    with open(path) as fh:
        return model_from_json(json.load(fh))


def model_from_json(data: dict) -> ForecastModel:
    names = tuple(data["feature_names"])
    w = data["weights"]
    sc = data.get("scaling")
    scaling = Scaling(np.array(sc["mean"], dtype=float), np.array(sc["std"], dtype=float)) if sc else None
    variant = data["variant"]
    if variant == "frequency":
        return FrequencyModel("frequency", names, {int(k): float(v) for k, v in w["rates"].items()}, float(w["overall"]))
    if variant == "logistic":
        return LogisticModel("logistic", names, scaling, np.array(w["w"], dtype=float), float(w["b"]))
    if variant == "zip":
        return ZIPModel(
            "zip", names, scaling,
            np.array(w["zero_w"], dtype=float), float(w["zero_b"]),
            np.array(w["rate_w"], dtype=float), float(w["rate_b"]),
        )
    raise InvalidArgument(f"unknown model variant {variant!r}")


def predict(model: ForecastModel, features, cell: int, clusters: ClusterAssignment | None = None) -> Prediction:
    p, count = model.predict_many(np.atleast_2d(features), np.array([cell]), clusters)
    return Prediction(float(p[0]), float(count[0]))


def fit_frequency(dataset: Dataset, clusters: ClusterAssignment) -> FrequencyModel:
    if len(dataset) == 0:
        raise InvalidArgument("cannot fit on an empty dataset")
    y = dataset.binary_labels
    row_cl = clusters.row_clusters(dataset.cells)
    rates = {}
    for k in range(clusters.m):
        m = row_cl == k
        if m.any():
            rates[k] = float(y[m].sum() / m.sum())
    return FrequencyModel("frequency", dataset.feature_names, rates, float(y.sum() / len(y)))


def logistic_loss_grad(w: np.ndarray, b: float, Xs: np.ndarray, y: np.ndarray, l2: float = 0.0) -> tuple[float, np.ndarray, float]:
    """Mean negative log-likelihood plus ``l2/2 * |w|^2`` and its gradient."""
    z = Xs @ w + b
    # -log sigmoid(z) = logaddexp(0, -z); -log(1 - sigmoid(z)) = logaddexp(0, z)
    nll = np.mean(y * np.logaddexp(0.0, -z) + (1 - y) * np.logaddexp(0.0, z))
    r = expit(z) - y
    gw = Xs.T @ r / len(y) + l2 * w
    gb = float(np.mean(r))
    return float(nll + 0.5 * l2 * np.dot(w, w)), gw, gb


def fit_logistic(dataset: Dataset, lr: float = 0.5, epochs: int = 300, l2: float = 0.0, seed: int = 0) -> LogisticModel:
    """Full-batch gradient descent on standardized features."""
    y = dataset.binary_labels.astype(float)
    if len(y) == 0 or y.min() == y.max():
        raise DegenerateLabels("logistic regression needs both positive and negative rows")
    if not lr > 0 or epochs < 1 or l2 < 0:
        raise InvalidArgument("need lr > 0, epochs >= 1, l2 >= 0")
    scaling = Scaling.fit(dataset.features)
    Xs = scaling.apply(dataset.features)
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, Xs.shape[1])
    b = 0.0
    history = []
    for _ in range(epochs):
        loss, gw, gb = logistic_loss_grad(w, b, Xs, y, l2)
        history.append(loss)
        w = w - lr * gw
        b = b - lr * gb
    history.append(logistic_loss_grad(w, b, Xs, y, l2)[0])
    return LogisticModel("logistic", dataset.feature_names, scaling, w, float(b), tuple(history))


def zip_loglik(y: np.ndarray, eta_zero: np.ndarray, eta_rate: np.ndarray) -> float:
    """Observed-data log-likelihood of counts under the zero-inflated Poisson."""
    log_pi = -np.logaddexp(0.0, -eta_zero)
    log_not_pi = -np.logaddexp(0.0, eta_zero)
    lam = np.exp(eta_rate)
    zero = y == 0
    ll_zero = np.logaddexp(log_pi[zero], log_not_pi[zero] - lam[zero])
    yp = y[~zero]
    ll_pos = log_not_pi[~zero] + yp * eta_rate[~zero] - lam[~zero] - gammaln(yp + 1.0)
    return float(ll_zero.sum() + ll_pos.sum())


def _newton_ascent(objective, grad_hess, theta: np.ndarray, max_iter: int = 25, tol: float = 1e-8) -> np.ndarray:
    """Damped Newton ascent that never accepts a step lowering ``objective``.

    ``grad_hess`` returns the gradient and the negated (positive semidefinite)
    Hessian.
    """
    current = objective(theta)
    for _ in range(max_iter):
        g, H = grad_hess(theta)
        if np.linalg.norm(g) < tol:
            break
        ridge = 1e-9 * max(1.0, float(np.trace(H)) / len(g))
        step = np.linalg.solve(H + ridge * np.eye(len(g)), g)
        t = 1.0
        while t > 1e-12:
            cand = theta + t * step
            val = objective(cand)
            if np.isfinite(val) and val >= current:
                break
            t *= 0.5
        else:
            break
        gain = val - current
        theta, current = cand, val
        if gain <= 1e-14 * max(1.0, abs(current)):
            break
    return theta


def fit_zip(dataset: Dataset, epochs: int = 50, seed: int = 0) -> ZIPModel:
    """Fit a zero-inflated Poisson by EM on standardized features.

    The E-step gives each zero its posterior probability of being structural.
    The M-step runs Newton ascent on the logistic zero head against those
    soft targets, and on the log-link Poisson head weighted by the
    complementary probabilities.
    """
    y = dataset.labels.astype(float)
    if len(y) == 0 or not np.any(y > 0):
        raise DegenerateLabels("zero-inflated Poisson needs at least one nonzero count")
    scaling = Scaling.fit(dataset.features)
    Xs = scaling.apply(dataset.features)
    Xt = np.hstack([Xs, np.ones((len(y), 1))])
    d = Xt.shape[1]
    rng = np.random.default_rng(seed)

    mean_y = y.mean()
    frac_zero = np.mean(y == 0)
    excess = (frac_zero - math.exp(-mean_y)) / max(1e-12, 1.0 - math.exp(-mean_y))
    pi0 = min(0.99, max(0.01, excess))
    gz = np.zeros(d)
    gr = np.zeros(d)
    gz[:-1] = rng.normal(0.0, 0.01, d - 1)
    gz[-1] = math.log(pi0 / (1 - pi0))
    gr[-1] = math.log(mean_y / (1 - pi0))
    zero = y == 0

    history = [zip_loglik(y, Xt @ gz, Xt @ gr)]
    for _ in range(epochs):
        eta_z, eta_r = Xt @ gz, Xt @ gr
        log_pi = -np.logaddexp(0.0, -eta_z)
        log_rest = -np.logaddexp(0.0, eta_z) - np.exp(eta_r)
        resp = np.where(zero, np.exp(log_pi - np.logaddexp(log_pi, log_rest)), 0.0)
        keep = 1.0 - resp

        def q_zero(theta):
            e = Xt @ theta
            return float(np.sum(-resp * np.logaddexp(0.0, -e) - keep * np.logaddexp(0.0, e)))

        def gh_zero(theta):
            p = expit(Xt @ theta)
            return Xt.T @ (resp - p), (Xt * (p * (1 - p))[:, None]).T @ Xt

        def q_rate(theta):
            e = Xt @ theta
            return float(np.sum(keep * (y * e - np.exp(e))))

        def gh_rate(theta):
            lam = np.exp(Xt @ theta)
            return Xt.T @ (keep * (y - lam)), (Xt * (keep * lam)[:, None]).T @ Xt

        gz = _newton_ascent(q_zero, gh_zero, gz)
        gr = _newton_ascent(q_rate, gh_rate, gr)
        history.append(zip_loglik(y, Xt @ gz, Xt @ gr))

    return ZIPModel(
        "zip", dataset.feature_names, scaling,
        gz[:-1].copy(), float(gz[-1]), gr[:-1].copy(), float(gr[-1]), tuple(history),
    )


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation, defined as 0 when either side is constant."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2:
        return 0.0
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(np.dot(da, da)), math.sqrt(np.dot(db, db))
    if sa == 0.0 or sb == 0.0:
        return 0.0
    return float(np.dot(da, db) / (sa * sb))


def _per_cell_sums(cells: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    keys = np.unique(cells)
    sums = np.array([math.fsum(values[cells == c]) for c in keys])
    return keys, sums


def classification_metrics(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, float, float]:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    acc = float(np.mean(pred == truth)) if len(pred) else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return acc, precision, recall, f1


def evaluate(
    model: ForecastModel, test: Dataset, clusters: ClusterAssignment | None = None, threshold: float = 0.5
) -> ForecastMetrics:
    """Classification metrics at ``threshold`` plus spatial correlation.

    The spatial correlation compares, across cells, the summed predicted
    incident probability with the summed observed positive windows.
    """
    if len(test) == 0:
        raise InvalidArgument("cannot evaluate on an empty dataset")
    order = np.lexsort((test.windows, test.cells))
    X, cells, truth = test.features[order], test.cells[order], test.binary_labels[order]
    p, _ = model.predict_many(X, cells, clusters)
    acc, prec, rec, f1 = classification_metrics(p >= threshold, truth == 1)
    _, pred_sum = _per_cell_sums(cells, p)
    _, true_sum = _per_cell_sums(cells, truth.astype(float))
    return ForecastMetrics(acc, prec, rec, f1, pearson(pred_sum, true_sum))
