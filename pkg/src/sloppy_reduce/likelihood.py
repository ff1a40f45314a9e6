"""Gaussian i.i.d. likelihood and multi-start maximum likelihood estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from ._runtime import map_rows, n_workers, rng
from .data import Dataset
from .errors import OptimizationError, ShapeError
from .params import logit_inverse, logit_transform

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LogLikelihoodValue:
    value: float
    converged: bool


def gaussian_loglik(predictions, observed, sigma) -> np.ndarray:
    """Row-wise Gaussian log-likelihood of a stack of prediction vectors.

    ``predictions`` has shape ``(m, n_d)`` (or ``(n_d,)``), ``sigma`` is a
    scalar or one value per row. Rows with ``sigma <= 0`` get ``-inf``.
    """
    pred = np.atleast_2d(np.asarray(predictions, dtype=float))
    y = np.asarray(observed, dtype=float)
    if pred.shape[-1] != y.shape[0]:
        raise ShapeError(f"{pred.shape[-1]} predictions for {y.shape[0]} observations")
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), pred.shape[:1])
    n_d = y.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        ss = np.sum((pred - y) ** 2, axis=-1)
        ll = -n_d * (HALF_LOG_2PI + np.log(sigma)) - ss / (2.0 * sigma**2)
    return np.where((sigma > 0) & np.isfinite(ll), ll, -np.inf)


def loglik_batch(model, thetas, dataset: Dataset) -> np.ndarray:
    """Log-likelihood of full parameter vectors (noise included), row-wise.

    Non-converged model evaluations map to ``-inf``.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if thetas.shape[1] != model.space.n_params:
        raise ShapeError(
            f"expected {model.space.n_params} parameters (noise included), got {thetas.shape[1]}"
        )
    sig_col = model.space.noise_index

    def one_chunk(chunk):
        ev = model.predict_batch(chunk, dataset.conditions)
        ll = gaussian_loglik(ev.predictions, dataset.observed, chunk[:, sig_col])
        return np.where(ev.converged, ll, -np.inf)

    return map_rows(one_chunk, thetas)


def log_likelihood(model, theta, dataset: Dataset) -> LogLikelihoodValue:
    theta = np.asarray(theta, dtype=float)
    sigma = theta[model.space.noise_index]
    if not sigma > 0:
        raise ValueError("noise parameter must be positive")
    ev = model.predict(theta, dataset.conditions)
    if not ev.converged:
        return LogLikelihoodValue(-math.inf, False)
    return LogLikelihoodValue(float(gaussian_loglik(ev.predictions, dataset.observed, sigma)[0]), True)


@dataclass(frozen=True)
class MleResult:
    theta_hat: np.ndarray
    loglik: float
    start_index: int
    optimizer_converged: bool
    retained: bool = False
    n_iter: int = 0
    grad_norm: float = math.nan
    names: tuple = field(default=(), compare=False)

    def to_json(self) -> dict:
        return {
            "theta": {n: float(v) for n, v in zip(self.names, self.theta_hat)},
            "loglik": float(self.loglik) if math.isfinite(self.loglik) else None,
            "start_index": int(self.start_index),
            "retained": bool(self.retained),
            "optimizer_converged": bool(self.optimizer_converged),
        }

    @classmethod
    def from_json(cls, doc: dict, names) -> "MleResult":
        theta = np.array([float(doc["theta"][n]) for n in names])
        ll = doc.get("loglik")
        return cls(
            theta,
            -math.inf if ll is None else float(ll),
            int(doc["start_index"]),
            bool(doc.get("optimizer_converged", True)),
            bool(doc.get("retained", False)),
            names=tuple(names),
        )


PENALTY = 1e30


def _negloglik_and_grad(model, dataset, lower, upper, h=1e-6):
    d = lower.shape[0]
    eye = np.eye(d)

    def value(z):
        theta = logit_inverse(z, lower, upper)
        ll = loglik_batch(model, theta[None], dataset)[0]
        return -ll if math.isfinite(ll) else PENALTY

    def grad(z):
        # central differences, all 2d points in one model call
        pts = np.concatenate([z + h * eye, z - h * eye])
        theta = logit_inverse(pts, lower, upper)
        ll = loglik_batch(model, theta, dataset)
        if not np.all(np.isfinite(ll)):
            return np.zeros(d)
        return -(ll[:d] - ll[d:]) / (2.0 * h)

    return value, grad


def draw_starts(model, dataset, n_starts: int, seed: int, max_tries: int = 1000):
    """Prior draws (uniform on the bounds) that the model can evaluate."""
    space = model.space
    lo, hi = space.lower, space.upper
    starts = []
    for i in range(n_starts):
        g = rng(seed, 1, i)
        for _ in range(max_tries):
            theta = g.uniform(lo, hi)
            if space.contains(theta) and math.isfinite(loglik_batch(model, theta[None], dataset)[0]):
                break
        else:
            raise OptimizationError(f"start {i}: no evaluable prior draw in {max_tries} tries")
        starts.append(theta)
    return np.array(starts)


def local_mle(model, dataset, theta0, start_index=0, gtol=1e-6, maxiter=500) -> MleResult:
    """Quasi-Newton (BFGS) ascent of the log-likelihood in logit coordinates."""
    space = model.space
    lo, hi = space.lower, space.upper
    value, grad = _negloglik_and_grad(model, dataset, lo, hi)
    z0 = logit_transform(theta0, lo, hi)
    res = minimize(value, z0, jac=grad, method="BFGS",
                   options={"gtol": gtol, "maxiter": maxiter, "norm": np.inf})
    g = grad(res.x)
    gnorm = float(np.max(np.abs(g)))
    theta = logit_inverse(res.x, lo, hi)
    ll = -float(res.fun) if res.fun < PENALTY else -math.inf
    converged = bool(math.isfinite(ll) and (res.success or gnorm <= gtol))
    return MleResult(theta, ll, start_index, converged, False, int(res.nit), gnorm, tuple(space.names))


def multi_start_mle(model, dataset, n_starts=100, seed=0, n_retained=5) -> list[MleResult]:
    """Local MLEs from ``n_starts`` prior-drawn starting points.

    Returns every result sorted by log-likelihood (converged runs first, ties
    going to the lower start index); the first ``n_retained`` converged runs
    are flagged ``retained``.

    Raises
    ------
    OptimizationError
        If no start converges.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    starts = draw_starts(model, dataset, n_starts, seed)
    jobs = list(enumerate(starts))
    with ThreadPoolExecutor(max_workers=n_workers()) as pool:
        results = list(pool.map(lambda job: local_mle(model, dataset, job[1], job[0]), jobs))
    results.sort(key=lambda r: (not r.optimizer_converged, -r.loglik, r.start_index))
    if not results[0].optimizer_converged:
        raise OptimizationError(f"none of {n_starts} optimizer starts converged")
    out = []
    kept = 0
    for r in results:
        keep = r.optimizer_converged and kept < n_retained
        kept += keep
        out.append(replace(r, retained=keep))
    return out


class MLECalibrator(RegressorMixin, BaseEstimator):
    """Multi-start maximum likelihood calibration of a mechanistic model.

    Parameters
    ----------
    model : MechanisticModel
    n_starts : int, default=100
    n_retained : int, default=5
        Number of best local optima kept for downstream analysis.
    seed : int, default=0

    Attributes
    ----------
    results_ : list of MleResult
        All local optima, best first.
    theta_ : ndarray
        Best parameter vector (noise included).
    loglik_ : float
    """

    def __init__(self, model=None, n_starts=100, n_retained=5, seed=0):
        self.model = model
        self.n_starts = n_starts
        self.n_retained = n_retained
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.dataset_ = Dataset(self.model.condition_names or tuple(f"x{i}" for i in range(X.shape[1])), X, y)
        self.results_ = multi_start_mle(self.model, self.dataset_, self.n_starts, self.seed, self.n_retained)
        self.theta_ = self.results_[0].theta_hat
        self.loglik_ = self.results_[0].loglik
        return self

    @property
    def retained_(self) -> list[MleResult]:
        check_is_fitted(self, "results_")
        return [r for r in self.results_ if r.retained]

    def predict(self, X):
        check_is_fitted(self, "theta_")
        X = check_array(X)
        return self.model.predict(self.theta_, X).predictions

    def aic(self) -> float:
        check_is_fitted(self, "loglik_")
        return aic(self.loglik_, self.model.space.n_p + 1)


def aic(max_loglik: float, k: int) -> float:
    return 2.0 * k - 2.0 * max_loglik
