"""Likelihood-annealed sequential Monte Carlo with evidence estimation.

The sampler targets ``pi_t(theta) ∝ f(y | theta)**gamma_t * pi(theta)`` for
an adaptive temperature ladder ``0 = gamma_0 < ... < gamma_T = 1``. Each
stage reweights, resamples systematically and rejuvenates the particles
with random-walk Metropolis-Hastings in logit coordinates, where the
uniform prior box becomes the whole real line.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._runtime import map_rows, rng
from .data import Dataset, fmt
from .errors import ConfigError, SamplerError, ShapeError, StateError
from .likelihood import loglik_batch
from .params import ParameterSpace, logit_inverse, logit_log_jacobian, logit_transform

log = logging.getLogger(__name__)

# stream tags for rng(seed, tag, ...)
_INIT, _RESAMPLE, _MOVE, _PRIOR, _CELLS = 10, 11, 12, 13, 14


class UniformPrior:
    """Independent uniforms on the parameter bounds times a convergence indicator.

    Parameters
    ----------
    space : ParameterSpace
    indicator : callable, optional
        Maps a stack of parameter vectors (natural units) to a boolean array;
        ``False`` means zero prior support. Defaults to "model converges on
        the dataset conditions" when built with :meth:`for_model`.
    in_likelihood : bool, default=False
        True when the log-likelihood is already ``-inf`` wherever the
        indicator is false, so MH moves need not evaluate it separately.
    """

    def __init__(self, space: ParameterSpace, indicator=None, in_likelihood=False):
        self.space = space
        self.indicator = indicator
        self.in_likelihood = in_likelihood

    @classmethod
    def for_model(cls, model, dataset: Dataset) -> "UniformPrior":
        def converges(thetas):
            return model.predict_batch(thetas, dataset.conditions).converged

        return cls(model.space, converges, in_likelihood=True)

    @property
    def lower(self):
        return self.space.lower

    @property
    def upper(self):
        return self.space.upper

    def accept(self, thetas) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        ok = self.space.contains(thetas)
        if self.indicator is not None and np.any(ok):
            ok = ok.copy()
            ok[ok] = np.asarray(map_rows(self.indicator, thetas[ok]), dtype=bool)
        return ok

    def draw(self, n: int, generator: np.random.Generator, max_rounds: int = 1000):
        """``n`` accepted draws in natural units plus the number of rejections."""
        out = []
        have = 0
        rejected = 0
        for _ in range(max_rounds):
            cand = generator.uniform(self.lower, self.upper, size=(max(n - have, 16), self.space.n_params))
            ok = self.accept(cand)
            rejected += int(np.sum(~ok))
            out.append(cand[ok])
            have += int(np.sum(ok))
            if have >= n:
                break
        else:
            raise SamplerError(f"prior indicator rejected almost every draw ({rejected} rejections)")
        return np.concatenate(out)[:n], rejected

    def log_density_logit(self, z) -> np.ndarray:
        """Log prior density of logit coordinates, up to the indicator's normalizer."""
        return logit_log_jacobian(z, self.lower, self.upper) - np.sum(np.log(self.upper - self.lower))


@dataclass
class ParticleSet:
    """Weighted particles stored in logit coordinates.

    ``log_evidence`` accumulates the annealing increments; it estimates the
    log marginal likelihood once ``gamma`` reaches 1.
    """

    space: ParameterSpace
    particles: np.ndarray
    weights: np.ndarray
    loglik: np.ndarray
    gamma: float
    log_evidence: float
    seed: int
    gamma_schedule: list = field(default_factory=list)
    moves: list = field(default_factory=list)
    acceptance: list = field(default_factory=list)
    prior_rejections: int = 0

    @property
    def M(self) -> int:
        return self.particles.shape[0]

    @property
    def theta(self) -> np.ndarray:
        return logit_inverse(self.particles, self.space.lower, self.space.upper)

    @property
    def terminal(self) -> bool:
        return self.gamma == 1.0 and bool(np.all(self.weights == self.weights[0]))

    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    def log_theta(self, model_only: bool = True) -> np.ndarray:
        th = self.theta
        if model_only:
            th = th[:, self.space.model_mask]
        with np.errstate(divide="ignore"):
            return np.log(th)

    # -- persistence ---------------------------------------------------------
    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*self.space.names, "logweight"])
        logw = np.log(self.weights)
        for row, lw in zip(self.theta, logw):
            w.writerow([*(fmt(v) for v in row), fmt(lw)])
        return buf.getvalue()

    def sidecar(self, model_name: str = "", data_hash: str = "") -> dict:
        return {
            "gamma_schedule": [float(g) for g in self.gamma_schedule],
            "log_evidence": float(self.log_evidence),
            "seed": int(self.seed),
            "M": int(self.M),
            "model": model_name,
            "data_hash": data_hash,
            "moves_per_stage": [int(r) for r in self.moves],
            "acceptance_per_stage": [float(a) for a in self.acceptance],
            "prior_rejections": int(self.prior_rejections),
        }

    def save(self, csv_path, json_path, model_name="", data_hash=""):
        Path(csv_path).write_text(self.to_csv_text(), encoding="utf-8", newline="")
        Path(json_path).write_text(
            json.dumps(self.sidecar(model_name, data_hash), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, space: ParameterSpace, csv_path, json_path) -> "ParticleSet":
        with open(csv_path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        if header[:-1] != space.names or header[-1] != "logweight":
            raise ShapeError(f"{csv_path}: columns {header} do not match parameters {space.names}")
        vals = np.array([[float(v) for v in r] for r in rows[1:] if r])
        meta = json.loads(Path(json_path).read_text(encoding="utf-8"))
        w = np.exp(vals[:, -1])
        w = w / w.sum()
        # values printed at a bound (saturated logits) are nudged back inside
        theta = np.clip(vals[:, :-1], np.nextafter(space.lower, np.inf), np.nextafter(space.upper, -np.inf))
        z = logit_transform(theta, space.lower, space.upper)
        return cls(
            space=space,
            particles=z,
            weights=w,
            loglik=np.full(len(w), np.nan),
            gamma=float(meta["gamma_schedule"][-1]),
            log_evidence=float(meta["log_evidence"]),
            seed=int(meta["seed"]),
            gamma_schedule=list(meta["gamma_schedule"]),
            moves=list(meta.get("moves_per_stage", [])),
            acceptance=list(meta.get("acceptance_per_stage", [])),
            prior_rejections=int(meta.get("prior_rejections", 0)),
        )


def systematic_resample(weights, generator: np.random.Generator) -> np.ndarray:
    """Ancestor indices by systematic resampling (one uniform offset)."""
    weights = np.asarray(weights, dtype=float)
    M = weights.shape[0]
    positions = (generator.random() + np.arange(M)) / M
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right").clip(0, M - 1)


def _ess_of_log_weights(logw) -> float:
    lw = logw - logsumexp(logw)
    return float(1.0 / np.sum(np.exp(2.0 * lw)))


def _increment(ll, dgamma):
    # 0 * -inf must stay -inf only when dgamma > 0
    with np.errstate(invalid="ignore"):
        inc = dgamma * ll
    return np.where(np.isneginf(ll), -np.inf if dgamma > 0 else 0.0, inc)


def next_temperature(loglik, log_w, gamma, target_ess) -> float:
    """Largest ``gamma' <= 1`` whose incremental weights keep ESS >= target."""

    def ess(g):
        inc = _increment(loglik, g - gamma)
        lw = log_w + inc
        if np.all(np.isneginf(lw)):
            return 0.0
        return _ess_of_log_weights(lw)

    if ess(1.0) >= target_ess:
        return 1.0
    lo, hi = gamma, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if ess(mid) >= target_ess:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
    # lo keeps ESS >= target; never return gamma itself
    return lo if lo > gamma else hi


class _GlobalProposal:
    """Gaussian random walk with one covariance for every particle."""

    def __init__(self, z, scale):
        d = z.shape[1]
        cov = np.cov(z, rowvar=False).reshape(d, d)
        self.chol = _safe_cholesky(0.5 * (cov + cov.T) * scale)

    def propose(self, z, generator):
        return z + generator.standard_normal(z.shape) @ self.chol.T, 0.0


class _LocalProposal:
    """Gaussian random walk whose covariance depends on the current region.

    The particles are split into cells by k-means in globally whitened
    coordinates, and a state uses the scaled covariance of the cell whose
    centroid is nearest. Cells with fewer than ``5 d`` members are discarded.
    The partition stays fixed while the kernel is in use, so including the
    proposal-density ratio keeps the kernel exactly reversible.
    """

    def __init__(self, z, scale, n_cells, generator):
        M, d = z.shape
        g_cov = np.cov(z, rowvar=False).reshape(d, d)
        self.g_chol = _safe_cholesky(0.5 * (g_cov + g_cov.T))
        w = self._whiten(z)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            centers, label = kmeans2(w, min(n_cells, M), iter=50, minit="++", seed=generator)
        chols, keep = [], []
        for c in range(centers.shape[0]):
            members = z[label == c]
            if members.shape[0] < 5 * d:
                continue
            cov = np.cov(members, rowvar=False).reshape(d, d)
            chols.append(_safe_cholesky(0.5 * (cov + cov.T) * scale))
            keep.append(c)
        if not keep:
            chols = [_safe_cholesky(0.5 * (g_cov + g_cov.T) * scale)]
            centers, keep = w.mean(axis=0, keepdims=True), [0]
        self.centers = centers[keep]
        self.chols = np.array(chols)
        self.half_logdets = np.sum(np.log(np.diagonal(self.chols, axis1=1, axis2=2)), axis=1)

    def _whiten(self, z):
        return np.linalg.solve(self.g_chol, z.T).T

    def assign(self, z):
        w = self._whiten(z)
        d2 = np.sum((w[:, None, :] - self.centers[None]) ** 2, axis=-1)
        return np.argmin(d2, axis=1)

    def _log_q(self, step, cell):
        # log N(step; 0, Sigma_cell) up to a constant shared by all cells
        out = np.empty(step.shape[0])
        for c in np.unique(cell):
            m = cell == c
            u = np.linalg.solve(self.chols[c], step[m].T)
            out[m] = -0.5 * np.sum(u * u, axis=0) - self.half_logdets[c]
        return out

    def propose(self, z, generator):
        cell = self.assign(z)
        step = np.einsum("mij,mj->mi", self.chols[cell], generator.standard_normal(z.shape))
        prop = z + step
        return prop, self._log_q(step, self.assign(prop)) - self._log_q(step, cell)


def _mh_round(z, ll, logprior, gamma, proposal, loglik_fn, generator):
    prop, log_q_ratio = proposal.propose(z, generator)
    log_u = np.log(generator.random(z.shape[0]))
    lp_prop = logprior(prop)
    ll_prop = loglik_fn(prop)
    with np.errstate(invalid="ignore"):
        log_alpha = gamma * (ll_prop - ll) + lp_prop - logprior(z) + log_q_ratio
    log_alpha = np.where(np.isneginf(ll_prop), -np.inf, log_alpha)
    accept = log_u < log_alpha
    z = np.where(accept[:, None], prop, z)
    ll = np.where(accept, ll_prop, ll)
    return z, ll, float(np.mean(accept))


def anneal(loglik_fn, prior: UniformPrior, M=5000, seed=0, target_fraction=0.5,
           accept_goal=0.99, max_moves=30, max_stages=1000, n_cells=1, min_moves=1) -> ParticleSet:
    """Run the annealed SMC sampler for an arbitrary log-likelihood.

    Parameters
    ----------
    loglik_fn : callable
        Maps a stack of parameter vectors (natural units, noise included)
        to log-likelihood values; ``-inf`` marks zero support.
    prior : UniformPrior
    M : int
        Number of particles.
    seed : int
    target_fraction : float
        Each temperature step keeps the ESS at ``target_fraction * M``.
    accept_goal : float
        Move rounds per stage are ``ceil(log(1 - accept_goal) / log(1 - a))``
        for first-round acceptance ``a``, clipped to ``[min_moves, max_moves]``.
    max_moves, min_moves : int
    max_stages : int
    n_cells : int
        1 uses one particle covariance for all proposals. Larger values use
        :class:`_LocalProposal` with that many k-means cells, which helps on
        curved or bound-hugging posteriors.

    Returns
    -------
    ParticleSet
        Terminal, equally weighted particles with the log-evidence estimate.
    """
    if M < 100:
        raise ValueError("M must be at least 100")
    space = prior.space
    lo, hi = space.lower, space.upper
    d = space.n_params

    def ll_of_z(z):
        return np.asarray(loglik_fn(logit_inverse(z, lo, hi)), dtype=float)

    theta0, rejected = prior.draw(M, rng(seed, _INIT))
    z = logit_transform(theta0, lo, hi)
    ll = ll_of_z(z)
    if np.any(np.isnan(ll)):
        raise SamplerError("log-likelihood returned NaN")
    log_w = np.full(M, -math.log(M))
    gamma = 0.0
    log_z = 0.0
    schedule, moves, rates = [0.0], [], []

    check = prior.indicator is not None and not prior.in_likelihood

    def logprior(zz):
        lp = prior.log_density_logit(zz)
        if check:
            ok = np.asarray(prior.indicator(logit_inverse(zz, lo, hi)), dtype=bool)
            lp = np.where(ok, lp, -np.inf)
        return lp

    stage = 0
    while gamma < 1.0:
        stage += 1
        if stage > max_stages:
            raise SamplerError(f"no convergence to gamma=1 within {max_stages} stages")
        new = next_temperature(ll, log_w, gamma, target_fraction * M)
        inc = _increment(ll, new - gamma)
        lw = log_w + inc
        if np.all(np.isneginf(lw)):
            raise SamplerError(f"stage {stage}: every incremental weight is zero")
        step = logsumexp(lw)
        log_z += float(step)
        w = np.exp(lw - step)
        w /= w.sum()
        gamma = new
        schedule.append(gamma)

        idx = systematic_resample(w, rng(seed, _RESAMPLE, stage))
        z, ll = z[idx], ll[idx]
        log_w = np.full(M, -math.log(M))

        scale = 2.38**2 / d
        if n_cells > 1:
            kernel = _LocalProposal(z, scale, n_cells, rng(seed, _CELLS, stage))
        else:
            kernel = _GlobalProposal(z, scale)

        def move(z, ll, r):
            return _mh_round(z, ll, logprior, gamma, kernel, ll_of_z, rng(seed, _MOVE, stage, r))

        z, ll, a = move(z, ll, 0)
        if a <= 0.0:
            n_rounds = max_moves
        elif a >= 1.0:
            n_rounds = 1
        else:
            n_rounds = int(min(max_moves, max(1, math.ceil(math.log(1.0 - accept_goal) / math.log(1.0 - a)))))
        n_rounds = max(n_rounds, min(min_moves, max_moves))
        acc = [a]
        for r in range(1, n_rounds):
            z, ll, a_r = move(z, ll, r)
            acc.append(a_r)
        moves.append(n_rounds)
        rates.append(float(np.mean(acc)))
        log.debug("stage %d gamma=%.6g moves=%d accept=%.3f", stage, gamma, n_rounds, rates[-1])

    return ParticleSet(
        space=space,
        particles=z,
        weights=np.full(M, 1.0 / M),
        loglik=ll,
        gamma=1.0,
        log_evidence=log_z,
        seed=seed,
        gamma_schedule=schedule,
        moves=moves,
        acceptance=rates,
        prior_rejections=rejected,
    )


def _safe_cholesky(cov):
    jitter = 0.0
    scale = max(float(np.mean(np.diag(cov))), 1e-300)
    for _ in range(12):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError:
            jitter = scale * 1e-10 if jitter == 0.0 else jitter * 10.0
    raise SamplerError("particle covariance is not positive definite")


SAMPLER_OPTIONS = {"target_fraction": float, "accept_goal": float, "max_moves": int,
                   "min_moves": int, "max_stages": int, "n_cells": int}


def sampler_options(doc) -> dict:
    """Validated sampler tuning from the ``"sampler"`` block of a model config.

    Only keys of :data:`SAMPLER_OPTIONS` are accepted; missing keys keep the
    :func:`anneal` defaults.
    """
    block = dict((doc or {}).get("sampler", {}) or {})
    unknown = set(block) - set(SAMPLER_OPTIONS)
    if unknown:
        raise ConfigError(f"unknown sampler options: {sorted(unknown)}")
    out = {}
    for key, kind in SAMPLER_OPTIONS.items():
        if key not in block:
            continue
        value = block[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)) or \
                (kind is int and float(value) != int(value)):
            raise ConfigError(f"sampler option {key!r} must be {kind.__name__}, got {value!r}")
        out[key] = kind(value)
    if not 0.0 < out.get("target_fraction", 0.5) < 1.0:
        raise ConfigError("sampler option 'target_fraction' must lie in (0, 1)")
    if not 0.0 < out.get("accept_goal", 0.99) < 1.0:
        raise ConfigError("sampler option 'accept_goal' must lie in (0, 1)")
    for key in ("max_moves", "min_moves", "max_stages", "n_cells"):
        if out.get(key, 1) < 1:
            raise ConfigError(f"sampler option {key!r} must be at least 1")
    return out


def run_smc(model, dataset: Dataset, prior: UniformPrior | None = None, M=5000, seed=0,
            **options) -> ParticleSet:
    """Sample the posterior of ``model`` given ``dataset``.

    Particles whose model evaluation fails get zero prior support: they are
    redrawn at initialization and rejected during moves.
    """
    prior = prior or UniformPrior.for_model(model, dataset)

    def loglik_fn(thetas):
        return loglik_batch(model, thetas, dataset)

    return anneal(loglik_fn, prior, M=M, seed=seed, **options)


@dataclass(frozen=True)
class MarginalSummary:
    name: str
    q025: float
    median: float
    q975: float
    edges: np.ndarray
    density: np.ndarray


def marginal_summaries(ps: ParticleSet, bins=256) -> list[MarginalSummary]:
    """Central 95% quantiles, medians and histograms on each prior range."""
    if not ps.terminal:
        raise StateError("marginal summaries need a terminal (gamma=1, equal weight) particle set")
    th = ps.theta
    out = []
    for j, spec in enumerate(ps.space.specs):
        q = np.quantile(th[:, j], [0.025, 0.5, 0.975])
        dens, edges = np.histogram(th[:, j], bins=bins, range=(spec.lower, spec.upper), density=True)
        out.append(MarginalSummary(spec.name, float(q[0]), float(q[1]), float(q[2]), edges, dens))
    return out


def marginal_tv(ps_a: ParticleSet, ps_b: ParticleSet, bins=32) -> np.ndarray:
    """Total-variation distance between marginal histograms, per parameter.

    Bins span the pooled sample range of each parameter.
    """
    a, b = ps_a.theta, ps_b.theta
    out = np.empty(a.shape[1])
    for j in range(a.shape[1]):
        lo = min(a[:, j].min(), b[:, j].min())
        hi = max(a[:, j].max(), b[:, j].max())
        if hi <= lo:
            out[j] = 0.0
            continue
        pa, _ = np.histogram(a[:, j], bins=bins, range=(lo, hi))
        pb, _ = np.histogram(b[:, j], bins=bins, range=(lo, hi))
        out[j] = 0.5 * np.sum(np.abs(pa / pa.sum() - pb / pb.sum()))
    return out


def bayes_factor(log_ev_a: float, log_ev_b: float) -> float:
    """``exp(log_ev_a - log_ev_b)``; > 1 favours model a."""
    diff = float(log_ev_a) - float(log_ev_b)
    if diff > 709.0:
        return math.inf
    return math.exp(diff)


def posterior_predictive(model, ps: ParticleSet, conditions) -> np.ndarray:
    """Model predictions (no observation noise) for every particle."""
    ev = model.predict_batch(ps.theta, conditions)
    pred = ev.predictions.copy()
    pred[~ev.converged] = np.nan
    return pred


class SMCCalibrator(RegressorMixin, BaseEstimator):
    """Bayesian calibration by annealed SMC.

    Parameters
    ----------
    model : MechanisticModel
    n_particles : int, default=5000
    seed : int, default=0
    sampler : dict, optional
        Extra :func:`anneal` options such as ``n_cells`` or ``max_moves``.

    Attributes
    ----------
    particles_ : ParticleSet
    log_evidence_ : float
    """

    def __init__(self, model=None, n_particles=5000, seed=0, sampler=None):
        self.model = model
        self.n_particles = n_particles
        self.seed = seed
        self.sampler = sampler

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        names = self.model.condition_names or tuple(f"x{i}" for i in range(X.shape[1]))
        self.dataset_ = Dataset(names, X, y)
        self.particles_ = run_smc(self.model, self.dataset_, M=self.n_particles, seed=self.seed,
                                  **sampler_options({"sampler": self.sampler}))
        self.log_evidence_ = self.particles_.log_evidence
        return self

    def predict(self, X):
        """Posterior-median prediction per condition."""
        check_is_fitted(self, "particles_")
        pred = posterior_predictive(self.model, self.particles_, check_array(X))
        return np.nanmedian(pred, axis=0)

    def predict_interval(self, X, level=0.95):
        check_is_fitted(self, "particles_")
        pred = posterior_predictive(self.model, self.particles_, check_array(X))
        a = 0.5 * (1.0 - level)
        return np.nanquantile(pred, a, axis=0), np.nanquantile(pred, 1.0 - a, axis=0)
