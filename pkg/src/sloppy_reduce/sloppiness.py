"""Sensitivity matrices in log-parameter space and their eigen-analysis.

Three matrices are supported, all over the model-role parameters only (the
noise standard deviation is held fixed and excluded):

``hessian_mle``
    minus the finite-difference Hessian of the log-likelihood at an MLE;
``posterior_cov``
    the inverse of the posterior covariance of ``ln(theta)``;
``lis``
    the posterior average of prior-whitened likelihood Hessians,
    ``mean_m L.T (-H(phi_m)) L`` with ``Omega = L L.T`` the prior covariance
    of ``ln(theta)``.

:func:`analyze` turns any of them into a :class:`SloppySpectrum`: eigenvalues
sorted in decreasing order, rescaled by the largest, and eigenvectors
renormalized so their largest-magnitude entry is ``+1``. Each eigenvector
``v`` defines an eigenparameter ``prod_i theta_i ** v_i``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._runtime import map_rows, rng
from .data import Dataset, fmt
from .errors import PriorCovError, ShapeError, SpectrumError, StateError, StencilError
from .likelihood import MleResult, loglik_batch
from .smc import ParticleSet, UniformPrior

log = logging.getLogger(__name__)

HESSIAN_MLE, POSTERIOR_COV, LIS = "hessian_mle", "posterior_cov", "lis"

_LIS_STREAM = 21


@dataclass(frozen=True)
class SensitivityMatrix:
    kind: str
    entries: np.ndarray
    names: tuple
    provenance: str = ""
    warnings: tuple = ()
    info: dict = field(default_factory=dict)

    @property
    def n_p(self) -> int:
        return self.entries.shape[0]


def _stencil(center, delta):
    d = center.shape[0]
    pts = [center]
    for i in range(d):
        for s in (1.0, -1.0):
            p = center.copy()
            p[i] += s * delta
            pts.append(p)
    pairs = []
    for i in range(d):
        for j in range(i + 1, d):
            pairs.append((i, j))
            for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                p = center.copy()
                p[i] += si * delta
                p[j] += sj * delta
                pts.append(p)
    return np.array(pts), pairs


def hessian_fd(fn, center, delta=1e-2, vectorized=False) -> np.ndarray:
    """Central second-difference Hessian of a scalar function.

    Parameters
    ----------
    fn : callable
        Scalar function of a 1-D point, or of a stack of points returning
        one value per row when ``vectorized=True``.
    center : array_like
    delta : float
        Absolute step per coordinate. In log coordinates this is a relative
        step of ``delta`` in the natural parameter.

    Raises
    ------
    StencilError
        If the function is non-finite at any stencil point; ``coordinate``
        holds the offending index (or index pair).
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    center = np.asarray(center, dtype=float).ravel()
    d = center.shape[0]
    pts, pairs = _stencil(center, delta)
    if vectorized:
        vals = np.asarray(fn(pts), dtype=float).ravel()
    else:
        vals = np.array([float(fn(p)) for p in pts])
    f0 = vals[0]
    if not math.isfinite(f0):
        raise StencilError("function is not finite at the center point", None)
    H = np.empty((d, d))
    for i in range(d):
        fp, fm = vals[1 + 2 * i], vals[2 + 2 * i]
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise StencilError(f"non-finite stencil value along coordinate {i}", i)
        H[i, i] = (fp - 2.0 * f0 + fm) / delta**2
    base = 1 + 2 * d
    for k, (i, j) in enumerate(pairs):
        fpp, fpm, fmp, fmm = vals[base + 4 * k : base + 4 * k + 4]
        if not all(map(math.isfinite, (fpp, fpm, fmp, fmm))):
            raise StencilError(f"non-finite stencil value for coordinates ({i}, {j})", (i, j))
        H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * delta**2)
    return 0.5 * (H + H.T)


def _loglik_in_log_space(model, dataset, theta_full):
    """Log-likelihood as a function of ln(model params), noise held fixed."""
    space = model.space
    mask = space.model_mask
    base = np.asarray(theta_full, dtype=float)

    def fn(phis):
        phis = np.atleast_2d(phis)
        th = np.repeat(base[None, :], phis.shape[0], axis=0)
        th[:, mask] = np.exp(phis)
        return loglik_batch(model, th, dataset)

    return fn, np.log(base[mask])


def loglik_hessian(model, dataset, theta_full, delta=1e-2) -> np.ndarray:
    """Finite-difference Hessian of the log-likelihood in log coordinates."""
    fn, phi0 = _loglik_in_log_space(model, dataset, theta_full)
    return hessian_fd(fn, phi0, delta, vectorized=True)


def matrix_hessian_mle(model, dataset: Dataset, mle: MleResult, delta=1e-2) -> SensitivityMatrix:
    """``-H`` of the log-likelihood at a local MLE (noise fixed at its MLE)."""
    if not mle.optimizer_converged:
        raise StateError("the MLE run did not converge")
    S = -loglik_hessian(model, dataset, mle.theta_hat, delta)
    warnings = ()
    w = np.linalg.eigvalsh(S)
    if w.min() < 0:
        warnings = ("negative_eigenvalues",)
    return SensitivityMatrix(
        HESSIAN_MLE, S, tuple(model.space.model_names),
        provenance=f"mle:start={mle.start_index}", warnings=warnings,
        info={"delta": delta, "loglik": mle.loglik},
    )


def matrix_posterior_cov(ps: ParticleSet) -> SensitivityMatrix:
    """Inverse empirical covariance of ``ln(theta)`` over the particles."""
    if not ps.terminal:
        raise StateError("posterior covariance needs a terminal, equally weighted particle set")
    n_p = ps.space.n_p
    if ps.M < n_p + 2:
        raise StateError(f"need at least {n_p + 2} particles, have {ps.M}")
    phi = ps.log_theta()
    # 1/M normalization: the empirical covariance of the particle cloud, so
    # duplicating every particle leaves S_P exactly unchanged
    Sigma = np.atleast_2d(np.cov(phi, rowvar=False, bias=True))
    warnings = ()
    if np.linalg.cond(Sigma) > 1e12:
        S = np.linalg.pinv(Sigma, hermitian=True)
        warnings = ("rank_deficient",)
    else:
        S = np.linalg.inv(Sigma)
    S = 0.5 * (S + S.T)
    return SensitivityMatrix(
        POSTERIOR_COV, S, tuple(ps.space.model_names),
        provenance=f"smc:seed={ps.seed}", warnings=warnings, info={"M": ps.M},
    )


def prior_log_covariance(prior: UniformPrior, n_draws=100_000, seed=0):
    """Empirical covariance of ln(model params) under the prior, and its Cholesky factor."""
    theta, rejected = prior.draw(n_draws, rng(seed, _LIS_STREAM, 0))
    phi = np.log(theta[:, prior.space.model_mask])
    Omega = np.atleast_2d(np.cov(phi, rowvar=False))
    try:
        L = np.linalg.cholesky(Omega)
    except np.linalg.LinAlgError:
        raise PriorCovError("prior covariance of the log-parameters is not positive definite") from None
    return Omega, L, rejected


def stratified_indices(M: int, k: int, generator: np.random.Generator) -> np.ndarray:
    """One index drawn uniformly from each of ``k`` equal strata of ``range(M)``."""
    if k >= M:
        return np.arange(M)
    edges = np.linspace(0, M, k + 1)
    picks = edges[:-1] + generator.random(k) * (edges[1:] - edges[:-1])
    return np.minimum(np.floor(picks).astype(int), M - 1)


def matrix_lis(model, dataset: Dataset, ps: ParticleSet, prior: UniformPrior | None = None,
               delta=1e-2, n_hessians=200, n_prior_draws=100_000, seed=None) -> SensitivityMatrix:
    """Likelihood-informed-subspace matrix averaged over posterior particles."""
    if not ps.terminal:
        raise StateError("the LIS matrix needs a terminal particle set")
    prior = prior or UniformPrior.for_model(model, dataset)
    seed = ps.seed if seed is None else seed
    Omega, L, rejected = prior_log_covariance(prior, n_prior_draws, seed)
    idx = stratified_indices(ps.M, n_hessians, rng(seed, _LIS_STREAM, 1))
    thetas = ps.theta[idx]

    def hess_of(rows):
        return np.array([loglik_hessian(model, dataset, th, delta) for th in rows])

    H = map_rows(hess_of, thetas, min_chunk=8)
    S = np.mean(np.einsum("ji,mjk,kl->mil", L, -H, L), axis=0)
    S = 0.5 * (S + S.T)
    warnings = []
    w, V = np.linalg.eigh(S)
    if w.min() < -1e-10 * max(w.max(), 0.0):
        log.info("LIS: clipping %d negative eigenvalues (min %.3g)", int(np.sum(w < 0)), w.min())
        S = (V * np.clip(w, 0.0, None)) @ V.T
        S = 0.5 * (S + S.T)
        warnings.append("clipped_negative_eigenvalues")
    return SensitivityMatrix(
        LIS, S, tuple(model.space.model_names),
        provenance=f"smc:seed={ps.seed}", warnings=tuple(warnings),
        info={"delta": delta, "n_hessians": int(len(idx)), "n_prior_draws": int(n_prior_draws),
              "prior_rejections": int(rejected)},
    )


@dataclass(frozen=True)
class SloppySpectrum:
    """Ranked eigenparameters of a sensitivity matrix.

    ``eigenvectors`` holds renormalized vectors as columns (largest entry
    +1); ``raw_eigenvectors`` the orthonormal ones with the same signs.
    """

    names: tuple
    eigenvalues: np.ndarray
    raw_eigenvectors: np.ndarray
    eigenvectors: np.ndarray
    kind: str = ""

    @property
    def rescaled(self) -> np.ndarray:
        return self.eigenvalues / self.eigenvalues[0]

    @property
    def retained(self) -> np.ndarray:
        r = self.rescaled
        return (r > 0) & (r <= 1)

    def stiff(self, tau: float) -> np.ndarray:
        """Indices ``j`` with ``lambda_j / lambda_1 >= tau``."""
        return np.flatnonzero(self.rescaled >= tau)

    def expression(self, j: int, cutoff=0.05) -> str:
        """Eigenparameter ``j`` (0-based) as a product of powers."""
        v = self.eigenvectors[:, j]
        terms = [f"{n}^{x:.2f}" for n, x in zip(self.names, v) if abs(x) >= cutoff]
        return " * ".join(terms) if terms else "1"

    def transform(self, theta_model) -> np.ndarray:
        """``ln`` of every eigenparameter for a stack of model-role parameter vectors."""
        return np.log(np.asarray(theta_model, dtype=float)) @ self.eigenvectors

    # -- reports -------------------------------------------------------------
    def spectrum_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["j", "lambda", "lambda_over_lambda1"])
        for j, (lam, r) in enumerate(zip(self.eigenvalues, self.rescaled), start=1):
            w.writerow([j, fmt(lam), fmt(r)])
        return buf.getvalue()

    def eigenvectors_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["parameter", *range(1, len(self.eigenvalues) + 1)])
        for name, row in zip(self.names, self.eigenvectors):
            w.writerow([name, *(fmt(v) for v in row)])
        return buf.getvalue()

    def report(self, cutoff=0.05) -> str:
        lines = [f"# eigenparameters ({self.kind or 'sensitivity matrix'}), stiffest first"]
        for j, r in enumerate(self.rescaled):
            lines.append(f"theta_hat_{j + 1}  lambda/lambda1={r:.3e}  =  {self.expression(j, cutoff)}")
        return "\n".join(lines) + "\n"

    def write(self, outdir) -> dict:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        files = {
            "spectrum": outdir / "spectrum.csv",
            "eigenvectors": outdir / "eigenvectors.csv",
            "eigenparams": outdir / "eigenparams.txt",
        }
        files["spectrum"].write_text(self.spectrum_csv(), encoding="utf-8", newline="")
        files["eigenvectors"].write_text(self.eigenvectors_csv(), encoding="utf-8", newline="")
        files["eigenparams"].write_text(self.report(), encoding="utf-8", newline="")
        return files

    @classmethod
    def read(cls, outdir, kind="") -> "SloppySpectrum":
        """Rebuild a spectrum from ``spectrum.csv`` and ``eigenvectors.csv``."""
        outdir = Path(outdir)
        with open(outdir / "spectrum.csv", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        lam = np.array([float(r[1]) for r in rows if r])
        with open(outdir / "eigenvectors.csv", encoding="utf-8", newline="") as fh:
            rows = [r for r in list(csv.reader(fh))[1:] if r]
        names = tuple(r[0] for r in rows)
        V = np.array([[float(x) for x in r[1:]] for r in rows])
        raw = V / np.linalg.norm(V, axis=0)
        return cls(names, lam, raw, V, kind)


def analyze(matrix) -> SloppySpectrum:
    """Eigendecompose a symmetric sensitivity matrix and rank its eigenparameters.

    Raises
    ------
    ShapeError
        Non-square or non-symmetric input.
    SpectrumError
        Largest eigenvalue not positive.
    """
    if isinstance(matrix, SensitivityMatrix):
        S, names, kind = matrix.entries, matrix.names, matrix.kind
    else:
        S = np.asarray(matrix, dtype=float)
        names, kind = tuple(f"theta{i + 1}" for i in range(S.shape[0])), ""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"sensitivity matrix must be square, got shape {S.shape}")
    scale = np.linalg.norm(S)
    if np.linalg.norm(S - S.T) > 1e-10 * max(scale, 1e-300):
        raise ShapeError("sensitivity matrix is not symmetric")
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    order = np.argsort(-w, kind="stable")
    w, V = w[order], V[:, order]
    if not w[0] > 0:
        raise SpectrumError(f"largest eigenvalue is not positive: {w.tolist()}", w)
    peak = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[peak, np.arange(V.shape[1])])
    V = V * signs
    renorm = V / np.abs(V).max(axis=0)
    # exact +1 at the peak despite round-off
    renorm[peak, np.arange(V.shape[1])] = 1.0
    return SloppySpectrum(tuple(names), w, V, renorm, kind)


def leading_cosines(a: SloppySpectrum, b: SloppySpectrum, k: int) -> np.ndarray:
    """``|cos|`` between the first ``k`` eigenvectors of two spectra."""
    return np.abs(np.sum(a.raw_eigenvectors[:, :k] * b.raw_eigenvectors[:, :k], axis=0))


class SloppinessAnalyzer(TransformerMixin, BaseEstimator):
    """Sensitivity analysis of a fitted calibrator.

    ``fit`` takes a fitted :class:`~sloppy_reduce.likelihood.MLECalibrator`
    (``matrix="hessian"``) or :class:`~sloppy_reduce.smc.SMCCalibrator`
    (``"postcov"`` or ``"lis"``); ``transform`` maps model-role parameter
    vectors to log-eigenparameter coordinates.
    """

    def __init__(self, matrix="postcov", delta=1e-2, n_hessians=200, n_prior_draws=100_000):
        self.matrix = matrix
        self.delta = delta
        self.n_hessians = n_hessians
        self.n_prior_draws = n_prior_draws

    def fit(self, calibrator, y=None):
        if self.matrix == "hessian":
            check_is_fitted(calibrator, "results_")
            S = matrix_hessian_mle(calibrator.model, calibrator.dataset_, calibrator.results_[0], self.delta)
        elif self.matrix == "postcov":
            check_is_fitted(calibrator, "particles_")
            S = matrix_posterior_cov(calibrator.particles_)
        elif self.matrix == "lis":
            check_is_fitted(calibrator, "particles_")
            S = matrix_lis(calibrator.model, calibrator.dataset_, calibrator.particles_,
                           delta=self.delta, n_hessians=self.n_hessians,
                           n_prior_draws=self.n_prior_draws)
        else:
            raise ValueError(f"unknown matrix {self.matrix!r}; use hessian, postcov or lis")
        self.matrix_ = S
        self.spectrum_ = analyze(S)
        return self

    def transform(self, X):
        check_is_fitted(self, "spectrum_")
        return self.spectrum_.transform(check_array(X))
