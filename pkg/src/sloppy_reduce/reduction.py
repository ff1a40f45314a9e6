"""Mechanism scoring, candidate proposal and evaluation of reduced models.

A mechanism's score is the largest ``|v_{j,i}|`` over its parameters ``i``
and over the stiff eigenparameters ``j`` (``lambda_j / lambda_1 >= tau``) of
a :class:`~sloppy_reduce.sloppiness.SloppySpectrum`. Mechanisms that hardly
enter any stiff combination are candidates for removal; each candidate set is
recalibrated and compared against the original by evidence, Bayes factor,
predictive error and AIC.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._runtime import rng
from .data import Dataset, fmt
from .errors import ConfigError, SloppyReduceError
from .likelihood import aic, multi_start_mle
from .params import ParameterSpace
from .smc import ParticleSet, bayes_factor, posterior_predictive, run_smc

log = logging.getLogger(__name__)

DEFAULT_TAU = 1e-2
DEFAULT_THRESHOLD = 0.3

_NOISE_STREAM = 31


@dataclass(frozen=True)
class MechanismScore:
    mechanism: str
    score: float
    stiff_set: tuple
    removable: bool = True


def score_mechanisms(spectrum, space: ParameterSpace, tau: float = DEFAULT_TAU) -> list[MechanismScore]:
    """Score every mechanism of ``space`` against the stiff eigenparameters.

    Results are sorted by ascending score (ties by name). Mechanisms without
    parameters score 0.

    Raises
    ------
    ConfigError
        ``tau`` outside ``(0, 1]`` or spectrum names not matching the space.
    """
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must lie in (0, 1], got {tau}")
    names = list(spectrum.names)
    if sorted(names) != sorted(space.model_names):
        raise ConfigError("spectrum parameters do not match the parameter space")
    stiff = tuple(int(j) for j in spectrum.stiff(tau))
    V = np.abs(spectrum.eigenvectors[:, list(stiff)])
    out = []
    for mech, members in space.mechanisms.items():
        rows = [names.index(p) for p in members]
        score = float(V[rows].max()) if rows and stiff else 0.0
        out.append(MechanismScore(mech, min(score, 1.0), stiff, space.removable[mech]))
    out.sort(key=lambda s: (s.score, s.mechanism))
    return out


def propose_candidates(scores, max_drop: int = 2, threshold: float = DEFAULT_THRESHOLD,
                       keep=(), force=()) -> list[frozenset]:
    """Subsets of removable mechanisms scoring below ``threshold``.

    ``keep`` excludes mechanisms from removal; ``force`` adds mechanisms to
    the pool regardless of score (still subject to removability). Subsets
    are ordered by size, then by their sorted member names.
    """
    if max_drop < 1:
        raise ConfigError("max_drop must be >= 1")
    keep, force = set(keep), set(force)
    known = {s.mechanism for s in scores}
    unknown = (keep | force) - known
    if unknown:
        raise ConfigError(f"unknown mechanisms: {sorted(unknown)}")
    pool = sorted(
        s.mechanism for s in scores
        if s.removable and s.mechanism not in keep and (s.score < threshold or s.mechanism in force)
    )
    out = []
    for size in range(1, min(max_drop, len(pool)) + 1):
        out.extend(frozenset(c) for c in itertools.combinations(pool, size))
    return out


def candidate_label(drop) -> str:
    return "+".join(sorted(drop)) if drop else "original"


@dataclass
class ReductionCandidate:
    """A calibrated (possibly reduced) model and its comparison statistics."""

    dropped: frozenset
    n_p: int
    particles: ParticleSet | None = None
    rmse: float = math.nan
    log_evidence: float = math.nan
    bayes_factor_vs_original: float = math.nan
    intervals: np.ndarray | None = None
    coverage: float = math.nan
    max_loglik: float = math.nan
    aic: float = math.nan
    failed: bool = False
    diagnostics: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        return candidate_label(self.dropped)

    def summary(self) -> dict:
        return {
            "dropped": sorted(self.dropped),
            "n_p": self.n_p,
            "rmse": self.rmse,
            "log_evidence": self.log_evidence,
            "bayes_factor_vs_original": self.bayes_factor_vs_original,
            "coverage": self.coverage,
            "max_loglik": self.max_loglik,
            "aic": self.aic,
            "failed": self.failed,
            "diagnostics": self.diagnostics,
        }


def predictive_summary(model, ps: ParticleSet, dataset: Dataset, level=0.95, seed=0):
    """Posterior-median RMSE, central predictive intervals and their coverage.

    The point prediction is the per-datum posterior median of the model
    output. Intervals are central quantiles of the posterior predictive of a
    new observation, i.e. model output plus Gaussian noise at each particle's
    sigma (drawn from a dedicated stream).
    """
    pred = posterior_predictive(model, ps, dataset.conditions)
    median = np.nanmedian(pred, axis=0)
    rmse = float(np.sqrt(np.mean((median - dataset.observed) ** 2)))
    sigma = ps.theta[:, model.space.noise_index]
    noise = rng(seed, _NOISE_STREAM).standard_normal(pred.shape) * sigma[:, None]
    a = 0.5 * (1.0 - level)
    lo, hi = np.nanquantile(pred + noise, [a, 1.0 - a], axis=0)
    inside = (dataset.observed >= lo) & (dataset.observed <= hi)
    return rmse, np.column_stack([lo, hi]), float(np.mean(inside))


def evaluate_candidate(original_model, drop, dataset: Dataset, smc_config=None,
                       original_log_evidence: float | None = None, mle_config=None) -> ReductionCandidate:
    """Recalibrate ``original_model.reduce(drop)`` and summarize it.

    ``smc_config`` is passed to :func:`~sloppy_reduce.smc.run_smc` (``M``,
    ``seed`` and tuning options). ``mle_config`` (``n_starts``, ``seed``)
    enables the AIC column; ``None`` skips the MLE. A failing calibration
    yields a candidate with ``failed=True`` instead of an exception.
    """
    smc_config = dict(smc_config or {})
    drop = frozenset(drop)
    model = original_model.reduce(drop)
    cand = ReductionCandidate(drop, model.space.n_p)
    try:
        ps = run_smc(model, dataset, **smc_config)
    except SloppyReduceError as exc:
        cand.failed = True
        cand.diagnostics = f"{type(exc).__name__}: {exc}"
        log.warning("candidate %s failed: %s", cand.label, cand.diagnostics)
        return cand
    cand.particles = ps
    cand.log_evidence = ps.log_evidence
    ref = ps.log_evidence if original_log_evidence is None else original_log_evidence
    cand.bayes_factor_vs_original = bayes_factor(ref, ps.log_evidence)
    cand.rmse, cand.intervals, cand.coverage = predictive_summary(
        model, ps, dataset, seed=int(smc_config.get("seed", 0)))
    if mle_config is not None:
        try:
            best = multi_start_mle(model, dataset, n_starts=mle_config.get("n_starts", 100),
                                   seed=mle_config.get("seed", 0), n_retained=1)[0]
            cand.max_loglik = best.loglik
            cand.aic = aic(best.loglik, model.space.n_p + 1)
        except SloppyReduceError as exc:
            cand.diagnostics = f"MLE skipped: {exc}"
    return cand


COLUMNS = ("model", "dropped", "n_p", "rmse", "log_evidence", "bf_vs_original", "coverage", "aic")


@dataclass
class ComparisonReport:
    rows: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow([r[c] if isinstance(r[c], (str, int)) else fmt(r[c]) for c in COLUMNS])
        return buf.getvalue()

    def to_text(self) -> str:
        def cell(v):
            if isinstance(v, str):
                return v
            if isinstance(v, int):
                return str(v)
            if not math.isfinite(v):
                return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")
            return f"{v:.4g}"

        table = [list(COLUMNS)] + [[cell(r[c]) for c in COLUMNS] for r in self.rows]
        widths = [max(len(row[i]) for row in table) for i in range(len(COLUMNS))]
        lines = ["  ".join(v.ljust(w) if i < 2 else v.rjust(w) for i, (v, w) in enumerate(zip(row, widths)))
                 for row in table]
        return "\n".join(line.rstrip() for line in lines) + "\n"


def compare_report(original: ReductionCandidate, candidates) -> ComparisonReport:
    """Tabulate the original model and its reduced candidates.

    Bayes factors are recomputed against ``original`` so the table is
    internally consistent (``> 1`` favours the original).
    """
    rows = []
    for c in [original, *candidates]:
        bf = bayes_factor(original.log_evidence, c.log_evidence) if not c.failed else math.nan
        rows.append({
            "model": "original" if c is original else c.label,
            "dropped": ";".join(sorted(c.dropped)) or "-",
            "n_p": c.n_p,
            "rmse": c.rmse,
            "log_evidence": c.log_evidence,
            "bf_vs_original": bf,
            "coverage": c.coverage,
            "aic": c.aic,
        })
    return ComparisonReport(rows)
