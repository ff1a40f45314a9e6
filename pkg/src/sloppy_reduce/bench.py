"""Benchmark fixtures and independent oracles.

Each fixture is a directory ``fixtures/<name>/`` holding

``config.json``
    model kind, parameter bounds, mechanisms, constants, the generating
    truth ``theta*``, noise level ``sigma*`` and the generation seed;
``data.csv``
    the synthetic dataset ``y = model(theta*) + sigma* * eps``;
``oracle.json``
    reference values computed without the code under test (analytic
    matrices, Gauss-Newton spectra, long-run evidence estimates).

Noise is drawn from ``numpy.random.Philox`` keyed by
``SeedSequence([seed, 0])`` as standard normals, so the CSV bytes are
reproducible anywhere the same generator is available.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from ._runtime import rng
from .data import Dataset
from .models import model_from_config
from .params import ParameterSpace

FIXTURE_NAMES = ("linear-log", "exp-sum", "toy-polyp")

_NOISE_STREAM = 0
_DESIGN_STREAM = 1

# Reference point of the toy polyp. pump2 moves under 1% of the pumped flux
# and the kco2 channel carries ~8% of the diffusive conductance, so both are
# insensitive; pump1 and the paracellular path dominate the stiff
# combinations. Outputs stay in 0.2..0.95 so the stiffest direction is
# resolved to a few percent, which keeps the ridge along Vmax1*alpha,
# Vmax1*beta wide enough for the sampler to cross.
TOY_TRUTH = {
    "s": 0.859, "k_pp": 0.169, "k_co2": 0.0149, "Vmax1": 0.338, "Km1": 0.134,
    "alpha": 0.425, "beta": 0.591, "Vmax2": 0.0037, "Km2": 1.0,
}
TOY_UPPER = {
    "s": 3.94, "k_pp": 0.673, "k_co2": 0.0369, "Vmax1": 0.709, "Km1": 0.278,
    "alpha": 1.0, "beta": 1.0, "Vmax2": 0.0183, "Km2": 2.74,
}
TOY_X = (0.73, 1.46, 2.81, 3.8)
TOY_LIGHT = ((2.02, 2.67), (1.99, 2.22), (1.44, 1.33), (2.37, 0.63))
# local-covariance proposals and a move floor: the exact Vmax1/alpha/beta
# ridge bends where it meets the alpha, beta and Vmax1 bounds
TOY_SAMPLER = {"n_cells": 25, "min_moves": 50, "max_moves": 100}
TOY_MECHANISMS = {
    "seawater": ["s"],
    "paracellular": ["k_pp"],
    "kco2-channel": ["k_co2"],
    "pump1": ["Vmax1", "Km1", "alpha", "beta"],
    "pump2": ["Vmax2", "Km2"],
    "_removable": {"seawater": False},
}
TOY_SIGMA = 0.05
TOY_SIGMA_UPPER = 1.0

EXP_TRUTH = {"a1": 2.0, "r1": 0.5, "a2": 1.0, "r2": 3.0}
EXP_SIGMA = 0.01

LIN_TRUTH = {"theta1": 2.0, "theta2": 0.5, "theta3": 1.5}
LIN_SIGMA = 0.1
LIN_ROWS = 12


@dataclass
class Fixture:
    name: str
    config: dict
    dataset: Dataset
    truth: dict
    sigma: float
    seed: int
    oracle: dict

    @property
    def model(self):
        return model_from_config(self.config)

    def theta_full(self) -> np.ndarray:
        """Truth vector in canonical order, noise parameter set to ``sigma*``."""
        space = self.model.space
        values = dict(self.truth)
        values[space.noise_name] = self.sigma
        return space.from_mapping(values)

    def write(self, outdir) -> dict:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = {
            "config": outdir / "config.json",
            "data": outdir / "data.csv",
            "oracle": outdir / "oracle.json",
        }
        paths["config"].write_text(_dumps(self.config), encoding="utf-8", newline="")
        self.dataset.write_csv(paths["data"])
        paths["oracle"].write_text(_dumps(self.oracle), encoding="utf-8", newline="")
        return paths


def _dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def _param(name, lower, upper, role="model"):
    return {"name": name, "lower": float(lower), "upper": float(upper), "role": role}


def noisy(clean, sigma: float, seed: int) -> np.ndarray:
    eps = rng(seed, _NOISE_STREAM).standard_normal(len(clean))
    return np.asarray(clean, dtype=float) + sigma * eps


# ---------------------------------------------------------------------------
# oracles


def oracle_gauss_newton(model, theta, dataset: Dataset, sigma: float, h=1e-6) -> np.ndarray:
    """``J.T @ J / sigma**2`` with ``J`` the central-difference Jacobian of the
    predictions with respect to ``phi = ln(theta)`` (model-role parameters).
    """
    theta = np.asarray(theta, dtype=float)
    P = theta[model.space.model_mask] if theta.shape[0] == model.space.n_params else theta
    phi = np.log(P)
    d = phi.shape[0]
    pts = np.concatenate([phi + h * np.eye(d), phi - h * np.eye(d)])
    pred = model.predict_batch(np.exp(pts), dataset.conditions).predictions
    J = ((pred[:d] - pred[d:]) / (2.0 * h)).T
    return J.T @ J / sigma**2


def linear_log_posterior(A, y, sigma):
    """Exact posterior of ``phi`` for ``y = A phi + N(0, sigma^2)`` under a
    uniform prior on ``theta = exp(phi)`` far from its bounds.

    The uniform density on ``theta`` is ``exp(sum phi)`` in ``phi``, which
    shifts the Gaussian mean by ``sigma^2 (A.T A)^-1 1``.
    """
    A = np.asarray(A, dtype=float)
    AtA = A.T @ A
    cov = sigma**2 * np.linalg.inv(AtA)
    ls = np.linalg.solve(AtA, A.T @ np.asarray(y, dtype=float))
    mean = ls + cov @ np.ones(A.shape[1])
    return mean, cov


# ---------------------------------------------------------------------------
# generators


def _linear_log(seed: int) -> Fixture:
    names = list(LIN_TRUTH)
    g = rng(seed, _DESIGN_STREAM)
    # well-conditioned but correlated design; rows are the condition columns
    A = np.round(g.uniform(-1.0, 1.0, size=(LIN_ROWS, len(names))) + np.array([1.0, 0.5, 0.0]), 6)
    config = {
        "model": "linear-log",
        "parameters": [_param(n, 0.0, 20.0 * LIN_TRUTH[n]) for n in names]
        + [_param("sigma", 0.99 * LIN_SIGMA, 1.01 * LIN_SIGMA, "noise")],
        "mechanisms": {n: [n] for n in names},
        "constants": {},
    }
    model = model_from_config(config)
    theta = np.array([LIN_TRUTH[n] for n in names])
    clean = A @ np.log(theta)
    y = noisy(clean, LIN_SIGMA, seed)
    ds = Dataset(model.condition_names, A, y)
    mean, cov = linear_log_posterior(A, y, LIN_SIGMA)
    oracle = {
        "design_matrix": A.tolist(),
        "fisher_log": (A.T @ A / LIN_SIGMA**2).tolist(),
        "posterior_mean_log": mean.tolist(),
        "posterior_cov_log": cov.tolist(),
        "least_squares_log": np.linalg.lstsq(A, y, rcond=None)[0].tolist(),
    }
    return _fixture("linear-log", config, ds, LIN_TRUTH, LIN_SIGMA, seed, oracle)


def _exp_sum(seed: int) -> Fixture:
    t = np.arange(13) * 0.25
    config = {
        "model": "exp-sum",
        "parameters": [_param(n, 0.0, 10.0) for n in EXP_TRUTH]
        + [_param("sigma", 0.0, 0.1, "noise")],
        "mechanisms": {"fast": ["a2", "r2"], "slow": ["a1", "r1"]},
        "constants": {},
    }
    model = model_from_config(config)
    theta = np.array(list(EXP_TRUTH.values()))
    clean = model.predict(theta, t[:, None]).predictions
    ds = Dataset(model.condition_names, t[:, None], noisy(clean, EXP_SIGMA, seed))
    zero = Dataset(model.condition_names, t[:, None], clean)
    gn = oracle_gauss_newton(model, theta, zero, EXP_SIGMA)
    w = np.sort(np.linalg.eigvalsh(gn))[::-1]
    oracle = {
        "clean_predictions": clean.tolist(),
        "gauss_newton_log": gn.tolist(),
        "gauss_newton_eigenvalues": w.tolist(),
        "condition_number": float(w[0] / w[-1]),
    }
    return _fixture("exp-sum", config, ds, EXP_TRUTH, EXP_SIGMA, seed, oracle)


def toy_conditions() -> np.ndarray:
    return np.array([[x, pg, r] for x in TOY_X for pg, r in TOY_LIGHT])


def _toy_polyp(seed: int) -> Fixture:
    from .reduction import score_mechanisms
    from .sloppiness import SensitivityMatrix, analyze

    names = list(TOY_TRUTH)
    config = {
        "model": "toy-polyp",
        "parameters": [_param(n, 0.0, TOY_UPPER[n]) for n in names]
        + [_param("sigma", 0.0, TOY_SIGMA_UPPER, "noise")],
        "mechanisms": json.loads(json.dumps(TOY_MECHANISMS)),
        "constants": {"k_calc": 1.0, "E0": 1.0},
        "sampler": dict(TOY_SAMPLER),
    }
    model = model_from_config(config)
    X = toy_conditions()
    theta = np.array([TOY_TRUTH[n] for n in names])
    ev = model.predict(theta, X)
    if not ev.converged:
        raise RuntimeError("toy polyp does not reach a steady state at the reference point")
    ds = Dataset(model.condition_names, X, noisy(ev.predictions, TOY_SIGMA, seed))

    P = theta[None]
    C = model.solve(P, X).state[0, :, 0]
    pump1 = theta[3] * (theta[5] * X[:, 1] + theta[6] * X[:, 2]) * C / (theta[4] + C)
    pump2 = theta[7] * C / (theta[8] + C)
    gn = oracle_gauss_newton(model, theta, Dataset(ds.condition_names, X, ev.predictions), TOY_SIGMA)
    spec = analyze(SensitivityMatrix("gauss_newton", gn, tuple(model.space.model_names)))
    scores = score_mechanisms(spec, model.space)
    oracle = {
        "clean_predictions": ev.predictions.tolist(),
        "pump2_flux_fraction_max": float(np.max(pump2 / (pump1 + pump2))),
        "gauss_newton_log": gn.tolist(),
        "gauss_newton_rescaled": spec.rescaled.tolist(),
        "gauss_newton_scores": {s.mechanism: s.score for s in scores},
    }
    return _fixture("toy-polyp", config, ds, TOY_TRUTH, TOY_SIGMA, seed, oracle)


def _fixture(name, config, ds, truth, sigma, seed, oracle) -> Fixture:
    config = dict(config)
    config["truth"] = {k: float(v) for k, v in truth.items()}
    config["sigma_true"] = float(sigma)
    config["seed"] = int(seed)
    return Fixture(name, config, ds, dict(truth), float(sigma), int(seed), oracle)


_GENERATORS = {"linear-log": _linear_log, "exp-sum": _exp_sum, "toy-polyp": _toy_polyp}

DEFAULT_SEED = 1


def generate_fixture(name: str, seed: int = DEFAULT_SEED) -> Fixture:
    """Build a benchmark fixture in memory.

    Raises
    ------
    KeyError
        Unknown fixture name.
    """
    if name not in _GENERATORS:
        raise KeyError(name)
    return _GENERATORS[name](int(seed))


def fixture_dir(name: str) -> Path:
    """Directory of a shipped fixture inside the installed package."""
    if name not in _GENERATORS:
        raise KeyError(name)
    return Path(str(resources.files("sloppy_reduce") / "fixtures" / name))


def load_fixture(name: str) -> Fixture:
    """Read a shipped fixture (config, data and oracle) from the package."""
    d = fixture_dir(name)
    config = json.loads((d / "config.json").read_text(encoding="utf-8"))
    oracle_path = d / "oracle.json"
    oracle = json.loads(oracle_path.read_text(encoding="utf-8")) if oracle_path.exists() else {}
    ds = Dataset.read_csv(d / "data.csv")
    return Fixture(name, config, ds, config["truth"], config["sigma_true"], config["seed"], oracle)


def evidence_oracle(name: str, drops, runs=10, M=20000, seed0=1000):
    """Long-run log-evidence estimates for the original and reduced models.

    ``runs`` independent SMC runs per model at ``M`` particles; returns a
    mapping ``label -> {"runs": [...], "mean": ..., "sd": ...}`` with the
    label ``"original"`` for the full model.
    """
    from .reduction import candidate_label
    from .smc import run_smc, sampler_options

    fx = load_fixture(name)
    base = fx.model
    options = sampler_options(fx.config)
    out = {}
    for drop in [frozenset(), *map(frozenset, drops)]:
        model = base.reduce(drop)
        values = [run_smc(model, fx.dataset, M=M, seed=seed0 + i, **options).log_evidence
                  for i in range(runs)]
        out[candidate_label(drop)] = {
            "runs": values,
            "mean": float(np.mean(values)),
            "sd": float(np.std(values, ddof=1)) if runs > 1 else math.nan,
            "M": int(M),
        }
    return out
