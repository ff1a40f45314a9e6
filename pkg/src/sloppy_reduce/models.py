"""Mechanistic model interface and the three built-in benchmark models.

Every model evaluates a *stack* of parameter vectors against a table of
observation conditions in one call, returning predictions of shape
``(n_thetas, n_conditions)`` and one convergence flag per parameter vector.
A failed evaluation is data, not an exception: the likelihood maps it to
``-inf`` and the prior treats it as zero support.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ConfigError, ShapeError
from .params import ParameterSpace, remove_mechanisms


@dataclass(frozen=True)
class ModelEval:
    predictions: np.ndarray
    converged: np.ndarray

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))


class MechanisticModel:
    """Base class for pluggable models.

    Subclasses set ``name``, ``condition_names`` and ``zero_flux`` and
    implement :meth:`_evaluate`, which receives the complete (unreduced)
    model-role parameter matrix in canonical order.

    ``zero_flux`` maps each removable parameter to the value that switches
    its mechanism off (a pump rate of 0, a diffusion coefficient of 0, ...).
    A reduced model is the same model with those values hard-wired.
    """

    name = "custom"
    condition_names: tuple = ()
    zero_flux: Mapping[str, float] = {}

    def __init__(self, space: ParameterSpace, constants: Mapping[str, float] | None = None):
        self.space = space
        self.constants = dict(constants or {})

    # base space before any reduction
    @property
    def full_space(self) -> ParameterSpace:
        return self.space

    @property
    def dropped(self) -> frozenset:
        return frozenset()

    def _evaluate(self, params: np.ndarray, conditions: np.ndarray):
        raise NotImplementedError

    def _model_params(self, theta) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if theta.shape[-1] == self.space.n_params:
            theta = theta[:, self.space.model_mask]
        elif theta.shape[-1] != self.space.n_p:
            raise ShapeError(
                f"{self.name}: expected {self.space.n_p} model parameters "
                f"(or {self.space.n_params} with noise), got {theta.shape[-1]}"
            )
        return theta

    def _conditions(self, conditions) -> np.ndarray:
        X = np.asarray(conditions, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if self.condition_names and X.shape[1] != len(self.condition_names):
            raise ShapeError(
                f"{self.name}: conditions need columns {list(self.condition_names)}, "
                f"got {X.shape[1]} columns"
            )
        if not np.all(np.isfinite(X)):
            raise ShapeError(f"{self.name}: conditions must be finite")
        return X

    def predict_batch(self, thetas, conditions) -> ModelEval:
        """Evaluate ``thetas`` of shape ``(m, n_p)`` (or with noise column)."""
        P = self._model_params(thetas)
        X = self._conditions(conditions)
        pred, conv = self._evaluate(P, X)
        conv = np.asarray(conv, dtype=bool) & np.all(np.isfinite(pred), axis=1)
        return ModelEval(pred, conv)

    def predict(self, theta, conditions) -> ModelEval:
        """Evaluate a single parameter vector; predictions have shape ``(n,)``."""
        ev = self.predict_batch(np.atleast_2d(theta), conditions)
        return ModelEval(ev.predictions[0], ev.converged[0])

    def reduce(self, drop: Iterable[str]) -> "MechanisticModel":
        drop = frozenset(drop)
        if not drop:
            return self
        return ReducedModel(self, drop)

    def to_config(self) -> dict:
        doc = {"model": self.name}
        doc.update(self.full_space.to_config())
        doc["constants"] = dict(self.constants)
        return doc


class ReducedModel(MechanisticModel):
    """A model with the parameters of some mechanisms fixed at zero flux."""

    def __init__(self, base: MechanisticModel, drop: Iterable[str]):
        drop = frozenset(drop)
        space = remove_mechanisms(base.space, drop)
        super().__init__(space, base.constants)
        self.base = base
        self.name = base.name
        self.condition_names = base.condition_names
        self.zero_flux = base.zero_flux
        base_names = base.space.model_names
        keep = space.model_names
        self._keep_idx = np.array([base_names.index(n) for n in keep], dtype=int)
        gone = [n for n in base_names if n not in keep]
        missing = [n for n in gone if n not in base.zero_flux]
        if missing:
            raise ConfigError(f"{base.name}: no zero-flux value for {missing}")
        self._gone_idx = np.array([base_names.index(n) for n in gone], dtype=int)
        self._gone_val = np.array([base.zero_flux[n] for n in gone], dtype=float)
        self._dropped = space.dropped

    @property
    def full_space(self) -> ParameterSpace:
        return self.base.space

    @property
    def dropped(self) -> frozenset:
        return self._dropped

    def expand(self, P: np.ndarray) -> np.ndarray:
        full = np.empty((P.shape[0], self.base.space.n_p))
        full[:, self._keep_idx] = P
        full[:, self._gone_idx] = self._gone_val
        return full

    def _evaluate(self, params, conditions):
        return self.base._evaluate(self.expand(params), conditions)

    def reduce(self, drop):
        drop = frozenset(drop) | self._dropped
        return self.base.reduce(drop)


# ---------------------------------------------------------------------------
# steady-state solver


@dataclass(frozen=True)
class SteadyState:
    state: np.ndarray
    converged: np.ndarray
    iterations: int


def _fd_jacobian(flux_fn, x, fx, idx, h=1e-7):
    d = x.shape[-1]
    J = np.empty(x.shape + (d,))
    for j in range(d):
        step = h * (1.0 + np.abs(x[:, j]))
        xp = x.copy()
        xp[:, j] += step
        J[:, :, j] = (flux_fn(xp, idx) - fx) / step[:, None]
    return J


def _max_abs(a):
    # max |a| over a short trailing axis; column ufuncs beat a reduction here
    out = np.abs(a[:, 0])
    for j in range(1, a.shape[-1]):
        out = np.maximum(out, np.abs(a[:, j]))
    return out


def _sum_sq(a):
    out = a[:, 0] * a[:, 0]
    for j in range(1, a.shape[-1]):
        out = out + a[:, j] * a[:, j]
    return out


def _solve(J, b):
    # batched ``J @ s = b`` that flags singular systems instead of raising
    if J.shape[-1] == 2:
        a, bb, c, d = J[:, 0, 0], J[:, 0, 1], J[:, 1, 0], J[:, 1, 1]
        det = a * d - bb * c
        ok = np.abs(det) > 1e-300
        det = np.where(ok, det, 1.0)
        s0 = (d * b[:, 0] - bb * b[:, 1]) / det
        s1 = (a * b[:, 1] - c * b[:, 0]) / det
        return np.stack([s0, s1], axis=-1), ok
    out = np.zeros_like(b)
    ok = np.ones(b.shape[0], bool)
    for i in range(b.shape[0]):
        try:
            out[i] = np.linalg.solve(J[i], b[i])
        except np.linalg.LinAlgError:
            ok[i] = False
    return out, ok


def _plain(fn):
    return None if fn is None else (lambda x, idx: fn(x))


def steady_state(
    flux_fn: Callable[[np.ndarray], np.ndarray],
    initial_guess,
    jac_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    max_iter: int = 200,
    tol: float = 1e-10,
    indexed: bool = False,
) -> SteadyState:
    """Find a root of ``flux_fn`` by damped Newton with backtracking.

    Works on a batch: ``initial_guess`` has shape ``(..., d)`` and
    ``flux_fn`` maps such an array to one of the same shape, each trailing
    vector being an independent system. Convergence of a system means
    ``max|flux| <= tol * (1 + max|state|)``; systems that miss this within
    ``max_iter`` iterations are reported with ``converged=False``.

    With ``indexed=True`` the callables are invoked as ``fn(x, idx)`` on a
    flat ``(k, d)`` subset of the systems, ``idx`` holding their positions
    in the flattened batch; only unfinished systems are then iterated.
    """
    x0 = np.array(initial_guess, dtype=float)
    if x0.ndim == 0:
        x0 = x0[None]
    shape = x0.shape
    d = shape[-1]
    if not indexed:
        # generic callables see the full batch every time
        flat_fn, flat_jac = flux_fn, jac_fn

        def flux_fn(x, idx):
            full = np.broadcast_to(x0, shape).copy().reshape(-1, d)
            full[idx] = x
            return np.asarray(flat_fn(full.reshape(shape)), dtype=float).reshape(-1, d)[idx]

        if flat_jac is not None:
            def jac_fn(x, idx):
                full = np.broadcast_to(x0, shape).copy().reshape(-1, d)
                full[idx] = x
                return np.asarray(flat_jac(full.reshape(shape)), dtype=float).reshape(-1, d, d)[idx]

    x = x0.reshape(-1, d).copy()
    n = x.shape[0]
    idx = np.arange(n)
    fx = np.empty_like(x)
    fx[:] = flux_fn(x, idx)
    converged = np.zeros(n, bool)
    it = 0
    act = idx
    for it in range(max_iter + 1):
        full = act.size == n
        xa, fa = (x, fx) if full else (x[act], fx[act])
        done = np.isfinite(_max_abs(fa)) & (_max_abs(fa) <= tol * (1.0 + _max_abs(xa)))
        converged[act[done]] = True
        if np.any(done):
            act = act[~done]
            xa, fa = x[act], fx[act]
        if act.size == 0 or it == max_iter:
            break
        J = jac_fn(xa, act) if jac_fn is not None else _fd_jacobian(flux_fn, xa, fa, act)
        step, ok = _solve(J, -fa)
        ok &= np.all(np.isfinite(step), axis=-1)
        # singular or non-finite Newton systems are abandoned
        if not np.all(ok):
            act, xa, fa, step = act[ok], xa[ok], fa[ok], step[ok]
        if act.size == 0:
            break
        merit = _sum_sq(fa)
        t = np.ones(act.size)
        pending = np.ones(act.size, bool)
        x_new, f_new = xa.copy(), fa.copy()
        sub = np.arange(act.size)
        for _ in range(40):
            trial = xa[sub] + t[sub, None] * step[sub]
            f_trial = flux_fn(trial, act[sub])
            m_trial = _sum_sq(f_trial)
            accept = np.isfinite(m_trial) & (m_trial <= (1.0 - 1e-4 * t[sub]) * merit[sub])
            x_new[sub[accept]] = trial[accept]
            f_new[sub[accept]] = f_trial[accept]
            pending[sub[accept]] = False
            sub_next = sub[~accept]
            if sub_next.size == 0:
                break
            t[sub_next] *= 0.5
            last_trial, last_f, last_sub = trial[~accept], f_trial[~accept], sub_next
            sub = sub_next
        else:
            # no decrease found: take the smallest step anyway so progress is possible
            x_new[last_sub] = last_trial
            f_new[last_sub] = last_f
        if act.size == n:
            x, fx = x_new, f_new
        else:
            x[act], fx[act] = x_new, f_new
    return SteadyState(x.reshape(shape), converged.reshape(shape[:-1]), it)


# ---------------------------------------------------------------------------
# built-in models


class LinearLogModel(MechanisticModel):
    """``y = A @ ln(theta)``; each condition row is one row of ``A``.

    The log-likelihood is exactly quadratic in ``phi = ln(theta)`` with
    Hessian ``-A.T @ A / sigma**2``, which makes this the analytic oracle.
    """

    name = "linear-log"

    def __init__(self, space, constants=None):
        super().__init__(space, constants)
        self.condition_names = tuple(f"a{i + 1}" for i in range(space.n_p))
        self.zero_flux = {n: 1.0 for n in space.model_names}

    def _evaluate(self, params, conditions):
        if conditions.shape[1] != params.shape[1]:
            raise ShapeError(
                f"design has {conditions.shape[1]} columns but model has {params.shape[1]} parameters"
            )
        with np.errstate(divide="ignore", invalid="ignore"):
            pred = np.log(params) @ conditions.T
        return pred, np.all(params > 0, axis=1)


class ExpSumModel(MechanisticModel):
    """Sum of two exponential decays, ``a1 exp(-r1 t) + a2 exp(-r2 t)``."""

    name = "exp-sum"
    condition_names = ("t",)
    zero_flux = {"a1": 0.0, "r1": 1.0, "a2": 0.0, "r2": 1.0}

    def _evaluate(self, params, conditions):
        if params.shape[1] != 4:
            raise ShapeError("exp-sum needs parameters (a1, r1, a2, r2)")
        t = conditions[:, 0]
        a1, r1, a2, r2 = (params[:, i : i + 1] for i in range(4))
        pred = a1 * np.exp(-r1 * t) + a2 * np.exp(-r2 * t)
        return pred, np.all(params >= 0, axis=1)


class ToyPolypModel(MechanisticModel):
    """Two-compartment steady-state calcification model.

    State is the concentration in the coelenteron ``C`` and in the
    calcifying medium ``E``. Seawater at concentration ``X`` exchanges with
    ``C`` at rate ``s``; ``C`` and ``E`` exchange through two diffusion
    channels that only appear through ``k_pp + k_co2``; two saturating pumps
    move material from ``C`` to ``E`` (pump 1 is fuelled by photosynthesis
    ``Pg`` and respiration ``R``); calcification removes it from ``E`` at
    ``k_calc * max(E - E0, 0)``, which is the model output.
    """

    name = "toy-polyp"
    condition_names = ("X", "Pg", "R")
    parameter_names = ("s", "k_pp", "k_co2", "Vmax1", "Km1", "alpha", "beta", "Vmax2", "Km2")
    zero_flux = {"k_pp": 0.0, "k_co2": 0.0, "Vmax1": 0.0, "Km1": 1.0,
                 "alpha": 0.5, "beta": 0.5, "Vmax2": 0.0, "Km2": 1.0}

    def __init__(self, space, constants=None):
        super().__init__(space, constants)
        if tuple(space.model_names) != self.parameter_names:
            raise ConfigError(
                f"toy-polyp expects model parameters {list(self.parameter_names)} in order"
            )
        self.k_calc = float(self.constants.get("k_calc", 1.0))
        self.E0 = float(self.constants.get("E0", 1.0))

    def _fluxes(self, P, X):
        # one flat entry per (parameter row, condition) pair, selected by idx
        m, n = P.shape[0], X.shape[0]

        def pairs(col):
            return np.broadcast_to(col, (m, n)).ravel()

        s, kpp, kco2, V1, K1, al, be, V2, K2 = (pairs(P[:, i : i + 1]) for i in range(9))
        x, pg, r = (pairs(X[None, :, i]) for i in range(3))
        drive = V1 * (al * pg + be * r)
        k = kpp + kco2
        kc, E0 = self.k_calc, self.E0

        def flux(state, idx):
            C, E = state[:, 0], state[:, 1]
            Cp = np.maximum(C, 0.0)
            k_, K1_, K2_ = k[idx], K1[idx], K2[idx]
            pump = drive[idx] * Cp / (K1_ + Cp) + V2[idx] * Cp / (K2_ + Cp)
            G = kc * np.maximum(E - E0, 0.0)
            out = np.empty_like(state)
            out[:, 0] = s[idx] * (x[idx] - C) + k_ * (E - C) - pump
            out[:, 1] = k_ * (C - E) + pump - G
            return out

        def jac(state, idx):
            C, E = state[:, 0], state[:, 1]
            Cp = np.maximum(C, 0.0)
            k_, K1_, K2_ = k[idx], K1[idx], K2[idx]
            dpump = np.where(C > 0, drive[idx] * K1_ / (K1_ + Cp) ** 2 + V2[idx] * K2_ / (K2_ + Cp) ** 2, 0.0)
            dG = np.where(E > E0, kc, 0.0)
            J = np.empty(state.shape + (2,))
            J[:, 0, 0] = -s[idx] - k_ - dpump
            J[:, 0, 1] = k_
            J[:, 1, 0] = k_ + dpump
            J[:, 1, 1] = -k_ - dG
            return J

        return flux, jac, x

    def solve(self, P, X):
        """Steady states of every (parameter row, condition) pair."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        flux, jac, x = self._fluxes(P, X)
        # initial guess C = E = X
        guess = np.stack([x, x], axis=-1).reshape(P.shape[0], X.shape[0], 2)
        # relative tol 1e-12 keeps residuals below 1e-10 in absolute terms for
        # states up to ~100; Newton needs at most one extra step for it
        return steady_state(flux, guess, jac_fn=jac, indexed=True, tol=1e-12)

    def _evaluate(self, params, conditions):
        ss = self.solve(params, conditions)
        E = ss.state[..., 1]
        out = self.k_calc * np.maximum(E - self.E0, 0.0)
        conv = np.all(ss.converged & (E >= 0), axis=1)
        return out, conv


BUILTIN_MODELS = {
    LinearLogModel.name: LinearLogModel,
    ExpSumModel.name: ExpSumModel,
    ToyPolypModel.name: ToyPolypModel,
}


def model_from_config(doc: Mapping) -> MechanisticModel:
    """Build a built-in model from its JSON config document."""
    kind = doc.get("model")
    if kind not in BUILTIN_MODELS:
        raise ConfigError(f"unknown model {kind!r}; built-ins are {sorted(BUILTIN_MODELS)}")
    space = ParameterSpace.from_config(doc)
    constants = doc.get("constants", {}) or {}
    try:
        constants = {str(k): float(v) for k, v in constants.items()}
    except (TypeError, ValueError):
        raise ConfigError("constants must map names to numbers") from None
    return BUILTIN_MODELS[kind](space, constants)


def load_model(path) -> MechanisticModel:
    try:
        with open(Path(path), encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model config {path}: {exc}") from None
    return model_from_config(doc)
