"""Parameter metadata, mechanism grouping and parameter transforms.

Two transforms are used throughout the package:

* the natural log ``phi = ln(theta)``, the coordinate system of every
  sensitivity matrix, and
* the bounded logit ``ln((theta - l) / (u - theta))``, which maps the box of a
  uniform prior onto the real line for the optimizer and the sampler.

Parameter order is the declaration order of the config document and is the
canonical index order everywhere else.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DomainError

MODEL = "model"
NOISE = "noise"


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    lower: float
    upper: float
    role: str = MODEL

    def __post_init__(self):
        if self.role not in (MODEL, NOISE):
            raise ConfigError(f"parameter {self.name!r}: unknown role {self.role!r}")
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ConfigError(f"parameter {self.name!r}: bounds must be finite")
        if not self.lower < self.upper:
            raise ConfigError(
                f"parameter {self.name!r}: lower={self.lower} must be < upper={self.upper}"
            )

    @property
    def width(self) -> float:
        return self.upper - self.lower


@dataclass(frozen=True)
class ParameterSpace:
    """Ordered parameter specs plus a mechanism -> parameter-name grouping.

    Parameters
    ----------
    specs : sequence of ParameterSpec
        Exactly one spec must have ``role="noise"``.
    mechanisms : mapping of str to sequence of str
        Disjoint groups of model-role parameter names. A mechanism may be
        empty (a process with no estimated parameter); it is then inert.
    removable : mapping of str to bool, optional
        Mechanisms missing from this mapping are removable.
    dropped : iterable of str, optional
        Mechanisms already removed from the model this space belongs to.
    """

    specs: tuple
    mechanisms: Mapping[str, tuple] = field(default_factory=dict)
    removable: Mapping[str, bool] = field(default_factory=dict)
    dropped: frozenset = frozenset()

    def __post_init__(self):
        specs = tuple(self.specs)
        mechs = {str(k): tuple(v) for k, v in dict(self.mechanisms).items()}
        removable = {k: bool(self.removable.get(k, True)) for k in mechs}
        unknown = set(self.removable) - set(mechs) - set(self.dropped)
        if unknown:
            raise ConfigError(f"removable flags for unknown mechanisms: {sorted(unknown)}")
        object.__setattr__(self, "specs", specs)
        object.__setattr__(self, "mechanisms", MappingProxyType(mechs))
        object.__setattr__(self, "removable", MappingProxyType(removable))
        object.__setattr__(self, "dropped", frozenset(self.dropped))

        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ConfigError("parameter names must be unique")
        n_noise = sum(s.role == NOISE for s in specs)
        if n_noise != 1:
            raise ConfigError(f"exactly one noise parameter required, found {n_noise}")
        model_names = set(self.model_names)
        seen: dict[str, str] = {}
        for mech, members in mechs.items():
            for p in members:
                if p not in model_names:
                    raise ConfigError(
                        f"mechanism {mech!r} lists {p!r}, which is not a model parameter"
                    )
                if p in seen:
                    raise ConfigError(
                        f"parameter {p!r} belongs to both {seen[p]!r} and {mech!r}"
                    )
                seen[p] = mech

    # -- lookups -----------------------------------------------------------
    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    @property
    def model_names(self) -> list[str]:
        return [s.name for s in self.specs if s.role == MODEL]

    @property
    def noise_name(self) -> str:
        return next(s.name for s in self.specs if s.role == NOISE)

    @property
    def noise_index(self) -> int:
        return next(i for i, s in enumerate(self.specs) if s.role == NOISE)

    @property
    def model_mask(self) -> np.ndarray:
        return np.array([s.role == MODEL for s in self.specs])

    @property
    def model_indices(self) -> np.ndarray:
        return np.flatnonzero(self.model_mask)

    @property
    def n_params(self) -> int:
        return len(self.specs)

    @property
    def n_p(self) -> int:
        """Number of model-role parameters."""
        return len(self.model_names)

    @property
    def lower(self) -> np.ndarray:
        return np.array([s.lower for s in self.specs], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([s.upper for s in self.specs], dtype=float)

    def index(self, name: str) -> int:
        for i, s in enumerate(self.specs):
            if s.name == name:
                return i
        raise KeyError(name)

    def mechanism_of(self, name: str) -> str | None:
        for mech, members in self.mechanisms.items():
            if name in members:
                return mech
        return None

    def as_dict(self, values: Sequence[float]) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, values)}

    def from_mapping(self, values: Mapping[str, float]) -> np.ndarray:
        try:
            return np.array([float(values[n]) for n in self.names])
        except KeyError as exc:
            raise ConfigError(f"missing value for parameter {exc.args[0]!r}") from None

    def contains(self, theta, strict: bool = True) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if strict:
            ok = (theta > self.lower) & (theta < self.upper)
        else:
            ok = (theta >= self.lower) & (theta <= self.upper)
        return np.all(ok, axis=-1)

    # -- serialization -----------------------------------------------------
    def to_config(self) -> dict:
        mechs: dict = {k: list(v) for k, v in self.mechanisms.items()}
        mechs["_removable"] = dict(self.removable)
        return {
            "parameters": [
                {"name": s.name, "lower": s.lower, "upper": s.upper, "role": s.role}
                for s in self.specs
            ],
            "mechanisms": mechs,
        }

    @classmethod
    def from_config(cls, doc: Mapping) -> "ParameterSpace":
        try:
            specs = tuple(
                ParameterSpec(
                    name=str(p["name"]),
                    lower=float(p["lower"]),
                    upper=float(p["upper"]),
                    role=str(p.get("role", MODEL)),
                )
                for p in doc["parameters"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed parameter entry: {exc}") from None
        mechs = dict(doc.get("mechanisms", {}))
        removable = mechs.pop("_removable", {}) or {}
        return cls(specs, mechs, removable)

    @classmethod
    def load(cls, path) -> "ParameterSpace":
        with open(Path(path), encoding="utf-8") as fh:
            return cls.from_config(json.load(fh))


def log_transform(theta, space: ParameterSpace | None = None) -> np.ndarray:
    """Elementwise natural log of a parameter vector (or a stack of them).

    The noise parameter is transformed along with the rest; use
    ``space.model_mask`` to drop it before building sensitivity matrices.

    Raises
    ------
    DomainError
        If any value is not strictly positive. The message names the first
        offending parameter when ``space`` is given.
    """
    theta = np.asarray(theta, dtype=float)
    bad = ~(theta > 0)
    if np.any(bad):
        col = int(np.flatnonzero(np.any(bad.reshape(-1, theta.shape[-1]), axis=0))[0])
        label = space.names[col] if space is not None else f"index {col}"
        raise DomainError(f"log transform needs positive values; parameter {label} is not")
    return np.log(theta)


def _check_bounds(lower, upper):
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(~(lower < upper)):
        raise DomainError("lower bound must be below upper bound")
    return lower, upper


def logit_transform(theta, lower, upper) -> np.ndarray:
    """Map values in the open box ``(lower, upper)`` onto the real line."""
    theta = np.asarray(theta, dtype=float)
    lower, upper = _check_bounds(lower, upper)
    if np.any(~((theta > lower) & (theta < upper))):
        raise DomainError("logit transform needs values strictly inside their bounds")
    return np.log(theta - lower) - np.log(upper - theta)


def logit_inverse(z, lower, upper) -> np.ndarray:
    """Inverse of :func:`logit_transform`; returns values in ``[lower, upper]``.

    Computed through the logistic function so that large ``|z|`` does not
    overflow.
    """
    z = np.asarray(z, dtype=float)
    lower, upper = _check_bounds(lower, upper)
    # lower + (upper - lower) * sigmoid(z), split by sign for stability
    out = np.empty(np.broadcast(z, lower, upper).shape)
    lo = np.broadcast_to(lower, out.shape)
    hi = np.broadcast_to(upper, out.shape)
    zz = np.broadcast_to(z, out.shape)
    pos = zz >= 0
    ez = np.exp(-np.abs(zz))
    out[pos] = hi[pos] - (hi[pos] - lo[pos]) * ez[pos] / (1.0 + ez[pos])
    neg = ~pos
    out[neg] = lo[neg] + (hi[neg] - lo[neg]) * ez[neg] / (1.0 + ez[neg])
    return out


def logit_log_jacobian(z, lower, upper) -> np.ndarray:
    """``sum_j ln |d theta_j / d z_j|`` for the inverse logit, over the last axis."""
    z = np.asarray(z, dtype=float)
    lower, upper = _check_bounds(lower, upper)
    # d theta/dz = (u - l) * s * (1 - s), with s = sigmoid(z)
    log_s = -np.logaddexp(0.0, -z)
    log_1ms = -np.logaddexp(0.0, z)
    return np.sum(np.log(upper - lower) + log_s + log_1ms, axis=-1)


def remove_mechanisms(space: ParameterSpace, drop: Iterable[str]) -> ParameterSpace:
    """Return the space left after deleting every parameter of ``drop``.

    Survivor order is preserved and the noise parameter is kept. Mechanisms
    that were already dropped are ignored, so the operation is idempotent.

    Raises
    ------
    KeyError
        Unknown mechanism name.
    ConfigError
        A non-removable mechanism was requested, or nothing would be left.
    """
    drop = set(drop)
    # already gone -> no-op
    todo = drop - set(space.dropped)
    for name in sorted(todo):
        if name not in space.mechanisms:
            raise KeyError(name)
        if not space.removable[name]:
            raise ConfigError(f"mechanism {name!r} is marked non-removable")
    if not todo:
        return space
    if set(space.mechanisms) <= todo:
        raise ConfigError("cannot drop every mechanism of a model")
    gone = {p for m in todo for p in space.mechanisms[m]}
    specs = tuple(s for s in space.specs if s.name not in gone)
    if not any(s.role == MODEL for s in specs):
        raise ConfigError("dropping these mechanisms leaves no model parameters")
    mechs = {k: v for k, v in space.mechanisms.items() if k not in todo}
    removable = {k: v for k, v in space.removable.items() if k not in todo}
    return ParameterSpace(specs, mechs, removable, space.dropped | todo)
