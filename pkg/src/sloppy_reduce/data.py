"""Observation datasets: a table of conditions plus one observed column."""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError


def fmt(x: float) -> str:
    """Shortest text that round-trips a float exactly."""
    return repr(float(x))


@dataclass(frozen=True)
class Dataset:
    condition_names: tuple
    conditions: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.conditions, dtype=float)
        y = np.asarray(self.observed, dtype=float).ravel()
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != y.shape[0]:
            raise ShapeError(f"{X.shape[0]} condition rows but {y.shape[0]} observations")
        if X.shape[1] != len(self.condition_names):
            raise ShapeError("condition_names does not match the number of condition columns")
        if y.size == 0:
            raise ShapeError("dataset is empty")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ShapeError("dataset values must be finite")
        object.__setattr__(self, "condition_names", tuple(self.condition_names))
        object.__setattr__(self, "conditions", X)
        object.__setattr__(self, "observed", y)

    @property
    def n_d(self) -> int:
        return self.observed.shape[0]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*self.condition_names, "observed"])
        for row, obs in zip(self.conditions, self.observed):
            w.writerow([*(fmt(v) for v in row), fmt(obs)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv_text(), encoding="utf-8", newline="")

    def sha256(self) -> str:
        return hashlib.sha256(self.to_csv_text().encode("utf-8")).hexdigest()

    @classmethod
    def read_csv(cls, path) -> "Dataset":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read dataset {path}: {exc}") from None
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][-1:] != ["observed"]:
            raise ConfigError(f"{path}: header must end with an 'observed' column")
        header, body = rows[0], [r for r in rows[1:] if r]
        try:
            values = np.array([[float(v) for v in r] for r in body], dtype=float)
        except ValueError as exc:
            raise ConfigError(f"{path}: non-numeric entry ({exc})") from None
        if values.ndim != 2 or values.shape[1] != len(header):
            raise ConfigError(f"{path}: ragged rows")
        return cls(tuple(header[:-1]), values[:, :-1], values[:, -1])


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
