"""Observation matrix: one row per user, site counts plus optional covariates."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Role", "ObservationMatrix"]


class Role(str, enum.Enum):
    SITE = "site"
    AGE = "age"
    GENDER = "gender"


@dataclass
class ObservationMatrix:
    """Integer table of shape (n, p) with a label and a role per column.

    Site columns hold visit counts, the age column raw (tabulated) ages and
    the gender column a small set of integer codes.
    """

    values: np.ndarray
    labels: list[str]
    roles: list[Role] = field(default_factory=list)

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError("values must be a 2-d array")
        if values.dtype.kind == "f":
            if not np.all(np.isfinite(values)) or np.any(values != np.floor(values)):
                raise ValueError("values must be integers")
        self.values = values.astype(np.int64)
        self.labels = [str(s) for s in self.labels]
        if not self.roles:
            self.roles = [Role.SITE] * values.shape[1]
        self.roles = [Role(r) for r in self.roles]
        if len(self.labels) != values.shape[1] or len(self.roles) != values.shape[1]:
            raise ValueError("labels/roles do not match the number of columns")
        if sum(r is Role.AGE for r in self.roles) > 1 or sum(r is Role.GENDER for r in self.roles) > 1:
            raise ValueError("at most one age and one gender column")
        if np.any(self.values < 0):
            raise ValueError("values must be nonnegative")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def column(self, j: int) -> np.ndarray:
        return self.values[:, j]

    def site_indices(self) -> list[int]:
        return [j for j, r in enumerate(self.roles) if r is Role.SITE]

    def take(self, rows) -> "ObservationMatrix":
        return ObservationMatrix(self.values[rows], list(self.labels), list(self.roles))

    def select(self, cols) -> "ObservationMatrix":
        cols = list(cols)
        return ObservationMatrix(
            self.values[:, cols], [self.labels[j] for j in cols], [self.roles[j] for j in cols]
        )

    def zero_rates(self) -> np.ndarray:
        return np.mean(self.values == 0, axis=0)
