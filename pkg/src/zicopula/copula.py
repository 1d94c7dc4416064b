"""Censored copula model: thresholds, latent transforms and pairwise estimation.

Each column of the observation matrix maps to one latent coordinate ``Z_i``:

* site counts are censored below ``t_i`` (a zero) and otherwise transformed
  to ``z = M_i^{-1}(F_PIV(k - 1/2))`` with ``M_i`` the cdf of ``Z_i | Z_i >= t_i``;
* the age covariate only records the half space ``Z_a >= t_a`` (age above the cut);
* the gender covariate is censored from above at one category and the other
  categories are spread over ``Z_b < t_b`` by a half-step empirical cdf.
"""
from __future__ import annotations

import enum
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy import optimize, special

from .data import ObservationMatrix, Role
from .dpiv import DPivFit, _logpmf_raw, _sf_raw, dpiv_select
from .latent import (
    LatentSpec,
    biv_cdf,
    biv_logpdf,
    is_gaussian,
    lower_trunc_quantile,
    trunc_logpdf,
    trunc_quantile,
    uni_cdf,
    uni_logpdf,
    uni_quantile,
)

__all__ = [
    "Censored",
    "ColumnSpec",
    "CopulaModel",
    "LatentStates",
    "CopulaError",
    "DegenerateColumnError",
    "NonIdentifiablePair",
    "RhoEstimate",
    "CDF_CLAMP",
    "DEFAULT_AGE_CUT",
    "estimate_thresholds",
    "build_columns",
    "fit_marginals",
    "to_latent",
    "latent_states",
    "column_loglik",
    "pair_loglik",
    "PairLikelihood",
    "estimate_rho",
    "assemble_sigma",
    "fit_copula",
]

#: Probabilities fed into latent quantiles are kept inside [CDF_CLAMP, 1 - CDF_CLAMP].
CDF_CLAMP = 1e-12
DEFAULT_AGE_CUT = 35
RHO_EPS = 1e-6

POINT, BELOW, ABOVE = 0, 1, 2


class CopulaError(RuntimeError):
    pass


class DegenerateColumnError(CopulaError, ValueError):
    """A column has no zeros or only zeros, so its threshold is infinite."""


class NonIdentifiablePair(CopulaError):
    """Every observation of a pair falls in the same censored cell."""


class Censored(enum.Enum):
    BELOW = "below"
    ABOVE = "above"


@dataclass(frozen=True)
class ColumnSpec:
    """Marginal description of one latent coordinate.

    ``table`` holds ``(value, cumulative probability)`` pairs: for gender the
    cdf over the uncensored categories, for age the cdf of the raw ages.
    """

    role: Role
    label: str
    threshold: float
    marginal: DPivFit | None = None
    table: tuple[tuple[int, float], ...] = ()
    age_cut: int | None = None
    censored_value: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        if self.role is Role.SITE and self.marginal is None:
            raise CopulaError(f"site column {self.label!r} needs a fitted D-PIV marginal")
        if self.role is Role.GENDER and self.censored_value is None:
            raise CopulaError("gender column needs its censored-above category")
        if self.role is Role.AGE and self.age_cut is None:
            raise CopulaError("age column needs an age cut")

    def positive(self, x) -> np.ndarray:
        """Indicator of the event ``Z >= t`` for observed values."""
        x = np.asarray(x)
        if self.role is Role.SITE:
            return x >= 1
        if self.role is Role.AGE:
            return x > self.age_cut
        return x == self.censored_value


@dataclass(frozen=True)
class CopulaModel:
    spec: LatentSpec
    columns: tuple[ColumnSpec, ...]
    n_train: int = 0
    sigma_stderr: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        if self.spec.dim != len(self.columns):
            raise CopulaError("correlation dimension does not match the columns")

    @property
    def nu(self) -> float:
        return self.spec.nu

    @property
    def sigma(self) -> np.ndarray:
        return self.spec.corr

    @property
    def thresholds(self) -> np.ndarray:
        return np.array([c.threshold for c in self.columns])

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.columns]

    @property
    def dim(self) -> int:
        return len(self.columns)

    def with_sigma(self, sigma) -> "CopulaModel":
        return replace(self, spec=LatentSpec(self.nu, sigma), sigma_stderr=None)


# ---------------------------------------------------------------------------
# thresholds and marginal specs


def _rate_to_threshold(rate, n, nu, label, clamp):
    if rate <= 0 or rate >= 1:
        if not clamp:
            raise DegenerateColumnError(
                f"column {label!r} has censoring rate {rate:.3g}; threshold is infinite"
            )
        lo, hi = 1.0 / (n + 1), n / (n + 1.0)
        warnings.warn(f"column {label!r}: censoring rate {rate:.3g} clamped into [{lo:.3g}, {hi:.3g}]")
        rate = min(max(rate, lo), hi)
    return float(uni_quantile(nu, rate))


def _censoring_rates(data: ObservationMatrix, age_cut, censored_value) -> np.ndarray:
    rates = []
    for j, role in enumerate(data.roles):
        x = data.column(j)
        if role is Role.SITE:
            rates.append(np.mean(x == 0))
        elif role is Role.AGE:
            rates.append(np.mean(x <= age_cut))
        else:
            rates.append(np.mean(x != censored_value))
    return np.array(rates, dtype=float)


def _default_censored_value(x) -> int:
    return int(np.max(x))


def estimate_thresholds(
    data: ObservationMatrix,
    nu: float = math.inf,
    *,
    age_cut: int = DEFAULT_AGE_CUT,
    censored_value: int | None = None,
    clamp: bool = False,
) -> np.ndarray:
    """``t_i = Q_nu(n_i / n)`` with ``n_i`` the number of censored-below rows.

    For sites that is the number of zeros, for age the number of ages at or
    below ``age_cut`` and for gender the rows outside the censored-above
    category.  Rates of 0 or 1 raise :class:`DegenerateColumnError` unless
    ``clamp`` is set, in which case they are clamped to ``[1/(n+1), n/(n+1)]``.
    """
    if data.n < 1:
        raise CopulaError("no observations")
    if censored_value is None and Role.GENDER in data.roles:
        censored_value = _default_censored_value(data.column(data.roles.index(Role.GENDER)))
    rates = _censoring_rates(data, age_cut, censored_value)
    return np.array([
        _rate_to_threshold(r, data.n, nu, lab, clamp) for r, lab in zip(rates, data.labels)
    ])


def _cdf_table(values) -> tuple[tuple[int, float], ...]:
    v, c = np.unique(np.asarray(values, dtype=np.int64), return_counts=True)
    cdf = np.cumsum(c) / c.sum()
    cdf[-1] = 1.0
    return tuple((int(a), float(b)) for a, b in zip(v, cdf))


def fit_marginals(data: ObservationMatrix, *, seed: int = 0, restarts: int = 3,
                  workers: int = 1) -> dict[int, DPivFit]:
    """BIC-selected D-PIV fit to the positive counts of every site column."""
    sites = data.site_indices()
    for j in sites:
        if not np.any(data.column(j) > 0):
            raise DegenerateColumnError(f"site column {data.labels[j]!r} has no positive counts")

    def job(j):
        x = data.column(j)
        return dpiv_select(x[x > 0], seed=seed, restarts=restarts)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            fits = list(pool.map(job, sites))
    else:
        fits = [job(j) for j in sites]
    return dict(zip(sites, fits))


def build_columns(
    data: ObservationMatrix,
    nu: float,
    marginals: dict[int, DPivFit],
    *,
    age_cut: int = DEFAULT_AGE_CUT,
    censored_value: int | None = None,
    clamp: bool = True,
) -> list[ColumnSpec]:
    """Column specs (thresholds, marginals, covariate tables) for one ``nu``."""
    if censored_value is None and Role.GENDER in data.roles:
        censored_value = _default_censored_value(data.column(data.roles.index(Role.GENDER)))
    t = estimate_thresholds(data, nu, age_cut=age_cut, censored_value=censored_value, clamp=clamp)
    cols = []
    for j, role in enumerate(data.roles):
        x = data.column(j)
        label = data.labels[j]
        if role is Role.SITE:
            cols.append(ColumnSpec(role, label, t[j], marginal=marginals[j]))
        elif role is Role.AGE:
            cols.append(ColumnSpec(role, label, t[j], table=_cdf_table(x), age_cut=int(age_cut)))
        else:
            below = x[x != censored_value]
            table = _cdf_table(below) if below.size else ()
            cols.append(ColumnSpec(role, label, t[j], table=table, censored_value=int(censored_value)))
    return cols


# ---------------------------------------------------------------------------
# observed -> latent


class LatentStates(NamedTuple):
    """Per-row latent description of one column.

    ``kind`` is 0 for a point value ``z`` (with log Jacobian factor ``logc``),
    1 for ``Z < t`` and 2 for ``Z >= t``.
    """

    kind: np.ndarray
    z: np.ndarray
    logc: np.ndarray
    threshold: float


def _table_arrays(col: ColumnSpec):
    if not col.table:
        raise CopulaError(f"column {col.label!r} has no empirical table")
    v = np.array([a for a, _ in col.table], dtype=np.int64)
    F = np.array([b for _, b in col.table], dtype=float)
    return v, F


def latent_states(col: ColumnSpec, x, nu: float) -> LatentStates:
    x = np.asarray(x)
    if x.ndim != 1:
        x = x.ravel()
    if x.size and (np.any(x < 0) or np.any(x != np.floor(x))):
        raise CopulaError(f"column {col.label!r}: values must be nonnegative integers")
    x = x.astype(np.int64)
    n = x.size
    kind = np.full(n, BELOW, dtype=np.int8)
    z = np.full(n, np.nan)
    logc = np.zeros(n)
    t = col.threshold
    if col.role is Role.SITE:
        pos = x >= 1
        kind[pos] = POINT
        if np.any(pos):
            xi, sigma, beta, mu = col.marginal.params.as_tuple()
            k = x[pos].astype(float)
            u = 1.0 - _sf_raw(k - 0.5, xi, sigma, beta, mu)
            u = np.clip(u, CDF_CLAMP, 1.0 - CDF_CLAMP)
            zp = trunc_quantile(nu, t, u)
            lp = np.maximum(_logpmf_raw(k, xi, sigma, beta, mu), math.log(CDF_CLAMP))
            z[pos] = zp
            logc[pos] = lp - trunc_logpdf(nu, t, zp)
    elif col.role is Role.AGE:
        kind[x > col.age_cut] = ABOVE
    else:
        above = x == col.censored_value
        kind[above] = ABOVE
        pt = ~above
        kind[pt] = POINT
        if np.any(pt):
            v, G = _table_arrays(col)
            idx = np.searchsorted(v, x[pt])
            if np.any(idx >= v.size) or np.any(v[np.minimum(idx, v.size - 1)] != x[pt]):
                raise CopulaError(f"column {col.label!r}: category not seen in training")
            Gprev = np.where(idx > 0, G[np.maximum(idx - 1, 0)], 0.0)
            level = np.clip(0.5 * (G[idx] + Gprev), CDF_CLAMP, 1.0)
            zp = lower_trunc_quantile(nu, t, level)
            mass = uni_cdf(nu, t)
            z[pt] = zp
            logc[pt] = np.log(G[idx] - Gprev) - (uni_logpdf(nu, zp) - np.log(mass))
    return LatentStates(kind, z, logc, t)


def to_latent(col: ColumnSpec, x: int, nu: float):
    """Latent value of one observation, or a :class:`Censored` marker."""
    if col.role is Role.SITE and (x < 0 or x != int(x)):
        raise CopulaError("site counts must be nonnegative integers")
    s = latent_states(col, np.array([x]), nu)
    if s.kind[0] == BELOW:
        return Censored.BELOW
    if s.kind[0] == ABOVE:
        return Censored.ABOVE
    return float(s.z[0])


def _log_uni_cdf(nu, x):
    if is_gaussian(nu):
        return special.log_ndtr(x)
    with np.errstate(divide="ignore"):
        return np.log(special.stdtr(nu, x))


def _interval_sign(kind):
    # Z < t  ->  +Z <= t ;  Z >= t  ->  -Z <= -t
    return np.where(kind == ABOVE, -1.0, 1.0)


def column_loglik(col: ColumnSpec, x, nu: float) -> float:
    """Univariate censored log-likelihood of one column."""
    s = latent_states(col, x, nu)
    pt = s.kind == POINT
    total = float(np.sum(s.logc[pt] + uni_logpdf(nu, s.z[pt])))
    sign = _interval_sign(s.kind[~pt])
    total += float(np.sum(_log_uni_cdf(nu, sign * s.threshold)))
    return total


# ---------------------------------------------------------------------------
# pairwise likelihood


class PairLikelihood:
    """``rho -> l_ij(rho)`` with all rho-free work done once.

    Rows are split by censoring pattern: both censored (grouped by cell),
    one censored (conditional cdf of the censored coordinate given the
    point value) and both observed (bivariate density).
    """

    def __init__(self, si: LatentStates, sj: LatentStates, nu: float, jacobian: bool = True):
        if si.kind.size != sj.kind.size:
            raise CopulaError("paired columns differ in length")
        self.nu = nu
        self.n = si.kind.size
        pi, pj = si.kind == POINT, sj.kind == POINT
        both = pi & pj
        none = ~pi & ~pj
        self.cells = []
        for ki in (BELOW, ABOVE):
            for kj in (BELOW, ABOVE):
                cnt = int(np.sum(none & (si.kind == ki) & (sj.kind == kj)))
                if cnt:
                    si_ = -1.0 if ki == ABOVE else 1.0
                    sj_ = -1.0 if kj == ABOVE else 1.0
                    self.cells.append((cnt, si_, sj_, si_ * si.threshold, sj_ * sj.threshold))
        self.z1, self.z2 = si.z[both], sj.z[both]
        # mixed rows as (point value, censored-side sign, censored threshold)
        mi = pi & ~pj
        mj = pj & ~pi
        self.zm = np.concatenate([si.z[mi], sj.z[mj]])
        self.sm = np.concatenate([_interval_sign(sj.kind[mi]), _interval_sign(si.kind[mj])])
        self.tm = np.concatenate([np.full(mi.sum(), sj.threshold), np.full(mj.sum(), si.threshold)])
        const = float(np.sum(uni_logpdf(nu, self.zm)))
        if jacobian:
            const += float(np.sum(si.logc[both]) + np.sum(sj.logc[both]))
            const += float(np.sum(si.logc[mi]) + np.sum(sj.logc[mj]))
        self.const = const
        self.n_patterns = len(self.cells) + int(both.any()) + int((mi | mj).any())

    def identifiable(self) -> bool:
        return not (self.z1.size == 0 and self.zm.size == 0 and len(self.cells) <= 1)

    def __call__(self, rho: float) -> float:
        nu = self.nu
        total = self.const
        for cnt, si_, sj_, ui, uj in self.cells:
            p = biv_cdf(nu, si_ * sj_ * rho, ui, uj)
            if p <= 0:
                return -math.inf
            total += cnt * math.log(p)
        if self.zm.size:
            om = 1.0 - rho * rho
            if is_gaussian(nu):
                sd = math.sqrt(om)
                arg = self.sm * (self.tm - rho * self.zm) / sd
                total += float(np.sum(special.log_ndtr(arg)))
            else:
                sd = np.sqrt(om * (nu + self.zm**2) / (nu + 1))
                arg = self.sm * (self.tm - rho * self.zm) / sd
                with np.errstate(divide="ignore"):
                    total += float(np.sum(np.log(special.stdtr(nu + 1, arg))))
        if self.z1.size:
            total += float(np.sum(biv_logpdf(nu, rho, self.z1, self.z2)))
        return total


def pair_loglik(rho: float, col_i: ColumnSpec, col_j: ColumnSpec, x_i, x_j, nu: float,
                *, jacobian: bool = True) -> float:
    """Pairwise log-likelihood ``l_ij(rho)`` of two observed columns."""
    if not -1.0 < rho < 1.0:
        raise CopulaError("rho must lie in (-1, 1)")
    lik = PairLikelihood(latent_states(col_i, x_i, nu), latent_states(col_j, x_j, nu), nu, jacobian)
    value = lik(rho)
    if math.isnan(value):
        raise CopulaError("pairwise likelihood is not a number")
    return value


class RhoEstimate(NamedTuple):
    rho: float
    stderr: float


def _maximize_rho(lik: PairLikelihood) -> RhoEstimate:
    lo, hi = -1.0 + RHO_EPS, 1.0 - RHO_EPS
    grid = np.linspace(-0.98, 0.98, 50)
    vals = np.array([lik(r) for r in grid])
    if not np.any(np.isfinite(vals)):
        raise CopulaError("pairwise likelihood is -inf on the whole grid")
    k = int(np.nanargmax(np.where(np.isfinite(vals), vals, -np.inf)))
    a = grid[k - 1] if k > 0 else lo
    b = grid[k + 1] if k < grid.size - 1 else hi

    def neg(r):
        v = lik(r)
        return -v if math.isfinite(v) else 1e300

    res = optimize.minimize_scalar(neg, bounds=(a, b), method="bounded",
                                   options={"xatol": 1e-9})
    rho = float(res.x) if res.fun <= -vals[k] else float(grid[k])
    h = min(1e-4, 0.5 * (1.0 - abs(rho)))
    f0 = lik(rho)
    d2 = (lik(rho + h) - 2 * f0 + lik(rho - h)) / (h * h)
    stderr = 1.0 / math.sqrt(-d2) if d2 < 0 and math.isfinite(d2) else math.inf
    return RhoEstimate(float(np.clip(rho, -1.0, 1.0)), stderr)


def estimate_rho(col_i: ColumnSpec, col_j: ColumnSpec, x_i, x_j, nu: float) -> RhoEstimate:
    """Maximize the pairwise likelihood over rho in (-1, 1).

    A 50-point grid brackets the optimum, bounded Brent (golden section
    with parabolic steps) refines it, and the standard error comes from a
    central second difference.  Raises :class:`NonIdentifiablePair` when all
    rows fall in one censored cell.
    """
    lik = PairLikelihood(latent_states(col_i, x_i, nu), latent_states(col_j, x_j, nu), nu,
                         jacobian=False)
    if not lik.identifiable():
        raise NonIdentifiablePair(f"pair ({col_i.label!r}, {col_j.label!r}) carries no information")
    return _maximize_rho(lik)


def assemble_sigma(pairwise, floor: float = 1e-6, max_iter: int = 100) -> np.ndarray:
    """Symmetric unit-diagonal matrix from pairwise estimates, repaired to PSD.

    Matrices that are already PSD (min eigenvalue >= -1e-12) come back
    unchanged.  Otherwise negative eigenvalues are clipped to ``floor`` and
    the result rescaled to unit diagonal, repeated until PSD.
    """
    R = np.array(pairwise, dtype=float)
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 1.0)
    for _ in range(max_iter):
        w, V = np.linalg.eigh(R)
        if w.min() >= -1e-12:
            break
        A = (V * np.maximum(w, floor)) @ V.T
        d = np.sqrt(np.diag(A))
        R = A / np.outer(d, d)
        R = 0.5 * (R + R.T)
        np.fill_diagonal(R, 1.0)
    return R


def fit_copula(
    data: ObservationMatrix,
    nu: float = math.inf,
    marginals: dict[int, DPivFit] | None = None,
    *,
    age_cut: int = DEFAULT_AGE_CUT,
    censored_value: int | None = None,
    workers: int = 1,
    max_nonidentifiable: float = 0.05,
    seed: int = 0,
) -> CopulaModel:
    """Thresholds, pairwise correlations and PSD repair for one ``nu``."""
    if marginals is None:
        marginals = fit_marginals(data, seed=seed, workers=workers)
    cols = build_columns(data, nu, marginals, age_cut=age_cut, censored_value=censored_value)
    d = len(cols)
    states = [latent_states(c, data.column(j), nu) for j, c in enumerate(cols)]
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]

    def job(ij):
        i, j = ij
        lik = PairLikelihood(states[i], states[j], nu, jacobian=False)
        if not lik.identifiable():
            return None
        return _maximize_rho(lik)

    if workers > 1 and pairs:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, pairs))
    else:
        results = [job(p) for p in pairs]
    R = np.eye(d)
    SE = np.zeros((d, d))
    bad = 0
    for (i, j), est in zip(pairs, results):
        if est is None:
            bad += 1
            R[i, j] = R[j, i] = 0.0
            SE[i, j] = SE[j, i] = math.inf
        else:
            R[i, j] = R[j, i] = est.rho
            SE[i, j] = SE[j, i] = est.stderr
    if pairs and bad / len(pairs) > max_nonidentifiable:
        raise CopulaError(f"{bad} of {len(pairs)} pairs are not identifiable")
    sigma = assemble_sigma(R)
    return CopulaModel(LatentSpec(nu, sigma), tuple(cols), n_train=data.n, sigma_stderr=SE)
