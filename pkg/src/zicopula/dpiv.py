"""Discrete Pareto IV (D-PIV) marginals for positive counts.

The continuous Pareto IV cdf used throughout is

    F(x) = 1 - {1 + xi * ((x + mu)**beta - mu**beta) / sigma} ** (-1 / xi)

on ``0 <= x < e1`` (``F = 1`` beyond a finite endpoint ``e1`` when ``xi < 0``),
with the exponential limit at ``xi = 0``.  The discrete law puts mass
``p(k) = F(k) - F(k - 1)`` on ``k = 1, 2, ...``.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import optimize

__all__ = [
    "Variant",
    "DPivParams",
    "DPivFit",
    "DPivError",
    "DPivFitFailure",
    "XI_ZERO_TOL",
    "MIN_FIT_SIZE",
    "START_FULL",
    "dpiv_cdf",
    "dpiv_sf",
    "dpiv_pmf",
    "dpiv_logpmf",
    "dpiv_endpoint",
    "piv_quantile",
    "dpiv_quantile",
    "dpiv_sample",
    "dpiv_loglik",
    "dpiv_fit",
    "dpiv_select",
    "dks_statistic",
    "dks_test",
]

#: Below this |xi| the exponential (xi -> 0) form of the cdf is used.
XI_ZERO_TOL = 1e-8
#: Smallest sample accepted by :func:`dpiv_fit`.
MIN_FIT_SIZE = 30
#: Starting point (xi, sigma, beta, mu) of the full-model search.
START_FULL = (0.1, 1.0, 0.1, 1.0)
#: Largest count ever returned by the quantile function (exact in float64).
MAX_COUNT = 2**53


class Variant(str, enum.Enum):
    FULL = "Full"
    MU_ZERO = "MuZero"
    MU_ZERO_BETA_ONE = "MuZeroBetaOne"

    @property
    def n_params(self) -> int:
        return {"Full": 4, "MuZero": 3, "MuZeroBetaOne": 2}[self.value]


class DPivError(ValueError):
    """Invalid D-PIV parameters or input sample."""


class DPivFitFailure(RuntimeError):
    """The optimizer did not converge; ``best`` holds the best point found."""

    def __init__(self, message: str, best: "DPivFit | None" = None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class DPivParams:
    xi: float
    sigma: float
    beta: float
    mu: float = 0.0
    variant: Variant = Variant.FULL

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        for name in ("xi", "sigma", "beta", "mu"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise DPivError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.sigma <= 0:
            raise DPivError(f"sigma must be > 0, got {self.sigma}")
        if self.beta <= 0:
            raise DPivError(f"beta must be > 0, got {self.beta}")
        if self.mu < 0:
            raise DPivError(f"mu must be >= 0, got {self.mu}")
        if self.variant is not Variant.FULL and self.mu != 0:
            raise DPivError(f"variant {self.variant.value} requires mu = 0")
        if self.variant is Variant.MU_ZERO_BETA_ONE and self.beta != 1:
            raise DPivError("variant MuZeroBetaOne requires beta = 1")
        if self.xi < 0 and not _endpoint(self.xi, self.sigma, self.beta, self.mu) > 1:
            raise DPivError("finite endpoint must exceed 1 (empty support otherwise)")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xi, self.sigma, self.beta, self.mu)


@dataclass(frozen=True)
class DPivFit:
    params: DPivParams
    loglik: float
    bic: float
    n: int
    stderr: tuple[float | None, float | None, float | None, float | None] = (None,) * 4
    converged: bool = True
    message: str = ""

    @property
    def variant(self) -> Variant:
        return self.params.variant


# ---------------------------------------------------------------------------
# closed-form evaluation


def _excess(x, beta, mu):
    """(x + mu)**beta - mu**beta without cancellation for small beta."""
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", divide="ignore"):
        if mu > 0:
            # log space keeps extreme (beta, mu) finite or inf instead of raising
            rel = np.expm1(beta * np.log1p(x / mu))
            return np.exp(beta * np.log(mu) + np.log(rel))
        return np.power(x, beta)


def _endpoint(xi, sigma, beta, mu):
    # inside the switch tolerance the cdf is the exponential form: no endpoint
    if xi > -XI_ZERO_TOL:
        return math.inf
    # (mu**beta + sigma/|xi|)**(1/beta) - mu, written relative to mu when possible
    if mu > 0:
        with np.errstate(over="ignore"):
            ratio = np.exp(math.log(sigma / -xi) - beta * math.log(mu))
            return float(mu * np.expm1(np.log1p(ratio) / beta))
    with np.errstate(over="ignore"):
        return float(np.power(np.float64(sigma) / -xi, 1.0 / beta))


def _sf_raw(x, xi, sigma, beta, mu):
    """Survival function 1 - F(x) for x >= 0 (no validation)."""
    a = _excess(np.maximum(x, 0.0), beta, mu) / sigma
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if abs(xi) < XI_ZERO_TOL:
            return np.exp(-a)
        base = xi * a
        out = np.exp(-np.log1p(base) / xi)
        if xi < 0:
            out = np.where(base <= -1.0, 0.0, out)
        return np.where(np.isnan(out), 0.0, out)


def dpiv_sf(params: DPivParams, x):
    """Survival function ``1 - F(x)``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DPivError("x must be >= 0")
    out = _sf_raw(x, params.xi, params.sigma, params.beta, params.mu)
    return out if out.ndim else float(out)


def dpiv_cdf(params: DPivParams, x):
    """Continuous Pareto IV cdf ``F(x)`` for ``x >= 0`` (vectorized)."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DPivError("x must be >= 0")
    out = 1.0 - _sf_raw(x, params.xi, params.sigma, params.beta, params.mu)
    return out if out.ndim else float(out)


def _logpmf_raw(k, xi, sigma, beta, mu):
    k = np.asarray(k, dtype=float)
    hi = _sf_raw(k - 1.0, xi, sigma, beta, mu)
    lo = _sf_raw(k, xi, sigma, beta, mu)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(hi - lo)


def dpiv_logpmf(params: DPivParams, k):
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k != np.floor(k)):
        raise DPivError("pmf support is the positive integers")
    out = _logpmf_raw(k, params.xi, params.sigma, params.beta, params.mu)
    return out if out.ndim else float(out)


def dpiv_pmf(params: DPivParams, k):
    """``p(k) = F(k) - F(k-1)`` for positive integers ``k``.

    Computed as a difference of survival values so that far-tail masses
    keep their relative precision.
    """
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k != np.floor(k)):
        raise DPivError("pmf support is the positive integers")
    hi = _sf_raw(k - 1.0, params.xi, params.sigma, params.beta, params.mu)
    lo = _sf_raw(k, params.xi, params.sigma, params.beta, params.mu)
    out = np.maximum(hi - lo, 0.0)
    return out if out.ndim else float(out)


def dpiv_endpoint(params: DPivParams) -> float:
    """Right endpoint ``e1`` of the continuous cdf (``inf`` when xi >= 0)."""
    return _endpoint(params.xi, params.sigma, params.beta, params.mu)


def piv_quantile(params: DPivParams, u):
    """Inverse of the continuous Pareto IV cdf, ``F^{-1}(u)`` for u in [0, 1)."""
    u = np.asarray(u, dtype=float)
    if np.any((u < 0) | (u >= 1)):
        raise DPivError("u must lie in [0, 1)")
    xi, sigma, beta, mu = params.as_tuple()
    with np.errstate(over="ignore", invalid="ignore"):
        if abs(xi) < XI_ZERO_TOL:
            a = -sigma * np.log1p(-u)
        else:
            a = sigma * np.expm1(-xi * np.log1p(-u)) / xi
        if mu > 0:
            x = mu * np.expm1(np.log1p(a / mu**beta) / beta)
        else:
            x = a ** (1.0 / beta)
    x = np.where(np.isnan(x), np.inf, x)
    if xi < 0:
        x = np.minimum(x, dpiv_endpoint(params))
    return x if x.ndim else float(x)


def dpiv_quantile(params: DPivParams, u):
    """Smallest integer ``k >= 1`` with ``F(k) >= u``.

    For ``xi < 0`` the result never exceeds ``ceil(e1)``; for heavy tails
    counts are capped at ``2**53``.
    """
    u = np.asarray(u, dtype=float)
    if np.any((u < 0) | (u >= 1)):
        raise DPivError("u must lie in [0, 1)")
    scalar = u.ndim == 0
    u = np.atleast_1d(u)
    xi, sigma, beta, mu = params.as_tuple()
    cap = float(MAX_COUNT)
    if xi < 0:
        cap = min(cap, float(math.ceil(dpiv_endpoint(params))))
    x = np.asarray(piv_quantile(params, u), dtype=float)
    k = np.clip(np.floor(np.minimum(x, cap)) + 1.0, 1.0, cap)
    # repair floating point slips at the integer boundaries
    low = (1.0 - _sf_raw(k, xi, sigma, beta, mu)) < u
    k = np.where(low & (k < cap), k + 1.0, k)
    high = (k > 1) & ((1.0 - _sf_raw(k - 1.0, xi, sigma, beta, mu)) >= u)
    k = np.where(high, k - 1.0, k)
    k = k.astype(np.int64)
    return int(k[0]) if scalar else k


def dpiv_sample(params: DPivParams, size, rng: np.random.Generator | int | None = None):
    rng = np.random.default_rng(rng)
    return dpiv_quantile(params, rng.random(size))


# ---------------------------------------------------------------------------
# likelihood and fitting


def _check_sample(sample) -> np.ndarray:
    x = np.asarray(sample)
    if x.ndim != 1:
        x = x.ravel()
    if x.size == 0:
        raise DPivError("sample is empty")
    if not np.all(np.isfinite(x)) or np.any(x != np.floor(x)):
        raise DPivError("sample must contain integers")
    if np.any(x < 1):
        raise DPivError("sample values must be >= 1")
    return x.astype(np.int64)


def dpiv_loglik(params: DPivParams, sample) -> float:
    """Log-likelihood, evaluated once per distinct value weighted by multiplicity."""
    values, counts = np.unique(_check_sample(sample), return_counts=True)
    lp = _logpmf_raw(values, params.xi, params.sigma, params.beta, params.mu)
    return float(np.dot(counts, lp))


def _unpack(theta, variant: Variant):
    theta = np.asarray(theta, dtype=float)
    xi, sigma = theta[0], math.exp(theta[1])
    beta = math.exp(theta[2]) if variant is not Variant.MU_ZERO_BETA_ONE else 1.0
    mu = math.exp(theta[3]) if variant is Variant.FULL else 0.0
    return xi, sigma, beta, mu


def _pack(params_tuple, variant: Variant) -> np.ndarray:
    xi, sigma, beta, mu = params_tuple
    theta = [xi, math.log(sigma)]
    if variant is not Variant.MU_ZERO_BETA_ONE:
        theta.append(math.log(beta))
    if variant is Variant.FULL:
        theta.append(math.log(mu))
    return np.array(theta)


class _Objective:
    def __init__(self, values, counts, variant):
        self.values = values.astype(float)
        self.counts = counts.astype(float)
        self.variant = variant

    def __call__(self, theta) -> float:
        if not np.all(np.isfinite(theta)) or np.any(np.abs(theta[1:]) > 700):
            return np.inf
        xi, sigma, beta, mu = _unpack(theta, self.variant)
        if not (math.isfinite(sigma) and math.isfinite(beta) and math.isfinite(mu)):
            return np.inf
        lp = _logpmf_raw(self.values, xi, sigma, beta, mu)
        total = float(np.dot(self.counts, lp))
        if not math.isfinite(total):
            return np.inf
        return -total


def _hessian(f, x, rel_step=1e-4):
    """Central-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = rel_step * np.maximum(1.0, np.abs(x))
    H = np.empty((n, n))
    f0 = f(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (
                f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)
            ) / (4 * h[i] * h[j])
    return H


def _stderr(objective, theta, variant: Variant):
    H = _hessian(objective, theta)
    if not np.all(np.isfinite(H)):
        return (None,) * 4
    try:
        np.linalg.cholesky(H)
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return (None,) * 4
    sd = np.sqrt(np.diag(cov))
    xi, sigma, beta, mu = _unpack(theta, variant)
    out: list[float | None] = [float(sd[0]), float(sigma * sd[1]), None, None]
    if variant is not Variant.MU_ZERO_BETA_ONE:
        out[2] = float(beta * sd[2])
    if variant is Variant.FULL:
        out[3] = float(mu * sd[3])
    return tuple(out)


def _default_start(variant: Variant) -> tuple[float, float, float, float]:
    xi, sigma, beta, mu = START_FULL
    if variant is Variant.MU_ZERO:
        return (xi, sigma, beta, 0.0)
    if variant is Variant.MU_ZERO_BETA_ONE:
        return (xi, sigma, 1.0, 0.0)
    return START_FULL


def _moment_start(x: np.ndarray) -> tuple[float, float, float, float]:
    """Generalized Pareto moment estimates on the half-corrected counts."""
    y = x.astype(float) - 0.5
    m = float(np.mean(y))
    v = float(np.var(y))
    xi = 0.5 * (1.0 - m * m / v) if v > 0 else -0.5
    xi = min(max(xi, -0.5), 0.9)
    sigma = max(m * (1.0 - xi), 0.1)
    if xi < 0:
        # keep every observation inside the support
        sigma = max(sigma, 1.01 * (-xi) * float(x.max()))
    return (xi, sigma, 1.0, 0.0)


def _fit(x, variant: Variant, start, seed, restarts: int) -> DPivFit:
    values, counts = np.unique(x, return_counts=True)
    objective = _Objective(values, counts, variant)
    theta0 = _pack(start, variant)
    rng = np.random.default_rng(seed)
    starts = [theta0] + [theta0 + rng.normal(0.0, 0.5, theta0.size) for _ in range(restarts)]
    opts = {"maxiter": 2000 * theta0.size, "maxfev": 3000 * theta0.size,
            "xatol": 1e-7, "fatol": 1e-8, "adaptive": theta0.size > 2}
    best = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for s in starts:
            if not math.isfinite(objective(s)):
                continue
            res = optimize.minimize(objective, s, method="Nelder-Mead", options=opts)
            if best is None or res.fun < best.fun:
                best = res
        if best is None:
            raise DPivFitFailure(f"{variant.value}: no feasible starting point")
        # restart from the incumbent until a fresh simplex stops improving
        converged = False
        for _ in range(10):
            res = optimize.minimize(objective, best.x, method="Nelder-Mead", options=opts)
            improved = best.fun - res.fun
            if res.fun <= best.fun:
                best = res
            if improved < 1e-7 and res.success:
                converged = math.isfinite(best.fun)
                break
        xi, sigma, beta, mu = _unpack(best.x, variant)
        try:
            params = DPivParams(xi, sigma, beta, mu, variant)
        except DPivError as exc:
            raise DPivFitFailure(f"{variant.value}: optimum left the parameter space ({exc})")
        stderr = _stderr(objective, best.x, variant) if converged else (None,) * 4
    n = int(x.size)
    loglik = -float(best.fun)
    fit = DPivFit(
        params=params,
        loglik=loglik,
        bic=-2.0 * loglik + variant.n_params * math.log(n),
        n=n,
        stderr=stderr,
        converged=converged,
        message=str(best.message),
    )
    if not converged:
        raise DPivFitFailure(f"{variant.value}: {best.message}", best=fit)
    return fit


def dpiv_fit(
    sample,
    variant: Variant | str = Variant.FULL,
    *,
    start: Sequence[float] | None = None,
    seed: int = 0,
    restarts: int = 3,
) -> DPivFit:
    """Maximum-likelihood fit of one D-PIV variant by Nelder-Mead.

    The search runs on (xi, log sigma, log beta, log mu) with the coordinates
    fixed by the variant dropped.  ``restarts`` extra starts are drawn around
    the default start ``(0.1, 1, 0.1, 1)``.  Raises :class:`DPivFitFailure`
    when no run converges.
    """
    variant = Variant(variant)
    x = _check_sample(sample)
    if x.size < MIN_FIT_SIZE:
        raise DPivError(f"need at least {MIN_FIT_SIZE} observations, got {x.size}")
    if start is None:
        start = _default_start(variant)
    return _fit(x, variant, tuple(start), seed, restarts)


def dpiv_select(sample, *, seed: int = 0, restarts: int = 3) -> DPivFit:
    """Fit Full, MuZero and MuZeroBetaOne and keep the smallest BIC.

    Ties go to the model with fewer parameters.  Samples smaller than
    :data:`MIN_FIT_SIZE` get a single MuZeroBetaOne fit started from moment
    estimates.
    """
    x = _check_sample(sample)
    if x.size < MIN_FIT_SIZE:
        variant = Variant.MU_ZERO_BETA_ONE
        try:
            return _fit(x, variant, _moment_start(x), seed, restarts)
        except DPivFitFailure as exc:
            raise DPivFitFailure(f"selection failed on small sample: {exc}", exc.best)
    fits = []
    errors = []
    for variant in Variant:
        try:
            fits.append(dpiv_fit(x, variant, seed=seed, restarts=restarts))
        except DPivFitFailure as exc:
            errors.append(str(exc))
    if not fits:
        raise DPivFitFailure("all variants failed: " + "; ".join(errors))
    return min(fits, key=lambda f: (f.bic, f.variant.n_params))


# ---------------------------------------------------------------------------
# goodness of fit


class KSResult(NamedTuple):
    statistic: float
    p_value: float


def _ks_sorted(s: np.ndarray, params: DPivParams) -> np.ndarray:
    """Exact sup_x |Fn(x) - F(x)| for samples sorted along the last axis."""
    n = s.shape[-1]
    xi, sigma, beta, mu = params.as_tuple()
    s = s.astype(float)
    F_at = 1.0 - _sf_raw(s, xi, sigma, beta, mu)
    F_below = 1.0 - _sf_raw(s - 1.0, xi, sigma, beta, mu)
    j = np.arange(n, dtype=float)
    d_plus = np.max((j + 1.0) / n - F_at, axis=-1)
    d_minus = np.max(F_below - j / n, axis=-1)
    return np.maximum(d_plus, d_minus)


def dks_statistic(sample, params: DPivParams) -> float:
    """Kolmogorov-Smirnov distance between the empirical and model cdfs.

    Both are step functions on the integers, so the supremum is attained
    at an observed value or one below it.
    """
    x = np.sort(_check_sample(sample))
    return float(_ks_sorted(x, params))


def dks_test(sample, params: DPivParams, n_boot: int = 500, seed: int = 0,
             chunk: int = 50) -> KSResult:
    """Discrete KS test with a parametric-bootstrap p-value.

    The p-value is the fraction of ``n_boot`` samples of the same size drawn
    from ``params`` whose statistic is at least the observed one.
    """
    if n_boot < 1:
        raise DPivError("n_boot must be >= 1")
    x = np.sort(_check_sample(sample))
    observed = float(_ks_sorted(x, params))
    rng = np.random.default_rng(seed)
    exceed = 0
    done = 0
    while done < n_boot:
        m = min(chunk, n_boot - done)
        u = np.sort(rng.random((m, x.size)), axis=1)
        boot = dpiv_quantile(params, u.ravel()).reshape(m, x.size)
        exceed += int(np.sum(_ks_sorted(boot, params) >= observed - 1e-12))
        done += m
    return KSResult(observed, exceed / n_boot)
