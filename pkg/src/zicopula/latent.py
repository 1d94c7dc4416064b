"""Gaussian and Student-t kernels for the latent vector.

``nu = inf`` always means the Gaussian case.  Correlation/scale matrices are
the Student *dispersion* matrices, so the covariance is ``nu/(nu-2) * corr``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import integrate, special

__all__ = [
    "LatentSpec",
    "ConditionalLaw",
    "LatentError",
    "MvCdfResult",
    "is_gaussian",
    "uni_cdf",
    "uni_sf",
    "uni_pdf",
    "uni_logpdf",
    "uni_quantile",
    "trunc_cdf",
    "trunc_quantile",
    "trunc_logpdf",
    "lower_trunc_cdf",
    "lower_trunc_quantile",
    "biv_cdf",
    "biv_logpdf",
    "mv_cdf",
    "mv_logpdf",
    "conditional",
    "law_cdf",
]

INF = math.inf


class LatentError(ValueError):
    pass


def is_gaussian(nu) -> bool:
    return math.isinf(nu)


def _check_nu(nu):
    nu = float(nu)
    if not nu > 2:
        raise LatentError(f"degrees of freedom must exceed 2, got {nu}")
    return nu


@dataclass(frozen=True)
class LatentSpec:
    nu: float
    corr: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nu", _check_nu(self.nu))
        corr = np.array(self.corr, dtype=float, ndmin=2)
        if corr.shape[0] != corr.shape[1]:
            raise LatentError("correlation matrix must be square")
        if not np.allclose(corr, corr.T, atol=1e-12):
            raise LatentError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(corr), 1.0, atol=1e-12):
            raise LatentError("correlation matrix must have unit diagonal")
        corr.setflags(write=False)
        object.__setattr__(self, "corr", corr)

    @property
    def dim(self) -> int:
        return self.corr.shape[0]

    def covariance(self) -> np.ndarray:
        if is_gaussian(self.nu):
            return np.array(self.corr)
        return self.nu / (self.nu - 2.0) * self.corr


@dataclass(frozen=True)
class ConditionalLaw:
    """Law of ``Z_E`` given ``Z_F = z_F``: location, dispersion and df."""

    index: np.ndarray
    location: np.ndarray
    scale: np.ndarray
    df: float

    @property
    def dim(self) -> int:
        return self.location.size


# ---------------------------------------------------------------------------
# univariate


def uni_cdf(nu, z):
    if is_gaussian(nu):
        return special.ndtr(z)
    return special.stdtr(nu, z)


def uni_sf(nu, z):
    return uni_cdf(nu, -np.asarray(z, dtype=float))


def uni_logpdf(nu, z):
    z = np.asarray(z, dtype=float)
    if is_gaussian(nu):
        return -0.5 * z * z - 0.5 * math.log(2 * math.pi)
    c = special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2) - 0.5 * math.log(nu * math.pi)
    return c - (nu + 1) / 2 * np.log1p(z * z / nu)


def uni_pdf(nu, z):
    return np.exp(uni_logpdf(nu, z))


def uni_quantile(nu, u):
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise LatentError("quantile level must lie in (0, 1)")
    if is_gaussian(nu):
        out = special.ndtri(u)
    else:
        out = special.stdtrit(nu, u)
    return out if np.ndim(out) else float(out)


# ---------------------------------------------------------------------------
# truncated laws


def _upper_mass(nu, t):
    s = uni_sf(nu, t)
    if np.any(s <= 0):
        raise LatentError(f"degenerate threshold {t}: no mass above it")
    return s


def trunc_cdf(nu, t, z):
    """``M(z) = Pr(Z <= z | Z >= t)`` for ``z >= t``."""
    z = np.asarray(z, dtype=float)
    s = _upper_mass(nu, t)
    out = np.clip((s - uni_sf(nu, np.maximum(z, t))) / s, 0.0, 1.0)
    return out if out.ndim else float(out)


def trunc_quantile(nu, t, u):
    """Inverse of :func:`trunc_cdf` for ``u`` in [0, 1)."""
    u = np.asarray(u, dtype=float)
    if np.any((u < 0) | (u >= 1)):
        raise LatentError("level must lie in [0, 1)")
    s = _upper_mass(nu, t)
    # Pr(Z > z) = s (1 - u), solved on the upper tail to keep precision
    tail = s * (1.0 - u)
    if is_gaussian(nu):
        out = -special.ndtri(tail)
    else:
        out = -special.stdtrit(nu, tail)
    out = np.maximum(out, t)
    return out if out.ndim else float(out)


def trunc_logpdf(nu, t, z):
    """Log density of ``Z | Z >= t`` (the derivative ``M'(z)``)."""
    return uni_logpdf(nu, z) - np.log(_upper_mass(nu, t))


def lower_trunc_cdf(nu, t, z):
    """``Pr(Z <= z | Z <= t)`` for ``z <= t``."""
    z = np.asarray(z, dtype=float)
    m = uni_cdf(nu, t)
    if m <= 0:
        raise LatentError(f"degenerate threshold {t}: no mass below it")
    out = np.clip(uni_cdf(nu, np.minimum(z, t)) / m, 0.0, 1.0)
    return out if out.ndim else float(out)


def lower_trunc_quantile(nu, t, u):
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0) | (u > 1)):
        raise LatentError("level must lie in (0, 1]")
    m = uni_cdf(nu, t)
    if m <= 0:
        raise LatentError(f"degenerate threshold {t}: no mass below it")
    out = np.minimum(uni_quantile(nu, np.minimum(u * m, np.nextafter(1.0, 0.0))), t)
    return out if np.ndim(out) else float(out)


# ---------------------------------------------------------------------------
# bivariate


_GL = {n: np.polynomial.legendre.leggauss(n) for n in (6, 12, 20)}


def _bvnu(h: float, k: float, r: float) -> float:
    """Pr(X > h, Y > k) for a standard bivariate normal (Genz's BVND)."""
    if abs(r) < 0.3:
        x, w = _GL[6]
    elif abs(r) < 0.75:
        x, w = _GL[12]
    else:
        x, w = _GL[20]
    hk = h * k
    if abs(r) < 0.925:
        hs = (h * h + k * k) / 2
        asr = math.asin(r)
        sn = np.sin(asr * (x + 1) / 2)
        bvn = float(np.dot(w, np.exp((sn * hk - hs) / (1 - sn * sn))))
        return bvn * asr / (4 * math.pi) + special.ndtr(-h) * special.ndtr(-k)
    if r < 0:
        k = -k
        hk = -hk
    bvn = 0.0
    if abs(r) < 1:
        as_ = (1 - r) * (1 + r)
        a = math.sqrt(as_)
        bs = (h - k) ** 2
        c = (4 - hk) / 8
        d = (12 - hk) / 16
        bvn = a * math.exp(-(bs / as_ + hk) / 2) * (
            1 - c * (bs - as_) * (1 - d * bs / 5) / 3 + c * d * as_ * as_ / 5
        )
        if hk > -160:
            b = math.sqrt(bs)
            bvn -= (
                math.exp(-hk / 2) * math.sqrt(2 * math.pi) * special.ndtr(-b / a) * b
                * (1 - c * bs * (1 - d * bs / 5) / 3)
            )
        a /= 2
        xs = (a * (x + 1)) ** 2
        rs = np.sqrt(1 - xs)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            terms = np.exp(-bs / (2 * xs) - hk / (1 + rs)) / rs - np.exp(-(bs / xs + hk) / 2) * (
                1 + c * xs * (1 + d * xs)
            )
        terms = np.where(np.isfinite(terms), terms, 0.0)
        bvn += a * float(np.dot(w, terms))
        bvn = -bvn / (2 * math.pi)
    if r > 0:
        return bvn + special.ndtr(-max(h, k))
    bvn = -bvn
    if k > h:
        if h < 0:
            bvn += special.ndtr(k) - special.ndtr(h)
        else:
            bvn += special.ndtr(-h) - special.ndtr(-k)
    return bvn


def _bvtl(nu: int, dh: float, dk: float, r: float) -> float:
    """Pr(X < dh, Y < dk) for a standard bivariate t with integer df.

    Dunnett & Sobel's finite series as organised in Genz's BVTL.
    """
    eps = 1e-15
    if 1 - r <= eps:
        return float(special.stdtr(nu, min(dh, dk)))
    if r + 1 <= eps:
        if dh > -dk:
            return float(special.stdtr(nu, dh) - special.stdtr(nu, -dk))
        return 0.0
    tpi = 2 * math.pi
    snu = math.sqrt(nu)
    ors = 1 - r * r
    hrk = dh - r * dk
    krh = dk - r * dh
    if abs(hrk) + ors > 0:
        xnhk = hrk**2 / (hrk**2 + ors * (nu + dk**2))
        xnkh = krh**2 / (krh**2 + ors * (nu + dh**2))
    else:
        xnhk = xnkh = 0.0
    hs = math.copysign(1.0, dh - r * dk)
    ks = math.copysign(1.0, dk - r * dh)
    if nu % 2 == 0:
        bvt = math.atan2(math.sqrt(ors), -r) / tpi
        gmph = dh / math.sqrt(16 * (nu + dh**2))
        gmpk = dk / math.sqrt(16 * (nu + dk**2))
        btnckh = 2 * math.atan2(math.sqrt(xnkh), math.sqrt(1 - xnkh)) / math.pi
        btpdkh = 2 * math.sqrt(xnkh * (1 - xnkh)) / math.pi
        btnchk = 2 * math.atan2(math.sqrt(xnhk), math.sqrt(1 - xnhk)) / math.pi
        btpdhk = 2 * math.sqrt(xnhk * (1 - xnhk)) / math.pi
        for j in range(1, nu // 2 + 1):
            bvt += gmph * (1 + ks * btnckh)
            bvt += gmpk * (1 + hs * btnchk)
            btnckh += btpdkh
            btpdkh = 2 * j * btpdkh * (1 - xnkh) / (2 * j + 1)
            btnchk += btpdhk
            btpdhk = 2 * j * btpdhk * (1 - xnhk) / (2 * j + 1)
            gmph = gmph * (2 * j - 1) / (2 * j * (1 + dh**2 / nu))
            gmpk = gmpk * (2 * j - 1) / (2 * j * (1 + dk**2 / nu))
    else:
        qhrk = math.sqrt(dh**2 + dk**2 - 2 * r * dh * dk + nu * ors)
        hkrn = dh * dk + r * nu
        hkn = dh * dk - nu
        hpk = dh + dk
        bvt = math.atan2(-snu * (hkn * qhrk + hpk * hkrn), hkn * hkrn - nu * hpk * qhrk) / tpi
        if bvt < -eps:
            bvt += 1
        gmph = dh / (tpi * snu * (1 + dh**2 / nu))
        gmpk = dk / (tpi * snu * (1 + dk**2 / nu))
        btnckh = math.sqrt(xnkh)
        btpdkh = btnckh
        btnchk = math.sqrt(xnhk)
        btpdhk = btnchk
        for j in range(1, (nu - 1) // 2 + 1):
            bvt += gmph * (1 + ks * btnckh)
            bvt += gmpk * (1 + hs * btnchk)
            btpdkh = (2 * j - 1) * btpdkh * (1 - xnkh) / (2 * j)
            btnckh += btpdkh
            btpdhk = (2 * j - 1) * btpdhk * (1 - xnhk) / (2 * j)
            btnchk += btpdhk
            gmph = 2 * j * gmph / ((2 * j + 1) * (1 + dh**2 / nu))
            gmpk = 2 * j * gmpk / ((2 * j + 1) * (1 + dk**2 / nu))
    return bvt


def _bvt_quad(nu: float, a: float, b: float, r: float) -> float:
    """Bivariate t cdf for non-integer df by integrating the conditional law."""
    s = math.sqrt(max(1 - r * r, 0.0))

    def integrand(x):
        scale = s * math.sqrt((nu + x * x) / (nu + 1))
        inner = special.stdtr(nu + 1, (b - r * x) / scale) if scale > 0 else float(b >= r * x)
        return uni_pdf(nu, x) * inner

    val, _ = integrate.quad(integrand, -np.inf, a, epsabs=1e-12, epsrel=1e-10, limit=200)
    return val


def biv_cdf(nu, rho, a, b) -> float:
    """``Pr(Z1 <= a, Z2 <= b)`` for the standard bivariate law with correlation rho."""
    rho = float(rho)
    if not -1.0 <= rho <= 1.0:
        raise LatentError(f"correlation must lie in [-1, 1], got {rho}")
    a = float(a)
    b = float(b)
    if a == -INF or b == -INF:
        return 0.0
    if a == INF:
        return float(uni_cdf(nu, b))
    if b == INF:
        return float(uni_cdf(nu, a))
    if is_gaussian(nu):
        p = _bvnu(-a, -b, rho)
    elif float(nu).is_integer():
        p = _bvtl(int(nu), a, b, rho)
    elif abs(rho) == 1.0:
        if rho > 0:
            p = float(uni_cdf(nu, min(a, b)))
        else:
            p = max(float(uni_cdf(nu, a) - uni_cdf(nu, -b)), 0.0)
    else:
        p = _bvt_quad(float(nu), a, b, rho)
    return float(min(max(p, 0.0), 1.0))


def biv_logpdf(nu, rho, x, y):
    """Log density of the standard bivariate law (vectorized in x, y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    om = 1.0 - rho * rho
    q = (x * x - 2 * rho * x * y + y * y) / om
    if is_gaussian(nu):
        return -math.log(2 * math.pi) - 0.5 * math.log(om) - 0.5 * q
    c = special.gammaln((nu + 2) / 2) - special.gammaln(nu / 2) - math.log(nu * math.pi)
    return c - 0.5 * math.log(om) - (nu + 2) / 2 * np.log1p(q / nu)


# ---------------------------------------------------------------------------
# multivariate


def mv_logpdf(nu, scale, x, location=None):
    """Log density of the (possibly shifted) law with dispersion ``scale``.

    ``x`` may be a vector or an (n, d) array of rows.
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if location is not None:
        x = x - np.asarray(location, dtype=float)
    d = scale.shape[0]
    if d == 0:
        out = np.zeros(x.shape[0])
        return float(out[0]) if single else out
    L = np.linalg.cholesky(scale)
    sol = np.linalg.solve(L, x.T)
    q = np.sum(sol * sol, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    if is_gaussian(nu):
        out = -0.5 * (d * math.log(2 * math.pi) + logdet + q)
    else:
        out = (
            special.gammaln((nu + d) / 2) - special.gammaln(nu / 2)
            - 0.5 * d * math.log(nu * math.pi) - 0.5 * logdet
            - (nu + d) / 2 * np.log1p(q / nu)
        )
    return float(out[0]) if single else out


class MvCdfResult(NamedTuple):
    value: float
    error: float
    converged: bool


def _primes(count: int) -> np.ndarray:
    out: list[int] = []
    n = 2
    while len(out) < count:
        if all(n % p for p in out if p * p <= n):
            out.append(n)
        n += 1
    return np.array(out, dtype=float)


_PRIME_ROOTS = np.sqrt(_primes(400)) % 1.0


def _reorder_cholesky(corr: np.ndarray, upper: np.ndarray):
    """Cholesky factor with Genz-Bretz variable prioritisation.

    At each step the remaining variable with the smallest expected
    conditional probability is moved forward.
    """
    d = corr.shape[0]
    C = np.array(corr, dtype=float)
    b = np.array(upper, dtype=float)
    L = np.zeros((d, d))
    y = np.zeros(d)
    perm = np.arange(d)
    tiny = 1e-10
    for i in range(d):
        rem = np.arange(i, d)
        var = np.diag(C)[rem] - np.sum(L[rem, :i] ** 2, axis=1)
        sd = np.sqrt(np.maximum(var, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            bt = np.where(sd > tiny, (b[rem] - L[rem, :i] @ y[:i]) / np.where(sd > tiny, sd, 1.0), np.inf)
        j = rem[int(np.argmin(special.ndtr(bt)))]
        if j != i:
            for arr in (b, perm):
                arr[[i, j]] = arr[[j, i]]
            C[[i, j], :] = C[[j, i], :]
            C[:, [i, j]] = C[:, [j, i]]
            L[[i, j], :] = L[[j, i], :]
        v = C[i, i] - np.dot(L[i, :i], L[i, :i])
        if v <= tiny:
            L[i, i] = 0.0
            L[i + 1:, i] = 0.0
        else:
            L[i, i] = math.sqrt(v)
            L[i + 1:, i] = (C[i + 1:, i] - L[i + 1:, :i] @ L[i, :i]) / L[i, i]
        if L[i, i] > 0:
            bi = (b[i] - np.dot(L[i, :i], y[:i])) / L[i, i]
            pb = special.ndtr(bi)
            y[i] = -math.exp(-0.5 * bi * bi) / math.sqrt(2 * math.pi) / pb if pb > 1e-300 else bi
        else:
            y[i] = 0.0
    return L, b, perm


def _sov_integrand(L, b, w, nu):
    """Separation-of-variables integrand on points ``w`` in [0,1]^(d-1[+1])."""
    n = w.shape[0]
    d = L.shape[0]
    if is_gaussian(nu):
        scale = np.ones(n)
    else:
        # T = Z / sqrt(W/nu): the chi-square mixing variable uses the last coordinate
        scale = np.sqrt(special.chdtri(nu, np.clip(1.0 - w[:, -1], 1e-300, 1.0)) / nu)
    f = np.ones(n)
    y = np.zeros((n, d))
    tiny = 1e-16
    for i in range(d):
        resid = b[i] * scale - y[:, :i] @ L[i, :i]
        if L[i, i] > 0:
            e = special.ndtr(resid / L[i, i])
        else:
            e = (resid >= 0).astype(float)
        f = f * e
        if i < d - 1 and L[i, i] > 0:
            q = np.clip(w[:, i] * e, tiny, 1.0 - tiny)
            y[:, i] = special.ndtri(q)
    return f


def mv_cdf(
    spec: LatentSpec,
    upper: Sequence[float],
    target_err: float = 1e-4,
    seed: int | np.random.SeedSequence | None = 0,
    *,
    n_shifts: int = 10,
    n_start: int = 256,
    max_points: int = 2**20,
) -> MvCdfResult:
    """Randomized quasi-Monte Carlo estimate of ``Pr(Z <= upper)``.

    Genz's separation of variables with variable reordering, a Richtmyer
    lattice and ``n_shifts`` random shifts (baker-transformed).  The lattice
    size doubles until the standard error of the shift means drops below
    ``target_err`` or ``max_points`` evaluations are spent, in which case
    ``converged`` is False.  Results are deterministic given ``seed``.
    """
    if not target_err > 0:
        raise LatentError("target_err must be positive")
    upper = np.asarray(upper, dtype=float)
    d = spec.dim
    if upper.shape != (d,):
        raise LatentError(f"upper must have length {d}")
    nu = spec.nu
    if np.any(upper == -INF):
        return MvCdfResult(0.0, 0.0, True)
    keep = upper < INF
    if not np.all(keep):
        if not np.any(keep):
            return MvCdfResult(1.0, 0.0, True)
        sub = spec.corr[np.ix_(keep, keep)]
        return mv_cdf(LatentSpec(nu, sub), upper[keep], target_err, seed,
                      n_shifts=n_shifts, n_start=n_start, max_points=max_points)
    if np.linalg.eigvalsh(spec.corr).min() < -1e-8:
        raise LatentError("correlation matrix is not positive semidefinite")
    if d == 1:
        return MvCdfResult(float(uni_cdf(nu, upper[0])), 0.0, True)
    L, b, _ = _reorder_cholesky(spec.corr, upper)
    ndim = d - 1 + (0 if is_gaussian(nu) else 1)
    rng = np.random.default_rng(seed)
    if ndim > _PRIME_ROOTS.size:
        raise LatentError("dimension too large for the lattice generator")
    q = _PRIME_ROOTS[:ndim]
    n = n_start
    spent = 0
    sums = np.zeros(n_shifts)
    counts = 0
    # accumulate lattice blocks: each doubling reuses the previous points
    k_next = 1
    shifts = rng.random((n_shifts, ndim))
    value = err = float("nan")
    while True:
        ks = np.arange(k_next, n + 1, dtype=float)
        base = np.outer(ks, q) % 1.0
        for s in range(n_shifts):
            x = (base + shifts[s]) % 1.0
            w = np.abs(2.0 * x - 1.0)
            sums[s] += np.sum(_sov_integrand(L, b, w, nu))
        spent += ks.size * n_shifts
        counts = n
        k_next = n + 1
        means = sums / counts
        value = float(np.mean(means))
        err = float(np.std(means, ddof=1) / math.sqrt(n_shifts))
        if err <= target_err:
            return MvCdfResult(min(max(value, 0.0), 1.0), err, True)
        if spent + 2 * n * n_shifts > max_points:
            return MvCdfResult(min(max(value, 0.0), 1.0), err, False)
        n *= 2


def conditional(spec: LatentSpec, cond_idx: Sequence[int], cond_values: Sequence[float]) -> ConditionalLaw:
    """Law of the remaining coordinates given ``Z_F = z_F``."""
    d = spec.dim
    F = np.asarray(cond_idx, dtype=int).ravel()
    zF = np.asarray(cond_values, dtype=float).ravel()
    if F.size != zF.size:
        raise LatentError("cond_idx and cond_values differ in length")
    if np.unique(F).size != F.size or np.any((F < 0) | (F >= d)):
        raise LatentError("invalid conditioning index set")
    E = np.setdiff1d(np.arange(d), F)
    if E.size == 0:
        raise LatentError("conditioning set must be a strict subset")
    S = spec.corr
    if F.size == 0:
        return ConditionalLaw(E, np.zeros(d), np.array(S), spec.nu)
    S_FF = S[np.ix_(F, F)]
    S_EF = S[np.ix_(E, F)]
    try:
        cf = np.linalg.cholesky(S_FF)
    except np.linalg.LinAlgError as exc:
        raise LatentError("conditioning block is singular") from exc
    A = np.linalg.solve(cf.T, np.linalg.solve(cf, S_EF.T)).T
    loc = A @ zF
    scale = S[np.ix_(E, E)] - A @ S_EF.T
    scale = 0.5 * (scale + scale.T)
    if is_gaussian(spec.nu):
        return ConditionalLaw(E, loc, scale, INF)
    alpha = np.linalg.solve(cf, zF)
    quad = float(alpha @ alpha)
    k = F.size
    scale = scale * (spec.nu + quad) / (spec.nu + k)
    return ConditionalLaw(E, loc, scale, spec.nu + k)


def law_cdf(law: ConditionalLaw, upper, target_err: float = 1e-4, seed=0, **kw) -> MvCdfResult:
    """``Pr(Z_E <= upper)`` under a conditional law (standardizes, then :func:`mv_cdf`)."""
    upper = np.asarray(upper, dtype=float)
    sd = np.sqrt(np.diag(law.scale))
    u = (upper - law.location) / sd
    corr = law.scale / np.outer(sd, sd)
    np.fill_diagonal(corr, 1.0)
    corr = 0.5 * (corr + corr.T)
    if law.dim == 2:
        return MvCdfResult(biv_cdf(law.df, float(np.clip(corr[0, 1], -1, 1)), u[0], u[1]), 0.0, True)
    return mv_cdf(LatentSpec(law.df, corr), u, target_err, seed, **kw)
