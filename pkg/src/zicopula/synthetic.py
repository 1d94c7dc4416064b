"""Reference synthetic scenario: a sparse latent precision with D-PIV sites."""
from __future__ import annotations

import math

import numpy as np

from .copula import ColumnSpec, CopulaModel
from .data import Role
from .dpiv import DPivFit, DPivParams, Variant
from .latent import LatentSpec, uni_quantile

__all__ = ["sparse_precision", "reference_model"]


def sparse_precision(d: int = 8, zero_fraction: float = 0.4, seed: int = 0,
                     strength: tuple[float, float] = (0.3, 0.6)) -> np.ndarray:
    """Unit-diagonal-scaled precision with an exact share of zero upper entries.

    Nonzero entries have random sign and magnitude in ``strength`` before the
    diagonal is shifted to make the matrix positive definite.
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(d, 1)
    m = iu.size
    n_zero = int(round(zero_fraction * m))
    mask = np.ones(m, dtype=bool)
    mask[rng.choice(m, n_zero, replace=False)] = False
    vals = rng.uniform(*strength, size=m) * rng.choice([-1.0, 1.0], size=m) * mask
    theta = np.zeros((d, d))
    theta[iu, ju] = vals
    theta += theta.T
    shift = max(0.0, -np.linalg.eigvalsh(theta).min()) + 0.5
    theta += shift * np.eye(d)
    s = 1.0 / np.sqrt(np.diag(np.linalg.inv(theta)))
    # rescale so that the implied covariance is a correlation matrix
    return theta / np.outer(s, s)


def _site_marginal(rng) -> DPivFit:
    xi = float(rng.uniform(0.2, 0.5))
    sigma = float(rng.uniform(2.0, 8.0))
    p = DPivParams(xi, sigma, 1.0, 0.0, Variant.MU_ZERO_BETA_ONE)
    return DPivFit(p, loglik=math.nan, bic=math.nan, n=0, message="reference")


def reference_model(d: int = 8, zero_fraction: float = 0.4, seed: int = 0, nu: float = math.inf,
                    covariates: bool = False) -> tuple[CopulaModel, np.ndarray]:
    """Known model and its precision matrix.

    Site zero rates are drawn from ``[0.5, 0.75]``.  With ``covariates`` the
    last two columns are an age column (uniform ages 18 to 70) and a binary
    gender column whose censored-above category is ``1``.
    """
    theta = sparse_precision(d, zero_fraction, seed)
    sigma = np.linalg.inv(theta)
    sigma = 0.5 * (sigma + sigma.T)
    np.fill_diagonal(sigma, 1.0)
    rng = np.random.default_rng([seed, 1])
    cols = []
    n_sites = d - 2 if covariates else d
    for j in range(n_sites):
        t = float(uni_quantile(nu, rng.uniform(0.5, 0.75)))
        cols.append(ColumnSpec(Role.SITE, f"site{j + 1}", t, marginal=_site_marginal(rng)))
    if covariates:
        ages = np.arange(18, 71)
        table = tuple((int(a), float(k + 1) / ages.size) for k, a in enumerate(ages))
        t_age = float(uni_quantile(nu, dict(table)[35]))
        cols.append(ColumnSpec(Role.AGE, "age", t_age, table=table, age_cut=35))
        cols.append(ColumnSpec(Role.GENDER, "gender", float(uni_quantile(nu, 0.5)),
                               table=((0, 1.0),), censored_value=1))
    return CopulaModel(LatentSpec(nu, sigma), tuple(cols)), theta
