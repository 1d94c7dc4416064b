import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from zicopula.latent import (
    ConditionalLaw,
    LatentError,
    LatentSpec,
    biv_cdf,
    biv_logpdf,
    conditional,
    law_cdf,
    lower_trunc_cdf,
    lower_trunc_quantile,
    mv_cdf,
    mv_logpdf,
    trunc_cdf,
    trunc_logpdf,
    trunc_quantile,
    uni_cdf,
    uni_quantile,
)

INF = math.inf

# 30-digit mpmath quadrature of the conditional-cdf representation, frozen.
BVT_ORACLE = [
    ((6, 0.5, 0.3, -0.7), 0.21266519910158173),
    ((7.5, -0.4, 1.0, 0.2), 0.43961825488263834),
    ((30, 0.9, -1.5, -1.2), 0.060540144178192512),
    ((3, -0.95, 2.0, 1.5), 0.81509252230851366),
]
BVN_ORACLE = [
    ((0.8, -1.2, 0.4), 0.11462850063483258),
    ((-0.6, 0.5, 1.5), 0.62613560945040888),
    ((0.99, 2.0, -3.0), 0.0013498980316300945),
]


def random_corr(d, rng):
    A = rng.normal(size=(d, d + 2))
    C = A @ A.T
    s = np.sqrt(np.diag(C))
    C = C / np.outer(s, s)
    np.fill_diagonal(C, 1.0)
    return C


@pytest.mark.parametrize("rho", np.round(np.arange(-0.9, 0.91, 0.1), 10))
def test_sheppard_orthant(rho):
    want = 0.25 + math.asin(rho) / (2 * math.pi)
    assert abs(biv_cdf(INF, rho, 0.0, 0.0) - want) < 1e-7
    # the t law shares the orthant probability
    assert abs(biv_cdf(5.0, rho, 0.0, 0.0) - want) < 1e-7


@pytest.mark.parametrize("args,want", BVT_ORACLE)
def test_bivariate_t_oracle(args, want):
    assert biv_cdf(*args) == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("args,want", BVN_ORACLE)
def test_bivariate_normal_oracle(args, want):
    assert biv_cdf(INF, *args) == pytest.approx(want, abs=1e-12)


def test_bivariate_limits():
    assert biv_cdf(INF, 0.3, -INF, 1.0) == 0.0
    assert biv_cdf(INF, 0.3, INF, 1.0) == pytest.approx(stats.norm.cdf(1.0), abs=1e-15)
    assert biv_cdf(8.0, 0.3, 0.4, -0.2) == pytest.approx(biv_cdf(8.0, 0.3, -0.2, 0.4), abs=1e-15)
    assert biv_cdf(INF, 1.0, 0.2, 0.5) == pytest.approx(stats.norm.cdf(0.2), abs=1e-15)
    assert biv_cdf(INF, -1.0, 0.2, 0.5) == pytest.approx(stats.norm.cdf(0.2) - stats.norm.cdf(-0.5), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(rho=st.floats(-0.99, 0.99), a=st.floats(-4, 4), b=st.floats(-4, 4))
def test_bivariate_normal_matches_scipy(rho, a, b):
    want = stats.multivariate_normal([0, 0], [[1, rho], [rho, 1]]).cdf([a, b])
    assert biv_cdf(INF, rho, a, b) == pytest.approx(want, abs=1e-7)


def test_biv_logpdf_matches_scipy():
    x, y = 0.4, -1.3
    for rho in (-0.7, 0.0, 0.55):
        S = [[1, rho], [rho, 1]]
        assert biv_logpdf(INF, rho, x, y) == pytest.approx(stats.multivariate_normal([0, 0], S).logpdf([x, y]))
        assert biv_logpdf(6.0, rho, x, y) == pytest.approx(stats.multivariate_t([0, 0], S, df=6).logpdf([x, y]))


def test_mv_logpdf_matches_scipy():
    rng = np.random.default_rng(1)
    C = random_corr(4, rng)
    x = rng.normal(size=4)
    loc = rng.normal(size=4)
    assert mv_logpdf(INF, C, x, loc) == pytest.approx(stats.multivariate_normal(loc, C).logpdf(x))
    assert mv_logpdf(7.0, C, x, loc) == pytest.approx(stats.multivariate_t(loc, C, df=7).logpdf(x))


def test_truncated_laws_roundtrip():
    for nu in (INF, 6.0):
        t = 0.4
        u = np.array([0.0, 0.1, 0.5, 0.9, 0.999999])
        z = trunc_quantile(nu, t, u)
        np.testing.assert_allclose(trunc_cdf(nu, t, z), u, atol=1e-12)
        assert z[0] == pytest.approx(t, abs=1e-15)
        lt = lower_trunc_quantile(nu, t, u[1:])
        np.testing.assert_allclose(lower_trunc_cdf(nu, t, lt), u[1:], atol=1e-12)
        # density of Z | Z >= t integrates to one
        zz = np.linspace(t, 60, 400001)
        assert np.trapezoid(np.exp(trunc_logpdf(nu, t, zz)), zz) == pytest.approx(1.0, abs=1e-4)


def test_spec_validation():
    with pytest.raises(LatentError):
        LatentSpec(2.0, np.eye(2))
    with pytest.raises(LatentError):
        LatentSpec(INF, [[1, 0.2], [0.3, 1]])
    with pytest.raises(LatentError):
        LatentSpec(INF, [[2, 0.2], [0.2, 1]])
    with pytest.raises(LatentError):
        mv_cdf(LatentSpec(INF, [[1, 0.9, 0.9], [0.9, 1, -0.9], [0.9, -0.9, 1]]), [0, 0, 0])


@pytest.mark.parametrize("nu", [INF, 6.0])
def test_mv_cdf_against_scipy(nu):
    rng = np.random.default_rng(2)
    C = random_corr(5, rng)
    b = rng.normal(0.3, 0.8, size=5)
    res = mv_cdf(LatentSpec(nu, C), b, target_err=2e-5, seed=1)
    assert res.converged
    if math.isinf(nu):
        want = stats.multivariate_normal.cdf(b, np.zeros(5), C, maxpts=10**7, abseps=1e-7, releps=1e-7)
    else:
        want = stats.multivariate_t.cdf(b, np.zeros(5), C, df=nu, maxpts=10**7, random_state=0)
    assert abs(res.value - want) < 5 * res.error + 2e-6


def test_mv_cdf_reduces_exactly():
    C = np.array([[1, 0.4, 0.1], [0.4, 1, 0.2], [0.1, 0.2, 1]])
    spec = LatentSpec(INF, C)
    assert mv_cdf(spec, [0.3, INF, INF]).value == pytest.approx(stats.norm.cdf(0.3), abs=1e-15)
    assert mv_cdf(spec, [0.3, -INF, 1]).value == 0.0
    assert mv_cdf(spec, [INF, INF, INF]).value == 1.0
    # independent coordinates factorize
    r = mv_cdf(LatentSpec(INF, np.eye(4)), [0.1, -0.5, 0.7, 1.2], target_err=1e-6)
    assert r.value == pytest.approx(np.prod(stats.norm.cdf([0.1, -0.5, 0.7, 1.2])), abs=5 * r.error + 1e-9)


def test_mv_cdf_deterministic_given_seed():
    rng = np.random.default_rng(3)
    spec = LatentSpec(10.0, random_corr(6, rng))
    b = rng.normal(size=6)
    a1 = mv_cdf(spec, b, 1e-4, seed=7)
    a2 = mv_cdf(spec, b, 1e-4, seed=7)
    assert a1 == a2


def test_mv_cdf_budget_flag():
    rng = np.random.default_rng(4)
    spec = LatentSpec(INF, random_corr(8, rng))
    res = mv_cdf(spec, rng.normal(size=8), target_err=1e-12, max_points=5000)
    assert not res.converged


def test_gaussian_conditional_schur_complement():
    rng = np.random.default_rng(5)
    C = random_corr(5, rng)
    F, zF = [1, 3], np.array([0.5, -1.2])
    law = conditional(LatentSpec(INF, C), F, zF)
    E = [0, 2, 4]
    np.testing.assert_array_equal(law.index, E)
    inv = np.linalg.inv(C[np.ix_(F, F)])
    np.testing.assert_allclose(law.location, C[np.ix_(E, F)] @ inv @ zF, atol=1e-13)
    np.testing.assert_allclose(law.scale, C[np.ix_(E, E)] - C[np.ix_(E, F)] @ inv @ C[np.ix_(F, E)], atol=1e-13)
    assert math.isinf(law.df)


def test_student_conditional_scale_and_df():
    C = np.array([[1, 0.5, 0.2], [0.5, 1, 0.3], [0.2, 0.3, 1]])
    law = conditional(LatentSpec(6.0, C), [2], [1.5])
    assert law.df == 7.0
    gauss = conditional(LatentSpec(INF, C), [2], [1.5])
    np.testing.assert_allclose(law.scale, gauss.scale * (6 + 1.5**2) / 7)
    np.testing.assert_allclose(law.location, gauss.location)


def test_empty_conditioning_returns_original_law():
    C = np.array([[1, 0.5], [0.5, 1]])
    law = conditional(LatentSpec(9.0, C), [], [])
    np.testing.assert_array_equal(law.scale, C)
    assert law.df == 9.0


def test_law_cdf_dimension_two_is_exact():
    law = ConditionalLaw(np.array([0, 1]), np.array([0.2, -0.1]), np.array([[2.0, 0.6], [0.6, 0.5]]), INF)
    cov = law.scale
    want = stats.multivariate_normal(law.location, cov).cdf([1.0, 0.3])
    assert law_cdf(law, [1.0, 0.3]).value == pytest.approx(want, abs=1e-7)


@settings(max_examples=30, deadline=None)
@given(u=st.floats(1e-9, 1 - 1e-9), nu=st.sampled_from([INF, 4.0, 30.0]))
def test_uni_quantile_inverts_cdf(u, nu):
    assert uni_cdf(nu, uni_quantile(nu, u)) == pytest.approx(u, rel=1e-9, abs=1e-14)
