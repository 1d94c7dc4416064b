import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from zicopula.copula import ColumnSpec, CopulaModel, PairLikelihood, column_loglik, latent_states
from zicopula.data import ObservationMatrix, Role
from zicopula.dpiv import DPivFit, DPivParams, Variant
from zicopula.glasso import (
    GlassoError,
    glasso_objective,
    glasso_path,
    glasso_solve,
    kkt_residual,
    precision_to_correlation,
    score_full,
    score_pairwise,
    score_table_text,
    select_model,
    sparsity,
)
from zicopula.inference import sample
from zicopula.latent import LatentSpec
from zicopula.synthetic import reference_model

INF = math.inf


def random_corr(d, seed, k=None):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(d, k or d + 5))
    C = A @ A.T
    s = np.sqrt(np.diag(C))
    C = C / np.outer(s, s)
    np.fill_diagonal(C, 1.0)
    return C


def two_by_two_oracle(rho, lam):
    # stationarity W = S + lam * sign(Theta), with sign(Theta_12) = -sign(rho)
    if lam >= abs(rho):
        return np.diag([1 / (1 + lam)] * 2)
    w = rho - lam * math.copysign(1.0, rho)
    return np.linalg.inv(np.array([[1 + lam, w], [w, 1 + lam]]))


@pytest.mark.parametrize("rho,lam", [(0.5, 0.6), (0.5, 0.5), (-0.3, 0.1), (0.8, 0.02), (0.2, 0.0)])
def test_two_by_two_soft_threshold_exact(rho, lam):
    S = np.array([[1.0, rho], [rho, 1.0]])
    est = glasso_solve(S, lam, kkt_tol=1e-13, tol=1e-16)
    np.testing.assert_allclose(est.theta, two_by_two_oracle(rho, lam), atol=1e-10)
    if lam >= abs(rho):
        assert est.theta[0, 1] == 0.0


def test_two_by_two_without_diagonal_penalty():
    S = np.array([[1.0, 0.6], [0.6, 1.0]])
    est = glasso_solve(S, 0.2, penalize_diagonal=False, kkt_tol=1e-13, tol=1e-16)
    np.testing.assert_allclose(est.theta, np.linalg.inv([[1.0, 0.4], [0.4, 1.0]]), atol=1e-10)


def test_lambda_zero_is_inverse():
    S = random_corr(10, 0)
    est = glasso_solve(S, 0.0)
    np.testing.assert_allclose(est.theta, np.linalg.inv(S), atol=1e-8)
    assert est.sparsity == 0.0


def test_lambda_zero_singular_raises():
    S = random_corr(6, 1, k=3)
    with pytest.raises(GlassoError):
        glasso_solve(S, 0.0)
    # a penalty makes the problem well posed
    assert glasso_solve(S, 0.1).kkt_residual <= 1e-6


@pytest.mark.parametrize("lam", [0.0075, 0.02, 0.1])
def test_kkt_certificate(lam):
    S = random_corr(12, 2)
    est = glasso_solve(S, lam)
    assert est.kkt_residual <= 1e-6
    W = np.linalg.inv(est.theta)
    G = W - S
    nz = est.theta != 0
    assert np.all(np.abs(G) <= lam + 1e-6)
    np.testing.assert_allclose(G[nz], lam * np.sign(est.theta[nz]), atol=1e-6)
    assert np.all(np.linalg.eigvalsh(est.theta) > 0)
    np.testing.assert_array_equal(est.theta, est.theta.T)


def test_objective_never_decreases_across_sweeps():
    S = random_corr(12, 3)
    est = glasso_solve(S, 0.02, record_objective=True)
    assert len(est.objective_trace) >= 2
    assert np.all(np.diff(est.objective_trace) >= -1e-12)
    assert est.objective_trace[-1] == pytest.approx(glasso_objective(est.theta, S, 0.02))


def test_sparsity_nondecreasing_along_path():
    S = random_corr(12, 4)
    lams = [0.0, 0.0075, 0.02, 0.05, 0.1, 0.3]
    sp = [e.sparsity for e in glasso_path(S, lams)]
    assert all(b >= a for a, b in zip(sp, sp[1:]))
    top = np.max(np.abs(S - np.eye(12)))
    assert glasso_solve(S, top * 1.001).sparsity == 1.0


def test_permutation_equivariance():
    S = random_corr(9, 5)
    perm = np.random.default_rng(0).permutation(9)
    a = glasso_solve(S, 0.05, kkt_tol=1e-11, tol=1e-14)
    b = glasso_solve(S[np.ix_(perm, perm)], 0.05, kkt_tol=1e-11, tol=1e-14)
    np.testing.assert_array_equal(a.theta[np.ix_(perm, perm)] == 0, b.theta == 0)
    np.testing.assert_allclose(a.theta[np.ix_(perm, perm)], b.theta, atol=1e-8)


def test_matches_reference_implementation():
    skl = pytest.importorskip("sklearn.covariance")
    S = random_corr(10, 6)
    _, prec = skl.graphical_lasso(S, alpha=0.05, tol=1e-12, max_iter=2000)
    est = glasso_solve(S, 0.05, penalize_diagonal=False, kkt_tol=1e-10, tol=1e-14)
    np.testing.assert_allclose(est.theta, prec, atol=1e-6)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.floats(0.01, 0.3))
def test_solution_certified_on_random_inputs(seed, lam):
    S = random_corr(6, seed)
    est = glasso_solve(S, lam)
    assert kkt_residual(est.theta, S, lam) <= 1e-6
    assert sparsity(est.theta) == est.sparsity


def test_precision_to_correlation_keeps_zero_pattern():
    est = glasso_solve(random_corr(8, 7), 0.1)
    corr, prec = precision_to_correlation(est.theta)
    np.testing.assert_array_equal(prec == 0, est.theta == 0)
    np.testing.assert_allclose(np.diag(corr), 1.0)
    np.testing.assert_allclose(np.linalg.inv(corr), prec, atol=1e-10)


# ---------------------------------------------------------------------------
# scores


def _site(t, xi=0.3, sigma=4.0, label="s"):
    fit = DPivFit(DPivParams(xi, sigma, 1.0, variant=Variant.MU_ZERO_BETA_ONE), math.nan, math.nan, 0)
    return ColumnSpec(Role.SITE, label, t, marginal=fit)


def test_full_score_of_all_zero_column():
    t = 0.4
    model = CopulaModel(LatentSpec(INF, np.eye(1)), (_site(t),))
    data = ObservationMatrix(np.zeros((7, 1), dtype=int), ["s"])
    assert score_full(model, data).value == pytest.approx(-stats.norm.logcdf(t), abs=1e-14)


def test_full_score_independent_equals_univariate_sum():
    model, _ = reference_model(d=4, seed=1)
    data = sample(model, 150, 2)
    indep = model.with_sigma(np.eye(4))
    res = score_full(indep, data, target_err=1e-5)
    want = -sum(column_loglik(c, data.column(j), INF) for j, c in enumerate(indep.columns)) / data.n
    assert res.n_skipped == 0
    assert abs(res.value - want) <= 3 * res.qmc_error + 1e-9


def test_full_score_reproducible():
    model, _ = reference_model(d=5, seed=2, nu=30.0)
    data = sample(model, 60, 3)
    a = score_full(model, data, seed=4)
    b = score_full(model, data, seed=4)
    assert a == b


def test_full_score_prefers_truth_over_perturbation():
    model, _ = reference_model(d=5, seed=3)
    wins = 0
    for rep in range(20):
        data = sample(model, 2000, 100 + rep).take(np.arange(300))
        sig = np.array(model.sigma)
        sig[0, 1] = sig[1, 0] = sig[0, 1] + (0.2 if sig[0, 1] < 0.5 else -0.2)
        if np.linalg.eigvalsh(sig).min() <= 0:
            pytest.skip("perturbation left the PD cone")
        wins += score_full(model, data).value < score_full(model.with_sigma(sig), data).value
    assert wins >= 18


def test_pairwise_score_two_columns():
    model, _ = reference_model(d=2, seed=4)
    data = sample(model, 500, 5)
    s = [latent_states(c, data.column(j), INF) for j, c in enumerate(model.columns)]
    want = -PairLikelihood(s[0], s[1], INF)(float(model.sigma[0, 1])) / data.n
    assert score_pairwise(model, data) == pytest.approx(want, rel=1e-14)


def test_pairwise_score_invariant_to_column_order():
    model, _ = reference_model(d=4, seed=5)
    data = sample(model, 400, 6)
    perm = [2, 0, 3, 1]
    pm = CopulaModel(LatentSpec(INF, model.sigma[np.ix_(perm, perm)]), tuple(model.columns[j] for j in perm))
    assert score_pairwise(pm, data.select(perm)) == pytest.approx(score_pairwise(model, data), rel=1e-12)


def test_pairwise_score_minimized_near_truth():
    model, _ = reference_model(d=3, seed=6)
    data = sample(model, 4000, 7)
    base = score_pairwise(model, data)
    for delta in (-0.15, 0.15):
        sig = np.array(model.sigma)
        sig[0, 2] = sig[2, 0] = sig[0, 2] + delta
        if np.linalg.eigvalsh(sig).min() > 0:
            assert score_pairwise(model.with_sigma(sig), data) > base


def test_select_single_grid_point_and_table():
    model, _ = reference_model(d=4, seed=7)
    train, test = sample(model, 3000, 8), sample(model, 300, 9)
    sel = select_model(train, test, nu_grid=(INF,), lambda_grid=(0.02,), score_rows=100)
    assert len(sel.table) == 1
    assert sel.chosen == sel.table[0]
    assert sel.precision.lam == 0.02
    text = score_table_text(sel.table)
    assert text.splitlines()[0].split("\t") == ["nu", "score", "lambda=0.02"]
    assert [ln.split("\t")[1] for ln in text.splitlines()[1:]] == ["sparsity", "l_pairwise", "l"]


def test_select_rejects_empty_grids():
    model, _ = reference_model(d=3, seed=8)
    data = sample(model, 200, 1)
    with pytest.raises(ValueError):
        select_model(data, data, nu_grid=(), lambda_grid=(0.0,))
