import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from zicopula.copula import ColumnSpec, CopulaModel, to_latent
from zicopula.data import ObservationMatrix, Role
from zicopula.dpiv import DPivFit, DPivParams, Variant, dpiv_pmf
from zicopula.inference import (
    PredictionTask,
    binomial_region_test,
    chi2_pair_test,
    export_graph,
    latent_draws,
    log_score,
    markov_blanket,
    naive_positive,
    predict_positive,
    prediction_experiment,
    qq_sum_data,
    region_probability,
    sample,
    to_dot,
)
from zicopula.latent import LatentSpec
from zicopula.synthetic import reference_model

INF = math.inf


def site(t, xi=0.3, sigma=4.0, label="s"):
    fit = DPivFit(DPivParams(xi, sigma, 1.0, variant=Variant.MU_ZERO_BETA_ONE), math.nan, math.nan, 0)
    return ColumnSpec(Role.SITE, label, t, marginal=fit)


def model_of(corr, ts, nu=INF):
    cols = tuple(site(t, label=f"s{j}") for j, t in enumerate(ts))
    return CopulaModel(LatentSpec(nu, np.asarray(corr, dtype=float)), cols)


CORR4 = np.array([
    [1.0, 0.5, 0.4, 0.2],
    [0.5, 1.0, 0.3, 0.1],
    [0.4, 0.3, 1.0, 0.25],
    [0.2, 0.1, 0.25, 1.0],
])


# ---------------------------------------------------------------------------
# sampling


def test_independent_zero_rates():
    ts = [-0.5, 0.0, 0.7]
    m = model_of(np.eye(3), ts)
    data = sample(m, 50000, 1)
    p = stats.norm.cdf(ts)
    se = np.sqrt(p * (1 - p) / data.n)
    assert np.all(np.abs(data.zero_rates() - p) < 3 * se)


def test_positive_counts_follow_dpiv():
    m = model_of(np.eye(2), [0.0, 0.3])
    x = sample(m, 50000, 2).column(0)
    x = x[x > 0]
    params = m.columns[0].marginal.params
    edges = np.arange(1, 16)
    observed = np.array([np.sum(x == k) for k in edges] + [np.sum(x >= 16)])
    p = np.append(dpiv_pmf(params, edges), 1 - dpiv_pmf(params, edges).sum())
    res = stats.chisquare(observed, p * x.size)
    assert res.pvalue > 0.01


def test_sample_deterministic():
    m, _ = reference_model(d=6, seed=1, covariates=True, nu=30.0)
    a, b = sample(m, 300, 7), sample(m, 300, 7)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, sample(m, 300, 8).values)
    assert a.roles[-2:] == [Role.AGE, Role.GENDER]
    assert set(np.unique(a.column(5))) <= {0, 1}


def test_student_draws_have_t_margins():
    rng = np.random.default_rng(0)
    z = latent_draws(5.0, CORR4, 40000, rng)
    assert stats.kstest(z[:, 0], stats.t(5).cdf).pvalue > 0.01
    with pytest.raises(ValueError):
        sample(model_of(np.eye(1), [0.0]), 0, 1)


# ---------------------------------------------------------------------------
# prediction


def test_empty_blanket_returns_marginal_exactly():
    m = model_of(CORR4, [0.1, 0.2, -0.3, 0.5])
    task = PredictionTask(2, np.array([0, 3, 1, 0]), ())
    assert predict_positive(m, task) == stats.norm.sf(-0.3)
    assert predict_positive(m, task) == naive_positive(m, 2)


def test_blanket_comes_from_precision_zeros():
    theta = np.array([[2.0, 0.5, 0.0], [0.5, 2.0, -0.3], [0.0, -0.3, 2.0]])
    assert markov_blanket(theta, 0) == (1,)
    assert markov_blanket(theta, 1) == (0, 2)
    with pytest.raises(ValueError):
        PredictionTask(1, np.zeros(3), (1, 2))


@pytest.mark.parametrize("nu", [INF, 7.0])
def test_uncensored_blanket_closed_form(nu):
    C = CORR4[:3, :3]
    ts = [0.2, -0.1, 0.3]
    m = model_of(C, ts, nu)
    row = np.array([0, 4, 2])
    z = np.array([to_latent(m.columns[j], row[j], nu) for j in (1, 2)])
    A = C[0, 1:] @ np.linalg.inv(C[1:, 1:])
    loc = A @ z
    var = C[0, 0] - A @ C[1:, 0]
    if math.isinf(nu):
        want = stats.norm.sf((ts[0] - loc) / math.sqrt(var))
    else:
        quad = z @ np.linalg.solve(C[1:, 1:], z)
        var *= (nu + quad) / (nu + 2)
        want = stats.t.sf((ts[0] - loc) / math.sqrt(var), nu + 2)
    assert predict_positive(m, PredictionTask(0, row, (1, 2))) == pytest.approx(want, abs=1e-6)


@pytest.mark.parametrize("nu", [INF, 6.0])
def test_censored_blanket_against_monte_carlo(nu):
    ts = [0.1, -0.2, 0.3, 0.0]
    m = model_of(CORR4, ts, nu)
    row = np.array([0, 3, 0, 5])
    p = predict_positive(m, PredictionTask(0, row, (1, 2)), target_err=1e-6)
    # brute force: draw (Z0, Z2) given Z1 = z1 and keep draws with Z2 < t2
    z1 = to_latent(m.columns[1], 3, nu)
    E = [0, 2]
    b = CORR4[E, 1]
    loc = b * z1
    cov = CORR4[np.ix_(E, E)] - np.outer(b, b)
    rng = np.random.default_rng(11)
    n = 10**6
    draw = rng.multivariate_normal(np.zeros(2), cov, size=n)
    if math.isinf(nu):
        draw = loc + draw
    else:
        scale = (nu + z1 * z1) / (nu + 1)
        w = np.sqrt(rng.chisquare(nu + 1, n) / (nu + 1))
        draw = loc + draw * math.sqrt(scale) / w[:, None]
    keep = draw[:, 1] < ts[2]
    hits = draw[keep, 0] >= ts[0]
    mc = hits.mean()
    se = math.sqrt(mc * (1 - mc) / keep.sum())
    assert abs(p - mc) < 3 * se


def test_prediction_monotone_in_positively_correlated_neighbor():
    m = model_of([[1.0, 0.6], [0.6, 1.0]], [0.2, 0.1])
    ps = [predict_positive(m, PredictionTask(0, np.array([0, k]), (1,))) for k in range(0, 40)]
    assert all(b >= a for a, b in zip(ps, ps[1:]))
    assert ps[-1] > ps[0]


def test_prediction_is_clamped():
    m = model_of([[1.0, 0.999], [0.999, 1.0]], [-6.0, -6.0])
    p = predict_positive(m, PredictionTask(0, np.array([0, 200]), (1,)))
    assert p == 1 - 1e-6


def test_prediction_reproducible():
    m = model_of(CORR4, [0.1, -0.2, 0.3, 0.0])
    task = PredictionTask(0, np.array([0, 0, 0, 4]), (1, 2, 3))
    assert predict_positive(m, task, seed=3) == predict_positive(m, task, seed=3)


def test_true_model_beats_independence_model():
    model, theta = reference_model(d=6, seed=9)
    indep = model.with_sigma(np.eye(6))
    wins = 0
    for rep in range(20):
        test = sample(model, 120, 200 + rep)
        a = prediction_experiment(model, theta, test, 120, seed=rep)
        b = prediction_experiment(indep, theta, test, 120, seed=rep)
        wins += a.model_score <= b.model_score
    assert wins >= 18


def test_log_score_values():
    assert log_score(0.5, True) == pytest.approx(-0.6931471805599453)
    assert log_score(0.5, False) == pytest.approx(-0.6931471805599453)
    assert log_score(0.9, True) == math.log(0.9)
    assert log_score(0.9, False) == pytest.approx(math.log(0.1))
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            log_score(bad, True)


# ---------------------------------------------------------------------------
# diagnostics


def test_region_probability_independence_algebra():
    ts = [0.3, -0.4]
    m = model_of(np.eye(2), ts)
    q = region_probability(m, "both_positive", (0, 1))
    assert q == pytest.approx(stats.norm.sf(ts[0]) * stats.norm.sf(ts[1]), abs=1e-14)
    q2 = region_probability(m, "first_zero_second_positive", (0, 1))
    assert q2 == pytest.approx(stats.norm.cdf(ts[0]) * stats.norm.sf(ts[1]), abs=1e-14)
    with pytest.raises(ValueError):
        region_probability(m, "nowhere", (0, 1))


def test_region_probability_matches_simulation():
    m = model_of([[1.0, 0.6], [0.6, 1.0]], [0.1, -0.2], nu=5.0)
    data = sample(m, 100000, 3)
    pos = data.values > 0
    q = region_probability(m, "both_positive", (0, 1))
    emp = np.mean(pos[:, 0] & pos[:, 1])
    assert abs(emp - q) < 3 * math.sqrt(q * (1 - q) / data.n)


def test_binomial_test_reports_count():
    m = model_of([[1.0, 0.4], [0.4, 1.0]], [0.0, 0.0])
    data = sample(m, 1000, 4)
    res = binomial_region_test(m, data, "both_positive", (0, 1))
    pos = data.values > 0
    assert res.statistic == np.sum(pos[:, 0] & pos[:, 1])
    assert 0 <= res.p_value <= 1
    with pytest.raises(ValueError):
        binomial_region_test(m, data.take([]), "both_positive", (0, 1))


def test_chi2_identical_indicators():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 3, 200)
    data = ObservationMatrix(np.column_stack([x, x]), ["a", "b"])
    assert chi2_pair_test(data, (0, 1)).p_value < 1e-6


def test_chi2_matches_pearson_formula_and_is_symmetric():
    rng = np.random.default_rng(1)
    x = rng.integers(0, 3, (500, 2)) * rng.integers(0, 2, (500, 2))
    data = ObservationMatrix(x, ["a", "b"])
    a, b = chi2_pair_test(data, (0, 1)), chi2_pair_test(data, (1, 0))
    assert a.statistic == pytest.approx(b.statistic, rel=1e-14)
    B = x >= 1
    n = np.array([[np.sum(~B[:, 0] & ~B[:, 1]), np.sum(~B[:, 0] & B[:, 1])],
                  [np.sum(B[:, 0] & ~B[:, 1]), np.sum(B[:, 0] & B[:, 1])]], dtype=float)
    stat = 500 * (n[0, 0] * n[1, 1] - n[0, 1] * n[1, 0]) ** 2 / (
        n.sum(0).prod() * n.sum(1).prod())
    assert a.statistic == pytest.approx(stat, rel=1e-12)
    assert a.p_value == pytest.approx(stats.chi2.sf(stat, 1), rel=1e-10)


def test_chi2_zero_margin_rejected():
    data = ObservationMatrix(np.array([[0, 1], [0, 0], [0, 3]]), ["a", "b"])
    with pytest.raises(ValueError):
        chi2_pair_test(data, (0, 1))


def test_chi2_calibrated_under_independence():
    rng = np.random.default_rng(2)
    rej = 0
    for _ in range(1000):
        x = (rng.random((300, 2)) < [0.4, 0.3]).astype(int)
        rej += chi2_pair_test(ObservationMatrix(x, ["a", "b"]), (0, 1)).p_value < 0.05
    assert 0.03 <= rej / 1000 <= 0.07


# ---------------------------------------------------------------------------
# graph export


def test_diagonal_precision_has_no_edges():
    g = export_graph(np.diag([1.0, 2.0, 3.0]), ["a", "b", "c"], 0.5)
    assert g.edges == [] and g.isolated == [0, 1, 2]


def random_sparse_precision(d, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(d, d)) * (rng.random((d, d)) < 0.3)
    T = A + A.T
    np.fill_diagonal(T, np.abs(T).sum(1) + 1.0)
    return T


def test_full_fraction_keeps_every_nonzero():
    T = random_sparse_precision(10, 0)
    g = export_graph(T, [str(k) for k in range(10)], 1.0)
    iu = np.triu_indices(10, 1)
    assert len(g.edges) == int(np.sum(T[iu] != 0))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), frac=st.floats(0.01, 1.0))
def test_edge_ranking_matches_sort_oracle(seed, frac):
    d = 9
    T = random_sparse_precision(d, seed)
    g = export_graph(T, [f"n{k}" for k in range(d)], frac)
    entries = [(abs(T[i, j]), i, j) for i in range(d) for j in range(i + 1, d) if T[i, j] != 0]
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    keep = entries[: math.ceil(frac * len(entries) - 1e-9)]
    assert [(e.i, e.j) for e in g.edges] == [(i, j) for _, i, j in keep]
    for e in g.edges:
        assert e.weight == T[e.i, e.j] and e.sign == (1 if e.weight > 0 else -1)
        assert e.width >= 1.0 and math.isfinite(e.width)
    touched = {e.i for e in g.edges} | {e.j for e in g.edges}
    assert set(g.isolated) == set(range(d)) - touched


def test_dot_output():
    T = np.array([[2.0, 0.5, 0.0], [0.5, 2.0, -0.8], [0.0, -0.8, 2.0]])
    g = export_graph(T, ["a", 'b"q', "c"], 1.0)
    text = to_dot(g)
    assert text.startswith("graph dependence {")
    assert '"a" -- "b\\"q"' in text and "style=dashed" in text and "style=solid" in text
    lone = to_dot(export_graph(T, ["a", "b", "c"], 0.5))
    assert '"a";' not in lone
    assert '"a";' in to_dot(export_graph(T, ["a", "b", "c"], 0.5), omit_isolated=False)


# ---------------------------------------------------------------------------
# QQ data


def test_qq_lengths_and_scale():
    m, _ = reference_model(d=4, seed=3)
    data = sample(m, 500, 1)
    a, b = qq_sum_data(m, data, [0, 2], seed=2, n_sim=300)
    assert a.size == b.size == 300
    assert np.all(np.diff(a) >= 0) and np.all(np.diff(b) >= 0)
    a1, _ = qq_sum_data(m, data, [1], seed=2)
    np.testing.assert_array_equal(a1, np.log1p(np.sort(data.column(1))))
    with pytest.raises(ValueError):
        qq_sum_data(m, data, [])


def test_qq_self_consistency():
    m, _ = reference_model(d=5, seed=4)
    data = sample(m, 20000, 10)
    a, b = qq_sum_data(m, data, range(5), seed=11)
    # two-sample KS distance of the matched vectors inside the 1% band
    grid = np.union1d(a, b)
    Fa = np.searchsorted(a, grid, side="right") / a.size
    Fb = np.searchsorted(b, grid, side="right") / b.size
    assert np.max(np.abs(Fa - Fb)) < 1.628 * math.sqrt(2 / a.size)
