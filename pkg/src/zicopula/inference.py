"""Sampling, conditional prediction, log scores and model diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

from .copula import (
    ABOVE,
    POINT,
    CopulaModel,
    _table_arrays,
    latent_states,
)
from .data import ObservationMatrix, Role
from .dpiv import dpiv_quantile
from .latent import (
    biv_cdf,
    conditional,
    is_gaussian,
    law_cdf,
    uni_cdf,
    uni_sf,
)

__all__ = [
    "latent_draws",
    "sample",
    "PredictionTask",
    "markov_blanket",
    "predict_positive",
    "naive_positive",
    "log_score",
    "PredictionSummary",
    "PredictionRecord",
    "prediction_records",
    "summarize_predictions",
    "prediction_experiment",
    "REGIONS",
    "TestResult",
    "binomial_region_test",
    "region_probability",
    "chi2_pair_test",
    "DependenceGraph",
    "Edge",
    "export_graph",
    "to_dot",
    "qq_sum_data",
]

P_CLAMP = 1e-6


# ---------------------------------------------------------------------------
# sampling


def latent_draws(nu: float, sigma, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` rows of the centered latent law with dispersion ``sigma``."""
    sigma = np.asarray(sigma, dtype=float)
    d = sigma.shape[0]
    try:
        L = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(sigma)
        L = V * np.sqrt(np.maximum(w, 0.0))
    z = rng.standard_normal((n, d)) @ L.T
    if not is_gaussian(nu):
        # one chi-square mixing variable per row
        z /= np.sqrt(rng.chisquare(nu, n) / nu)[:, None]
    return z


def _below_above_tables(col):
    v, F = _table_arrays(col)
    return v, F


def _empirical_quantile(values, cdf, u):
    idx = np.searchsorted(cdf, u, side="left")
    return values[np.minimum(idx, values.size - 1)]


def _observe(col, z, nu):
    t = col.threshold
    n = z.size
    if col.role is Role.SITE:
        x = np.zeros(n, dtype=np.int64)
        pos = z >= t
        if np.any(pos):
            s_t = uni_sf(nu, t)
            u = (s_t - uni_sf(nu, z[pos])) / s_t
            u = np.clip(u, 0.0, np.nextafter(1.0, 0.0))
            x[pos] = dpiv_quantile(col.marginal.params, u)
        return x
    pt = uni_cdf(nu, t)
    below = z < t
    if col.role is Role.AGE:
        if not col.table:
            return np.where(below, col.age_cut, col.age_cut + 1).astype(np.int64)
        v, F = _table_arrays(col)
        x = np.empty(n, dtype=np.int64)
        lo = v <= col.age_cut
        F_cut = F[lo][-1] if lo.any() else 0.0
        if np.any(below):
            if not lo.any():
                x[below] = col.age_cut
            else:
                uc = uni_cdf(nu, z[below]) / pt
                x[below] = _empirical_quantile(v[lo], F[lo] / F_cut, uc)
        if np.any(~below):
            if lo.all():
                x[~below] = col.age_cut + 1
            else:
                uc = (uni_cdf(nu, z[~below]) - pt) / (1.0 - pt)
                x[~below] = _empirical_quantile(v[~lo], (F[~lo] - F_cut) / (1.0 - F_cut), uc)
        return x
    x = np.full(n, col.censored_value, dtype=np.int64)
    if np.any(below) and col.table:
        v, G = _table_arrays(col)
        uc = uni_cdf(nu, z[below]) / pt
        x[below] = _empirical_quantile(v, G, uc)
    return x


def sample(model: CopulaModel, n: int, seed: int | None = 0) -> ObservationMatrix:
    """Draw ``n`` rows: latent draw, censoring, then per-column transforms.

    Site coordinates above their threshold become ``floor(F_PIV^{-1}(M(Z))) + 1``;
    covariates are read back through their empirical tables.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    z = latent_draws(model.nu, model.sigma, n, rng)
    cols = [_observe(c, z[:, j], model.nu) for j, c in enumerate(model.columns)]
    return ObservationMatrix(np.column_stack(cols), model.labels, [c.role for c in model.columns])


# ---------------------------------------------------------------------------
# prediction


@dataclass(frozen=True)
class PredictionTask:
    """Predict ``Z_target >= t_target`` from the blanket entries of ``row``."""

    target: int
    row: np.ndarray
    blanket: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "row", np.asarray(self.row))
        object.__setattr__(self, "blanket", tuple(int(j) for j in self.blanket))
        if self.target in self.blanket:
            raise ValueError("target cannot be in its own blanket")


def markov_blanket(theta, i: int) -> tuple[int, ...]:
    """Neighbours of ``i`` in the graph of nonzero precision entries."""
    theta = np.asarray(theta)
    return tuple(int(j) for j in np.flatnonzero(theta[i] != 0.0) if j != i)


def _single_state(col, x, nu):
    s = latent_states(col, np.array([x]), nu)
    return int(s.kind[0]), float(s.z[0])


def naive_positive(model: CopulaModel, i: int) -> float:
    """Marginal probability ``Pr(Z_i >= t_i)``."""
    return float(uni_sf(model.nu, model.columns[i].threshold))


def predict_positive(
    model: CopulaModel,
    task: PredictionTask,
    *,
    target_err: float = 1e-4,
    seed: int = 0,
    max_points: int = 2**18,
) -> float:
    """``Pr(Z_i >= t_i | X_blanket)`` under the continuous working assumption.

    Uncensored blanket entries are conditioned on as points; censored ones
    enter through a ratio of orthant probabilities evaluated with common
    random numbers.  The result is clamped to ``[1e-6, 1 - 1e-6]``.
    """
    i = task.target
    nu = model.nu
    if not task.blanket:
        return float(np.clip(naive_positive(model, i), P_CLAMP, 1 - P_CLAMP))
    obs, zobs, cen, csign = [], [], [], []
    for j in task.blanket:
        kind, z = _single_state(model.columns[j], task.row[j], nu)
        if kind == POINT:
            obs.append(j)
            zobs.append(z)
        else:
            cen.append(j)
            csign.append(-1.0 if kind == ABOVE else 1.0)
    law = conditional(model.spec, obs, zobs)
    pos = {int(k): n for n, k in enumerate(law.index)}
    keep = [pos[i]] + [pos[j] for j in cen]
    loc = law.location[keep]
    scale = law.scale[np.ix_(keep, keep)]
    t = model.thresholds
    sign = np.array([-1.0] + csign)
    upper = sign * np.concatenate([[t[i]], t[cen]])
    flipped = type(law)(np.array(keep), sign * loc, scale * np.outer(sign, sign), law.df)
    rng_seed = np.random.SeedSequence([int(seed), int(i)])
    if not cen:
        sd = math.sqrt(scale[0, 0])
        p = float(uni_sf(law.df, (t[i] - loc[0]) / sd))
    else:
        num = law_cdf(flipped, upper, target_err, rng_seed, max_points=max_points)
        sub = type(law)(np.array(keep[1:]), flipped.location[1:], flipped.scale[1:, 1:], law.df)
        den = law_cdf(sub, upper[1:], target_err, rng_seed, max_points=max_points)
        p = num.value / den.value if den.value > 0 else naive_positive(model, i)
    return float(np.clip(p, P_CLAMP, 1 - P_CLAMP))


def log_score(p_hat: float, outcome: bool) -> float:
    """``1{X>0} log p + (1 - 1{X>0}) log(1 - p)``."""
    if not 0.0 < p_hat < 1.0:
        raise ValueError("p_hat must lie strictly between 0 and 1")
    return math.log(p_hat) if outcome else math.log1p(-p_hat)


class PredictionSummary(NamedTuple):
    model_score: float
    naive_score: float
    model_accuracy: float
    naive_accuracy: float
    n: int


class PredictionRecord(NamedTuple):
    row: int
    target: int
    p_model: float
    p_naive: float
    outcome: bool


def prediction_records(
    model: CopulaModel,
    theta,
    test: ObservationMatrix,
    n_predictions: int = 400,
    *,
    seed: int = 0,
    target_err: float = 1e-4,
) -> list[PredictionRecord]:
    """One prediction per test row; row ``k`` targets column ``k mod d``."""
    d = model.dim
    out = []
    for k in range(min(n_predictions, test.n)):
        i = k % d
        row = test.values[k]
        task = PredictionTask(i, row, markov_blanket(theta, i))
        p = predict_positive(model, task, target_err=target_err, seed=seed + k)
        q = float(np.clip(naive_positive(model, i), P_CLAMP, 1 - P_CLAMP))
        out.append(PredictionRecord(k, i, p, q, bool(model.columns[i].positive(row[i]))))
    return out


def summarize_predictions(records: Sequence[PredictionRecord]) -> PredictionSummary:
    """Negated average log scores (smaller is better) and hit rates at 0.5."""
    if not records:
        raise ValueError("no predictions")
    ms = [-log_score(r.p_model, r.outcome) for r in records]
    ns = [-log_score(r.p_naive, r.outcome) for r in records]
    ma = [(r.p_model > 0.5) == r.outcome for r in records]
    na = [(r.p_naive > 0.5) == r.outcome for r in records]
    return PredictionSummary(float(np.mean(ms)), float(np.mean(ns)),
                             float(np.mean(ma)), float(np.mean(na)), len(records))


def prediction_experiment(model: CopulaModel, theta, test: ObservationMatrix,
                          n_predictions: int = 400, *, seed: int = 0,
                          target_err: float = 1e-4) -> PredictionSummary:
    return summarize_predictions(
        prediction_records(model, theta, test, n_predictions, seed=seed, target_err=target_err))


# ---------------------------------------------------------------------------
# diagnostics


class TestResult(NamedTuple):
    statistic: float
    p_value: float


REGIONS = ("both_positive", "first_zero_second_positive")


def region_probability(model: CopulaModel, region: str, pair: tuple[int, int]) -> float:
    i, j = pair
    t = model.thresholds
    rho = float(model.sigma[i, j])
    nu = model.nu
    if region == "both_positive":
        # 1 - F(t_i) - F(t_j) + F2(t_i, t_j) written as an orthant
        return biv_cdf(nu, rho, -t[i], -t[j])
    if region == "first_zero_second_positive":
        return float(uni_cdf(nu, t[i])) - biv_cdf(nu, rho, t[i], t[j])
    raise ValueError(f"unknown region {region!r}; expected one of {REGIONS}")


def binomial_region_test(model: CopulaModel, data: ObservationMatrix, region: str,
                         pair: tuple[int, int]) -> TestResult:
    """Exact two-sided binomial test of the observed region count.

    The statistic is the observed count.
    """
    i, j = pair
    if data.n == 0:
        raise ValueError("no observations")
    q = region_probability(model, region, pair)
    if not 0.0 < q < 1.0:
        raise ValueError(f"degenerate region probability {q}")
    bi = model.columns[i].positive(data.column(i))
    bj = model.columns[j].positive(data.column(j))
    hit = (bi & bj) if region == "both_positive" else (~bi & bj)
    k = int(hit.sum())
    return TestResult(float(k), float(stats.binomtest(k, data.n, q).pvalue))


def _indicator(data: ObservationMatrix, j: int, age_cut: int):
    x = data.column(j)
    if data.roles[j] is Role.AGE:
        return x > age_cut
    return x >= 1


def chi2_pair_test(data: ObservationMatrix, pair: tuple[int, int], *, age_cut: int = 35) -> TestResult:
    """Pearson chi-square (1 df, no continuity correction) on the 2x2 table of indicators."""
    i, j = pair
    bi = _indicator(data, i, age_cut)
    bj = _indicator(data, j, age_cut)
    table = np.array([[np.sum(~bi & ~bj), np.sum(~bi & bj)],
                      [np.sum(bi & ~bj), np.sum(bi & bj)]], dtype=float)
    if np.any(table.sum(axis=0) == 0) or np.any(table.sum(axis=1) == 0):
        raise ValueError(f"pair {pair} has an empty margin; the test is undefined")
    res = stats.chi2_contingency(table, correction=False)
    return TestResult(float(res.statistic), float(res.pvalue))


# ---------------------------------------------------------------------------
# graph export


class Edge(NamedTuple):
    i: int
    j: int
    weight: float
    sign: int
    width: float


@dataclass
class DependenceGraph:
    nodes: list[str]
    edges: list[Edge]
    isolated: list[int] = field(default_factory=list)


def export_graph(theta, labels: Sequence[str], top_fraction: float = 0.05) -> DependenceGraph:
    """Keep the nonzero off-diagonal precision entries with the largest ``|theta_ij|``.

    ``ceil(top_fraction * nonzero)`` edges are kept.  Widths grow with
    ``log |theta_ij|`` and start at 1 for the weakest kept edge.  A positive
    entry is a negative partial correlation (``sign = +1``, drawn dashed).
    """
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError("top_fraction must lie in (0, 1]")
    theta = np.asarray(theta, dtype=float)
    d = theta.shape[0]
    if len(labels) != d:
        raise ValueError("labels do not match the precision matrix")
    iu, ju = np.triu_indices(d, 1)
    vals = theta[iu, ju]
    nz = np.flatnonzero(vals != 0.0)
    edges: list[Edge] = []
    if nz.size:
        order = sorted(nz, key=lambda k: (-abs(vals[k]), iu[k], ju[k]))
        keep = order[: math.ceil(top_fraction * nz.size - 1e-9)]
        floor = math.log(min(abs(vals[k]) for k in keep))
        for k in keep:
            v = float(vals[k])
            edges.append(Edge(int(iu[k]), int(ju[k]), v, 1 if v > 0 else -1,
                              math.log(abs(v)) - floor + 1.0))
    touched = {e.i for e in edges} | {e.j for e in edges}
    return DependenceGraph(list(labels), edges, [k for k in range(d) if k not in touched])


def _dot_id(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(graph: DependenceGraph, omit_isolated: bool = True) -> str:
    """Graphviz text; dashed edges mark positive precision entries."""
    lines = ["graph dependence {"]
    for k, name in enumerate(graph.nodes):
        if omit_isolated and k in graph.isolated:
            continue
        lines.append(f"  {_dot_id(name)};")
    for e in graph.edges:
        style = "dashed" if e.sign > 0 else "solid"
        lines.append(
            f"  {_dot_id(graph.nodes[e.i])} -- {_dot_id(graph.nodes[e.j])} "
            f"[weight={e.weight!r}, sign={e.sign}, penwidth={e.width:.6f}, style={style}];"
        )
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# QQ data


def qq_sum_data(model: CopulaModel, data: ObservationMatrix, subset: Sequence[int],
                seed: int = 0, n_sim: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Sorted ``log(1 + row sum over subset)`` for data and a model simulation.

    Both vectors have length ``min(n_data, n_sim)``; the longer side is
    reduced to the matching quantile levels.
    """
    subset = list(subset)
    if not subset:
        raise ValueError("subset must be nonempty")
    n_sim = data.n if n_sim is None else int(n_sim)
    sim = sample(model, n_sim, seed)
    a = np.sort(data.values[:, subset].sum(axis=1))
    b = np.sort(sim.values[:, subset].sum(axis=1))
    m = min(a.size, b.size)

    def reduce(v):
        if v.size == m:
            return v.astype(float)
        levels = (np.arange(m) + 0.5) / m
        return np.quantile(v, levels, method="inverted_cdf").astype(float)

    return np.log1p(reduce(a)), np.log1p(reduce(b))
