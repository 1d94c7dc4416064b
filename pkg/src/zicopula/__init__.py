"""Censored Gaussian/Student copula graphical models with discrete Pareto IV marginals."""

__version__ = "0.1.0"

from .copula import ColumnSpec, CopulaModel, estimate_rho, estimate_thresholds, fit_copula, fit_marginals
from .data import ObservationMatrix, Role
from .dpiv import (
    DPivFit,
    DPivParams,
    Variant,
    dks_test,
    dpiv_cdf,
    dpiv_fit,
    dpiv_pmf,
    dpiv_sample,
    dpiv_select,
)
from .glasso import PrecisionEstimate, glasso_solve, score_full, score_pairwise, select_model
from .inference import (
    binomial_region_test,
    chi2_pair_test,
    export_graph,
    log_score,
    predict_positive,
    qq_sum_data,
    sample,
)
from .io import ModelFile, ingest, load_model, save_model
from .latent import LatentSpec, biv_cdf, conditional, mv_cdf

__all__ = [
    "ColumnSpec", "CopulaModel", "estimate_rho", "estimate_thresholds", "fit_copula", "fit_marginals",
    "ObservationMatrix", "Role",
    "DPivFit", "DPivParams", "Variant", "dks_test", "dpiv_cdf", "dpiv_fit", "dpiv_pmf", "dpiv_sample",
    "dpiv_select",
    "PrecisionEstimate", "glasso_solve", "score_full", "score_pairwise", "select_model",
    "binomial_region_test", "chi2_pair_test", "export_graph", "log_score", "predict_positive",
    "qq_sum_data", "sample",
    "ModelFile", "ingest", "load_model", "save_model",
    "LatentSpec", "biv_cdf", "conditional", "mv_cdf",
]
