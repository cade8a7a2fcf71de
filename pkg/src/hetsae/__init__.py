"""Heteroscedastic small-area estimation with conjugate log-gamma updates.

Area- and unit-level hierarchical Gaussian models whose variances are
jointly smoothed through a log-linear model, fit by Gibbs sampling with
multivariate log-gamma full conditionals, plus the survey-sampling and
scoring machinery needed to evaluate them against design-based direct
estimates.
"""

from .evaluation import (
    DesignSpec,
    MetricsTable,
    coverage_rate,
    interval_score,
    rmse_metrics,
    run_replication_study,
)
from .mlg import (
    ClampCounter,
    CMLGParams,
    MLGParams,
    cmlg_log_kernel,
    gaussian_approx_params,
    mlg_log_density,
    sample_cmlg,
    sample_mlg,
)
from .models import (
    AreaDataset,
    FitConfig,
    ModelError,
    PosteriorDraws,
    UnitDataset,
    fit,
    predict_unit_level_area_means,
    prepare_area_inputs,
    summarize_posterior,
)
from .spatial import AdjacencyGraph, build_icar, grid_graph, parse_adjacency
from .survey import (
    DirectEstimates,
    GenerationConfig,
    SampleDraw,
    SyntheticPopulation,
    compute_size_variable,
    direct_estimates,
    draw_poisson_pps,
    draw_stratified_srs,
    generate_population,
    scale_weights,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "AdjacencyGraph",
    "AreaDataset",
    "ClampCounter",
    "CMLGParams",
    "DesignSpec",
    "DirectEstimates",
    "FitConfig",
    "GenerationConfig",
    "MetricsTable",
    "MLGParams",
    "ModelError",
    "PosteriorDraws",
    "SampleDraw",
    "SyntheticPopulation",
    "UnitDataset",
    "build_icar",
    "cmlg_log_kernel",
    "compute_size_variable",
    "coverage_rate",
    "direct_estimates",
    "draw_poisson_pps",
    "draw_stratified_srs",
    "fit",
    "gaussian_approx_params",
    "generate_population",
    "grid_graph",
    "interval_score",
    "mlg_log_density",
    "parse_adjacency",
    "predict_unit_level_area_means",
    "prepare_area_inputs",
    "rmse_metrics",
    "run_replication_study",
    "sample_cmlg",
    "sample_mlg",
    "scale_weights",
    "summarize_posterior",
]
