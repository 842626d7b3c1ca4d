"""Sparse network inference for multivariate counts with the Poisson log-normal model."""

from .core import (
    CountDataset,
    ModelParams,
    PartialCorrelationGraph,
    VariationalParams,
    elbo,
    grad_B,
    grad_M,
    grad_S,
    partial_correlations,
    penalized_elbo,
    pln_moments,
)
from .evaluation import (
    CurveSummary,
    EdgeRanking,
    baseline_glasso_log,
    confusion_at,
    path_to_ranking,
    roc_pr,
)
from .exceptions import DimensionError, InputError, NotPositiveDefiniteError, NumericalError, PLNError
from .fit import FitConfig, FitResult, PathResult, fit, fit_path
from .glasso import GlassoProblem, GlassoSolution
from .glasso import solve as glasso_solve
from .io import read_dataset, write_results
from .selection import StabilityProfile, StarsConfig, ebic, select, stars
from .simulation import (
    GroundTruthGraph,
    benchmark_instance,
    gen_graph,
    graph_to_precision,
    sample_compositional,
    sample_pln,
    softmax_rows,
)

__version__ = "0.1.0"
