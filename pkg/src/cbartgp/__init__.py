"""Bayesian additive regression trees with correlated Gaussian errors.

The sampler in :mod:`cbartgp.cbart` handles an arbitrary error precision
matrix; :mod:`cbartgp.twostage` couples it with a Gaussian-process error
model estimated from weighted residuals.
"""

from .cbart import (
    CbartConfig,
    CbartFit,
    conjugate_solve,
    draw_leaf_means,
    log_marginal,
    log_marginal_likelihood_ratio,
    marginal_likelihood_ratio,
    predict_f,
    run_cbart,
)
from .covariance import (
    CovarianceKind,
    CovarianceModel,
    FactorizationError,
    PrecisionView,
    blockwise_precision_sum,
    build_ar_precision,
    build_arp_precision,
    build_iid_precision,
    build_spatial_covariance,
    matern_kernel,
)
from .gp import GpFit, fit_gp_mle, gp_loglik, krige, structured_component
from .simgen import SimDataset, gen_ar1_cubic, gen_figure1_example, gen_spatial
from .tree import DummyDesign, Proposal, Tree, apply_proposal, build_dummy, propose, reorder
from .twostage import (
    DEFAULT_WEIGHTS,
    TwoStageResult,
    WeightRecord,
    predict_y,
    run_two_stage,
    weighted_residuals,
)

__version__ = "0.1.0"
