"""gcate: confounder-adjusted estimation and testing for multivariate GLMs."""

from .expfam import (
    ExponentialFamily,
    estimate_dispersion,
    family,
    log_partition,
    mean,
    nb_log_link_weight,
    nb_theta_from_xi,
    variance,
)
from .inference import (
    DebiasConfig,
    bh_adjust,
    fwer_test,
    run_inference,
    run_split_inference,
    select_lambda_n,
    solve_projection_u,
    z_statistics,
)
from .model import (
    FactorModelFit,
    GlmDataset,
    InferenceResult,
    build_theta,
    deviance,
    neg_log_likelihood,
)
from .optimize import (
    OptimOptions,
    alternating_max,
    default_lambda,
    fit_marginal_glm,
    init_factors_svd,
    solve_stage1,
    solve_stage2_extract,
    solve_stage3,
)
from .pipeline import fit_gcate, resolve_family, run_simulation
from .rank_select import JicTrace, jic, select_rank
from .simulate import (
    MetricsReport,
    SimulationScenario,
    evaluate,
    gen_negbin_scenario,
    gen_poisson_scenario,
    run_baselines,
)

__version__ = "0.1.0"
