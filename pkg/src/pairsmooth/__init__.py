"""Joint semiparametric mixed models for paired longitudinal outcomes.

Paired outcomes share bivariate-normal subject effects; each outcome carries
group-specific bivariate thin-plate-spline surfaces over two continuous
covariates, estimated as a linear mixed model by ML or REML.  Group
differences in the surfaces are tested by a wild bootstrap or an adjusted
likelihood-ratio test with a chi-square mixture reference.
"""

__version__ = "0.1.0"

from .data import (
    DatasetSummary,
    LongitudinalDataset,
    Observation,
    load_dataset,
    summarize,
    write_dataset,
)
from .design import (
    AssembledDesign,
    BasisConfig,
    ModelSpec,
    assemble,
    null_and_full_specs,
)
from .inference import (
    TestResult,
    adjusted_lrt,
    bootstrap_test,
    mixture_chisq_sf,
    wild_multiplier_stream,
)
from .lmm import (
    FittedModel,
    VarianceComponents,
    effective_df,
    fit,
    gls_fixed_effects,
    load_model,
    marginal_covariance,
    ml_criterion,
    predict_surface,
    reml_criterion,
    save_model,
)
from .simulation import (
    SimConfig,
    monte_carlo,
    simulate_dataset,
    test_function_f1,
    test_function_f2,
)
from .tps import (
    SurfaceBasis,
    build_basis,
    center_constraint,
    eval_basis,
    roughness,
    tps_radial,
)

__all__ = [
    "AssembledDesign", "BasisConfig", "DatasetSummary", "FittedModel",
    "LongitudinalDataset", "ModelSpec", "Observation", "SimConfig",
    "SurfaceBasis", "TestResult", "VarianceComponents", "adjusted_lrt",
    "assemble", "bootstrap_test", "build_basis", "center_constraint",
    "effective_df", "eval_basis", "fit", "gls_fixed_effects", "load_dataset",
    "load_model", "marginal_covariance", "mixture_chisq_sf", "ml_criterion",
    "monte_carlo", "null_and_full_specs", "predict_surface", "reml_criterion",
    "roughness", "save_model", "simulate_dataset", "summarize",
    "test_function_f1", "test_function_f2", "tps_radial",
    "wild_multiplier_stream", "write_dataset",
]
