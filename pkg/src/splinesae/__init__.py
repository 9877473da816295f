"""Semiparametric small-area estimation with penalized splines.

The area effect of a unit-level model is an unknown smooth function of an
area-indicative variable, fitted as a truncated-power P-spline inside a
linear mixed model.
"""

from .design import (
    Dataset,
    DesignMatrices,
    KnotSet,
    SplineConfig,
    assemble_design,
    place_knots,
    spline_row,
    truncated_power,
)
from .errors import SAEError, VarCompConvergenceError
from .inference import (
    AreaDiagnostic,
    TestResult,
    diagnose_area_effect,
    lrt_area_effect,
    mixture_pvalue,
    test_beta,
)
from .lmm import (
    BlupFit,
    CovarianceV,
    VarianceComponents,
    blup_fit,
    covariance_v,
    gls_components,
    projection_m,
    projection_q,
)
from .sae import (
    AreaPrediction,
    AreaTarget,
    area_predictor,
    b_vector,
    make_target,
    mse_eblup,
    mse_known,
    predict_areas,
    s_rows,
    sample_mean_targets,
)
from .varcomp import (
    VarCompEstimate,
    estimate_variance_components,
    fisher_info,
    profile_loglik,
    reml_score,
    restricted_loglik,
)

__version__ = "0.1.0"

__all__ = [
    "AreaDiagnostic",
    "AreaPrediction",
    "AreaTarget",
    "BlupFit",
    "CovarianceV",
    "Dataset",
    "DesignMatrices",
    "KnotSet",
    "SAEError",
    "SplineConfig",
    "TestResult",
    "VarCompConvergenceError",
    "VarCompEstimate",
    "VarianceComponents",
    "area_predictor",
    "assemble_design",
    "b_vector",
    "blup_fit",
    "covariance_v",
    "diagnose_area_effect",
    "estimate_variance_components",
    "fisher_info",
    "gls_components",
    "lrt_area_effect",
    "make_target",
    "mixture_pvalue",
    "mse_eblup",
    "mse_known",
    "place_knots",
    "predict_areas",
    "profile_loglik",
    "projection_m",
    "projection_q",
    "reml_score",
    "restricted_loglik",
    "s_rows",
    "sample_mean_targets",
    "spline_row",
    "test_beta",
    "truncated_power",
]
