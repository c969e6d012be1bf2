"""Particle filtering with learned log-quadratic twisted proposals.

The library provides a generic weighted-particle core, closed-form twisting
of affine-Gaussian proposal chains, regression-based twist learning, three
iterative training schemes (forward, streaming forward, and backward
controlled), benchmark state-space models with an exact linear-Gaussian
oracle, and particle marginal Metropolis-Hastings for parameter inference.
"""

from .errors import (
    ConfigError,
    DegenerateWeights,
    IngestError,
    InvalidModel,
    InvalidTwist,
    SingularDesign,
    TwistSmcError,
)
from .fk import (
    FeynmanKacModel,
    ParticleCloud,
    SMCTrace,
    ess,
    relative_weight_variance,
    resample,
    run_smc,
    smc_step,
    weighted_expectation,
)
from .learn import (
    RegressionProblem,
    TemperingResult,
    feature_count,
    fit_log_quadratic,
    temper_exponent,
)
from .models import (
    KalmanResult,
    LgssmParams,
    MsvParams,
    NlObsParams,
    build_lgssm_fk,
    build_msv_fk,
    build_nlobs_fk,
    kalman,
    load_fx_returns,
    simulate_lgssm,
    simulate_msv,
    simulate_nlobs,
)
from .pmmh import (
    ParamTransform,
    PMMHChain,
    PriorSpec,
    eval_variance_window,
    pmmh_run,
    smc_estimator,
    trained_estimator,
)
from .schemes import (
    SchemeConfig,
    TrainingRun,
    controlled_smc_train,
    exact_lgssm_policy,
    forward_train,
    online_forward,
)
from .twist import (
    GaussianKernelSpec,
    GaussianReference,
    LogQuadraticTwist,
    TwistPolicy,
    build_twisted_model,
    compose_potential_twist,
    psd_floor,
    twist_gaussian,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateWeights",
    "IngestError",
    "InvalidModel",
    "InvalidTwist",
    "SingularDesign",
    "TwistSmcError",
    "FeynmanKacModel",
    "ParticleCloud",
    "SMCTrace",
    "ess",
    "relative_weight_variance",
    "resample",
    "run_smc",
    "smc_step",
    "weighted_expectation",
    "RegressionProblem",
    "TemperingResult",
    "feature_count",
    "fit_log_quadratic",
    "temper_exponent",
    "KalmanResult",
    "LgssmParams",
    "MsvParams",
    "NlObsParams",
    "build_lgssm_fk",
    "build_msv_fk",
    "build_nlobs_fk",
    "kalman",
    "load_fx_returns",
    "simulate_lgssm",
    "simulate_msv",
    "simulate_nlobs",
    "ParamTransform",
    "PMMHChain",
    "PriorSpec",
    "eval_variance_window",
    "pmmh_run",
    "smc_estimator",
    "trained_estimator",
    "SchemeConfig",
    "TrainingRun",
    "controlled_smc_train",
    "exact_lgssm_policy",
    "forward_train",
    "online_forward",
    "GaussianKernelSpec",
    "GaussianReference",
    "LogQuadraticTwist",
    "TwistPolicy",
    "build_twisted_model",
    "compose_potential_twist",
    "psd_floor",
    "twist_gaussian",
]
