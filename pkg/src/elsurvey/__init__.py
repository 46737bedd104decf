"""Design-based empirical likelihood inference for public-use survey data files."""

from .datamodel import (DesignSample, Schema, SurveyDataset, load_dataset, read_schema,
                        rescale_weights, save_dataset)
from .elcore import (ELKind, ELProblem, ELProfile, RFunction, SolverConfig, maximize,
                     maximize_restricted, profile, solve_lambda)
from .estfn import (EstimatingFunction, ParamSpace, family_custom, family_linear_regression,
                    family_logistic_regression, family_mean, family_quantile)
from .eltest import (CalibMethod, QuadraticFormDist, TestResult, build_delta, ci_invert,
                     lr_nested, lr_simple, pvalue, simple_test, wald_test)
from .varest import FitResult, plugin_components, rep_variance_total, sandwich

__version__ = "0.1.0"

__all__ = [
    "CalibMethod", "DesignSample", "ELKind", "ELProblem", "ELProfile", "EstimatingFunction",
    "FitResult", "ParamSpace", "QuadraticFormDist", "RFunction", "Schema", "SolverConfig",
    "SurveyDataset", "TestResult", "build_delta", "ci_invert", "family_custom",
    "family_linear_regression", "family_logistic_regression", "family_mean", "family_quantile",
    "load_dataset", "lr_nested", "lr_simple", "maximize", "maximize_restricted",
    "plugin_components", "profile", "pvalue", "read_schema", "rep_variance_total",
    "rescale_weights", "sandwich", "save_dataset", "simple_test", "solve_lambda", "wald_test",
]
