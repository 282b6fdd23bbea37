"""Design-based estimation and exact inference for effects of initial network
structure on later tie formation, under within-office random assignment."""

from .design import (
    DesignPlan,
    EstimationSample,
    OfficeDesign,
    build_sample,
    plan_from_network,
    sample_from_network,
)
from .estimation import AggregateFit, fit_sample
from .exceptions import CapExceededError, NetformError, NumericalError, ValidationError
from .inference import (
    confidence_interval,
    conservative_variance,
    permutation_test,
    permutation_tests,
    permutation_variance,
)
from .network import NetStat, NodeRecord, TemporalNetwork, build_network, treatment_matrix
from .report import EstimateReport, analyze_sample

__version__ = "0.1.0"

__all__ = [
    "AggregateFit",
    "CapExceededError",
    "DesignPlan",
    "EstimateReport",
    "EstimationSample",
    "NetStat",
    "NetformError",
    "NodeRecord",
    "NumericalError",
    "OfficeDesign",
    "TemporalNetwork",
    "ValidationError",
    "analyze_sample",
    "build_network",
    "build_sample",
    "confidence_interval",
    "conservative_variance",
    "fit_sample",
    "permutation_test",
    "permutation_tests",
    "permutation_variance",
    "plan_from_network",
    "sample_from_network",
    "treatment_matrix",
]
