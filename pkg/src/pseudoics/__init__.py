"""Pseudo-value regression for clustered multistate data with informative cluster size."""

from .panel import (
    Panel,
    StateSpace,
    StepFunction,
    Subject,
    Trajectory,
    UndefinedWeightError,
    Violation,
    WeightScheme,
    at_risk,
    censoring_km,
    check_panel,
    counting_process,
    make_panel,
    subject_weights,
    validate_panel,
)
from .estimators import (
    IntensityPath,
    SopCurve,
    aalen_johansen,
    initial_distribution,
    nelson_aalen,
    sop_curve,
    state_occupation,
)
from .pseudovalues import (
    Method,
    PseudoValueSet,
    default_grid,
    pseudo_method1,
    pseudo_method2,
    pseudo_values,
)

__version__ = "0.1.0"
