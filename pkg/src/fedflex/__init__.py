"""Federated averaging with flexible device participation."""

from .aggregation import SCHEMES, aggregate, coefficients, expected_weighted_epochs, theta_for
from .analysis import bound_curve, detect_z, theorem_constants, verify_bound
from .membership import MembershipEvent, apply_arrival, apply_departure, departure_decision
from .objectives import Federation, LogisticObjective, QuadraticObjective
from .participation import ParticipationModel, pmf, sample_round
from .trainer import Staircase, TheoremSchedule, TrainingConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "SCHEMES",
    "aggregate",
    "coefficients",
    "expected_weighted_epochs",
    "theta_for",
    "bound_curve",
    "detect_z",
    "theorem_constants",
    "verify_bound",
    "MembershipEvent",
    "apply_arrival",
    "apply_departure",
    "departure_decision",
    "Federation",
    "LogisticObjective",
    "QuadraticObjective",
    "ParticipationModel",
    "pmf",
    "sample_round",
    "Staircase",
    "TheoremSchedule",
    "TrainingConfig",
    "run_training",
]
