"""Decomposed mutual information and two-teacher source-free adaptation on synthetic data."""

__version__ = "0.1.0"

from .autograd import GradientError, ShapeError, Tensor, backward, grad_check
from .dmi import ClassSubset, DmiBreakdown, DmiConfig, bound_check, candidate_subset, dmi
from .info import JointDistribution, estimate_joint, mutual_information

__all__ = [
    "ClassSubset", "DmiBreakdown", "DmiConfig", "GradientError", "JointDistribution", "ShapeError",
    "Tensor", "backward", "bound_check", "candidate_subset", "dmi", "estimate_joint", "grad_check",
    "mutual_information",
]
