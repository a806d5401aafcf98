"""Rectify pseudo labels so their class distribution matches prior knowledge."""

from .priors import (
    BinaryRelationship,
    ClassPrior,
    PriorKnowledge,
    UnaryBound,
    estimate_prior,
    make_binary_relationships,
    make_unary_bounds,
    perturb_ranking,
    perturb_unary,
    select_partial,
)
from .solver import (
    InstanceTooLargeError,
    LabelAssignment,
    ProbMatrix,
    SlackValue,
    SmoothRegularization,
    SolveReport,
    SolverConfig,
    brute_force,
    compute_slacks,
    solve,
    solve_fixed_counts,
)

__version__ = "0.1.0"

__all__ = [
    "BinaryRelationship",
    "ClassPrior",
    "InstanceTooLargeError",
    "LabelAssignment",
    "PriorKnowledge",
    "ProbMatrix",
    "SlackValue",
    "SmoothRegularization",
    "SolveReport",
    "SolverConfig",
    "UnaryBound",
    "brute_force",
    "compute_slacks",
    "estimate_prior",
    "make_binary_relationships",
    "make_unary_bounds",
    "perturb_ranking",
    "perturb_unary",
    "select_partial",
    "solve",
    "solve_fixed_counts",
    "__version__",
]
