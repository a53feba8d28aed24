"""Trajectory-centric policy search combining model-based LQR and path-integral updates."""
from .core import Rollout, RolloutBatch, TvlgPolicy, conditional_kl, sample_rollouts
from .errors import (
    ConfigurationError,
    ConstraintInfeasibleError,
    NumericalError,
    PilqrError,
    RolloutDivergenceError,
    SingularityError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ConstraintInfeasibleError",
    "NumericalError",
    "PilqrError",
    "Rollout",
    "RolloutBatch",
    "RolloutDivergenceError",
    "SingularityError",
    "TvlgPolicy",
    "conditional_kl",
    "sample_rollouts",
]
