"""Asynchronous Q-learning with Polyak-Ruppert averaging: exact limit laws
and replicated checks of the central limit behavior."""

from ._version import __version__
from .chain import JointChain, build_joint_chain
from .engine import RunRecord, StepsizeSchedule, run_trajectory
from .estimators import AveragedQLearning, LimitLawEstimator
from .exceptions import (AssumptionViolation, ConfigError, InternalError, QcltError,
                         SandwichViolation)
from .mdp import MdpModel, solve_q_star
from .oracle import TheoryOracle, build_oracle

__all__ = [
    "AssumptionViolation", "AveragedQLearning", "ConfigError", "InternalError",
    "JointChain", "LimitLawEstimator", "MdpModel", "QcltError", "RunRecord",
    "SandwichViolation", "StepsizeSchedule", "TheoryOracle", "__version__",
    "build_joint_chain", "build_oracle", "run_trajectory", "solve_q_star",
]
