"""Simulated asynchronous fixed-point iterations with pluggable termination detection."""

from .core import (
    ContractViolation, DivergenceError, FixedPointProblem, GlobalView, ResidualSpec,
    evaluate_local_residual, reduce_residual, split_blocks, true_global_residual,
)
from .detection import DetectionConfig, SnapshotRecord, check_validated_termination, make_protocol
from .engine import ConfigError, DeliveryModel, EventLog, ProtocolViolation, Simulation, validate_log
from .oracle import GodView, estimate_c
from .problems import (
    ConvDiffProblem, LinearFixedPoint, build_linear, direct_solve, discretize_convdiff,
    hybrid_relaxation_block,
)
from .runner import RunConfig, RunReport, run

__all__ = [
    "ConfigError", "ContractViolation", "ConvDiffProblem", "DeliveryModel", "DetectionConfig",
    "DivergenceError", "EventLog", "FixedPointProblem", "GlobalView", "GodView",
    "LinearFixedPoint", "ProtocolViolation", "ResidualSpec", "RunConfig", "RunReport",
    "Simulation", "SnapshotRecord", "build_linear", "check_validated_termination",
    "direct_solve", "discretize_convdiff", "estimate_c", "evaluate_local_residual",
    "hybrid_relaxation_block", "make_protocol", "reduce_residual", "run", "split_blocks",
    "true_global_residual", "validate_log",
]
