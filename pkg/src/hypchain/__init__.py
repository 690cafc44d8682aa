"""Backstepping and predictor-based boundary control for chains of hyperbolic PDEs."""
from .chain_model import (AssumptionError, BoundaryCoupling, ChainSpec, ChainSpecError,
                          ConfigurationError, MatrixField, SubsystemSpec, ValidationReport,
                          check_assumption1, left_inverse, right_inverse, validate_chain)
from .history import BoundaryTrace, WindowError
from .simulator import ChainState, DivergenceError, Grid, Trajectory, init_state, l2_norm, simulate, step
from .kernels import KernelDivergenceError, KernelSet, compute_chain_kernels, compute_kernels
from .transforms import SubsystemOperators, build_chain_operators
from .controller import StateFeedback, default_activation_time
from .observer import ChainObserver, LowPassFilter, OutputFeedback

__version__ = "0.1.0"

__all__ = [
    "AssumptionError", "BoundaryCoupling", "BoundaryTrace", "ChainObserver", "ChainSpec", "ChainSpecError",
    "ChainState", "ConfigurationError", "DivergenceError", "Grid", "KernelDivergenceError", "KernelSet",
    "LowPassFilter", "MatrixField", "OutputFeedback", "StateFeedback", "SubsystemOperators", "SubsystemSpec",
    "Trajectory", "ValidationReport", "WindowError", "build_chain_operators", "check_assumption1",
    "compute_chain_kernels", "compute_kernels", "default_activation_time", "init_state", "l2_norm",
    "left_inverse", "right_inverse", "simulate", "step", "validate_chain",
]
