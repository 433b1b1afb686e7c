"""Minimizing-movements simulator for an elastic solid in a viscous fluid with Navier slip."""
from __future__ import annotations

__version__ = "0.1.0"

from ._kernels import BACKEND as KERNEL_BACKEND
from .budget import EnergyBudget
from .config import SimulationConfig, load_config, parse_config, serialize_config
from .diagnostics import CheckResult, VerificationReport
from .errors import (
    ContactImminent,
    DegenerateJacobian,
    IntegrityError,
    ParseError,
    ValidationError,
    VarislipError,
)
from .scenarios import SCENARIOS, scenario_config
from .stepper import InitialData, Model, SolverConfig, StepConfig, Trajectory, run_simulation

__all__ = [
    "__version__",
    "KERNEL_BACKEND",
    "EnergyBudget",
    "SimulationConfig",
    "load_config",
    "parse_config",
    "serialize_config",
    "CheckResult",
    "VerificationReport",
    "ContactImminent",
    "DegenerateJacobian",
    "IntegrityError",
    "ParseError",
    "ValidationError",
    "VarislipError",
    "SCENARIOS",
    "scenario_config",
    "InitialData",
    "Model",
    "SolverConfig",
    "StepConfig",
    "Trajectory",
    "run_simulation",
]
