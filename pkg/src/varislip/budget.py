"""Per-step energy budget record shared by the stepper and the diagnostics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

# Bump on any change of the field list or order; budgets.csv carries it.
BUDGET_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class EnergyBudget:
    """Every term of the discrete energy estimate at step ``k``.

    ``elastic`` and ``regularizer`` are evaluated at the new state. The rate,
    dissipation and force entries are the step's assembled terms. The
    ``*_window_rate`` and ``*_force_bound`` entries are the right-hand-side
    terms of the estimate, and ``comparison_gap`` is ``objective -
    objective_warm``.
    """

    step: int
    elastic: float
    regularizer: float
    solid_dissipation: float
    solid_regularizer_rate: float
    solid_inertia: float
    solid_kinetic_rate: float
    slip_dissipation: float
    viscous_dissipation: float
    fluid_regularizer: float
    fluid_inertia: float
    fluid_kinetic_rate: float
    force_work_solid: float
    force_work_fluid: float
    solid_window_rate: float
    fluid_window_rate: float
    solid_force_bound: float
    fluid_force_bound: float
    objective: float
    objective_warm: float
    comparison_gap: float

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def as_dict(self):
        return asdict(self)

    @property
    def left_rate_terms(self) -> float:
        """Dissipation and kinetic-rate terms on the left of the estimate."""
        return (
            self.solid_dissipation
            + self.solid_regularizer_rate
            + self.solid_kinetic_rate
            + self.slip_dissipation
            + self.viscous_dissipation
            + self.fluid_regularizer
            + self.fluid_kinetic_rate
        )

    @property
    def right_rate_terms(self) -> float:
        return self.solid_window_rate + self.fluid_window_rate + self.solid_force_bound + self.fluid_force_bound
