"""Built-in scenarios encoding the acceptance geometries.

Simulation scenarios are full :class:`SimulationConfig` defaults. Kinematic
scenarios (``shrinking_disc_transport``, ``rotation_flowmap``) exercise a
diagnostic on a prescribed motion and need no solve.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import (
    FluidSpec,
    InitialSpec,
    MaterialSpec,
    RunSpec,
    SimulationConfig,
    SolidSpec,
    SolverSpec,
    StepSpec,
)


@dataclass(frozen=True)
class ScenarioInfo:
    name: str
    kind: str  # "simulation" or "kinematic"
    description: str


def _falling_disc():
    return SimulationConfig(
        run=RunSpec(scenario="falling_disc"),
        solid=SolidSpec("disc", n=32, radius=0.15, center_x=0.5, center_y=0.6),
        material=MaterialSpec(rho_s=2.0),
        fluid=FluidSpec(mx=96, my=96),
        step=StepSpec(1e-3, 1e-2, 1e-4, 1.0, 0.2, "0", "-1"),
    )


def _sheared_block():
    return SimulationConfig(
        run=RunSpec(scenario="sheared_block"),
        solid=SolidSpec("rectangle", nx=13, ny=9, width=0.3, height=0.2, center_x=0.5, center_y=0.5),
        fluid=FluidSpec(mx=48, my=48),
        step=StepSpec(1e-3, 1e-2, 1e-4, 1.0, 0.05, "20*(y - 0.5)", "0"),
    )


def _colliding_disc():
    return SimulationConfig(
        run=RunSpec(scenario="colliding_disc"),
        solid=SolidSpec("disc", n=16, radius=0.15, center_x=0.5, center_y=0.23),
        material=MaterialSpec(rho_s=10.0),
        fluid=FluidSpec(mx=48, my=48),
        step=StepSpec(1e-3, 1e-2, 1e-4, 1.0, 0.5, "0", "-10"),
        initial=InitialSpec(eta_star_y=-2.0),
    )


def _rest_block():
    return SimulationConfig(
        run=RunSpec(scenario="rest_block"),
        solid=SolidSpec("rectangle", nx=12, ny=12, width=0.3, height=0.3, center_x=0.5, center_y=0.5),
        material=MaterialSpec(det_weight=0.0, grad2_weight=0.0),
        fluid=FluidSpec(mx=32, my=32),
        step=StepSpec(1e-3, 1e-2, 1e-4, 1.0, 0.05, "0", "0"),
    )


def _toy_oracle():
    return SimulationConfig(
        run=RunSpec(scenario="toy_oracle", steps=1),
        solid=SolidSpec("disc", n=8, radius=0.15, center_x=0.5, center_y=0.6),
        material=MaterialSpec(rho_s=2.0),
        fluid=FluidSpec(mx=24, my=24),
        step=StepSpec(1e-3, 1e-2, 1e-4, 1.0, 1e-2, "0", "-1"),
    )


def _shrinking_disc():
    return SimulationConfig(
        run=RunSpec(scenario="shrinking_disc_transport", checks=("transport",)),
        solid=SolidSpec("disc", n=16, radius=0.3, center_x=0.5, center_y=0.5),
        fluid=FluidSpec(mx=96, my=96),
        step=StepSpec(1e-3, 1e-2, 0.0, 1.0, 0.1, "0", "0"),
    )


def _rotation():
    return SimulationConfig(
        run=RunSpec(scenario="rotation_flowmap", checks=("flowmap",)),
        solid=SolidSpec("disc", n=16, radius=0.3, center_x=0.5, center_y=0.5),
        fluid=FluidSpec(mx=64, my=64),
        step=StepSpec(1e-3, 1e-2, 0.0, 1.0, 0.1, "0", "0"),
        solver=SolverSpec(),
    )


_FACTORIES = {
    "falling_disc": ("simulation", "heavy elastic disc sinking under gravity in a closed box", _falling_disc),
    "sheared_block": ("simulation", "rectangular block dragged by a shear body force", _sheared_block),
    "shrinking_disc_transport": ("kinematic", "transport theorem on a disc of radius 0.3 - 0.1 t", _shrinking_disc),
    "colliding_disc": ("simulation", "disc thrown at the bottom wall, ends in ContactImminent", _colliding_disc),
    "rest_block": ("simulation", "stress-free block at rest with no force", _rest_block),
    "toy_oracle": ("simulation", "single small step for the oracle comparison", _toy_oracle),
    "rotation_flowmap": ("kinematic", "flow map of a rigid rotation, unit angular speed", _rotation),
}

SCENARIOS = {name: ScenarioInfo(name, kind, desc) for name, (kind, desc, _) in _FACTORIES.items()}


def scenario_config(name: str) -> SimulationConfig:
    """Default configuration of a built-in scenario."""
    return _FACTORIES[name][2]()


def list_scenarios():
    return list(SCENARIOS.values())


# -- kinematic scenarios --------------------------------------------------------
def shrinking_disc_transport(mx: int = 96, r0: float = 0.3, rate: float = -0.1, steps: int = 10, dt: float = 1e-3, center=(0.5, 0.5)):
    """Transport check for the area of a disc of radius ``r0 + rate * t``.

    The disc is a regular polygon with about one vertex per cell width of an
    ``mx x mx`` grid on the unit box, moving radially. Returns the
    :class:`TransportReport`.
    """
    from .diagnostics import check_transport
    from .fluid_model import FluidGrid
    from .geometry import classify_cells, interface_from_polygon

    grid = FluidGrid(0.0, 1.0, 0.0, 1.0, mx, mx)
    M = max(8, int(round(2 * np.pi * r0 / grid.dx)))
    th = 2 * np.pi * np.arange(M) / M
    ring = np.column_stack([np.cos(th), np.sin(th)])
    c = np.asarray(center, dtype=float)
    times = dt * np.arange(steps + 1)
    cls, itfs, vn = [], [], []
    for t in times:
        r = r0 + rate * t
        itf = interface_from_polygon(c + r * ring)
        cls.append(classify_cells(itf, grid))
        itfs.append(itf)
        # boundary velocity rate * ring against the disc's outward normal
        vn.append(np.sum(rate * ring * -itf.normals, axis=1))

    def one(t, p):
        return np.ones(len(p))

    return check_transport(
        cls, times, one, itfs, vn, reference=lambda t: 2 * np.pi * (r0 + rate * t) * rate, region="solid"
    )


def rotation_flowmap(steps: int = 100, dt: float = 1e-3, omega: float = 1.0, mx: int = 64, radius: float = 0.3):
    """Flow map of ``v = omega (-(y - 1/2), x - 1/2)`` after ``steps`` steps.

    Samples are the cell centers within ``radius`` of the box center.
    Returns the final :class:`FlowMap`.
    """
    from .fluid_model import FluidGrid, VelocityField
    from .stepper import FlowMap, update_flow_map

    grid = FluidGrid(0.0, 1.0, 0.0, 1.0, mx, mx)
    C = grid.centers()
    active = np.ones((mx, mx), dtype=bool)
    vals = omega * np.stack([-(C[..., 1] - 0.5), C[..., 0] - 0.5], axis=-1)
    v = VelocityField(grid, vals, active)
    inside = np.hypot(C[..., 0] - 0.5, C[..., 1] - 0.5) <= radius
    lat = np.argwhere(inside)
    X = C[inside]
    fm = FlowMap(X, X.copy(), lat, np.full(len(X), grid.cell_area), np.tile(np.eye(2), (len(X), 1, 1)))
    for _ in range(steps):
        fm = update_flow_map(fm, v, dt)
    return fm
