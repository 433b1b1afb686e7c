"""Simulation configuration: INI documents, defaults and validation."""
from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .errors import InvalidMaterial, ParseError, ShapeMismatch, ValidationError
from .forcing import ForceField, compile_expression

CHECK_NAMES = ("energy", "coupling", "transport", "flowmap")


@dataclass(frozen=True)
class SolidSpec:
    """Reference body: ``disc`` (``n`` nodes across) or ``rectangle`` (``nx x ny``)."""

    shape: str = "disc"
    n: int = 32
    nx: int = 16
    ny: int = 16
    radius: float = 0.15
    center_x: float = 0.5
    center_y: float = 0.6
    width: float = 0.3
    height: float = 0.2
    reg_order: int = 3

    def build(self):
        from .solid_model import SolidGrid

        if self.shape == "disc":
            return SolidGrid.disc(self.n, self.radius, (self.center_x, self.center_y))
        origin = (self.center_x - 0.5 * self.width, self.center_y - 0.5 * self.height)
        return SolidGrid.rectangle(self.nx, self.ny, self.width, self.height, origin)


@dataclass(frozen=True)
class MaterialSpec:
    elastic_tensor: tuple = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
    det_exponent: float = 5.0
    grad2_exponent: float = 4.0
    rho_s: float = 1.0
    det_weight: float = 1.0
    grad2_weight: float = 1.0

    def build(self):
        from .solid_model import MaterialParams

        return MaterialParams(
            np.array(self.elastic_tensor, dtype=float).reshape(3, 3),
            self.det_exponent,
            self.grad2_exponent,
            self.rho_s,
            self.det_weight,
            self.grad2_weight,
        )


@dataclass(frozen=True)
class FluidSpec:
    x0: float = 0.0
    x1: float = 1.0
    y0: float = 0.0
    y1: float = 1.0
    mx: int = 96
    my: int = 96
    nu: float = 1.0
    rho_f: float = 1.0
    slip_coefficient: float = 1.0
    k0_order: int = 2
    min_fraction: float = 0.05


@dataclass(frozen=True)
class StepSpec:
    dt_tau: float = 1e-3
    h_delay: float = 1e-2
    kappa: float = 1e-4
    a0_exponent: float = 1.0
    t_end: float = 0.2
    force_x: str = "0"
    force_y: str = "-1"


@dataclass(frozen=True)
class SolverSpec:
    grad_tol: float = 1e-9
    grad_floor: float = 1e-13
    constraint_tol: float = 1e-11
    max_outer: int = 60
    max_inner: int = 40
    penalty: float = 1e4
    penalty_growth: float = 10.0
    backtrack: float = 0.5
    min_det: float = 1e-3
    cn_tol: float = 1e-4
    contact_distance: float = -1.0
    cn_resolution: int = 512


@dataclass(frozen=True)
class InitialSpec:
    """Initial solid rate ``eta_*`` (constant vector) and fluid velocity expressions in ``x, y``."""

    eta_star_x: float = 0.0
    eta_star_y: float = 0.0
    v0_x: str = "0"
    v0_y: str = "0"


@dataclass(frozen=True)
class RunSpec:
    scenario: str = "falling_disc"
    output: str = ""
    seed: int = 0
    checks: tuple = CHECK_NAMES
    steps: int = -1


SECTIONS = {
    "run": RunSpec,
    "solid": SolidSpec,
    "material": MaterialSpec,
    "fluid": FluidSpec,
    "step": StepSpec,
    "solver": SolverSpec,
    "initial": InitialSpec,
}


@dataclass(frozen=True)
class SimulationConfig:
    """Every section of a run. ``steps < 0`` means ``t_end / dt_tau``."""

    run: RunSpec = field(default_factory=RunSpec)
    solid: SolidSpec = field(default_factory=SolidSpec)
    material: MaterialSpec = field(default_factory=MaterialSpec)
    fluid: FluidSpec = field(default_factory=FluidSpec)
    step: StepSpec = field(default_factory=StepSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    initial: InitialSpec = field(default_factory=InitialSpec)

    def __post_init__(self):
        validate(self)

    @property
    def n_steps(self) -> int:
        if self.run.steps >= 0:
            return self.run.steps
        return int(round(self.step.t_end / self.step.dt_tau))

    def with_values(self, **sections) -> "SimulationConfig":
        """Copy with ``section={key: value}`` overrides."""
        kw = {}
        for name, vals in sections.items():
            kw[name] = replace(getattr(self, name), **vals)
        return replace(self, **kw)

    def build(self):
        """``(model, step_config, initial_data)`` for the stepper."""
        from .fluid_model import FluidGrid, FluidParams, VelocityField
        from .solid_model import DeformationField
        from .stepper import InitialData, Model, SolverConfig, StepConfig

        sol = self.solver
        solver = SolverConfig(
            grad_tol=sol.grad_tol,
            grad_floor=sol.grad_floor,
            constraint_tol=sol.constraint_tol,
            max_outer=sol.max_outer,
            max_inner=sol.max_inner,
            penalty=sol.penalty,
            penalty_growth=sol.penalty_growth,
            backtrack=sol.backtrack,
            min_det=sol.min_det,
            cn_tol=sol.cn_tol,
            contact_distance=None if sol.contact_distance < 0 else sol.contact_distance,
            cn_resolution=sol.cn_resolution,
        )
        st = self.step
        cfg = StepConfig(
            st.dt_tau, st.h_delay, st.kappa, st.a0_exponent, st.t_end, ForceField(st.force_x, st.force_y), solver
        )
        f = self.fluid
        grid = self.solid.build()
        fgrid = FluidGrid(f.x0, f.x1, f.y0, f.y1, f.mx, f.my)
        model = Model(
            grid,
            self.material.build(),
            fgrid,
            FluidParams(f.nu, f.rho_f, f.slip_coefficient, 0.0, f.k0_order),
            self.solid.reg_order,
            f.min_fraction,
        )
        ini = self.initial
        v0 = None
        if ini.v0_x.strip() not in ("0", "0.0") or ini.v0_y.strip() not in ("0", "0.0"):
            fx, fy = compile_expression(ini.v0_x), compile_expression(ini.v0_y)
            c = fgrid.centers()
            vals = np.stack([fx(0.0, c[..., 0], c[..., 1]), fy(0.0, c[..., 0], c[..., 1])], axis=-1)
            v0 = VelocityField(fgrid, vals, np.ones((f.mx, f.my), dtype=bool))
        init = InitialData(DeformationField(grid, grid.reference_positions), np.array([ini.eta_star_x, ini.eta_star_y]), v0)
        return model, cfg, init


def validate(cfg: SimulationConfig) -> None:
    """Cross-field checks. Raises ValidationError naming the violated rule."""
    from .scenarios import SCENARIOS

    if cfg.run.scenario not in SCENARIOS:
        raise ValidationError(f"unknown scenario {cfg.run.scenario!r}", key="run.scenario")
    bad = [c for c in cfg.run.checks if c not in CHECK_NAMES]
    if bad:
        raise ValidationError(f"unknown checks {bad}", key="run.checks")
    if cfg.solid.shape not in ("disc", "rectangle"):
        raise ValidationError("must be 'disc' or 'rectangle'", key="solid.shape")
    st = cfg.step
    for k in ("dt_tau", "h_delay"):
        if not getattr(st, k) > 0:
            raise ValidationError("must be positive", key=f"step.{k}")
    r = st.h_delay / st.dt_tau
    if abs(r - round(r)) > 1e-9 * max(r, 1.0):
        raise ValidationError("h_delay must be an integer multiple of dt_tau", key="step.h_delay")
    if st.t_end < 0:
        raise ValidationError("must be nonnegative", key="step.t_end")
    r = st.t_end / st.h_delay
    if abs(r - round(r)) > 1e-9 * max(r, 1.0):
        raise ValidationError("t_end must be an integer multiple of h_delay", key="step.t_end")
    for expr, key in ((st.force_x, "step.force_x"), (st.force_y, "step.force_y"),
                      (cfg.initial.v0_x, "initial.v0_x"), (cfg.initial.v0_y, "initial.v0_y")):
        try:
            compile_expression(expr)
        except (SyntaxError, ValueError) as exc:
            raise ValidationError(f"invalid expression: {exc}", key=key) from None
    try:
        cfg.material.build()
    except InvalidMaterial as exc:
        raise ValidationError(str(exc), key="material") from None
    f = cfg.fluid
    if not (f.x1 > f.x0 and f.y1 > f.y0):
        raise ValidationError("container bounds must be increasing", key="fluid")
    if f.mx < 2 or f.my < 2:
        raise ValidationError("needs at least 2 cells per direction", key="fluid.mx")
    if not 0 < f.min_fraction < 1:
        raise ValidationError("must lie in (0, 1)", key="fluid.min_fraction")
    for k in ("nu", "rho_f"):
        if not getattr(f, k) > 0:
            raise ValidationError("must be positive", key=f"fluid.{k}")
    if f.slip_coefficient < 0:
        raise ValidationError("must be nonnegative", key="fluid.slip_coefficient")


# -- INI round trip -------------------------------------------------------------
def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(cls, key, text, line):
    ftype = {f.name: f for f in fields(cls)}[key]
    default = ftype.default
    try:
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(t) for t in items)
            return tuple(items)
        if isinstance(default, bool):
            return text.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text.strip()
    except ValueError:
        raise ParseError(f"cannot parse {text!r} as {type(default).__name__}", line=line, key=key) from None


class _LineTracker(configparser.ConfigParser):
    """ConfigParser that remembers the line number of every option."""

    def __init__(self):
        super().__init__(interpolation=None, inline_comment_prefixes=("#", ";"))
        self.lines = {}

    def _read(self, fp, fpname):
        lines = fp.readlines()
        section = None
        for no, raw in enumerate(lines, 1):
            s = raw.strip()
            if s.startswith("[") and s.endswith("]"):
                section = s[1:-1].strip()
            elif section and "=" in s and not s.startswith(("#", ";")):
                self.lines[(section, s.split("=", 1)[0].strip().lower())] = no
        super()._read(io.StringIO("".join(lines)), fpname)


def parse_config(text: str) -> SimulationConfig:
    """Parse an INI document into a validated :class:`SimulationConfig`.

    Missing values come from the named scenario's defaults.

    Raises
    ------
    ParseError
        Malformed document, unknown section or key, or unparsable value.
    ValidationError
        Cross-field rule violated.
    """
    cp = _LineTracker()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ParseError(str(exc).splitlines()[0], line=getattr(exc, "lineno", None)) from None
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ParseError(f"unknown section [{sec}]", line=cp.lines.get((sec, None)))
    scenario = cp.get("run", "scenario", fallback=RunSpec.scenario).strip()
    from .scenarios import SCENARIOS, scenario_config

    if scenario not in SCENARIOS:
        raise ValidationError(f"unknown scenario {scenario!r}", key="run.scenario")
    base = scenario_config(scenario)
    kw = {}
    for sec, cls in SECTIONS.items():
        if not cp.has_section(sec):
            continue
        names = {f.name for f in fields(cls)}
        vals = {}
        for key, text in cp.items(sec):
            line = cp.lines.get((sec, key))
            if key not in names:
                raise ParseError(f"unknown key in [{sec}]", line=line, key=key)
            vals[key] = _coerce(cls, key, text, line)
        kw[sec] = replace(getattr(base, sec), **vals)
    try:
        return replace(base, **kw)
    except (ShapeMismatch, InvalidMaterial) as exc:
        raise ValidationError(str(exc)) from None


def load_config(path) -> SimulationConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def serialize_config(cfg: SimulationConfig) -> str:
    """Full INI document with every value written out."""
    out = []
    for sec in SECTIONS:
        out.append(f"[{sec}]")
        for k, v in asdict(getattr(cfg, sec)).items():
            out.append(f"{k} = {_format(v)}")
        out.append("")
    return "\n".join(out)


def config_dict(cfg: SimulationConfig) -> dict:
    return {sec: asdict(getattr(cfg, sec)) for sec in SECTIONS}
