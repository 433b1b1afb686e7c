"""Minimizing-movements time stepping for the coupled solid-fluid system.

Each step minimizes the incremental functional over the solid displacement
``d = eta - eta_prev`` and the fluid velocity ``v`` on the previous fluid
domain, subject to linear constraints: normal coupling at the interface,
wall impermeability and discrete incompressibility. The unknown vector is
``x = [d_x, d_y, v_x, v_y]`` (solid nodes, then active fluid cells).

The objective splits into the nonlinear stored energy and a quadratic part
whose terms are kept separately so their values can be reported exactly.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .budget import EnergyBudget
from .errors import (
    ContactImminent,
    DegenerateJacobian,
    LineSearchFailed,
    SampleEscaped,
    ShapeMismatch,
    ValidationError,
)
from .fluid_model import FluidDomain, FluidGrid, FluidParams, VelocityField, fluid_domain, project_divergence_free
from .forcing import ForceField
from .geometry import (
    CellClassification,
    InterfaceGeometry,
    SelfIntersecting,
    build_interface,
    ciarlet_necas_residual,
    classify_cells,
    min_separation,
)
from .linalg import NotPositiveDefinite, SPDSolver
from .solid_model import (
    DeformationField,
    MaterialParams,
    RegularizerConfig,
    SolidGrid,
    dissipation_matrix,
    energy_gradient,
    energy_hessian,
    eval_energy,
)

log = logging.getLogger(__name__)


# -- configuration ------------------------------------------------------------
@dataclass(frozen=True)
class SolverConfig:
    """Augmented-Lagrangian step solver settings.

    The solver works in Jacobi-scaled variables (unit Hessian diagonal at the
    warm start) and ``penalty`` is the augmented-Lagrangian weight in those
    variables. Stationarity is measured on the scaled gradient; ``grad_tol``
    is relative to its initial value, with ``grad_floor`` as an absolute
    floor. A predicted merit decrease at roundoff level with feasibility met
    also counts as converged. ``penalty`` is relative to the mean
    diagonal of the step Hessian.
    """

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
    contact_distance: float | None = None
    check_contact: bool = True
    cn_resolution: int = 512

    def __post_init__(self):
        for name in ("grad_tol", "constraint_tol", "penalty", "min_det", "cn_tol"):
            if not getattr(self, name) > 0:
                raise ValidationError("must be positive", key=name)
        if not self.penalty_growth > 1:
            raise ValidationError("growth factor must exceed 1", key="penalty_growth")
        if not 0 < self.backtrack < 1:
            raise ValidationError("must lie in (0, 1)", key="backtrack")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValidationError("iteration limits must be positive", key="max_outer")


def _integer_ratio(a, b, what):
    r = a / b
    k = int(round(r))
    if abs(r - k) > 1e-9 * max(1.0, abs(r)):
        raise ValidationError(f"{what} must be an integer multiple", key=what.split()[0])
    return k


@dataclass(frozen=True)
class StepConfig:
    """Time discretization parameters.

    ``h_delay`` must be an integer multiple of ``dt_tau`` and ``t_end`` an
    integer multiple of ``h_delay``.
    """

    dt_tau: float = 1e-3
    h_delay: float = 1e-2
    kappa: float = 1e-4
    a0_exponent: float = 1.0
    t_end: float = 0.2
    force: ForceField = field(default_factory=ForceField.zero)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if not self.dt_tau > 0:
            raise ValidationError("must be positive", key="dt_tau")
        if not self.h_delay > 0:
            raise ValidationError("must be positive", key="h_delay")
        if self.kappa < 0:
            raise ValidationError("must be nonnegative", key="kappa")
        if not self.a0_exponent > 0:
            raise ValidationError("must be positive", key="a0_exponent")
        if self.t_end < 0:
            raise ValidationError("must be nonnegative", key="t_end")
        _integer_ratio(self.h_delay, self.dt_tau, "h_delay (h) of dt_tau (tau)")
        if self.t_end > 0:
            _integer_ratio(self.t_end, self.h_delay, "t_end (T) of h_delay (h)")

    @property
    def slots(self) -> int:
        return int(round(self.h_delay / self.dt_tau))

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt_tau))


@dataclass(eq=False)
class Model:
    """Physical setup: solid grid and material, container and fluid parameters."""

    solid: SolidGrid
    material: MaterialParams
    fluid_grid: FluidGrid
    fluid: FluidParams
    reg_order: int = 3
    min_fraction: float = 0.05

    def regularizer(self, cfg: StepConfig) -> RegularizerConfig:
        return RegularizerConfig(cfg.kappa, cfg.a0_exponent, self.reg_order)

    def fluid_params(self, cfg: StepConfig) -> FluidParams:
        return replace(self.fluid, kappa=cfg.kappa)


@dataclass(eq=False)
class InitialData:
    """Initial deformation, initial solid velocity and initial fluid velocity."""

    eta0: DeformationField
    eta_star: np.ndarray
    v0: VelocityField | None = None


# -- flow map -------------------------------------------------------------------
_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def estimate_jacobians(reference, positions, lattice) -> np.ndarray:
    """Least-squares Jacobians of ``reference -> positions`` over lattice neighbours."""
    S = len(reference)
    big = np.int64(1 << 21)
    keys = (lattice[:, 0].astype(np.int64) + 1) * big + lattice[:, 1] + 1
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    A = np.zeros((S, 2, 2))
    B = np.zeros((S, 2, 2))
    for di, dj in _OFFSETS:
        nk = (lattice[:, 0].astype(np.int64) + 1 + di) * big + lattice[:, 1] + 1 + dj
        pos = np.clip(np.searchsorted(sk, nk), 0, S - 1)
        found = sk[pos] == nk
        idx = order[pos]
        dX = np.where(found[:, None], reference[idx] - reference, 0.0)
        dP = np.where(found[:, None], positions[idx] - positions, 0.0)
        A += dX[:, :, None] * dX[:, None, :]
        B += dP[:, :, None] * dX[:, None, :]
    detA = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    ok = detA > 1e-12 * np.maximum(A[:, 0, 0] * A[:, 1, 1], 1e-300)
    inv = np.zeros_like(A)
    inv[:, 0, 0], inv[:, 1, 1] = A[:, 1, 1], A[:, 0, 0]
    inv[:, 0, 1], inv[:, 1, 0] = -A[:, 0, 1], -A[:, 1, 0]
    inv[ok] /= detA[ok, None, None]
    J = np.einsum("nij,njk->nik", B, inv)
    J[~ok] = np.eye(2)
    return J


@dataclass(eq=False)
class FlowMap:
    """Lagrangian samples of the fluid flow map over one delay window.

    Attributes
    ----------
    reference : (S, 2) sample points on the window-initial fluid domain.
    positions : (S, 2) current images of the samples.
    lattice : (S, 2) lattice indices of the reference cells.
    weights : (S,) quadrature weights of the reference cells.
    jacobians : (S, 2, 2) least-squares Jacobian estimates.
    """

    reference: np.ndarray
    positions: np.ndarray
    lattice: np.ndarray
    weights: np.ndarray
    jacobians: np.ndarray | None = None

    def __post_init__(self):
        if self.jacobians is None:
            self.jacobians = estimate_jacobians(self.reference, self.positions, self.lattice)

    @classmethod
    def from_domain(cls, dom: FluidDomain) -> "FlowMap":
        X = dom.centers.copy()
        return cls(X, X.copy(), dom.cells.copy(), dom.weights.copy(), np.tile(np.eye(2), (len(X), 1, 1)))

    @property
    def det(self) -> np.ndarray:
        J = self.jacobians
        return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]

    @property
    def n_samples(self) -> int:
        return len(self.reference)


def update_flow_map(fm: FlowMap, v_k: VelocityField, dt: float, values=None, search: int = 2) -> FlowMap:
    """Compose the flow map with ``id + dt * v_k``.

    ``values`` may carry the already interpolated ``v_k(Phi(X))``.

    Raises
    ------
    SampleEscaped
        If a sample has no active cell within ``search`` cells.
    """
    if values is None:
        g = v_k.grid
        idx, wts, status = _kernels.bilinear_stencil(fm.positions, g.x0, g.y0, g.dx, g.dy, v_k.active, search)
        if np.any(status == 2):
            raise SampleEscaped(f"{int(np.sum(status == 2))} flow-map sample(s) left the fluid region")
        flat = v_k.values.reshape(-1, 2)
        values = (flat[np.where(idx >= 0, idx, 0)] * np.where(idx >= 0, wts, 0.0)[..., None]).sum(axis=1)
    pos = fm.positions + dt * np.asarray(values, dtype=float)
    return FlowMap(fm.reference, pos, fm.lattice, fm.weights)


# -- delay window ---------------------------------------------------------------
@dataclass(eq=False)
class DelayWindow:
    """History data of one delay window.

    ``w_s[j]`` is the solid rate of slot ``j`` and ``w_f[j]`` the fluid
    velocity of slot ``j`` at the samples of ``flow_map`` (the window-initial
    fluid domain).
    """

    index: int
    t_start: float
    w_s: np.ndarray
    w_f: np.ndarray
    flow_map: FlowMap


def initial_window(init_rate: np.ndarray, v0_active: np.ndarray, dom: FluidDomain, slots: int) -> DelayWindow:
    fm = FlowMap.from_domain(dom)
    w_s = np.broadcast_to(np.asarray(init_rate, dtype=float), (slots,) + np.shape(init_rate)).copy()
    w_f = np.broadcast_to(v0_active, (slots,) + v0_active.shape).copy()
    return DelayWindow(0, 0.0, w_s, w_f, fm)


def advance_delay_window(
    window: DelayWindow, fm_end: FlowMap, rates, fluid_slots, new_domain: FluidDomain, t_start: float
) -> DelayWindow:
    """Roll the window: store the solved slots and pull the fluid back to the new domain.

    The new samples are the active cell centers ``X'`` of the new domain. Each
    is traced back to its label ``X`` on the old window-initial lattice by
    solving ``X + d(X) = X'`` with ``d`` the end displacement of the old
    flow map. The old slot values at ``X`` become the new ``w_f``.
    """
    w_s = np.asarray(rates, dtype=float)
    U = np.asarray(fluid_slots, dtype=float)
    grid = new_domain.grid
    old = window.flow_map
    mask = np.zeros((grid.mx, grid.my), dtype=bool)
    mask[old.lattice[:, 0], old.lattice[:, 1]] = True
    cell_of = -np.ones((grid.mx, grid.my), dtype=np.int64)
    cell_of[old.lattice[:, 0], old.lattice[:, 1]] = np.arange(old.n_samples)

    def interp(points, vals):
        idx, wts, status = _kernels.bilinear_stencil(points, grid.x0, grid.y0, grid.dx, grid.dy, mask, 2)
        flat = cell_of.ravel()
        src = np.where(idx >= 0, flat[np.where(idx >= 0, idx, 0)], 0)
        w = np.where(idx >= 0, wts, 0.0)
        out = np.einsum("pk,pk...->p...", w, vals[src])
        return out, status

    disp = fm_end.positions - old.reference
    Xp = new_domain.centers
    X = Xp.copy()
    for _ in range(4):
        d, _ = interp(X, disp)
        X = Xp - d
    vals = np.moveaxis(U, 0, 1)  # (S, H, 2)
    w_f, status = interp(X, vals)
    w_f = np.moveaxis(w_f, 0, 1).copy()
    w_f[:, status == 2] = 0.0
    return DelayWindow(window.index + 1, t_start, w_s.copy(), w_f, FlowMap.from_domain(new_domain))


# -- step problem ---------------------------------------------------------------
@dataclass
class QuadTerm:
    """Quadratic term ``0.5 x^T H x - b^T x + c``."""

    H: sp.csr_matrix | None
    b: np.ndarray | None
    c: float = 0.0

    def value(self, x):
        v = self.c
        if self.H is not None:
            v += 0.5 * float(x @ (self.H @ x))
        if self.b is not None:
            v -= float(self.b @ x)
        return v


@dataclass(eq=False)
class StepState:
    """State after step ``k`` together with the data the next step needs."""

    k: int
    t: float
    eta: DeformationField
    v: VelocityField
    cls: CellClassification
    domain: FluidDomain
    interface: InterfaceGeometry
    flow_map: FlowMap
    window: DelayWindow
    rates: list
    fluid_slots: list


def _embed(n, blocks):
    """Sum of sparse blocks placed at (row offset, col offset)."""
    out = sp.csr_matrix((n, n))
    for (r, c), B in blocks:
        B = sp.coo_matrix(B)
        out = out + sp.csr_matrix((B.data, (B.row + r, B.col + c)), shape=(n, n))
    return out


class StepProblem:
    """Incremental functional of one step with its linear constraints."""

    ROW_GROUPS = ("coupling", "wall", "divergence")

    def __init__(self, state: StepState, model: Model, cfg: StepConfig):
        self.state = state
        self.model = model
        self.cfg = cfg
        self.mat = model.material
        self.reg = model.regularizer(cfg)
        self.fparams = model.fluid_params(cfg)
        self.eta_prev = state.eta
        self.interface = state.interface
        self.domain = state.domain
        self.k = state.k + 1
        self.t0 = state.t
        self.t1 = state.t + cfg.dt_tau
        grid = model.solid
        self.ns = grid.n_nodes
        self.na = self.domain.n
        self.n = 2 * self.ns + 2 * self.na
        self.slot = state.k % cfg.slots
        self._assemble()

    # bookkeeping
    def split(self, x):
        ns = self.ns
        d = np.column_stack([x[:ns], x[ns : 2 * ns]])
        v = np.column_stack([x[2 * ns : 2 * ns + self.na], x[2 * ns + self.na :]])
        return d, v

    def eta_of(self, x) -> DeformationField:
        d, _ = self.split(x)
        return DeformationField(self.model.solid, self.eta_prev.positions + d)

    def velocity_of(self, x) -> VelocityField:
        _, v = self.split(x)
        return VelocityField.from_active(self.domain, v, self.t1)

    def _assemble(self):
        cfg, mat, model = self.cfg, self.mat, self.model
        tau, h = cfg.dt_tau, cfg.h_delay
        grid = model.solid
        dom = self.domain
        ns, na, n = self.ns, self.na, self.n
        so = 2 * ns  # fluid offset
        W = grid.weights
        Ws2 = np.concatenate([W, W])
        A2 = np.concatenate([dom.weights, dom.weights])
        fp = self.fparams
        win = self.state.window
        w_s = win.w_s[self.slot]
        w_f = win.w_f[self.slot]
        fm = self.state.flow_map
        self.w_s, self.w_f = w_s, w_f
        terms = {}

        # solid dissipation and its regularizer, tau * R(eta_prev, d / tau)
        AR = dissipation_matrix(self.eta_prev, mat, RegularizerConfig(0.0, 1.0, model.reg_order))
        terms["solid_dissipation"] = QuadTerm(_embed(n, [((0, 0), (2.0 / tau) * AR)]), None)
        if cfg.kappa > 0:
            Km = grid.vector_seminorm_matrix(model.reg_order)
            terms["solid_regularizer_rate"] = QuadTerm(_embed(n, [((0, 0), (2.0 * cfg.kappa / tau) * Km)]), None)
        else:
            terms["solid_regularizer_rate"] = QuadTerm(None, None)
        # solid inertia rho_s tau / (2h) |d / tau - w_s|^2
        rs = mat.rho_s
        ws_flat = np.concatenate([w_s[:, 0], w_s[:, 1]])
        b = np.zeros(n)
        b[:so] = (rs / h) * Ws2 * ws_flat
        terms["solid_inertia"] = QuadTerm(
            _embed(n, [((0, 0), sp.diags((rs / (h * tau)) * Ws2))]), b, rs * tau / (2 * h) * float(np.sum(Ws2 * ws_flat**2))
        )
        # solid force -rho_s <f_k o eta_prev, d>
        self.f_solid = cfg.force.step_average(self.t0, self.t1, self.eta_prev.positions)
        b = np.zeros(n)
        b[:so] = rs * Ws2 * np.concatenate([self.f_solid[:, 0], self.f_solid[:, 1]])
        terms["force_work_solid"] = QuadTerm(None, b)

        # interface coupling data at eta_prev
        itf = self.interface
        M = itf.n_points
        IG, status = dom.interpolation_matrix(itf.points, search=2, strict=True)
        self.IG = IG
        S = sp.csr_matrix((np.ones(M), (np.arange(M), itf.node_ids)), shape=(M, ns))
        # slip (a / (2 tau)) sum w |S d - tau IG v|^2 per component
        a = fp.slip_coefficient
        if a > 0:
            blocks = []
            Om = sp.diags(itf.weights)
            for comp in range(2):
                Bj = sp.hstack([S, -tau * IG], format="csr")
                Hj = (a / tau) * (Bj.T @ Om @ Bj)
                Hj = sp.coo_matrix(Hj)
                # scatter into the component's solid and fluid slots
                r = np.where(Hj.row < ns, Hj.row + comp * ns, Hj.row - ns + so + comp * na)
                c = np.where(Hj.col < ns, Hj.col + comp * ns, Hj.col - ns + so + comp * na)
                blocks.append(sp.csr_matrix((Hj.data, (r, c)), shape=(n, n)))
            terms["slip_dissipation"] = QuadTerm(blocks[0] + blocks[1], None)
        else:
            terms["slip_dissipation"] = QuadTerm(None, None)

        # fluid viscous and regularizer
        terms["viscous_dissipation"] = QuadTerm(_embed(n, [((so, so), (tau * fp.nu) * dom.viscous_matrix())]), None)
        if fp.kappa > 0:
            terms["fluid_regularizer"] = QuadTerm(
                _embed(n, [((so, so), (tau * fp.kappa) * dom.regularizer_matrix(fp.k0_order))]), None
            )
        else:
            terms["fluid_regularizer"] = QuadTerm(None, None)
        # fluid inertia rho_f tau / (2h) sum W |I_Phi v - w_f|^2
        rf = fp.rho_f
        IP, st = dom.interpolation_matrix(fm.positions, search=2, strict=False)
        self.IP = IP
        self.escaped = int(np.sum(st == 2))
        Wsmp = sp.diags(fm.weights)
        HP = (rf * tau / h) * (IP.T @ Wsmp @ IP)
        b = np.zeros(n)
        b[so : so + na] = (rf * tau / h) * (IP.T @ (fm.weights * w_f[:, 0]))
        b[so + na :] = (rf * tau / h) * (IP.T @ (fm.weights * w_f[:, 1]))
        terms["fluid_inertia"] = QuadTerm(
            _embed(n, [((so, so), HP), ((so + na, so + na), HP)]),
            b,
            rf * tau / (2 * h) * float(np.sum(fm.weights * np.sum(w_f**2, axis=1))),
        )
        # fluid force -tau rho_f <f_k, v>
        self.f_fluid = cfg.force.step_average(self.t0, self.t1, dom.centers)
        b = np.zeros(n)
        b[so:] = tau * rf * A2 * np.concatenate([self.f_fluid[:, 0], self.f_fluid[:, 1]])
        terms["force_work_fluid"] = QuadTerm(None, b)
        self.terms = terms

        Hq = sp.csr_matrix((n, n))
        bq = np.zeros(n)
        cq = 0.0
        for t in terms.values():
            if t.H is not None:
                Hq = Hq + t.H
            if t.b is not None:
                bq += t.b
            cq += t.c
        self.Hq, self.bq, self.cq = Hq.tocsr(), bq, cq

        # constraints: coupling, wall, divergence
        nrm = itf.normals
        rows, cols, vals = [], [], []
        ids = itf.node_ids
        for comp in range(2):
            rows.append(np.arange(M))
            cols.append(ids + comp * ns)
            vals.append(nrm[:, comp] / tau)
            IGc = sp.coo_matrix(IG)
            rows.append(IGc.row)
            cols.append(IGc.col + so + comp * na)
            vals.append(-nrm[IGc.row, comp] * IGc.data)
        Cc = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(M, n))
        Cf = dom.constraint_matrix()
        nw = Cf.shape[0] - na
        Cf = sp.hstack([sp.csr_matrix((Cf.shape[0], so)), Cf], format="csr")
        self.C = sp.vstack([Cc, Cf[na:], Cf[:na]], format="csr")
        self.row_slices = {
            "coupling": slice(0, M),
            "wall": slice(M, M + nw),
            "divergence": slice(M + nw, M + nw + na),
        }

    # objective pieces
    def energy(self, x):
        return eval_energy(self.eta_of(x), self.mat, self.reg)

    def objective(self, x) -> float:
        return self.energy(x).total + 0.5 * float(x @ (self.Hq @ x)) - float(self.bq @ x) + self.cq

    def gradient(self, x) -> np.ndarray:
        g = self.Hq @ x - self.bq
        ge = energy_gradient(self.eta_of(x), self.mat, self.reg)
        g[: self.ns] += ge[:, 0]
        g[self.ns : 2 * self.ns] += ge[:, 1]
        return g

    def hessian(self, x) -> sp.csr_matrix:
        He = energy_hessian(self.eta_of(x), self.mat, self.reg)
        return (self.Hq + _embed(self.n, [((0, 0), He)])).tocsr()

    def warm_start(self) -> np.ndarray:
        return np.zeros(self.n)

    def constraint_count(self) -> int:
        return self.C.shape[0]

    def term_values(self, x) -> dict:
        """Value of every assembled term at ``x``."""
        e = self.energy(x)
        out = {"elastic": e.strain_term + e.det_term + e.grad2_term, "regularizer": e.regularizer_term}
        for name, t in self.terms.items():
            out[name] = t.value(x)
        return out

    def kinetic_terms(self, x) -> dict:
        """Kinetic-rate and right-hand-side terms of the energy estimate at ``x``."""
        cfg = self.cfg
        tau, h = cfg.dt_tau, cfg.h_delay
        rs, rf = self.mat.rho_s, self.fparams.rho_f
        W = self.model.solid.weights
        d, v = self.split(x)
        bvec = d / tau
        fm = self.state.flow_map
        u = np.column_stack([self.IP @ v[:, 0], self.IP @ v[:, 1]])
        a = self.domain.weights
        nb = float(np.sum(W * np.sum(bvec**2, axis=1)))
        nu_ = float(np.sum(fm.weights * np.sum(u**2, axis=1)))
        nv = float(np.sum(a * np.sum(v**2, axis=1)))
        return {
            "solid_kinetic_rate": rs * tau / (8 * h) * nb,
            "fluid_kinetic_rate": rf * tau / (4 * h) * nu_ - rf * tau / (8 * h) * nv,
            "solid_window_rate": rs * tau / h * float(np.sum(W * np.sum(self.w_s**2, axis=1))),
            "fluid_window_rate": rf * tau / h * float(np.sum(fm.weights * np.sum(self.w_f**2, axis=1))),
            "solid_force_bound": 2 * rs * tau * h * float(np.sum(W * np.sum(self.f_solid**2, axis=1))),
            "fluid_force_bound": 2 * rf * tau * h * float(np.sum(a * np.sum(self.f_fluid**2, axis=1))),
        }


def assemble_step(state: StepState, model: Model, cfg: StepConfig) -> StepProblem:
    """Assemble the incremental problem for step ``state.k + 1``.

    Raises
    ------
    DegenerateJacobian
        If the warm start is inadmissible.
    """
    prob = StepProblem(state, model, cfg)
    prob.energy(prob.warm_start())
    return prob


# -- solver ---------------------------------------------------------------------
@dataclass(eq=False)
class StepResult:
    x: np.ndarray
    eta: DeformationField
    v: VelocityField
    pressure: np.ndarray
    coupling_multipliers: np.ndarray
    multiplier_norms: dict
    objective: float
    objective_warm: float
    iterations: int
    converged: bool
    feasibility: float
    stationarity: float
    min_det: float
    info: dict = field(default_factory=dict)


def _factor(H, shift_block, shift0):
    shift = 0.0
    for _ in range(12):
        try:
            K = H if shift == 0.0 else H + shift * shift_block
            return SPDSolver(K), shift
        except NotPositiveDefinite:
            shift = shift0 if shift == 0.0 else 10.0 * shift
    raise LineSearchFailed("could not obtain a positive definite step matrix")


def solve_step(problem: StepProblem, solver: SolverConfig) -> StepResult:
    """Minimize the step functional under its linear constraints.

    Augmented-Lagrangian outer loop. Each iteration takes a modified Newton
    step on the augmented Lagrangian with a factorized Hessian (refreshed when
    progress stalls), a backtracking line search guarded by ``min_det``, and a
    first-order multiplier update.
    """
    n = problem.n
    ns2 = 2 * problem.ns
    C = problem.C
    m = C.shape[0]

    x = problem.warm_start()
    J0 = problem.objective(x)
    g = problem.gradient(x)
    H = problem.hessian(x)
    # work in Jacobi-scaled variables x = D y, the solid and fluid blocks
    # differ by many orders of magnitude
    hd = np.abs(H.diagonal())
    D = 1.0 / np.sqrt(np.maximum(hd, 1e-14 * hd.max()))
    Dm = sp.diags(D)
    CD = (C @ Dm).tocsr()
    rn = np.sqrt(np.asarray(CD.multiply(CD).sum(axis=1)).ravel())
    s = 1.0 / np.where(rn > 0, rn, 1.0)
    Cs = (sp.diags(s) @ CD).tocsr()
    CtC = (Cs.T @ Cs).tocsr()
    g0 = float(np.abs(D * g).max())
    gtol = max(solver.grad_tol * g0, solver.grad_floor)
    mu = solver.penalty
    shift_block = sp.diags(np.concatenate([np.ones(ns2), np.zeros(n - ns2)]))

    def scaled_matrix(x, mu, shift0):
        Hy = Dm @ problem.hessian(x) @ Dm
        return _factor((Hy + mu * CtC).tocsc(), shift_block, shift0)

    t0 = time.perf_counter()
    fac, shift = _factor((Dm @ H @ Dm + mu * CtC).tocsc(), shift_block, 1e-8)
    n_factor = 1

    y = x / D
    lam = np.zeros(m)
    J = J0
    converged = False
    slow = 0
    prev_feas = np.inf
    it = 0
    feas = stat = np.inf
    for it in range(solver.max_outer):
        c = Cs @ y
        gL = D * g + Cs.T @ (lam + mu * c)
        feas = float(np.abs(C @ x).max()) if m else 0.0
        stat = float(np.abs(gL).max())
        if feas <= solver.constraint_tol and stat <= gtol:
            converged = True
            break
        d = -fac.solve(gL)
        slope = float(gL @ d)
        if not slope < 0:
            fac, shift = scaled_matrix(x, mu, max(10 * shift, 1e-8))
            n_factor += 1
            d = -fac.solve(gL)
            slope = float(gL @ d)
            if not slope < 0:
                break
        L0 = J + float(lam @ c) + 0.5 * mu * float(c @ c)
        # predicted decrease below the roundoff of the merit value
        floor = 10 * np.finfo(float).eps * max(abs(L0), abs(J0), 1e-300)
        at_floor = -slope <= floor
        if feas <= solver.constraint_tol and at_floor:
            converged = True
            break
        alpha = 1.0
        accepted = False
        for _ in range(solver.max_inner):
            yt = y + alpha * d
            xt = D * yt
            try:
                if problem.eta_of(xt).det.min() >= solver.min_det:
                    Jt = problem.objective(xt)
                    ct = Cs @ yt
                    Lt = Jt + float(lam @ ct) + 0.5 * mu * float(ct @ ct)
                    if Lt <= L0 + 1e-4 * alpha * slope or -slope <= 1e3 * floor:
                        accepted = True
                        break
            except DegenerateJacobian:
                pass
            alpha *= solver.backtrack
        if not accepted:
            raise LineSearchFailed(f"step {problem.k}: no admissible step length")
        y, x, J = yt, xt, Jt
        log.debug("it %d alpha %.3g feas %.3e stat %.3e mu %.1e", it, alpha, feas, stat, mu)
        g = problem.gradient(x)
        lam = lam + mu * (Cs @ y)
        new_feas = float(np.abs(C @ x).max()) if m else 0.0
        behind = new_feas > solver.constraint_tol and new_feas > 0.25 * prev_feas
        slow = slow + 1 if ((alpha < 0.25 and not at_floor) or behind) else 0
        prev_feas = new_feas
        if slow >= 2:
            if new_feas > solver.constraint_tol and mu * solver.penalty_growth <= 1e8:
                mu *= solver.penalty_growth
            fac, shift = scaled_matrix(x, mu, max(shift, 1e-8))
            n_factor += 1
            slow = 0
    else:
        it = solver.max_outer
    if not converged:
        log.warning("step %d: not converged (feas %.2e, stat %.2e)", problem.k, feas, stat)

    lam_unscaled = s * lam
    sl = problem.row_slices
    tau = problem.cfg.dt_tau
    dom = problem.domain
    lam_div = lam_unscaled[sl["divergence"]]
    p = -lam_div / (tau * dom.weights)
    p = p - float(np.sum(dom.weights * p) / np.sum(dom.weights))
    pressure = np.zeros((dom.grid.mx, dom.grid.my))
    pressure[dom.active] = p
    eta = problem.eta_of(x)
    v = problem.velocity_of(x)
    norms = {k: float(np.linalg.norm(lam_unscaled[sl[k]])) for k in problem.ROW_GROUPS}
    return StepResult(
        x=x,
        eta=eta,
        v=v,
        pressure=pressure,
        coupling_multipliers=lam_unscaled[sl["coupling"]].copy(),
        multiplier_norms=norms,
        objective=J,
        objective_warm=J0,
        iterations=it,
        converged=converged,
        feasibility=feas,
        stationarity=stat,
        min_det=float(eta.det.min()),
        info={"factorizations": n_factor, "penalty": mu, "shift": shift, "solve_time": time.perf_counter() - t0},
    )


# -- trajectory -----------------------------------------------------------------
@dataclass(eq=False)
class StepRecord:
    k: int
    t: float
    eta: np.ndarray
    v: np.ndarray
    active: np.ndarray
    labels: np.ndarray
    pressure: np.ndarray
    coupling_multipliers: np.ndarray
    multiplier_norms: dict
    budget: EnergyBudget | None
    interface: np.ndarray
    flowmap_det: tuple
    solver: dict
    checks: dict


@dataclass(eq=False)
class Trajectory:
    """Step records plus the three time interpolants of the deformation."""

    dt: float
    records: list = field(default_factory=list)
    abort_reason: str | None = None

    @property
    def times(self):
        return np.array([r.t for r in self.records])

    def _index(self, t):
        k = int(np.ceil(t / self.dt - 1e-9))
        return min(max(k, 0), len(self.records) - 1)

    def eta_constant(self, t) -> np.ndarray:
        """Right-continuous piecewise constant interpolant (value of the step ending at or after t)."""
        return self.records[self._index(t)].eta

    def eta_lagged(self, t) -> np.ndarray:
        """Piecewise constant interpolant taking the value at the start of the step."""
        return self.records[max(self._index(t) - 1, 0)].eta

    def eta_affine(self, t) -> np.ndarray:
        k = self._index(t)
        if k == 0:
            return self.records[0].eta
        r0, r1 = self.records[k - 1], self.records[k]
        s = (t - r0.t) / (r1.t - r0.t)
        return (1 - s) * r0.eta + s * r1.eta


def check_admissible(eta: DeformationField, container: FluidGrid):
    J = eta.det
    if np.any(~(J > 0)):
        raise DegenerateJacobian("initial deformation has nonpositive det", nodes=np.nonzero(~(J > 0))[0])
    P = eta.positions
    if (
        P[:, 0].min() <= container.x0
        or P[:, 0].max() >= container.x1
        or P[:, 1].min() <= container.y0
        or P[:, 1].max() >= container.y1
    ):
        raise ShapeMismatch("solid leaves the container")


def initial_state(model: Model, cfg: StepConfig, init: InitialData) -> StepState:
    check_admissible(init.eta0, model.fluid_grid)
    itf = build_interface(init.eta0)
    cls = classify_cells(itf, model.fluid_grid)
    dom = fluid_domain(cls, model.min_fraction)
    if init.v0 is None:
        v0 = VelocityField.from_active(dom, np.zeros((dom.n, 2)))
    else:
        v0 = VelocityField(model.fluid_grid, init.v0.values, dom.active, 0.0)
        v0 = project_divergence_free(v0, cls)
    eta_star = np.asarray(init.eta_star, dtype=float).reshape(-1, 2) * np.ones((model.solid.n_nodes, 2))
    win = initial_window(eta_star, v0.values[dom.active], dom, cfg.slots)
    return StepState(0, 0.0, init.eta0, v0, cls, dom, itf, win.flow_map, win, [], [])


def _contact_threshold(model: Model, solver: SolverConfig) -> float:
    if solver.contact_distance is not None:
        return solver.contact_distance
    g = model.fluid_grid
    return 1.5 * max(g.dx, g.dy)


def step(state: StepState, model: Model, cfg: StepConfig):
    """Advance one step. Returns ``(new_state, result, problem, extras)``.

    Raises
    ------
    ContactImminent
        If the new interface is closer than the contact threshold to the
        walls or to itself, self-intersects, or violates the Ciarlet-Necas
        tolerance.
    """
    solver = cfg.solver
    prob = assemble_step(state, model, cfg)
    res = solve_step(prob, solver)
    k = prob.k
    t = prob.t1
    try:
        itf = build_interface(res.eta)
    except (SelfIntersecting, DegenerateJacobian) as exc:
        raise ContactImminent(f"step {k}: {exc}", step=k, separation=0.0, result=res) from exc
    sep = min_separation(itf, model.fluid_grid)
    cn = ciarlet_necas_residual(res.eta, solver.cn_resolution)
    if solver.check_contact and sep < _contact_threshold(model, solver):
        raise ContactImminent(f"step {k}: separation {sep:.3e} below threshold", step=k, separation=sep, result=res)
    if cn > solver.cn_tol:
        raise ContactImminent(f"step {k}: Ciarlet-Necas residual {cn:.3e} exceeds tolerance", step=k, separation=sep, result=res)
    new, fm = advance_state(state, prob, res.x, itf, model, cfg)
    extras = {"separation": sep, "cn_residual": cn, "flow_map": fm, "escaped": prob.escaped}
    return new, res, prob, extras


def advance_state(state: StepState, prob: StepProblem, x, itf: InterfaceGeometry, model: Model, cfg: StepConfig):
    """State after accepting ``x`` for ``prob``, with the flow map before any rollover.

    Classifies the new domain, advances the flow map, stores the slot data
    and rolls the delay window at its end.
    """
    eta = prob.eta_of(x)
    v = prob.velocity_of(x)
    k, t = prob.k, prob.t1
    cls = classify_cells(itf, model.fluid_grid)
    dom = fluid_domain(cls, model.min_fraction)
    d, vact = prob.split(x)
    u = np.column_stack([prob.IP @ vact[:, 0], prob.IP @ vact[:, 1]])
    fm = update_flow_map(state.flow_map, v, cfg.dt_tau, values=u)
    fm_end = fm
    rates = state.rates + [d / cfg.dt_tau]
    fluid_slots = state.fluid_slots + [u]
    window = state.window
    if k % cfg.slots == 0:
        window = advance_delay_window(window, fm, rates, fluid_slots, dom, t)
        fm = window.flow_map
        rates, fluid_slots = [], []
    return StepState(k, t, eta, v, cls, dom, itf, fm, window, rates, fluid_slots), fm_end


def budget_from_problem(prob: StepProblem, res: StepResult) -> EnergyBudget:
    tv = prob.term_values(res.x)
    kt = prob.kinetic_terms(res.x)
    return EnergyBudget(
        step=prob.k,
        elastic=tv["elastic"],
        regularizer=tv["regularizer"],
        solid_dissipation=tv["solid_dissipation"],
        solid_regularizer_rate=tv["solid_regularizer_rate"],
        solid_inertia=tv["solid_inertia"],
        solid_kinetic_rate=kt["solid_kinetic_rate"],
        slip_dissipation=tv["slip_dissipation"],
        viscous_dissipation=tv["viscous_dissipation"],
        fluid_regularizer=tv["fluid_regularizer"],
        fluid_inertia=tv["fluid_inertia"],
        fluid_kinetic_rate=kt["fluid_kinetic_rate"],
        force_work_solid=tv["force_work_solid"],
        force_work_fluid=tv["force_work_fluid"],
        solid_window_rate=kt["solid_window_rate"],
        fluid_window_rate=kt["fluid_window_rate"],
        solid_force_bound=kt["solid_force_bound"],
        fluid_force_bound=kt["fluid_force_bound"],
        objective=res.objective,
        objective_warm=res.objective_warm,
        comparison_gap=res.objective - res.objective_warm,
    )


def _coupling_checks(prob: StepProblem, res: StepResult) -> dict:
    d, v = prob.split(res.x)
    itf = prob.interface
    ids = itf.node_ids
    tau = prob.cfg.dt_tau
    vi = np.column_stack([prob.IG @ v[:, 0], prob.IG @ v[:, 1]])
    jump = d[ids] / tau - vi
    normal = np.abs(np.sum(jump * itf.normals, axis=1))
    tang = np.sum(jump * itf.tangents, axis=1)
    w = itf.weights
    IGk, _ = prob.domain.interpolation_matrix(res.eta.positions[ids], search=2, strict=False)
    vk = np.column_stack([IGk @ v[:, 0], IGk @ v[:, 1]])
    defect = np.abs(np.sum((d[ids] / tau - vk) * itf.normals, axis=1))
    return {
        "normal_residual": float(normal.max()),
        "tangential_jump": float(np.sqrt(np.sum(w * tang**2) / np.sum(w))),
        "linearization_defect": float(defect.max()),
    }


def make_record(state: StepState, prob: StepProblem | None, res: StepResult | None, extras: dict | None) -> StepRecord:
    fm = state.flow_map if extras is None else extras["flow_map"]
    det = fm.det
    if res is None:
        v = state.v
        return StepRecord(
            k=state.k,
            t=state.t,
            eta=state.eta.positions.copy(),
            v=v.values.copy(),
            active=v.active.copy(),
            labels=state.cls.labels.copy(),
            pressure=np.zeros(v.active.shape),
            coupling_multipliers=np.zeros(state.interface.n_points),
            multiplier_norms={k: 0.0 for k in StepProblem.ROW_GROUPS},
            budget=None,
            interface=state.interface.points.copy(),
            flowmap_det=(float(det.min()), float(det.max())),
            solver={},
            checks={"separation": min_separation(state.interface, state.cls.container)},
        )
    checks = _coupling_checks(prob, res)
    checks.update(separation=extras["separation"], cn_residual=extras["cn_residual"], escaped_samples=extras["escaped"])
    return StepRecord(
        k=prob.k,
        t=prob.t1,
        eta=res.eta.positions.copy(),
        v=res.v.values.copy(),
        active=res.v.active.copy(),
        labels=prob.domain.cls.labels.copy(),
        pressure=res.pressure,
        coupling_multipliers=res.coupling_multipliers,
        multiplier_norms=res.multiplier_norms,
        budget=budget_from_problem(prob, res),
        interface=state.interface.points.copy(),
        flowmap_det=(float(det.min()), float(det.max())),
        solver={
            "iterations": res.iterations,
            "converged": res.converged,
            "feasibility": res.feasibility,
            "stationarity": res.stationarity,
            "min_det": res.min_det,
            "factorizations": res.info["factorizations"],
        },
        checks=checks,
    )


def run_simulation(cfg: StepConfig, model: Model, init: InitialData, n_steps: int | None = None, callback=None) -> Trajectory:
    """Run the scheme from ``init`` for ``n_steps`` (default ``t_end / tau``).

    Step errors end the run; the partial trajectory carries the reason.
    """
    state = initial_state(model, cfg, init)
    traj = Trajectory(cfg.dt_tau)
    traj.records.append(make_record(state, None, None, None))
    total = cfg.n_steps if n_steps is None else int(n_steps)
    for _ in range(total):
        try:
            new, res, prob, extras = step(state, model, cfg)
        except ContactImminent as exc:
            traj.abort_reason = f"ContactImminent: {exc}"
            log.info("run aborted: %s", exc)
            break
        except (LineSearchFailed, DegenerateJacobian, SampleEscaped) as exc:
            traj.abort_reason = f"{type(exc).__name__}: {exc}"
            log.warning("run aborted: %s", exc)
            break
        new_state = new
        rec = make_record(new_state, prob, res, extras)
        rec.interface = new_state.interface.points.copy()
        traj.records.append(rec)
        if callback is not None:
            callback(rec)
        state = new_state
    return traj
