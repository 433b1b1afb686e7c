"""Verification layer: energy budgets, coupling, transport and flow-map checks.

Budgets are re-assembled here from stored states with the module-level
energy, dissipation and slip forms, never from the stepper's assembled
matrices. Only the domain bookkeeping (classification, flow map and delay
windows) is replayed through the stepper's state update.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .budget import BUDGET_SCHEMA_VERSION, EnergyBudget
from .fluid_model import VelocityField, evaluate, fluid_dissipation_form, slip_boundary_form
from .geometry import InterfaceGeometry, build_interface
from .solid_model import DeformationField, MaterialParams, RegularizerConfig, eval_dissipation, eval_energy, regularizer_value

__all__ = [
    "BUDGET_SCHEMA_VERSION",
    "EnergyBudget",
    "CheckResult",
    "VerificationReport",
    "EnergyChainReport",
    "initial_energy",
    "check_energy_chain",
    "reassemble_budgets",
    "compare_budgets",
    "check_comparison",
    "check_transport",
    "check_coupling",
    "AnalyticDeformation",
    "strong_form_solid_residual",
    "flow_map_report",
]


# -- reports --------------------------------------------------------------------
@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def as_dict(self):
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "value": float(self.value),
            "threshold": float(self.threshold),
            "detail": self.detail,
        }


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)

    def add(self, check: CheckResult):
        self.checks.append(check)
        return check

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def as_dict(self):
        return {"passed": self.passed, "checks": [c.as_dict() for c in self.checks]}

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            tag = "PASS" if c.passed else "FAIL"
            lines.append(f"{tag} {c.name}: {c.value:.10g} (threshold {c.threshold:.10g}) {c.detail}".rstrip())
        return "\n".join(lines)


# -- energy chain ---------------------------------------------------------------
@dataclass
class EnergyChainReport:
    """Summed estimate: ``left[k] <= right[k] + tolerance[k]``."""

    left: np.ndarray
    right: np.ndarray
    slack: np.ndarray
    tolerance: np.ndarray
    passed: bool

    @property
    def worst_slack(self) -> float:
        return float(np.min(self.slack)) if len(self.slack) else 0.0


def initial_energy(eta0: DeformationField, mat: MaterialParams, reg: RegularizerConfig) -> float:
    """Stored energy plus weighted regularizer of the initial state."""
    return float(eval_energy(eta0, mat, reg).total)


def check_energy_chain(budgets, init_energy: float, tol_per_step: float = 1e-9, scale: float | None = None) -> EnergyChainReport:
    """Check the summed discrete energy estimate step by step.

    The left side at step ``k`` is the new stored energy plus all dissipation
    and kinetic-rate terms up to ``k``. The right side is the initial energy
    plus all window-rate and force bounds up to ``k``. The allowed deficit
    grows as ``k * tol_per_step * scale`` with ``scale`` the largest
    objective magnitude when not given.
    """
    budgets = list(budgets)
    if not budgets:
        z = np.zeros(0)
        return EnergyChainReport(z, z, z, z, True)
    if scale is None:
        scale = max(max(abs(b.objective) for b in budgets), 1.0e-300)
    lrate = np.cumsum([b.left_rate_terms for b in budgets])
    rrate = np.cumsum([b.right_rate_terms for b in budgets])
    left = np.array([b.elastic + b.regularizer for b in budgets]) + lrate
    right = init_energy + rrate
    slack = right - left
    ks = np.arange(1, len(budgets) + 1)
    tol = ks * tol_per_step * scale
    return EnergyChainReport(left, right, slack, tol, bool(np.all(slack >= -tol)))


def check_comparison(budgets, tol_rel: float = 1e-9) -> CheckResult:
    """Largest ``comparison_gap / |J|`` over the run."""
    worst = max((b.comparison_gap / max(abs(b.objective), 1e-300) for b in budgets), default=0.0)
    return CheckResult("comparison_inequality", worst <= tol_rel, worst, tol_rel, "max gap / |J|")


def _step_budget(prob, eta_k: DeformationField, v_k: VelocityField) -> EnergyBudget:
    """Budget of one step from module-level forms evaluated on the states."""
    model, cfg = prob.model, prob.cfg
    mat, reg, fp = prob.mat, prob.reg, prob.fparams
    tau, h = cfg.dt_tau, cfg.h_delay
    grid = model.solid
    W = grid.weights
    eta_prev = prob.eta_prev
    b = (eta_k.positions - eta_prev.positions) / tau
    dom = prob.domain
    a = dom.weights
    vact = v_k.values[dom.active]
    rs, rf = mat.rho_s, fp.rho_f

    e = eval_energy(eta_k, mat, reg)
    e_prev = eval_energy(eta_prev, mat, reg)
    solid_diss = tau * eval_dissipation(eta_prev, b, mat, RegularizerConfig(0.0, 1.0, reg.order))
    solid_reg = tau * cfg.kappa * regularizer_value(grid, b, model.reg_order) if cfg.kappa > 0 else 0.0
    w_s, w_f = prob.w_s, prob.w_f
    solid_inertia = rs * tau / (2 * h) * float(np.sum(W * np.sum((b - w_s) ** 2, axis=1)))
    f_s = cfg.force.step_average(prob.t0, prob.t1, eta_prev.positions)
    work_s = -rs * tau * float(np.sum(W * np.sum(f_s * b, axis=1)))

    itf = prob.interface
    slip = tau * slip_boundary_form(v_k, itf, b[itf.node_ids], fp)
    visc_form = fluid_dissipation_form(v_k, dom.cls, replace(fp, kappa=0.0))
    viscous = 0.5 * tau * visc_form
    if fp.kappa > 0:
        fluid_reg = 0.5 * tau * (fluid_dissipation_form(v_k, dom.cls, fp) - visc_form)
    else:
        fluid_reg = 0.0
    fm = prob.state.flow_map
    u = _evaluate_lenient(v_k, fm.positions)
    fluid_inertia = rf * tau / (2 * h) * float(np.sum(fm.weights * np.sum((u - w_f) ** 2, axis=1)))
    f_f = cfg.force.step_average(prob.t0, prob.t1, dom.centers)
    work_f = -tau * rf * float(np.sum(a * np.sum(f_f * vact, axis=1)))

    nb = float(np.sum(W * np.sum(b**2, axis=1)))
    nu_ = float(np.sum(fm.weights * np.sum(u**2, axis=1)))
    nv = float(np.sum(a * np.sum(vact**2, axis=1)))
    objective = (
        e.total + solid_diss + solid_reg + solid_inertia + work_s + slip + viscous + fluid_reg + fluid_inertia + work_f
    )
    warm = (
        e_prev.total
        + rs * tau / (2 * h) * float(np.sum(W * np.sum(w_s**2, axis=1)))
        + rf * tau / (2 * h) * float(np.sum(fm.weights * np.sum(w_f**2, axis=1)))
    )
    return EnergyBudget(
        step=prob.k,
        elastic=e.strain_term + e.det_term + e.grad2_term,
        regularizer=e.regularizer_term,
        solid_dissipation=solid_diss,
        solid_regularizer_rate=solid_reg,
        solid_inertia=solid_inertia,
        solid_kinetic_rate=rs * tau / (8 * h) * nb,
        slip_dissipation=slip,
        viscous_dissipation=viscous,
        fluid_regularizer=fluid_reg,
        fluid_inertia=fluid_inertia,
        fluid_kinetic_rate=rf * tau / (4 * h) * nu_ - rf * tau / (8 * h) * nv,
        force_work_solid=work_s,
        force_work_fluid=work_f,
        solid_window_rate=rs * tau / h * float(np.sum(W * np.sum(w_s**2, axis=1))),
        fluid_window_rate=rf * tau / h * float(np.sum(fm.weights * np.sum(w_f**2, axis=1))),
        solid_force_bound=2 * rs * tau * h * float(np.sum(W * np.sum(f_s**2, axis=1))),
        fluid_force_bound=2 * rf * tau * h * float(np.sum(a * np.sum(f_f**2, axis=1))),
        objective=objective,
        objective_warm=warm,
        comparison_gap=objective - warm,
    )


def _evaluate_lenient(v: VelocityField, points) -> np.ndarray:
    g = v.grid
    idx, wts, status = _kernels.bilinear_stencil(np.asarray(points, dtype=float), g.x0, g.y0, g.dx, g.dy, v.active, 2)
    flat = v.values.reshape(-1, 2)
    vals = flat[np.where(idx >= 0, idx, 0)] * np.where(idx >= 0, wts, 0.0)[..., None]
    return vals.sum(axis=1)


def reassemble_budgets(model, cfg, init, states) -> list:
    """Recompute every step budget from the stored states.

    Parameters
    ----------
    model, cfg, init : the run's model, step configuration and initial data.
    states : sequence of ``(eta_positions, velocity_values)`` for steps
        ``1..K`` (velocity values of shape ``(mx, my, 2)``).
    """
    from .stepper import StepProblem, advance_state, initial_state

    state = initial_state(model, cfg, init)
    out = []
    for eta_pos, v_vals in states:
        prob = StepProblem(state, model, cfg)
        eta_k = DeformationField(model.solid, eta_pos)
        v_k = VelocityField(model.fluid_grid, v_vals, prob.domain.active, prob.t1)
        out.append(_step_budget(prob, eta_k, v_k))
        d = eta_k.positions - prob.eta_prev.positions
        va = v_k.values[prob.domain.active]
        x = np.concatenate([d[:, 0], d[:, 1], va[:, 0], va[:, 1]])
        state, _ = advance_state(state, prob, x, build_interface(eta_k), model, cfg)
    return out


def compare_budgets(a, b, rel_tol: float = 1e-10) -> CheckResult:
    """Largest entrywise difference of two budget series, relative to the objective scale."""
    a, b = list(a), list(b)
    if len(a) != len(b):
        return CheckResult("budget_reassembly", False, np.inf, rel_tol, "length mismatch")
    worst = 0.0
    names = [n for n in EnergyBudget.field_names() if n != "step"]
    for x, y in zip(a, b):
        scale = max(abs(x.objective), abs(x.objective_warm), 1e-300)
        for n in names:
            worst = max(worst, abs(getattr(x, n) - getattr(y, n)) / scale)
    return CheckResult("budget_reassembly", worst <= rel_tol, worst, rel_tol, "max entry difference / |J|")


# -- transport ------------------------------------------------------------------
@dataclass
class TransportReport:
    times: np.ndarray
    volume_rate: np.ndarray
    boundary_rate: np.ndarray
    reference: np.ndarray | None
    max_relative_error: float


def _region_integral(cls, u, t, region):
    frac = cls.fraction if region == "fluid" else 1.0 - cls.fraction
    c = cls.centroid if region == "fluid" else cls.container.centers()
    vals = u(t, c.reshape(-1, 2)).reshape(frac.shape)
    return float(np.sum(frac * cls.container.cell_area * vals))


def check_transport(
    classifications, times, u, interfaces, normal_velocity, u_t=None, reference=None, region: str = "fluid"
) -> TransportReport:
    """Compare ``d/dt int_{Omega(t)} u`` with volume plus boundary integrals.

    Parameters
    ----------
    classifications : CellClassification per time.
    u : callable ``u(t, points) -> (P,)``.
    interfaces : InterfaceGeometry per time (the moving part of the boundary).
    normal_velocity : per time, boundary velocity dotted with the outward
        normal of ``Omega(t)`` at the interface points.
    u_t : optional callable for the time derivative of ``u`` (zero if omitted).
    reference : optional callable ``t -> exact rate``.
    region : ``"fluid"`` or ``"solid"``, the part of the container that is ``Omega(t)``.

    The difference quotient is centered at interior times. The error is
    measured against ``reference`` when given, else between the quotient and
    the volume-plus-boundary side.
    """
    if region not in ("fluid", "solid"):
        raise ValueError("region must be 'fluid' or 'solid'")
    times = np.asarray(times, dtype=float)
    I = np.array([_region_integral(c, u, t, region) for c, t in zip(classifications, times)])
    ti = times[1:-1]
    dq = (I[2:] - I[:-2]) / (times[2:] - times[:-2])
    rhs = np.zeros(len(ti))
    for j, k in enumerate(range(1, len(times) - 1)):
        t = times[k]
        itf = interfaces[k]
        bnd = float(np.sum(itf.weights * u(t, itf.points) * np.asarray(normal_velocity[k])))
        vol = _region_integral(classifications[k], u_t, t, region) if u_t is not None else 0.0
        rhs[j] = vol + bnd
    if reference is not None:
        ref = np.array([reference(t) for t in ti])
        err = max(np.max(np.abs(dq - ref) / np.abs(ref)), np.max(np.abs(rhs - ref) / np.abs(ref)))
    else:
        ref = None
        scale = np.maximum(np.abs(rhs), 1e-300)
        err = float(np.max(np.abs(dq - rhs) / scale))
    return TransportReport(ti, dq, rhs, ref, float(err))


# -- coupling -------------------------------------------------------------------
def check_coupling(eta_k: DeformationField, eta_prev: DeformationField, v_k: VelocityField, interface: InterfaceGeometry, dt: float):
    """Normal and tangential parts of ``(eta_k - eta_prev)/dt - v_k`` at interface points.

    ``interface`` is the interface of ``eta_prev``. Returns the max normal
    residual and the weighted RMS tangential jump.
    """
    ids = interface.node_ids
    rate = (eta_k.positions[ids] - eta_prev.positions[ids]) / dt
    jump = rate - evaluate(v_k, interface.points)
    normal = np.abs(np.sum(jump * interface.normals, axis=1))
    tang = np.sum(jump * interface.tangents, axis=1)
    w = interface.weights
    return float(normal.max()), float(np.sqrt(np.sum(w * tang**2) / np.sum(w)))


def linearization_defect(eta_k: DeformationField, eta_prev: DeformationField, v_k: VelocityField, interface: InterfaceGeometry, dt: float) -> float:
    """Coupling residual with ``v_k`` evaluated at the new interface positions."""
    ids = interface.node_ids
    rate = (eta_k.positions[ids] - eta_prev.positions[ids]) / dt
    vk = _evaluate_lenient(v_k, eta_k.positions[ids])
    return float(np.max(np.abs(np.sum((rate - vk) * interface.normals, axis=1))))


# -- strong form ----------------------------------------------------------------
@dataclass
class AnalyticDeformation:
    """Smooth deformation ``eta(t, X)`` given by pointwise callables.

    ``grad(t, X)`` returns (P, 2, 2), ``hess(t, X)`` returns (P, 2, 3) with
    the last axis (xx, xy, yy), ``grad_t`` the time derivative of the
    gradient and ``accel`` the second time derivative of ``eta``.
    """

    grad: object
    hess: object
    grad_t: object
    accel: object

    @classmethod
    def identity(cls):
        eye = lambda t, X: np.tile(np.eye(2), (len(X), 1, 1))
        zero3 = lambda t, X: np.zeros((len(X), 2, 3))
        zero22 = lambda t, X: np.zeros((len(X), 2, 2))
        zero2 = lambda t, X: np.zeros((len(X), 2))
        return cls(eye, zero3, zero22, zero2)

    @classmethod
    def translation(cls, c):
        """``X + t c``: same spatial derivatives as the identity."""
        del c
        return cls.identity()

    @classmethod
    def manufactured(cls, amplitude: float = 0.02):
        """``X + A sin(t) (sin(pi X1) sin(pi X2), 0)``."""
        A = amplitude
        pi = np.pi

        def parts(X):
            s1, c1 = np.sin(pi * X[:, 0]), np.cos(pi * X[:, 0])
            s2, c2 = np.sin(pi * X[:, 1]), np.cos(pi * X[:, 1])
            return s1, c1, s2, c2

        def grad(t, X):
            s1, c1, s2, c2 = parts(X)
            F = np.tile(np.eye(2), (len(X), 1, 1))
            F[:, 0, 0] += A * np.sin(t) * pi * c1 * s2
            F[:, 0, 1] += A * np.sin(t) * pi * s1 * c2
            return F

        def hess(t, X):
            s1, c1, s2, c2 = parts(X)
            G = np.zeros((len(X), 2, 3))
            a = A * np.sin(t) * pi * pi
            G[:, 0, 0] = -a * s1 * s2
            G[:, 0, 1] = a * c1 * c2
            G[:, 0, 2] = -a * s1 * s2
            return G

        def grad_t(t, X):
            s1, c1, s2, c2 = parts(X)
            D = np.zeros((len(X), 2, 2))
            D[:, 0, 0] = A * np.cos(t) * pi * c1 * s2
            D[:, 0, 1] = A * np.cos(t) * pi * s1 * c2
            return D

        def accel(t, X):
            s1, _, s2, _ = parts(X)
            out = np.zeros((len(X), 2))
            out[:, 0] = -A * np.sin(t) * s1 * s2
            return out

        return cls(grad, hess, grad_t, accel)


def _stresses(eta: AnalyticDeformation, mat: MaterialParams, t, X):
    """First-gradient stress (P, 2, 2) and symmetric hyperstress (P, 2, 2, 2)."""
    F = eta.grad(t, X)
    G = eta.hess(t, X)
    _, _, _, dF, dG = _kernels.model_energy_pointwise(
        F, G, mat.elastic_tensor, mat.det_exponent, mat.grad2_exponent, mat.det_weight, mat.grad2_weight
    )
    Q = np.empty((len(X), 2, 2, 2))
    Q[:, :, 0, 0] = dG[:, :, 0]
    Q[:, :, 0, 1] = Q[:, :, 1, 0] = 0.5 * dG[:, :, 1]
    Q[:, :, 1, 1] = dG[:, :, 2]
    # viscous stress d r / d Fdot = 4 F (Fdot^T F + F^T Fdot)
    Fd = eta.grad_t(t, X)
    M = np.einsum("pai,paj->pij", Fd, F)
    M = M + np.transpose(M, (0, 2, 1))
    dF = dF + 4.0 * np.einsum("pai,pij->paj", F, M)
    return dF, Q


def strong_form_solid_residual(
    eta: AnalyticDeformation, mat: MaterialParams, t: float = 0.0, n: int = 32, force=None, bounds=(0.0, 1.0, 0.0, 1.0)
) -> np.ndarray:
    """Bulk solid operator residual on an ``n x n`` interior grid.

    Evaluates ``rho_s eta_tt - div P + div^2 Q - rho_s f`` where ``P`` sums
    the elastic and viscous first-gradient stresses and ``Q`` is the
    hyperstress. Stresses are exact pointwise; ``div`` and ``div^2`` are
    centered differences with step equal to the grid spacing.

    Returns
    -------
    (n, n, 2) residual at the points ``x0 + (i + 1/2) hx``.
    """
    x0, x1, y0, y1 = bounds
    hx, hy = (x1 - x0) / n, (y1 - y0) / n
    xs = x0 + (np.arange(n) + 0.5) * hx
    ys = y0 + (np.arange(n) + 0.5) * hy
    Xg, Yg = np.meshgrid(xs, ys, indexing="ij")
    X = np.column_stack([Xg.ravel(), Yg.ravel()])
    hv = (np.array([hx, 0.0]), np.array([0.0, hy]))
    hs = (hx, hy)

    def S(dx):
        return _stresses(eta, mat, t, X + dx)

    P0, Q0 = S(0.0)
    shifted = {}
    for j in range(2):
        shifted[(j, 1)] = S(hv[j])
        shifted[(j, -1)] = S(-hv[j])
    divP = np.zeros((len(X), 2))
    for j in range(2):
        divP += (shifted[(j, 1)][0][:, :, j] - shifted[(j, -1)][0][:, :, j]) / (2 * hs[j])
    div2Q = np.zeros((len(X), 2))
    for j in range(2):
        div2Q += (shifted[(j, 1)][1][:, :, j, j] - 2 * Q0[:, :, j, j] + shifted[(j, -1)][1][:, :, j, j]) / hs[j] ** 2
    d = hv[0] + hv[1]
    e = hv[0] - hv[1]
    Qpp, Qmm = S(d)[1], S(-d)[1]
    Qpm, Qmp = S(e)[1], S(-e)[1]
    div2Q += 2 * (Qpp[:, :, 0, 1] - Qpm[:, :, 0, 1] - Qmp[:, :, 0, 1] + Qmm[:, :, 0, 1]) / (4 * hx * hy)
    res = mat.rho_s * eta.accel(t, X) - divP + div2Q
    if force is not None:
        res = res - mat.rho_s * np.asarray(force(t, X), dtype=float).reshape(-1, 2)
    return res.reshape(n, n, 2)


# -- flow map -------------------------------------------------------------------
def flow_map_report(fm) -> tuple:
    """``(min det, max det, max spectral norm)`` of the flow-map Jacobians."""
    J = fm.jacobians
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    lip = np.linalg.norm(J, ord=2, axis=(1, 2))
    return float(det.min()), float(det.max()), float(lip.max())
