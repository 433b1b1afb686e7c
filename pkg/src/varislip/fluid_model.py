"""Incompressible fluid on the active cells of a fixed background grid.

Velocities live at cell centers of Fluid and Cut cells. Cut-cell quadrature
weights are the clipped fluid areas. Cells whose fluid fraction is below a
threshold are merged into a neighbour and carry no unknowns.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .errors import InterpolationOutOfDomain, ShapeMismatch, ValidationError, VarislipError
from .geometry import SOLID, CellClassification, InterfaceGeometry
from .linalg import SPDSolver
from .stencils import LatticeOperators

MIN_FRACTION = 0.05


class SingularSystem(VarislipError):
    """The projection has no unknowns to act on."""


@dataclass(frozen=True)
class FluidGrid:
    """Axis-aligned container split into ``mx x my`` uniform cells."""

    x0: float = 0.0
    x1: float = 1.0
    y0: float = 0.0
    y1: float = 1.0
    mx: int = 32
    my: int = 32

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ShapeMismatch("container bounds must be increasing")
        if self.mx < 2 or self.my < 2:
            raise ShapeMismatch("fluid grid needs at least 2 cells per direction")

    @property
    def dx(self) -> float:
        return (self.x1 - self.x0) / self.mx

    @property
    def dy(self) -> float:
        return (self.y1 - self.y0) / self.my

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def centers(self) -> np.ndarray:
        """(mx, my, 2) cell-center coordinates."""
        i, j = np.meshgrid(np.arange(self.mx), np.arange(self.my), indexing="ij")
        return np.stack([self.x0 + (i + 0.5) * self.dx, self.y0 + (j + 0.5) * self.dy], axis=-1)


@dataclass(frozen=True)
class FluidParams:
    nu: float = 1.0
    rho_f: float = 1.0
    slip_coefficient: float = 1.0
    kappa: float = 0.0
    k0_order: int = 2

    def __post_init__(self):
        if not self.nu > 0:
            raise ValidationError("must be positive", key="nu")
        if not self.rho_f > 0:
            raise ValidationError("must be positive", key="rho_f")
        if self.slip_coefficient < 0:
            raise ValidationError("must be nonnegative", key="slip_coefficient")
        if self.kappa < 0:
            raise ValidationError("must be nonnegative", key="kappa")
        if self.k0_order < 1:
            raise ValidationError("must be at least 1", key="k0_order")


class FluidDomain:
    """Active-cell bookkeeping and operators derived from a classification.

    Attributes
    ----------
    active : (mx, my) bool mask of cells carrying unknowns.
    cells : (n, 2) lattice indices of active cells.
    weights : (n,) quadrature weights (clipped areas plus merged slivers).
    centers : (n, 2) cell centers of active cells.
    """

    def __init__(self, cls: CellClassification, min_fraction: float = MIN_FRACTION):
        grid = cls.container
        self.grid = grid
        self.cls = cls
        frac = cls.fraction
        active = frac >= min_fraction
        area = frac * grid.cell_area
        wmap = np.where(active, area, 0.0)
        sliver = (frac > 0) & ~active
        for i, j in np.argwhere(sliver):
            best, bij = -1.0, None
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)):
                a, b = i + di, j + dj
                if 0 <= a < grid.mx and 0 <= b < grid.my and active[a, b] and frac[a, b] > best:
                    best, bij = frac[a, b], (a, b)
            if bij is not None:
                wmap[bij] += area[i, j]
        self.active = active
        self.cells = np.argwhere(active)
        self.n = len(self.cells)
        if self.n == 0:
            raise SingularSystem("no active fluid cells")
        self.index = -np.ones(active.shape, dtype=np.int64)
        self.index[active] = np.arange(self.n)
        self.weights = wmap[active]
        self.centers = grid.centers()[active]
        self.ops = LatticeOperators(active, grid.dx, grid.dy)
        self.Dx = self.ops.mixed(1, 0)
        self.Dy = self.ops.mixed(0, 1)
        self._cache = {}

    # -- operators ---------------------------------------------------------
    def wall_rows(self):
        """(cell, component, sign) for every wall-adjacent active cell and wall side."""
        g = self.grid
        rows = []
        i, j = self.cells[:, 0], self.cells[:, 1]
        for mask, comp, sign in (
            (i == 0, 0, -1.0),
            (i == g.mx - 1, 0, 1.0),
            (j == 0, 1, -1.0),
            (j == g.my - 1, 1, 1.0),
        ):
            for c in np.nonzero(mask)[0]:
                rows.append((int(c), comp, sign))
        rows.sort()
        return rows

    def divergence_matrix(self) -> sp.csr_matrix:
        return sp.hstack([self.Dx, self.Dy], format="csr")

    def wall_matrix(self) -> sp.csr_matrix:
        rows = self.wall_rows()
        r = np.arange(len(rows))
        c = np.array([cell + comp * self.n for cell, comp, _ in rows], dtype=np.int64)
        v = np.array([s for _, _, s in rows])
        return sp.csr_matrix((v, (r, c)), shape=(len(rows), 2 * self.n))

    def constraint_matrix(self) -> sp.csr_matrix:
        """Divergence rows followed by wall-impermeability rows."""
        if "A" not in self._cache:
            self._cache["A"] = sp.vstack([self.divergence_matrix(), self.wall_matrix()], format="csr")
        return self._cache["A"]

    def viscous_matrix(self) -> sp.csr_matrix:
        """``H`` with ``v^T H v = sum w |eps v|^2`` on flat active velocities."""
        if "visc" not in self._cache:
            W = sp.diags(self.weights)
            Dx, Dy = self.Dx, self.Dy
            xx = Dx.T @ W @ Dx + 0.5 * (Dy.T @ W @ Dy)
            yy = Dy.T @ W @ Dy + 0.5 * (Dx.T @ W @ Dx)
            xy = 0.5 * (Dy.T @ W @ Dx)
            self._cache["visc"] = sp.bmat([[xx, xy], [xy.T, yy]], format="csr")
        return self._cache["visc"]

    def regularizer_matrix(self, order: int) -> sp.csr_matrix:
        """``K`` with ``v^T K v = sum w |D^order v|^2`` on flat active velocities."""
        key = ("reg", order)
        if key not in self._cache:
            K = self.ops.seminorm_matrix(order, self.weights)
            self._cache[key] = sp.block_diag([K, K], format="csr")
        return self._cache[key]

    def interpolation_matrix(self, points, search: int = 2, strict: bool = True):
        """Bilinear interpolation from active cell centers to ``points``.

        Returns a sparse ``(P, n)`` matrix and the per-point status array
        (0 bilinear, 1 nearest-cell fallback, 2 no active cell found).
        """
        g = self.grid
        idx, wts, status = _kernels.bilinear_stencil(points, g.x0, g.y0, g.dx, g.dy, self.active, search)
        if strict and np.any(status == 2):
            bad = np.nonzero(status == 2)[0]
            raise InterpolationOutOfDomain(f"{len(bad)} point(s) have no active fluid cell nearby", points=bad)
        P = len(idx)
        flat = self.index.ravel()
        used = idx >= 0
        rows = np.repeat(np.arange(P), 4).reshape(P, 4)[used]
        cols = flat[idx[used]]
        M = sp.csr_matrix((wts[used], (rows, cols)), shape=(P, self.n))
        return M, status


def fluid_domain(cls: CellClassification, min_fraction: float = MIN_FRACTION) -> FluidDomain:
    """FluidDomain cached on the classification object."""
    key = f"_domain_{min_fraction!r}"
    dom = cls.__dict__.get(key)
    if dom is None:
        dom = FluidDomain(cls, min_fraction)
        cls.__dict__[key] = dom
    return dom


class VelocityField:
    """Cell-centred velocity with zero extension outside the active set."""

    def __init__(self, grid: FluidGrid, values, active, time: float = 0.0):
        vals = np.array(values, dtype=float)
        active = np.asarray(active, dtype=bool)
        if vals.shape != (grid.mx, grid.my, 2) or active.shape != (grid.mx, grid.my):
            raise ShapeMismatch("velocity field does not match the fluid grid")
        vals[~active] = 0.0
        self.grid = grid
        self.values = vals
        self.active = active
        self.time = float(time)

    @classmethod
    def from_active(cls, domain: FluidDomain, vals, time: float = 0.0) -> "VelocityField":
        """Build from (n, 2) active values or a flat component-major vector."""
        vals = np.asarray(vals, dtype=float)
        if vals.ndim == 1:
            vals = vals.reshape(2, -1).T
        full = np.zeros((domain.grid.mx, domain.grid.my, 2))
        full[domain.active] = vals
        return cls(domain.grid, full, domain.active, time)

    @classmethod
    def from_function(cls, domain: FluidDomain, fn, time: float = 0.0) -> "VelocityField":
        return cls.from_active(domain, np.asarray(fn(domain.centers), dtype=float), time)

    def active_values(self, domain: FluidDomain | None = None) -> np.ndarray:
        mask = self.active if domain is None else domain.active
        return self.values[mask]

    def flat(self, domain: FluidDomain) -> np.ndarray:
        v = self.values[domain.active]
        return np.concatenate([v[:, 0], v[:, 1]])


def _domain_for(v: VelocityField, cls: CellClassification | None) -> FluidDomain:
    if cls is None:
        raise ShapeMismatch("a classification is required")
    dom = fluid_domain(cls)
    if not np.array_equal(dom.active, v.active):
        raise ShapeMismatch("velocity active mask does not match the classification")
    return dom


def symmetric_gradient(v: VelocityField, cls: CellClassification) -> np.ndarray:
    """(mx, my, 2, 2) symmetric gradient, zero on inactive cells."""
    dom = _domain_for(v, cls)
    u = v.values[dom.active]
    gx = np.column_stack([dom.Dx @ u[:, 0], dom.Dx @ u[:, 1]])
    gy = np.column_stack([dom.Dy @ u[:, 0], dom.Dy @ u[:, 1]])
    eps = np.empty((dom.n, 2, 2))
    eps[:, 0, 0] = gx[:, 0]
    eps[:, 1, 1] = gy[:, 1]
    eps[:, 0, 1] = eps[:, 1, 0] = 0.5 * (gy[:, 0] + gx[:, 1])
    out = np.zeros((v.grid.mx, v.grid.my, 2, 2))
    out[dom.active] = eps
    return out


def divergence(v: VelocityField, cls: CellClassification) -> np.ndarray:
    """(mx, my) discrete divergence, zero on inactive cells."""
    dom = _domain_for(v, cls)
    out = np.zeros((v.grid.mx, v.grid.my))
    out[dom.active] = dom.divergence_matrix() @ v.flat(dom)
    return out


def fluid_dissipation_form(v: VelocityField, cls: CellClassification, params: FluidParams) -> float:
    """``nu sum w |eps v|^2 + kappa sum w |D^k0 v|^2`` over active cells."""
    dom = _domain_for(v, cls)
    eps = symmetric_gradient(v, cls)[dom.active]
    w = dom.weights
    val = params.nu * float(np.sum(w * np.sum(eps * eps, axis=(1, 2))))
    if params.kappa > 0:
        u = v.values[dom.active]
        k = params.k0_order
        reg = 0.0
        for j in range(k + 1):
            d = dom.ops.mixed(k - j, j) @ u
            reg += comb(k, j) * float(np.sum(w * np.sum(d * d, axis=1)))
        val += params.kappa * reg
    return val


def evaluate(v: VelocityField, points, search: int = 2) -> np.ndarray:
    """Bilinear evaluation of ``v`` at points from its active cell centers.

    Raises
    ------
    InterpolationOutOfDomain
        If a point has no active cell within the search window.
    """
    g = v.grid
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    idx, wts, status = _kernels.bilinear_stencil(pts, g.x0, g.y0, g.dx, g.dy, v.active, search)
    if np.any(status == 2):
        bad = np.nonzero(status == 2)[0]
        raise InterpolationOutOfDomain(f"{len(bad)} point(s) have no active fluid cell nearby", points=bad)
    flat = v.values.reshape(-1, 2)
    vals = flat[np.where(idx >= 0, idx, 0)] * np.where(idx >= 0, wts, 0.0)[..., None]
    return vals.sum(axis=1)


def slip_boundary_form(
    v: VelocityField, interface: InterfaceGeometry, solid_rate_on_boundary, params: FluidParams
) -> float:
    """``(a/2) sum_i w_i |rate_i - v(x_i)|^2`` over interface points."""
    rate = np.asarray(solid_rate_on_boundary, dtype=float)
    if rate.shape != interface.points.shape:
        raise ShapeMismatch("solid rate must have one 2-vector per interface point")
    if params.slip_coefficient == 0.0:
        return 0.0
    jump = rate - evaluate(v, interface.points)
    return 0.5 * params.slip_coefficient * float(np.sum(interface.weights * np.sum(jump * jump, axis=1)))


def project_divergence_free(v: VelocityField, cls: CellClassification, tol: float = 1e-12, max_iter: int = 50) -> VelocityField:
    """Orthogonal projection onto discretely divergence-free, wall-tangent fields.

    Solves ``(A M^-1 A^T + eps I) phi = A u`` with iterated refinement, where
    ``A`` stacks divergence and wall rows and ``M`` is the cell-weight mass.
    """
    dom = _domain_for(v, cls)
    A = dom.constraint_matrix()
    Minv = 1.0 / np.concatenate([dom.weights, dom.weights])
    S = (A @ sp.diags(Minv) @ A.T).tocsc()
    eps = 1e-10 * float(S.diagonal().mean())
    solver = SPDSolver(S + eps * sp.identity(S.shape[0], format="csc"))
    u = v.flat(dom)
    scale = max(float(np.abs(u).max()), 1e-300)
    for _ in range(max_iter):
        r = A @ u
        if np.abs(r).max() <= tol * scale / min(v.grid.dx, v.grid.dy):
            break
        u = u - Minv * (A.T @ solver.solve(r))
    return VelocityField.from_active(dom, u, v.time)


def rigid_defect(v: VelocityField, cls: CellClassification) -> float:
    """Weighted L2 distance of ``v`` to the best-fitting rigid motion."""
    dom = _domain_for(v, cls)
    c = dom.centers
    w = dom.weights
    u = v.values[dom.active]
    B = np.zeros((2 * dom.n, 3))
    B[: dom.n, 0] = 1.0
    B[dom.n :, 1] = 1.0
    B[: dom.n, 2] = -c[:, 1]
    B[dom.n :, 2] = c[:, 0]
    sw = np.sqrt(np.concatenate([w, w]))
    y = np.concatenate([u[:, 0], u[:, 1]])
    coef, *_ = np.linalg.lstsq(B * sw[:, None], y * sw, rcond=None)
    r = (y - B @ coef) * sw
    return float(np.sqrt(r @ r))
