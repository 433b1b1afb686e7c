"""Second-gradient viscoelastic solid on a structured reference grid.

The reference body Q is the set of masked nodes of a tensor grid. Its
boundary is the traced outer contour of the mask. Densities are evaluated
at nodes and summed with nodal quadrature weights, so every gradient here is
the exact derivative of the discrete functional.

Vector fields on the grid are (N, 2) arrays. Flattened vectors are
component-major: ``[u_x(0..N-1), u_y(0..N-1)]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import shapely

from . import _kernels
from .errors import DegenerateJacobian, InvalidMaterial, NonSimpleBoundary, ShapeMismatch
from .stencils import LatticeOperators

# Moore neighbourhood in clockwise order (y axis up), starting west.
_MOORE = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def trace_boundary(mask: np.ndarray) -> np.ndarray:
    """Outer contour of a node mask as a counter-clockwise list of (i, j).

    Raises
    ------
    NonSimpleBoundary
        If the contour visits a node twice (one-node-wide necks or spurs).
    """
    mask = np.asarray(mask, dtype=bool)
    nx, ny = mask.shape
    ii, jj = np.nonzero(mask)
    if len(ii) == 0:
        raise NonSimpleBoundary("empty mask")
    jmin = jj.min()
    s = (int(ii[jj == jmin].min()), int(jmin))

    def inside(p):
        return 0 <= p[0] < nx and 0 <= p[1] < ny and mask[p]

    p = s
    back = 6  # entered from below
    contour = [s]
    for _ in range(8 * mask.size + 8):
        found = False
        for step in range(1, 9):
            d = (back + step) % 8
            c = (p[0] + _MOORE[d][0], p[1] + _MOORE[d][1])
            if inside(c):
                prev = (back + step - 1) % 8
                b = (p[0] + _MOORE[prev][0], p[1] + _MOORE[prev][1])
                p = c
                back = _MOORE.index((b[0] - c[0], b[1] - c[1]))
                found = True
                break
        if not found or p == s:
            break
        contour.append(p)
    if len(set(contour)) != len(contour):
        raise NonSimpleBoundary("boundary contour visits a node twice")
    pad = np.pad(mask, 1)
    edge = mask & ~(pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:])
    if int(edge.sum()) > len(set(contour) & set(map(tuple, np.argwhere(edge)))):
        raise NonSimpleBoundary("mask boundary is not a single simple contour")
    pts = np.asarray(contour, dtype=float)
    area2 = np.sum(pts[:, 0] * np.roll(pts[:, 1], -1) - np.roll(pts[:, 0], -1) * pts[:, 1])
    if area2 < 0:
        contour = contour[::-1]
    return np.asarray(contour, dtype=np.int64)


@dataclass(eq=False)
class SolidGrid:
    """Structured node grid over the reference body Q.

    Parameters
    ----------
    nx, ny : node counts of the bounding tensor grid.
    hx, hy : node spacing.
    origin : physical coordinates of node (0, 0).
    node_mask : (nx, ny) bool array of nodes belonging to Q.
    """

    nx: int
    ny: int
    hx: float
    hy: float
    origin: tuple = (0.0, 0.0)
    node_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ShapeMismatch("solid grid needs at least 4 nodes per direction")
        if not (self.hx > 0 and self.hy > 0):
            raise ShapeMismatch("grid spacing must be positive")
        if self.node_mask is None:
            self.node_mask = np.ones((self.nx, self.ny), dtype=bool)
        self.node_mask = np.asarray(self.node_mask, dtype=bool)
        if self.node_mask.shape != (self.nx, self.ny):
            raise ShapeMismatch("node_mask shape does not match (nx, ny)")
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        ij = np.argwhere(self.node_mask)
        self.node_ij = ij
        self.n_nodes = len(ij)
        self.index = -np.ones((self.nx, self.ny), dtype=np.int64)
        self.index[ij[:, 0], ij[:, 1]] = np.arange(self.n_nodes)
        self.reference_positions = np.column_stack(
            [self.origin[0] + ij[:, 0] * self.hx, self.origin[1] + ij[:, 1] * self.hy]
        )
        contour = trace_boundary(self.node_mask)
        self.boundary_nodes = self.index[contour[:, 0], contour[:, 1]]
        self.boundary_mask = np.zeros(self.n_nodes, dtype=bool)
        self.boundary_mask[self.boundary_nodes] = True
        P = self.reference_positions[self.boundary_nodes]
        seg = np.roll(P, -1, axis=0) - P
        self.segment_length = np.hypot(seg[:, 0], seg[:, 1])
        t = seg / self.segment_length[:, None]
        # inward normals of a CCW polygon: fluid -> solid orientation
        self.segment_normal = np.column_stack([-t[:, 1], t[:, 0]])
        nn = self.segment_normal + np.roll(self.segment_normal, 1, axis=0)
        self.reference_normal = nn / np.linalg.norm(nn, axis=1)[:, None]
        self.ops = LatticeOperators(self.node_mask, self.hx, self.hy)
        self.weights = self._quadrature_weights(P)
        self.reference_area = float(shapely.area(shapely.Polygon(P)))

    @classmethod
    def rectangle(cls, nx, ny, width=1.0, height=1.0, origin=(0.0, 0.0)):
        """Full tensor grid over ``[x0, x0+width] x [y0, y0+height]``."""
        return cls(nx, ny, width / (nx - 1), height / (ny - 1), origin)

    @classmethod
    def disc(cls, n, radius, center=(0.0, 0.0)):
        """Nodes of an ``n x n`` grid spanning the disc's bounding box, masked to the disc."""
        h = 2.0 * radius / (n - 1)
        origin = (center[0] - radius, center[1] - radius)
        k = np.arange(n) - 0.5 * (n - 1)
        X, Y = np.meshgrid(k * h, k * h, indexing="ij")
        mask = X**2 + Y**2 <= radius**2 * (1.0 + 1e-12)
        return cls(n, n, h, h, origin, mask)

    def _quadrature_weights(self, poly_pts):
        """Nodal weights: clipped cell areas split over each cell's masked corners."""
        m = self.node_mask
        corner = m[:-1, :-1].astype(int) + m[1:, :-1] + m[:-1, 1:] + m[1:, 1:]
        ci, cj = np.nonzero(corner > 0)
        x0 = self.origin[0] + ci * self.hx
        y0 = self.origin[1] + cj * self.hy
        full = corner[ci, cj] == 4
        area = np.full(len(ci), self.hx * self.hy)
        poly = shapely.Polygon(poly_pts)
        # partial masks: clip every cell, the contour may cut full-corner cells
        part = ~full if self.node_mask.all() else np.ones(len(ci), dtype=bool)
        if np.any(part):
            boxes = shapely.box(x0[part], y0[part], x0[part] + self.hx, y0[part] + self.hy)
            area[part] = shapely.area(shapely.intersection(poly, boxes))
        w = np.zeros((self.nx, self.ny))
        share = area / corner[ci, cj]
        for di in (0, 1):
            for dj in (0, 1):
                on = m[ci + di, cj + dj]
                np.add.at(w, (ci[on] + di, cj[on] + dj), share[on])
        return w[self.node_ij[:, 0], self.node_ij[:, 1]]

    @cached_property
    def cell_pieces(self) -> np.ndarray:
        """(P, 4) node indices of the pieces ``cell ∩ Q``, CCW; triangles end in -1.

        The boundary runs through nodes along cell edges or diagonals, so every
        piece is a full cell or a half-cell triangle with nodal vertices.
        """
        m = self.node_mask
        poly = shapely.Polygon(self.reference_positions[self.boundary_nodes])
        corner = m[:-1, :-1].astype(int) + m[1:, :-1] + m[:-1, 1:] + m[1:, 1:]
        out = []
        for i, j in np.argwhere(corner >= 3):
            box = shapely.box(*(self.origin[0] + i * self.hx, self.origin[1] + j * self.hy), *(
                self.origin[0] + (i + 1) * self.hx, self.origin[1] + (j + 1) * self.hy))
            piece = shapely.intersection(poly, box)
            if piece.area <= 1e-12 * self.hx * self.hy:
                continue
            if piece.geom_type != "Polygon":
                raise NonSimpleBoundary("cell piece is not a single polygon")
            xy = np.asarray(piece.exterior.coords)[:-1]
            if np.sum(xy[:, 0] * np.roll(xy[:, 1], -1) - np.roll(xy[:, 0], -1) * xy[:, 1]) < 0:
                xy = xy[::-1]
            li = np.rint((xy[:, 0] - self.origin[0]) / self.hx).astype(int)
            lj = np.rint((xy[:, 1] - self.origin[1]) / self.hy).astype(int)
            ids = self.index[li, lj]
            if len(ids) > 4 or np.any(ids < 0):
                raise NonSimpleBoundary("cell piece has non-nodal vertices")
            out.append(list(ids) + [-1] * (4 - len(ids)))
        return np.array(out, dtype=np.int64).reshape(-1, 4)

    def interpolant_volume(self, positions) -> float:
        """Exact ``int_Q det grad`` of the piecewise bilinear / linear interpolant of ``positions``.

        Bilinear cells map edges to segments, so each piece contributes the
        signed shoelace area of its image.
        """
        P = np.asarray(positions, dtype=float)
        pc = self.cell_pieces
        tri = pc[:, 3] < 0
        total = 0.0
        for sel, k in ((~tri, 4), (tri, 3)):
            V = P[pc[sel, :k]]
            x, y = V[..., 0], V[..., 1]
            total += 0.5 * float(np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y))
        return total

    # -- operators ---------------------------------------------------------
    @cached_property
    def grad_ops(self):
        """First-derivative operators (Dx, Dy)."""
        return self.ops.mixed(1, 0), self.ops.mixed(0, 1)

    @cached_property
    def hess_ops(self):
        """Second-derivative operators (Dxx, Dxy, Dyy)."""
        return self.ops.mixed(2, 0), self.ops.mixed(1, 1), self.ops.mixed(0, 2)

    @cached_property
    def grad_matrix(self) -> sp.csr_matrix:
        """Map from flat positions (2N) to flat F entries (4N), order F11, F12, F21, F22."""
        Dx, Dy = self.grad_ops
        return sp.bmat([[Dx, None], [Dy, None], [None, Dx], [None, Dy]], format="csr")

    @cached_property
    def hess_matrix(self) -> sp.csr_matrix:
        """Map from flat positions (2N) to flat G entries (6N), order (a, xx|xy|yy)."""
        Dxx, Dxy, Dyy = self.hess_ops
        return sp.bmat(
            [[Dxx, None], [Dxy, None], [Dyy, None], [None, Dxx], [None, Dxy], [None, Dyy]],
            format="csr",
        )

    def seminorm_matrix(self, order: int) -> sp.csr_matrix:
        """Scalar matrix ``K`` with ``u^T K u = sum w |D^order u|^2``."""
        key = ("semi", order)
        cache = self.__dict__.setdefault("_semi_cache", {})
        if key not in cache:
            cache[key] = self.ops.seminorm_matrix(order, self.weights)
        return cache[key]

    def vector_seminorm_matrix(self, order: int) -> sp.csr_matrix:
        K = self.seminorm_matrix(order)
        return sp.block_diag([K, K], format="csr")

    def identity(self) -> "DeformationField":
        return DeformationField(self, self.reference_positions.copy())


@dataclass(frozen=True)
class MaterialParams:
    """Constitutive parameters of the model solid.

    Parameters
    ----------
    elastic_tensor : (3, 3) SPD matrix acting on Mandel strain vectors.
    det_exponent : barrier exponent ``a``; must exceed ``2q/(q-2)``.
    grad2_exponent : exponent ``q > 2`` of the second-gradient term.
    rho_s : reference solid density.
    det_weight, grad2_weight : term multipliers. Setting them to 0 gives the
        strain-only surrogate used for equilibrium checks.
    """

    elastic_tensor: np.ndarray = field(default_factory=lambda: np.eye(3))
    det_exponent: float = 5.0
    grad2_exponent: float = 4.0
    rho_s: float = 1.0
    det_weight: float = 1.0
    grad2_weight: float = 1.0

    def __post_init__(self):
        C = np.asarray(self.elastic_tensor, dtype=float)
        if C.shape != (3, 3):
            raise InvalidMaterial("elastic_tensor must be 3x3")
        if not np.allclose(C, C.T, rtol=0, atol=1e-14 * max(1.0, np.abs(C).max())):
            raise InvalidMaterial("elastic_tensor must be symmetric")
        if np.linalg.eigvalsh(C).min() <= 0:
            raise InvalidMaterial("elastic_tensor must be positive definite")
        q = self.grad2_exponent
        if not q > 2:
            raise InvalidMaterial("grad2_exponent must exceed 2")
        if not self.det_exponent > 2 * q / (q - 2):
            raise InvalidMaterial(f"det_exponent must exceed 2q/(q-2) = {2 * q / (q - 2):g}")
        if not self.rho_s > 0:
            raise InvalidMaterial("rho_s must be positive")
        if self.det_weight < 0 or self.grad2_weight < 0:
            raise InvalidMaterial("term weights must be nonnegative")
        object.__setattr__(self, "elastic_tensor", C)

    @classmethod
    def strain_only(cls, elastic_tensor=None, rho_s=1.0):
        """Surrogate with the barrier and second-gradient terms switched off."""
        C = np.eye(3) if elastic_tensor is None else elastic_tensor
        return cls(C, rho_s=rho_s, det_weight=0.0, grad2_weight=0.0)


@dataclass(frozen=True)
class RegularizerConfig:
    """High-order regularizer ``kappa^a0 * sum w |D^order eta|^2``."""

    kappa: float = 0.0
    a0: float = 1.0
    order: int = 3

    def __post_init__(self):
        if self.kappa < 0:
            raise InvalidMaterial("kappa must be nonnegative")
        if not self.a0 > 0:
            raise InvalidMaterial("a0 must be positive")
        if self.order < 1:
            raise InvalidMaterial("regularizer order must be at least 1")

    @property
    def energy_weight(self) -> float:
        return self.kappa**self.a0 if self.kappa > 0 else 0.0


class DeformationField:
    """Nodal positions of the solid map on a SolidGrid."""

    def __init__(self, grid: SolidGrid, positions):
        pos = np.asarray(positions, dtype=float)
        if pos.shape != (grid.n_nodes, 2):
            raise ShapeMismatch(f"positions must have shape ({grid.n_nodes}, 2), got {pos.shape}")
        self.grid = grid
        self.positions = pos
        self._grad = None
        self._hess = None

    @classmethod
    def from_flat(cls, grid, flat):
        flat = np.asarray(flat, dtype=float)
        return cls(grid, flat.reshape(2, -1).T)

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.positions[:, 0], self.positions[:, 1]])

    @property
    def grad(self) -> np.ndarray:
        """(N, 2, 2) nodal deformation gradients."""
        if self._grad is None:
            Dx, Dy = self.grid.grad_ops
            x, y = self.positions[:, 0], self.positions[:, 1]
            F = np.empty((self.grid.n_nodes, 2, 2))
            F[:, 0, 0] = Dx @ x
            F[:, 0, 1] = Dy @ x
            F[:, 1, 0] = Dx @ y
            F[:, 1, 1] = Dy @ y
            self._grad = F
        return self._grad

    @property
    def hess(self) -> np.ndarray:
        """(N, 2, 3) nodal second gradients, last axis (xx, xy, yy)."""
        if self._hess is None:
            ops = self.grid.hess_ops
            G = np.empty((self.grid.n_nodes, 2, 3))
            for a in range(2):
                u = self.positions[:, a]
                for c, op in enumerate(ops):
                    G[:, a, c] = op @ u
            self._hess = G
        return self._hess

    @property
    def det(self) -> np.ndarray:
        F = self.grad
        return F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]

    def translated(self, c) -> "DeformationField":
        return DeformationField(self.grid, self.positions + np.asarray(c, dtype=float))


@dataclass(frozen=True)
class EnergyBreakdown:
    strain_term: float
    det_term: float
    grad2_term: float
    regularizer_term: float
    total: float


def _check_positive_det(eta: DeformationField):
    J = eta.det
    bad = np.nonzero(~(J > 0))[0]
    if len(bad):
        raise DegenerateJacobian(
            f"det grad eta <= 0 at {len(bad)} node(s), min {J.min():.3e}", nodes=bad
        )


def _pointwise(eta, mat):
    _check_positive_det(eta)
    return _kernels.model_energy_pointwise(
        eta.grad,
        eta.hess,
        mat.elastic_tensor,
        mat.det_exponent,
        mat.grad2_exponent,
        mat.det_weight,
        mat.grad2_weight,
    )


def regularizer_value(grid: SolidGrid, u: np.ndarray, order: int) -> float:
    """``sum w |D^order u|^2`` for a nodal vector field ``u`` of shape (N, 2)."""
    w = grid.weights
    total = 0.0
    for op, m in grid.ops.gradient_family(order):
        d = op @ u
        total += m * float(np.sum(w * np.sum(d * d, axis=1)))
    return total


def regularizer_gradient(grid: SolidGrid, u: np.ndarray, order: int) -> np.ndarray:
    w = grid.weights
    g = np.zeros_like(u)
    for op, m in grid.ops.gradient_family(order):
        g += 2.0 * m * (op.T @ (w[:, None] * (op @ u)))
    return g


def eval_energy(eta: DeformationField, mat: MaterialParams, reg: RegularizerConfig) -> EnergyBreakdown:
    """Discrete stored energy with the high-order regularizer.

    Raises
    ------
    DegenerateJacobian
        If ``det grad eta <= 0`` at any node.
    """
    strain, det, g2, _, _ = _pointwise(eta, mat)
    w = eta.grid.weights
    s = float(np.sum(w * strain))
    d = float(np.sum(w * det))
    g = float(np.sum(w * g2))
    kw = reg.energy_weight
    r = kw * regularizer_value(eta.grid, eta.positions, reg.order) if kw > 0 else 0.0
    return EnergyBreakdown(s, d, g, r, s + d + g + r)


def energy_gradient(eta: DeformationField, mat: MaterialParams, reg: RegularizerConfig) -> np.ndarray:
    """Exact gradient of :func:`eval_energy` with respect to nodal positions, shape (N, 2)."""
    _, _, _, dF, dG = _pointwise(eta, mat)
    grid = eta.grid
    w = grid.weights[:, None]
    Dx, Dy = grid.grad_ops
    ops = grid.hess_ops
    g = np.empty((grid.n_nodes, 2))
    for a in range(2):
        ga = Dx.T @ (w[:, 0] * dF[:, a, 0]) + Dy.T @ (w[:, 0] * dF[:, a, 1])
        for c, op in enumerate(ops):
            ga += op.T @ (w[:, 0] * dG[:, a, c])
        g[:, a] = ga
    kw = reg.energy_weight
    if kw > 0:
        g += kw * regularizer_gradient(grid, eta.positions, reg.order)
    return g


def _block_pointwise(H, n):
    """Sparse matrix from per-node dense blocks ``H`` of shape (n, k, k).

    Row ``r*n + p`` couples to column ``c*n + p`` with value ``H[p, r, c]``.
    """
    k = H.shape[1]
    p = np.arange(n)
    rows = (np.arange(k)[:, None, None] * n + p[None, None, :]) * np.ones((1, k, 1), dtype=np.int64)
    cols = (np.arange(k)[None, :, None] * n + p[None, None, :]) * np.ones((k, 1, 1), dtype=np.int64)
    vals = np.transpose(H, (1, 2, 0))
    return sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(k * n, k * n))


def energy_hessian(eta: DeformationField, mat: MaterialParams, reg: RegularizerConfig) -> sp.csr_matrix:
    """Exact Hessian of :func:`eval_energy` in flat component-major coordinates."""
    _check_positive_det(eta)
    grid = eta.grid
    n = grid.n_nodes
    F = eta.grad
    G = eta.hess
    Cm = mat.elastic_tensor
    r2 = np.sqrt(2.0)
    # strain part: d(1/2 F S)[dF] = 1/2 dF S + 1/2 F C(dF^T F + F^T dF)
    E = np.einsum("nai,naj->nij", F, F) - np.eye(2)
    m = np.stack([E[:, 0, 0], E[:, 1, 1], r2 * E[:, 0, 1]], axis=1)
    sm = m @ Cm.T
    S = np.empty((n, 2, 2))
    S[:, 0, 0], S[:, 1, 1] = sm[:, 0], sm[:, 1]
    S[:, 0, 1] = S[:, 1, 0] = sm[:, 2] / r2
    HF = np.zeros((n, 4, 4))
    for col in range(4):
        dF = np.zeros((n, 2, 2))
        dF[:, col // 2, col % 2] = 1.0
        dE = np.einsum("nai,naj->nij", dF, F)
        dE = dE + np.transpose(dE, (0, 2, 1))
        dm = np.stack([dE[:, 0, 0], dE[:, 1, 1], r2 * dE[:, 0, 1]], axis=1)
        dsm = dm @ Cm.T
        dS = np.empty((n, 2, 2))
        dS[:, 0, 0], dS[:, 1, 1] = dsm[:, 0], dsm[:, 1]
        dS[:, 0, 1] = dS[:, 1, 0] = dsm[:, 2] / r2
        out = 0.5 * (dF @ S + F @ dS)
        HF[:, :, col] = out.reshape(n, 4)
    if mat.det_weight != 0.0:
        a = mat.det_exponent
        J = eta.det
        cof = np.stack([F[:, 1, 1], -F[:, 1, 0], -F[:, 0, 1], F[:, 0, 0]], axis=1)
        d1 = -a * mat.det_weight * J ** (-a - 1)
        d2 = a * (a + 1) * mat.det_weight * J ** (-a - 2)
        HF += d2[:, None, None] * cof[:, :, None] * cof[:, None, :]
        # second derivatives of J: (11,22)=(22,11)=1, (12,21)=(21,12)=-1
        HF[:, 0, 3] += d1
        HF[:, 3, 0] += d1
        HF[:, 1, 2] -= d1
        HF[:, 2, 1] -= d1
    w = grid.weights
    HF *= w[:, None, None]
    B = grid.grad_matrix
    H = B.T @ _block_pointwise(HF, n) @ B
    if mat.grad2_weight != 0.0:
        q = mat.grad2_exponent
        mult = np.array([1.0, 2.0, 1.0, 1.0, 2.0, 1.0])
        g = G.reshape(n, 6)
        s = np.sum(g * g * mult, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            c1 = np.where(s > 0, s ** (0.5 * q - 1.0), 0.0)
            c2 = np.where(s > 0, (q - 2.0) * s ** (0.5 * q - 2.0), 0.0)
        mg = g * mult
        HG = c1[:, None, None] * np.eye(6)[None] * mult[None, None, :]
        HG = HG + c2[:, None, None] * mg[:, :, None] * mg[:, None, :]
        HG *= (mat.grad2_weight * w)[:, None, None]
        BG = grid.hess_matrix
        H = H + BG.T @ _block_pointwise(HG, n) @ BG
    kw = reg.energy_weight
    if kw > 0:
        H = H + 2.0 * kw * grid.vector_seminorm_matrix(reg.order)
    return H.tocsr()


def _rate_grad(grid, rate):
    Dx, Dy = grid.grad_ops
    Gb = np.empty((grid.n_nodes, 2, 2))
    Gb[:, 0, 0] = Dx @ rate[:, 0]
    Gb[:, 0, 1] = Dy @ rate[:, 0]
    Gb[:, 1, 0] = Dx @ rate[:, 1]
    Gb[:, 1, 1] = Dy @ rate[:, 1]
    return Gb


def _check_rate(eta, rate):
    rate = np.asarray(rate, dtype=float)
    if rate.shape != (eta.grid.n_nodes, 2):
        raise ShapeMismatch(f"rate must have shape ({eta.grid.n_nodes}, 2), got {rate.shape}")
    return rate


def eval_dissipation(eta_anchor: DeformationField, rate, mat: MaterialParams, reg: RegularizerConfig) -> float:
    """Dissipation ``sum w |grad b^T F + F^T grad b|^2 + kappa sum w |D^order b|^2``."""
    rate = _check_rate(eta_anchor, rate)
    F = eta_anchor.grad
    Gb = _rate_grad(eta_anchor.grid, rate)
    M = np.einsum("nai,naj->nij", Gb, F)
    M = M + np.transpose(M, (0, 2, 1))
    val = float(np.sum(eta_anchor.grid.weights * np.sum(M * M, axis=(1, 2))))
    if reg.kappa > 0:
        val += reg.kappa * regularizer_value(eta_anchor.grid, rate, reg.order)
    return val


def dissipation_matrix(eta_anchor: DeformationField, mat: MaterialParams, reg: RegularizerConfig) -> sp.csr_matrix:
    """SPSD matrix ``A`` with ``eval_dissipation(eta, b) = b^T A b`` (flat b)."""
    grid = eta_anchor.grid
    n = grid.n_nodes
    F = eta_anchor.grad
    # vec(M) = L vec(Gb) with M_ij = sum_a F_ai Gb_aj + Gb_ai F_aj
    L = np.zeros((n, 4, 4))
    for i in range(2):
        for j in range(2):
            for a in range(2):
                L[:, 2 * i + j, 2 * a + j] += F[:, a, i]
                L[:, 2 * i + j, 2 * a + i] += F[:, a, j]
    Q = np.einsum("nki,nkj->nij", L, L) * grid.weights[:, None, None]
    B = grid.grad_matrix
    A = B.T @ _block_pointwise(Q, n) @ B
    if reg.kappa > 0:
        A = A + reg.kappa * grid.vector_seminorm_matrix(reg.order)
    return A.tocsr()


def dissipation_gradient(eta_anchor: DeformationField, rate, mat: MaterialParams, reg: RegularizerConfig) -> np.ndarray:
    """Gradient of :func:`eval_dissipation` in the rate, shape (N, 2)."""
    rate = _check_rate(eta_anchor, rate)
    A = dissipation_matrix(eta_anchor, mat, reg)
    g = 2.0 * (A @ np.concatenate([rate[:, 0], rate[:, 1]]))
    return g.reshape(2, -1).T


def check_nonconvexity_estimate(eta1: DeformationField, eta0: DeformationField, mat: MaterialParams, c1: float) -> float:
    """Residual ``DE(eta1)<eta1-eta0> - E(eta1) + E(eta0) + c1 |grad(eta1-eta0)|^2``."""
    reg = RegularizerConfig()
    d = eta1.positions - eta0.positions
    g = energy_gradient(eta1, mat, reg)
    e1 = eval_energy(eta1, mat, reg).total
    e0 = eval_energy(eta0, mat, reg).total
    dF = eta1.grad - eta0.grad
    h1 = float(np.sum(eta1.grid.weights * np.sum(dF * dF, axis=(1, 2))))
    return float(np.sum(g * d)) - e1 + e0 + c1 * h1


def korn_constant(eta: DeformationField) -> float:
    """Smallest generalized eigenvalue of (L2 mass + R form) against the H1 form.

    Quantifies the discrete Korn-type inequality ``|b|^2 + R(eta, b) >= c |b|_{1,2}^2``.
    """
    import scipy.linalg as sla

    grid = eta.grid
    A = dissipation_matrix(eta, MaterialParams(), RegularizerConfig()).toarray()
    Mw = np.concatenate([grid.weights, grid.weights])
    K1 = grid.vector_seminorm_matrix(1).toarray()
    lhs = A + np.diag(Mw)
    rhs = K1 + np.diag(Mw)
    return float(sla.eigh(lhs, rhs, eigvals_only=True, subset_by_index=[0, 0])[0])
