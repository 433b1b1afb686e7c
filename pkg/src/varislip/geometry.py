"""Interface geometry of the deformed solid and its footprint on the fluid grid.

Orientation convention: interface normals point from the fluid into the
solid. For a counter-clockwise boundary polygon this is the inward normal.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import shapely

from . import _kernels
from .errors import DegenerateJacobian, NonSimpleBoundary
from .solid_model import DeformationField

FLUID, SOLID, CUT = 0, 1, 2


class SelfIntersecting(NonSimpleBoundary):
    """The image boundary polyline crosses itself."""


@dataclass(eq=False)
class InterfaceGeometry:
    """Closed interface polyline with per-point normals and surface weights.

    Attributes
    ----------
    points : (M, 2) ordered counter-clockwise.
    normals : (M, 2) unit normals, fluid into solid.
    tangents : (M, 2) normals rotated by +90 degrees.
    weights : (M,) surface measure per point (half of each adjacent segment).
    segment_weights : (M,) surface measure of segment k (point k to k+1).
    node_ids : (M,) solid node index of each point, or None for plain polygons.
    """

    points: np.ndarray
    normals: np.ndarray
    tangents: np.ndarray
    weights: np.ndarray
    segment_weights: np.ndarray
    node_ids: np.ndarray | None = None

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def total_weight(self) -> float:
        return float(np.sum(self.weights))

    def polygon(self) -> np.ndarray:
        return self.points


def _cof_apply(F, n):
    """``cof(F) n`` for stacks of 2x2 matrices and vectors."""
    return np.column_stack(
        [F[:, 1, 1] * n[:, 0] - F[:, 1, 0] * n[:, 1], -F[:, 0, 1] * n[:, 0] + F[:, 0, 0] * n[:, 1]]
    )


def check_simple(points) -> None:
    if _kernels.count_self_intersections(np.asarray(points, dtype=float)) > 0:
        raise SelfIntersecting("interface polyline self-intersects")


def build_interface(eta: DeformationField, check: bool = True) -> InterfaceGeometry:
    """Interface of ``eta(Q)`` from cofactor normals at the boundary nodes.

    Raises
    ------
    DegenerateJacobian
        If ``det grad eta <= 0`` at a boundary node.
    SelfIntersecting
        If the image polyline crosses itself and ``check`` is set.
    """
    grid = eta.grid
    ids = grid.boundary_nodes
    F = eta.grad[ids]
    J = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    if np.any(~(J > 0)):
        raise DegenerateJacobian("det grad eta <= 0 on the boundary", nodes=ids[~(J > 0)])
    pts = eta.positions[ids].copy()
    if check:
        check_simple(pts)
    cn = _cof_apply(F, grid.reference_normal)
    normals = cn / np.linalg.norm(cn, axis=1)[:, None]
    Fmid = 0.5 * (F + np.roll(F, -1, axis=0))
    seg_w = grid.segment_length * np.linalg.norm(_cof_apply(Fmid, grid.segment_normal), axis=1)
    weights = 0.5 * (seg_w + np.roll(seg_w, 1))
    tangents = np.column_stack([-normals[:, 1], normals[:, 0]])
    return InterfaceGeometry(pts, normals, tangents, weights, seg_w, ids.copy())


def interface_from_polygon(points, check: bool = True) -> InterfaceGeometry:
    """Interface of a plain counter-clockwise polygon, normals averaged from edges."""
    P = np.asarray(points, dtype=float)
    if shoelace_area(P) < 0:
        P = P[::-1].copy()
    if check:
        check_simple(P)
    seg = np.roll(P, -1, axis=0) - P
    L = np.hypot(seg[:, 0], seg[:, 1])
    t = seg / L[:, None]
    sn = np.column_stack([-t[:, 1], t[:, 0]])
    nn = sn + np.roll(sn, 1, axis=0)
    normals = nn / np.linalg.norm(nn, axis=1)[:, None]
    tangents = np.column_stack([-normals[:, 1], normals[:, 0]])
    weights = 0.5 * (L + np.roll(L, 1))
    return InterfaceGeometry(P, normals, tangents, weights, L, None)


def shoelace_area(P) -> float:
    P = np.asarray(P, dtype=float)
    x, y = P[:, 0], P[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def winding_numbers(P, resolution: int = 512, pad: float = 0.02):
    """Rasterized winding numbers over the padded bounding box of ``P``.

    Returns
    -------
    w : (resolution, resolution) int32 winding numbers at pixel centers.
    box : (x0, y0, dx, dy) raster geometry.
    """
    P = np.asarray(P, dtype=float)
    lo, hi = P.min(axis=0), P.max(axis=0)
    span = np.maximum(hi - lo, 1e-300)
    lo = lo - pad * span
    hi = hi + pad * span
    dx, dy = (hi - lo) / resolution
    w = _kernels.winding_raster(P, lo[0], lo[1], dx, dy, resolution, resolution)
    return w, (lo[0], lo[1], dx, dy)


def ciarlet_necas_residual(eta: DeformationField, resolution: int = 512) -> float:
    """``int_Q det grad eta - |eta(Q)|`` with overlap counted by winding numbers.

    The integral is exact for the piecewise bilinear interpolant of the nodal
    positions. The image area is the shoelace area of the image boundary
    minus the multiply covered area from the raster, so the residual vanishes
    up to roundoff for injective maps and measures the overlap otherwise.
    """
    J = eta.det
    if np.any(~(J > 0)):
        raise DegenerateJacobian("det grad eta <= 0", nodes=np.nonzero(~(J > 0))[0])
    vol = eta.grid.interpolant_volume(eta.positions)
    P = eta.positions[eta.grid.boundary_nodes]
    if _kernels.count_self_intersections(P) > 0:
        warnings.warn("image boundary self-intersects; overlap measured by winding numbers", stacklevel=2)
    area = shoelace_area(P)
    w, (_, _, dx, dy) = winding_numbers(P, resolution)
    over = float(np.sum(np.maximum(w.astype(np.int64) - 1, 0))) * dx * dy
    return vol - area + over


@dataclass(eq=False)
class CellClassification:
    """Fluid / Solid / Cut labels of the background cells.

    Attributes
    ----------
    labels : (mx, my) int8 with FLUID=0, SOLID=1, CUT=2.
    fraction : (mx, my) fluid area fraction (1 on Fluid, 0 on Solid).
    centroid : (mx, my, 2) centroid of the fluid part of each cell.
    fluid_area : total fluid area.
    container : the background grid descriptor.
    polygon : (M, 2) solid boundary polygon used for the classification.
    """

    labels: np.ndarray
    fraction: np.ndarray
    centroid: np.ndarray
    fluid_area: float
    container: object
    polygon: np.ndarray

    def counts(self):
        return {name: int(np.sum(self.labels == k)) for name, k in (("fluid", FLUID), ("solid", SOLID), ("cut", CUT))}


def classify_cells(interface, container, tol: float = 1e-12) -> CellClassification:
    """Label the container cells against the solid polygon by exact clipping.

    ``container`` needs ``x0, y0, dx, dy, mx, my`` attributes.
    """
    P = interface.points if isinstance(interface, InterfaceGeometry) else np.asarray(interface, dtype=float)
    check_simple(P)
    mx, my = container.mx, container.my
    dx, dy = container.dx, container.dy
    x0, y0 = container.x0, container.y0
    ci, cj = np.meshgrid(np.arange(mx), np.arange(my), indexing="ij")
    xc = x0 + (ci + 0.5) * dx
    yc = y0 + (cj + 0.5) * dy
    centroid = np.stack([xc, yc], axis=-1)
    cell = dx * dy
    solid = np.zeros((mx, my))
    lo, hi = P.min(axis=0), P.max(axis=0)
    i0 = max(int(np.floor((lo[0] - x0) / dx)) - 1, 0)
    i1 = min(int(np.ceil((hi[0] - x0) / dx)) + 1, mx)
    j0 = max(int(np.floor((lo[1] - y0) / dy)) - 1, 0)
    j1 = min(int(np.ceil((hi[1] - y0) / dy)) + 1, my)
    poly = shapely.Polygon(P)
    if i1 > i0 and j1 > j0:
        bi, bj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="ij")
        bi, bj = bi.ravel(), bj.ravel()
        bx, by = x0 + bi * dx, y0 + bj * dy
        boxes = shapely.box(bx, by, bx + dx, by + dy)
        inter = shapely.intersection(poly, boxes)
        a = shapely.area(inter)
        solid[bi, bj] = a
        cut = (a > tol * cell) & (a < (1 - tol) * cell)
        if np.any(cut):
            cs = shapely.centroid(inter[cut])
            sx, sy = shapely.get_x(cs), shapely.get_y(cs)
            fa = cell - a[cut]
            cxf = ((bx[cut] + 0.5 * dx) * cell - sx * a[cut]) / fa
            cyf = ((by[cut] + 0.5 * dy) * cell - sy * a[cut]) / fa
            centroid[bi[cut], bj[cut], 0] = cxf
            centroid[bi[cut], bj[cut], 1] = cyf
    frac = 1.0 - solid / cell
    labels = np.full((mx, my), FLUID, dtype=np.int8)
    labels[frac <= tol] = SOLID
    labels[(frac > tol) & (frac < 1 - tol)] = CUT
    frac = np.where(labels == FLUID, 1.0, np.where(labels == SOLID, 0.0, frac))
    fluid_area = float(np.sum(frac) * cell)
    return CellClassification(labels, frac, centroid, fluid_area, container, P.copy())


def _as_polygon(obj) -> np.ndarray:
    if isinstance(obj, InterfaceGeometry):
        return obj.points
    if isinstance(obj, CellClassification):
        return obj.polygon
    return np.asarray(obj, dtype=float)


def _densify(P, spacing):
    Q = np.roll(P, -1, axis=0)
    out = []
    for a, b in zip(P, Q):
        k = max(int(np.ceil(np.hypot(*(b - a)) / spacing)), 1)
        t = np.arange(k)[:, None] / k
        out.append(a + t * (b - a))
    return np.concatenate(out)


def _points_to_polyline(S, P):
    """Distance from each sample in S to the closed polyline P."""
    A = P[None, :, :]
    B = np.roll(P, -1, axis=0)[None, :, :]
    X = S[:, None, :]
    ab = B - A
    L2 = np.sum(ab * ab, axis=-1)
    t = np.clip(np.sum((X - A) * ab, axis=-1) / np.where(L2 > 0, L2, 1.0), 0.0, 1.0)
    d = X - (A + t[..., None] * ab)
    return np.sqrt(np.min(np.sum(d * d, axis=-1), axis=1))


def hausdorff_distance(a, b, samples: int = 2000) -> float:
    """Symmetric Hausdorff distance between two closed polygons.

    Each boundary is sampled with about ``samples`` points and measured
    against the other polyline exactly.
    """
    Pa, Pb = _as_polygon(a), _as_polygon(b)
    per = max(_perimeter(Pa), _perimeter(Pb))
    spacing = per / samples
    out = 0.0
    for S, T in ((Pa, Pb), (Pb, Pa)):
        D = _densify(S, spacing)
        for chunk in range(0, len(D), 1024):
            out = max(out, float(_points_to_polyline(D[chunk : chunk + 1024], T).max()))
    return out


def _perimeter(P):
    seg = np.roll(P, -1, axis=0) - P
    return float(np.sum(np.hypot(seg[:, 0], seg[:, 1])))


def wall_distance(points, container) -> float:
    P = np.asarray(points, dtype=float)
    x1 = container.x0 + container.mx * container.dx
    y1 = container.y0 + container.my * container.dy
    d = np.minimum.reduce(
        [P[:, 0] - container.x0, x1 - P[:, 0], P[:, 1] - container.y0, y1 - P[:, 1]]
    )
    return float(d.min())


def _closest_points(a, b, c, d):
    """Closest points between segments ab and cd (brute force over endpoint projections)."""
    best = (np.inf, None, None)
    for p, s0, s1, first in ((a, c, d, True), (b, c, d, True), (c, a, b, False), (d, a, b, False)):
        ab = s1 - s0
        L2 = ab @ ab
        t = 0.0 if L2 == 0 else min(max((p - s0) @ ab / L2, 0.0), 1.0)
        q = s0 + t * ab
        dist = np.hypot(*(p - q))
        if dist < best[0]:
            best = (dist, p, q) if first else (dist, q, p)
    return best


def self_separation(points) -> float:
    """Smallest distance between non-adjacent boundary edges facing across fluid.

    A pair counts when its distance is below half of the shorter boundary arc
    between the two edges and the chord joining their closest points runs
    outside the solid. Convex bodies therefore report ``inf``.
    """
    P = np.asarray(points, dtype=float)
    M = len(P)
    D = _kernels.polygon_segment_distances(P)
    seg = np.roll(P, -1, axis=0) - P
    L = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(L)])
    per = cum[-1]
    i, j = np.triu_indices(M, k=1)
    fwd = cum[j] - cum[i + 1]
    back = per - (cum[j + 1] - cum[i])
    arc = np.minimum(fwd, back)
    cand = (D[i, j] < 0.5 * arc) & (arc > 0)
    if not np.any(cand):
        return np.inf
    order = np.argsort(D[i[cand], j[cand]], kind="stable")
    ii, jj = i[cand][order], j[cand][order]
    poly = shapely.Polygon(P)
    for a, b in zip(ii, jj):
        dist, p, q = _closest_points(P[a], P[(a + 1) % M], P[b], P[(b + 1) % M])
        if dist == 0.0:
            return 0.0
        mid = 0.5 * (p + q)
        if not shapely.contains_xy(poly, mid[0], mid[1]):
            return float(dist)
    return np.inf


def min_separation(interface, container) -> float:
    """Minimum of the wall distance and the self-separation of the interface."""
    P = _as_polygon(interface)
    return float(min(wall_distance(P, container), self_separation(P)))


def extend_normals(interface: InterfaceGeometry, points, band: float):
    """Banded extension of the interface normal and tangent fields.

    Each query point takes the normal of the nearest interface segment,
    scaled by a linear cutoff ``max(0, 1 - d / band)`` in the distance ``d``.
    """
    X = np.asarray(points, dtype=float).reshape(-1, 2)
    P = interface.points
    Q = np.roll(P, -1, axis=0)
    ab = (Q - P)[None]
    L2 = np.sum(ab * ab, axis=-1)
    t = np.clip(np.sum((X[:, None] - P[None]) * ab, axis=-1) / L2, 0.0, 1.0)
    d2 = np.sum((X[:, None] - (P[None] + t[..., None] * ab)) ** 2, axis=-1)
    k = np.argmin(d2, axis=1)
    tk = t[np.arange(len(X)), k][:, None]
    n = (1 - tk) * interface.normals[k] + tk * interface.normals[(k + 1) % len(P)]
    n /= np.linalg.norm(n, axis=1)[:, None]
    cut = np.maximum(0.0, 1.0 - np.sqrt(d2[np.arange(len(X)), k]) / band)[:, None]
    normal = cut * n
    tangent = np.column_stack([-normal[:, 1], normal[:, 0]])
    return normal, tangent
