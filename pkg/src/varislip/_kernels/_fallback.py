"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_core.pyx`` with identical
signature and semantics. The fallback is used when the extension is not
built or when ``VARISLIP_PURE_PYTHON=1`` is set.
"""
from __future__ import annotations

import numpy as np

_SQRT2 = np.sqrt(2.0)
_G2_MULT = np.array([1.0, 2.0, 1.0])


def model_energy_pointwise(F, G, Cm, a, q, wdet, wg2):
    """Pointwise densities of the stored energy and their first derivatives.

    Parameters
    ----------
    F : (N, 2, 2) deformation gradients.
    G : (N, 2, 3) second gradients, last axis ordered (xx, xy, yy).
    Cm : (3, 3) elastic tensor acting on Mandel strain vectors.
    a, q : barrier exponent and second-gradient exponent.
    wdet, wg2 : multipliers of the barrier and second-gradient terms.

    Returns
    -------
    strain, det, grad2 : (N,) density parts.
    dF : (N, 2, 2) derivative with respect to F.
    dG : (N, 2, 3) derivative with respect to the stored G components.
    """
    F = np.asarray(F, dtype=float)
    G = np.asarray(G, dtype=float)
    Cm = np.asarray(Cm, dtype=float)
    f11, f12, f21, f22 = F[:, 0, 0], F[:, 0, 1], F[:, 1, 0], F[:, 1, 1]
    e11 = f11 * f11 + f21 * f21 - 1.0
    e22 = f12 * f12 + f22 * f22 - 1.0
    e12 = f11 * f12 + f21 * f22
    m = np.stack([e11, e22, _SQRT2 * e12], axis=1)
    sm = m @ Cm.T
    strain = 0.125 * np.sum(m * sm, axis=1)
    s11, s22, s12 = sm[:, 0], sm[:, 1], sm[:, 2] / _SQRT2

    dF = np.empty_like(F)
    dF[:, 0, 0] = 0.5 * (f11 * s11 + f12 * s12)
    dF[:, 0, 1] = 0.5 * (f11 * s12 + f12 * s22)
    dF[:, 1, 0] = 0.5 * (f21 * s11 + f22 * s12)
    dF[:, 1, 1] = 0.5 * (f21 * s12 + f22 * s22)

    J = f11 * f22 - f12 * f21
    if wdet != 0.0:
        Jma = J ** (-a)
        det = wdet * Jma
        c = -a * wdet * Jma / J
        dF[:, 0, 0] += c * f22
        dF[:, 0, 1] -= c * f21
        dF[:, 1, 0] -= c * f12
        dF[:, 1, 1] += c * f11
    else:
        det = np.zeros_like(J)

    if wg2 != 0.0:
        s = np.sum(G * G * _G2_MULT, axis=(1, 2))
        grad2 = wg2 * s ** (0.5 * q) / q
        scale = wg2 * s ** (0.5 * q - 1.0)
        dG = scale[:, None, None] * G * _G2_MULT
    else:
        grad2 = np.zeros_like(J)
        dG = np.zeros_like(G)
    return strain, det, grad2, dF, dG


def winding_raster(poly, x0, y0, dx, dy, nx, ny):
    """Winding numbers of a closed polygon sampled at pixel centers.

    Pixel ``(i, j)`` has center ``(x0 + (i + 0.5) dx, y0 + (j + 0.5) dy)``.
    Uses a scanline crossing rule with half-open rows, so the result is
    exact for every pixel center not lying on the polygon.

    Returns
    -------
    (nx, ny) int32 array.
    """
    P = np.asarray(poly, dtype=float)
    Q = np.roll(P, -1, axis=0)
    delta = np.zeros((ny, nx + 1), dtype=np.int64)
    yc = y0 + (np.arange(ny) + 0.5) * dy
    for (xa, ya), (xb, yb) in zip(P, Q):
        if ya == yb:
            continue
        if ya < yb:
            lo, hi, sgn = ya, yb, -1
        else:
            lo, hi, sgn = yb, ya, 1
        j0 = int(np.ceil((lo - y0) / dy - 0.5))
        j1 = int(np.ceil((hi - y0) / dy - 0.5))
        j0 = max(j0, 0)
        j1 = min(j1, ny)
        if j1 <= j0:
            continue
        rows = np.arange(j0, j1)
        y = yc[rows]
        keep = (y >= lo) & (y < hi)
        rows, y = rows[keep], y[keep]
        xc = xa + (y - ya) * (xb - xa) / (yb - ya)
        i = np.floor((xc - x0) / dx - 0.5).astype(np.int64) + 1
        i = np.clip(i, 0, nx)
        np.add.at(delta, (rows, i), sgn)
    return np.cumsum(delta[:, :nx], axis=1).T.astype(np.int32)


def _point_segment_dist(p, a, b):
    ab = b - a
    L2 = np.sum(ab * ab, axis=-1)
    t = np.where(L2 > 0, np.sum((p - a) * ab, axis=-1) / np.where(L2 > 0, L2, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    d = p - (a + t[..., None] * ab)
    return np.sqrt(np.sum(d * d, axis=-1))


def _orient(a, b, c):
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (
        c[..., 0] - a[..., 0]
    )


def _segments_intersect(a, b, c, d):
    o1 = _orient(a, b, c)
    o2 = _orient(a, b, d)
    o3 = _orient(c, d, a)
    o4 = _orient(c, d, b)
    proper = (o1 * o2 < 0) & (o3 * o4 < 0)

    def on_seg(p, q, r, o):
        return (
            (o == 0)
            & (np.minimum(p[..., 0], q[..., 0]) <= r[..., 0])
            & (r[..., 0] <= np.maximum(p[..., 0], q[..., 0]))
            & (np.minimum(p[..., 1], q[..., 1]) <= r[..., 1])
            & (r[..., 1] <= np.maximum(p[..., 1], q[..., 1]))
        )

    touch = on_seg(a, b, c, o1) | on_seg(a, b, d, o2) | on_seg(c, d, a, o3) | on_seg(c, d, b, o4)
    return proper | touch


def polygon_segment_distances(poly):
    """Pairwise distances between the edges of a closed polygon.

    Returns an (M, M) array; entry ``(i, j)`` is the distance between edge
    ``i`` (vertex i to i+1) and edge ``j``. The diagonal is ``inf``.
    """
    P = np.asarray(poly, dtype=float)
    Q = np.roll(P, -1, axis=0)
    a, b = P[:, None, :], Q[:, None, :]
    c, d = P[None, :, :], Q[None, :, :]
    a, b, c, d = np.broadcast_arrays(a, b, c, d)
    dist = np.minimum(
        np.minimum(_point_segment_dist(a, c, d), _point_segment_dist(b, c, d)),
        np.minimum(_point_segment_dist(c, a, b), _point_segment_dist(d, a, b)),
    )
    dist = np.where(_segments_intersect(a, b, c, d), 0.0, dist)
    np.fill_diagonal(dist, np.inf)
    return dist


def count_self_intersections(poly):
    """Number of intersecting pairs of non-adjacent polygon edges."""
    P = np.asarray(poly, dtype=float)
    M = len(P)
    Q = np.roll(P, -1, axis=0)
    i, j = np.triu_indices(M, k=2)
    keep = ~((i == 0) & (j == M - 1))
    i, j = i[keep], j[keep]
    hit = _segments_intersect(P[i], Q[i], P[j], Q[j])
    return int(np.count_nonzero(hit))


def bilinear_stencil(points, x0, y0, dx, dy, active, search):
    """Bilinear interpolation stencils on a cell-centred lattice.

    Parameters
    ----------
    points : (P, 2) query points.
    x0, y0, dx, dy : lattice origin (lower-left corner) and cell size.
    active : (mx, my) bool mask of cells that carry values.
    search : half-width (in cells) of the nearest-active fallback window.

    Returns
    -------
    idx : (P, 4) int64 flat cell indices ``i * my + j`` (-1 if unused).
    wts : (P, 4) float weights summing to one on used entries.
    status : (P,) int8, 0 bilinear, 1 nearest-cell fallback, 2 failure.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    active = np.asarray(active, dtype=bool)
    mx, my = active.shape
    P = len(pts)
    fx = (pts[:, 0] - x0) / dx - 0.5
    fy = (pts[:, 1] - y0) / dy - 0.5
    i0 = np.floor(fx).astype(np.int64)
    j0 = np.floor(fy).astype(np.int64)
    tx = fx - i0
    ty = fy - j0
    ci = np.stack([i0, i0 + 1, i0, i0 + 1], axis=1)
    cj = np.stack([j0, j0, j0 + 1, j0 + 1], axis=1)
    w = np.stack([(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty], axis=1)
    inside = (ci >= 0) & (ci < mx) & (cj >= 0) & (cj < my)
    ok = inside.copy()
    ok[inside] = active[ci[inside], cj[inside]]
    w = np.where(ok, w, 0.0)
    tot = w.sum(axis=1)
    good = tot > 1e-12
    idx = np.where(ok, ci * my + cj, -1)
    wts = np.zeros((P, 4))
    wts[good] = w[good] / tot[good, None]
    idx[~good] = -1
    status = np.zeros(P, dtype=np.int8)
    for p in np.nonzero(~good)[0]:
        ic = int(np.floor(fx[p] + 0.5))
        jc = int(np.floor(fy[p] + 0.5))
        best, bi = np.inf, -1
        for i in range(max(ic - search, 0), min(ic + search + 1, mx)):
            for j in range(max(jc - search, 0), min(jc + search + 1, my)):
                if not active[i, j]:
                    continue
                d2 = (i - fx[p]) ** 2 * dx * dx + (j - fy[p]) ** 2 * dy * dy
                if d2 < best:
                    best, bi = d2, i * my + j
        if bi >= 0:
            idx[p, 0] = bi
            wts[p, 0] = 1.0
            status[p] = 1
        else:
            status[p] = 2
    return idx, wts, status
