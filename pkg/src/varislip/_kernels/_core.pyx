# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Semantics match ``_fallback`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, pow, floor, ceil, INFINITY

cnp.import_array()

cdef double SQRT2 = sqrt(2.0)


def model_energy_pointwise(F, G, Cm, double a, double q, double wdet, double wg2):
    cdef double[:, :, ::1] Fv = np.ascontiguousarray(F, dtype=np.float64)
    cdef double[:, :, ::1] Gv = np.ascontiguousarray(G, dtype=np.float64)
    cdef double[:, ::1] C = np.ascontiguousarray(Cm, dtype=np.float64)
    cdef Py_ssize_t n = Fv.shape[0], p, k
    strain_a = np.empty(n)
    det_a = np.empty(n)
    g2_a = np.empty(n)
    dF_a = np.empty((n, 2, 2))
    dG_a = np.empty((n, 2, 3))
    cdef double[::1] strain = strain_a, det = det_a, g2 = g2_a
    cdef double[:, :, ::1] dF = dF_a, dG = dG_a
    cdef double f11, f12, f21, f22, m0, m1, m2, s0, s1, s2, s12, J, Jma, c, s, sc
    for p in range(n):
        f11 = Fv[p, 0, 0]; f12 = Fv[p, 0, 1]; f21 = Fv[p, 1, 0]; f22 = Fv[p, 1, 1]
        m0 = f11 * f11 + f21 * f21 - 1.0
        m1 = f12 * f12 + f22 * f22 - 1.0
        m2 = SQRT2 * (f11 * f12 + f21 * f22)
        s0 = C[0, 0] * m0 + C[0, 1] * m1 + C[0, 2] * m2
        s1 = C[1, 0] * m0 + C[1, 1] * m1 + C[1, 2] * m2
        s2 = C[2, 0] * m0 + C[2, 1] * m1 + C[2, 2] * m2
        strain[p] = 0.125 * (m0 * s0 + m1 * s1 + m2 * s2)
        s12 = s2 / SQRT2
        dF[p, 0, 0] = 0.5 * (f11 * s0 + f12 * s12)
        dF[p, 0, 1] = 0.5 * (f11 * s12 + f12 * s1)
        dF[p, 1, 0] = 0.5 * (f21 * s0 + f22 * s12)
        dF[p, 1, 1] = 0.5 * (f21 * s12 + f22 * s1)
        J = f11 * f22 - f12 * f21
        if wdet != 0.0:
            Jma = pow(J, -a)
            det[p] = wdet * Jma
            c = -a * wdet * Jma / J
            dF[p, 0, 0] += c * f22
            dF[p, 0, 1] -= c * f21
            dF[p, 1, 0] -= c * f12
            dF[p, 1, 1] += c * f11
        else:
            det[p] = 0.0
        if wg2 != 0.0:
            s = 0.0
            for k in range(2):
                s += Gv[p, k, 0] * Gv[p, k, 0] + 2.0 * Gv[p, k, 1] * Gv[p, k, 1] + Gv[p, k, 2] * Gv[p, k, 2]
            g2[p] = wg2 * pow(s, 0.5 * q) / q
            sc = wg2 * pow(s, 0.5 * q - 1.0)
            for k in range(2):
                dG[p, k, 0] = sc * Gv[p, k, 0]
                dG[p, k, 1] = sc * 2.0 * Gv[p, k, 1]
                dG[p, k, 2] = sc * Gv[p, k, 2]
        else:
            g2[p] = 0.0
            for k in range(2):
                dG[p, k, 0] = 0.0
                dG[p, k, 1] = 0.0
                dG[p, k, 2] = 0.0
    return strain_a, det_a, g2_a, dF_a, dG_a


def winding_raster(poly, double x0, double y0, double dx, double dy, Py_ssize_t nx, Py_ssize_t ny):
    cdef double[:, ::1] P = np.ascontiguousarray(poly, dtype=np.float64)
    cdef Py_ssize_t M = P.shape[0], e, j, j0, j1, i
    out_a = np.zeros((ny, nx + 1), dtype=np.int64)
    cdef long long[:, ::1] delta = out_a
    cdef double xa, ya, xb, yb, lo, hi, y, xc
    cdef int sgn
    for e in range(M):
        xa = P[e, 0]; ya = P[e, 1]
        xb = P[(e + 1) % M, 0]; yb = P[(e + 1) % M, 1]
        if ya == yb:
            continue
        if ya < yb:
            lo = ya; hi = yb; sgn = -1
        else:
            lo = yb; hi = ya; sgn = 1
        j0 = <Py_ssize_t>ceil((lo - y0) / dy - 0.5)
        j1 = <Py_ssize_t>ceil((hi - y0) / dy - 0.5)
        if j0 < 0:
            j0 = 0
        if j1 > ny:
            j1 = ny
        for j in range(j0, j1):
            y = y0 + (j + 0.5) * dy
            if y < lo or y >= hi:
                continue
            xc = xa + (y - ya) * (xb - xa) / (yb - ya)
            i = <Py_ssize_t>floor((xc - x0) / dx - 0.5) + 1
            if i < 0:
                i = 0
            if i > nx:
                i = nx
            delta[j, i] += sgn
    return np.cumsum(out_a[:, :nx], axis=1).T.astype(np.int32)


cdef inline double _pseg(double px, double py, double ax, double ay, double bx, double by) nogil:
    cdef double abx = bx - ax, aby = by - ay
    cdef double L2 = abx * abx + aby * aby, t = 0.0, dx, dy
    if L2 > 0:
        t = ((px - ax) * abx + (py - ay) * aby) / L2
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    dx = px - (ax + t * abx)
    dy = py - (ay + t * aby)
    return sqrt(dx * dx + dy * dy)


cdef inline double _orient(double ax, double ay, double bx, double by, double cx, double cy) nogil:
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


cdef inline bint _onseg(double px, double py, double qx, double qy, double rx, double ry, double o) nogil:
    return (o == 0 and min(px, qx) <= rx and rx <= max(px, qx)
            and min(py, qy) <= ry and ry <= max(py, qy))


cdef inline bint _intersect(double ax, double ay, double bx, double by,
                            double cx, double cy, double dx, double dy) nogil:
    cdef double o1 = _orient(ax, ay, bx, by, cx, cy)
    cdef double o2 = _orient(ax, ay, bx, by, dx, dy)
    cdef double o3 = _orient(cx, cy, dx, dy, ax, ay)
    cdef double o4 = _orient(cx, cy, dx, dy, bx, by)
    if o1 * o2 < 0 and o3 * o4 < 0:
        return True
    return (_onseg(ax, ay, bx, by, cx, cy, o1) or _onseg(ax, ay, bx, by, dx, dy, o2)
            or _onseg(cx, cy, dx, dy, ax, ay, o3) or _onseg(cx, cy, dx, dy, bx, by, o4))


def polygon_segment_distances(poly):
    cdef double[:, ::1] P = np.ascontiguousarray(poly, dtype=np.float64)
    cdef Py_ssize_t M = P.shape[0], i, j, i1, j1
    out_a = np.empty((M, M))
    cdef double[:, ::1] out = out_a
    cdef double d, d2
    for i in range(M):
        i1 = (i + 1) % M
        out[i, i] = INFINITY
        for j in range(i + 1, M):
            j1 = (j + 1) % M
            if _intersect(P[i, 0], P[i, 1], P[i1, 0], P[i1, 1], P[j, 0], P[j, 1], P[j1, 0], P[j1, 1]):
                d = 0.0
            else:
                d = _pseg(P[i, 0], P[i, 1], P[j, 0], P[j, 1], P[j1, 0], P[j1, 1])
                d2 = _pseg(P[i1, 0], P[i1, 1], P[j, 0], P[j, 1], P[j1, 0], P[j1, 1])
                if d2 < d:
                    d = d2
                d2 = _pseg(P[j, 0], P[j, 1], P[i, 0], P[i, 1], P[i1, 0], P[i1, 1])
                if d2 < d:
                    d = d2
                d2 = _pseg(P[j1, 0], P[j1, 1], P[i, 0], P[i, 1], P[i1, 0], P[i1, 1])
                if d2 < d:
                    d = d2
            out[i, j] = d
            out[j, i] = d
    return out_a


def count_self_intersections(poly):
    cdef double[:, ::1] P = np.ascontiguousarray(poly, dtype=np.float64)
    cdef Py_ssize_t M = P.shape[0], i, j
    cdef long count = 0
    for i in range(M):
        for j in range(i + 2, M):
            if i == 0 and j == M - 1:
                continue
            if _intersect(P[i, 0], P[i, 1], P[(i + 1) % M, 0], P[(i + 1) % M, 1],
                          P[j, 0], P[j, 1], P[(j + 1) % M, 0], P[(j + 1) % M, 1]):
                count += 1
    return int(count)


def bilinear_stencil(points, double x0, double y0, double dx, double dy, active, int search):
    cdef double[:, ::1] pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    cdef cnp.uint8_t[:, ::1] act = np.ascontiguousarray(active, dtype=np.uint8)
    cdef Py_ssize_t mx = act.shape[0], my = act.shape[1], P = pts.shape[0], p, k, i, j
    idx_a = np.full((P, 4), -1, dtype=np.int64)
    wts_a = np.zeros((P, 4))
    st_a = np.zeros(P, dtype=np.int8)
    cdef long long[:, ::1] idx = idx_a
    cdef double[:, ::1] wts = wts_a
    cdef cnp.int8_t[::1] st = st_a
    cdef double fx, fy, tx, ty, tot, best, d2
    cdef long long i0, j0, ci, cj, bi, ic, jc
    cdef double w[4]
    cdef long long cis[4]
    cdef long long cjs[4]
    for p in range(P):
        fx = (pts[p, 0] - x0) / dx - 0.5
        fy = (pts[p, 1] - y0) / dy - 0.5
        i0 = <long long>floor(fx)
        j0 = <long long>floor(fy)
        tx = fx - i0
        ty = fy - j0
        cis[0] = i0; cis[1] = i0 + 1; cis[2] = i0; cis[3] = i0 + 1
        cjs[0] = j0; cjs[1] = j0; cjs[2] = j0 + 1; cjs[3] = j0 + 1
        w[0] = (1 - tx) * (1 - ty); w[1] = tx * (1 - ty); w[2] = (1 - tx) * ty; w[3] = tx * ty
        tot = 0.0
        for k in range(4):
            ci = cis[k]; cj = cjs[k]
            if ci >= 0 and ci < mx and cj >= 0 and cj < my and act[ci, cj]:
                tot += w[k]
            else:
                w[k] = 0.0
                cis[k] = -1
        if tot > 1e-12:
            for k in range(4):
                if cis[k] >= 0:
                    idx[p, k] = cis[k] * my + cjs[k]
                    wts[p, k] = w[k] / tot
            continue
        ic = <long long>floor(fx + 0.5)
        jc = <long long>floor(fy + 0.5)
        best = INFINITY
        bi = -1
        for i in range(max(ic - search, 0), min(ic + search + 1, mx)):
            for j in range(max(jc - search, 0), min(jc + search + 1, my)):
                if not act[i, j]:
                    continue
                d2 = (i - fx) * (i - fx) * dx * dx + (j - fy) * (j - fy) * dy * dy
                if d2 < best:
                    best = d2
                    bi = i * my + j
        if bi >= 0:
            idx[p, 0] = bi
            wts[p, 0] = 1.0
            st[p] = 1
        else:
            st[p] = 2
    return idx_a, wts_a, st_a
