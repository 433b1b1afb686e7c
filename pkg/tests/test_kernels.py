import os
import subprocess
import sys

import numpy as np
import pytest

from varislip import _kernels
from varislip._kernels import _fallback

_core = pytest.importorskip("varislip._kernels._core")


def _close(a, b, tol=1e-12):
    if isinstance(a, tuple):
        assert len(a) == len(b)
        for x, y in zip(a, b):
            _close(x, y, tol)
        return
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    assert a.shape == b.shape
    assert np.allclose(a, b, rtol=tol, atol=tol)


def _star(m=64, jitter=0.0, rng=None):
    th = 2 * np.pi * np.arange(m) / m
    r = 0.2 + 0.05 * np.cos(5 * th)
    if jitter:
        r = r + jitter * rng.standard_normal(m)
    return np.column_stack([0.5 + r * np.cos(th), 0.5 + r * np.sin(th)])


def test_backend_selected():
    assert _kernels.BACKEND in ("compiled", "python")
    if _kernels.BACKEND == "compiled":
        assert _kernels.bilinear_stencil is _core.bilinear_stencil


@pytest.mark.parametrize("params", [(1.0, 3.0, 1e-2, 1e-4), (5.0, 4.0, 1.0, 1.0), (2.0, 2.5, 0.0, 0.0)])
def test_energy_pointwise_agrees(rng, params):
    n = 500
    F = np.eye(2) + 0.2 * rng.standard_normal((n, 2, 2))
    F[np.linalg.det(F) <= 0] = np.eye(2)
    G = 0.3 * rng.standard_normal((n, 2, 3))
    Cm = np.diag([3.0, 3.0, 1.0]) + 0.5
    _close(_core.model_energy_pointwise(F, G, Cm, *params), _fallback.model_energy_pointwise(F, G, Cm, *params))


def test_winding_raster_agrees():
    poly = _star()
    args = (0.2, 0.2, 0.6 / 128, 0.6 / 128, 128, 128)
    a, b = _core.winding_raster(poly, *args), _fallback.winding_raster(poly, *args)
    assert np.array_equal(np.asarray(a), np.asarray(b))


def test_winding_raster_double_cover():
    th = 4 * np.pi * np.arange(200) / 200
    poly = np.column_stack([0.5 + 0.3 * np.cos(th), 0.5 + 0.3 * np.sin(th)])
    args = (0.0, 0.0, 1 / 64, 1 / 64, 64, 64)
    a = np.asarray(_core.winding_raster(poly, *args))
    assert np.array_equal(a, np.asarray(_fallback.winding_raster(poly, *args)))
    assert a.max() == 2


def test_segment_distances_agree(rng):
    poly = _star(96, 0.01, rng)
    _close(_core.polygon_segment_distances(poly), _fallback.polygon_segment_distances(poly))


@pytest.mark.parametrize("closed_bow", [False, True])
def test_self_intersections_agree(closed_bow):
    poly = np.array([[0.2, 0.2], [0.8, 0.8], [0.8, 0.2], [0.2, 0.8]]) if closed_bow else _star()
    assert int(_core.count_self_intersections(poly)) == int(_fallback.count_self_intersections(poly))
    assert (int(_core.count_self_intersections(poly)) > 0) == closed_bow


def test_bilinear_stencil_agrees(rng):
    active = np.ones((48, 48), dtype=bool)
    active[20:28, 18:30] = False
    active[0, :] = False
    pts = np.vstack([rng.uniform(-0.05, 1.05, (600, 2)), [[0.5, 0.5], [0.0, 0.0], [1.0, 1.0]]])
    args = (0.0, 0.0, 1 / 48, 1 / 48, active, 2)
    a, b = _core.bilinear_stencil(pts, *args), _fallback.bilinear_stencil(pts, *args)
    assert np.array_equal(np.asarray(a[0]), np.asarray(b[0]))
    _close(a[1], b[1])
    assert np.array_equal(np.asarray(a[2]), np.asarray(b[2]))


def test_pure_python_switch():
    code = "import varislip._kernels as k; print(k.BACKEND)"
    env = dict(os.environ, VARISLIP_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
