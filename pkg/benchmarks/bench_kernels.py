"""Compiled kernels against the numpy fallback.

Times every kernel on inputs of the size seen in the built-in scenarios,
checks that both backends agree, then times one full step of the
``toy_oracle`` scenario under each backend in a subprocess.

Run with ``python benchmarks/bench_kernels.py [--repeat N] [--no-step]``.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from varislip._kernels import _fallback

try:
    from varislip._kernels import _core
except ImportError:  # extension not built
    _core = None


def _inputs(rng):
    n = 32 * 32
    F = np.eye(2) + 0.05 * rng.standard_normal((n, 2, 2))
    G = 0.1 * rng.standard_normal((n, 2, 3))
    Cm = np.diag([3.0, 3.0, 1.0]) + 0.5
    th = np.sort(rng.uniform(0, 2 * np.pi, 128))
    poly = np.column_stack([0.5 + 0.15 * np.cos(th), 0.5 + 0.15 * np.sin(th)])
    pts = rng.uniform(0.05, 0.95, (400, 2))
    active = np.ones((96, 96), dtype=bool)
    active[40:56, 40:56] = False
    dx = 1.0 / 96
    return {
        "model_energy_pointwise": (F, G, Cm, 1.0, 3.0, 1e-2, 1e-4),
        "winding_raster": (poly, 0.3, 0.3, 0.4 / 512, 0.4 / 512, 512, 512),
        "polygon_segment_distances": (poly,),
        "count_self_intersections": (poly,),
        "bilinear_stencil": (pts, 0.0, 0.0, dx, dx, active, 2),
    }


def _agree(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_agree(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), rtol=1e-12, atol=1e-12)


def bench_kernels(repeat: int):
    rng = np.random.default_rng(0)
    rows = []
    for name, args in _inputs(rng).items():
        f_py = getattr(_fallback, name)
        t_py = min(timeit.repeat(lambda: f_py(*args), number=1, repeat=repeat))
        if _core is None:
            rows.append((name, t_py, float("nan"), "n/a"))
            continue
        f_c = getattr(_core, name)
        t_c = min(timeit.repeat(lambda: f_c(*args), number=1, repeat=repeat))
        rows.append((name, t_py, t_c, "yes" if _agree(f_py(*args), f_c(*args)) else "NO"))
    return rows


_STEP_SNIPPET = """
import time
from varislip import KERNEL_BACKEND, scenario_config
from varislip.driver import simulate
cfg = scenario_config("toy_oracle")
simulate(cfg, steps=1)
t = time.perf_counter()
simulate(cfg, steps=3)
print(KERNEL_BACKEND, (time.perf_counter() - t) / 3)
"""


def bench_step():
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, VARISLIP_PURE_PYTHON=flag)
        res = subprocess.run([sys.executable, "-c", _STEP_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, sec = res.stdout.split()
        out[backend] = float(sec)
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--no-step", action="store_true", help="skip the end-to-end step timing")
    args = p.parse_args(argv)
    print(f"{'kernel':28s} {'numpy [ms]':>11s} {'compiled [ms]':>14s} {'speedup':>8s} {'agree':>6s}")
    for name, t_py, t_c, ok in bench_kernels(args.repeat):
        print(f"{name:28s} {1e3 * t_py:11.3f} {1e3 * t_c:14.3f} {t_py / t_c:8.1f} {ok:>6s}")
    if not args.no_step:
        st = bench_step()
        print()
        for backend, sec in st.items():
            print(f"toy_oracle step, {backend:8s} backend: {1e3 * sec:.1f} ms")


if __name__ == "__main__":
    main()
