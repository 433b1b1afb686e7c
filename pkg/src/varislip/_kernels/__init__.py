"""Hot kernels with a compiled core and a numpy fallback.

The backend is chosen once at import. Set ``VARISLIP_PURE_PYTHON=1`` to force
the numpy implementation.
"""
from __future__ import annotations

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback
if os.environ.get("VARISLIP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback

model_energy_pointwise = _impl.model_energy_pointwise
winding_raster = _impl.winding_raster
polygon_segment_distances = _impl.polygon_segment_distances
count_self_intersections = _impl.count_self_intersections
bilinear_stencil = _impl.bilinear_stencil

__all__ = [
    "BACKEND",
    "model_energy_pointwise",
    "winding_raster",
    "polygon_segment_distances",
    "count_self_intersections",
    "bilinear_stencil",
]
