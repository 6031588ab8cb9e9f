"""Numeric kernel backend selection.

Prefers the compiled extension (``native``), falling back to the numpy
reference (``pure``). Set BRANCHMPC_KERNELS=pure or =native to force one;
forcing ``native`` raises if the extension is not built.
"""

from __future__ import annotations

import os

_forced = os.environ.get("BRANCHMPC_KERNELS", "").strip().lower()

if _forced == "pure":
    from . import pure as _impl
    BACKEND = "pure"
elif _forced == "native":
    from . import native as _impl  # type: ignore[attr-defined]
    BACKEND = "native"
elif _forced:
    raise ValueError(f"BRANCHMPC_KERNELS must be 'pure' or 'native', got {_forced!r}")
else:
    try:
        from . import native as _impl  # type: ignore[attr-defined]
        BACKEND = "native"
    except ImportError:
        from . import pure as _impl
        BACKEND = "pure"

box_collision = _impl.box_collision
circle_collision = _impl.circle_collision
smooth_min = _impl.smooth_min
vehicle_linearize_batch = _impl.vehicle_linearize_batch
quadruped_linearize_batch = _impl.quadruped_linearize_batch
soc_residual = _impl.soc_residual
soc_mul = _impl.soc_mul
soc_solve_mul = _impl.soc_solve_mul
soc_nt_scaling = _impl.soc_nt_scaling
soc_apply_w = _impl.soc_apply_w
soc_apply_winv = _impl.soc_apply_winv
soc_wtw_matrix = _impl.soc_wtw_matrix
soc_max_step = _impl.soc_max_step
orthant_max_step = _impl.orthant_max_step


def backend_name() -> str:
    return BACKEND
