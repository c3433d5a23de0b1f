"""Hot-loop kernels with a compiled core and a numpy fallback.

The compiled extension (``protoseg.kernels._ckernels``, built from Cython)
is preferred when importable. Setting ``PROTOSEG_KERNELS=py`` forces the
numpy fallback, ``PROTOSEG_KERNELS=cy`` demands the extension and raises
if it is missing. ``BACKEND`` records which one won.
"""

from __future__ import annotations

import os

from . import _pykernels

_choice = os.environ.get("PROTOSEG_KERNELS", "auto").strip().lower()
if _choice not in ("auto", "py", "cy"):
    raise ValueError(
        f"PROTOSEG_KERNELS must be 'auto', 'py' or 'cy', got {_choice!r}"
    )

_impl = _pykernels
BACKEND = "py"
if _choice in ("auto", "cy"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cy"
    except ImportError:
        if _choice == "cy":
            raise ImportError(
                "PROTOSEG_KERNELS=cy but the compiled extension is not built"
            ) from None

conv_out_extent = _pykernels.conv_out_extent
conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
bilinear_resize = _impl.bilinear_resize
bilinear_resize_adjoint = _impl.bilinear_resize_adjoint
nearest_cluster = _impl.nearest_cluster
slic_assign = _impl.slic_assign

__all__ = [
    "BACKEND",
    "conv_out_extent",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
    "bilinear_resize",
    "bilinear_resize_adjoint",
    "nearest_cluster",
    "slic_assign",
]
