"""Few-shot prototype segmentation with a compiled kernel core.

The package splits into the numeric stack (``numerics``, ``kernels``), the
model stages (``encoder``, ``ran``, ``fspa``, ``bcma``, ``segmenter``) and
the experiment harness (``protoseg.harness``).
"""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
