"""Kernel backend selection.

Two interchangeable backends implement the hot loops (conv2d and affine
sampling): ``_native`` (Cython, compiled at install time) and ``_numpy``
(pure numpy, always available). Selection happens once at import:

* ``SEAMCAM_KERNELS=native``  require the compiled backend, fail otherwise
* ``SEAMCAM_KERNELS=numpy``   force the fallback
* unset / ``auto``            prefer native, silently fall back

``seamcam._kernels.BACKEND`` names the backend in use.
"""

import os

from . import _numpy

_choice = os.environ.get("SEAMCAM_KERNELS", "auto").lower()
_native_impl = None
if _choice in ("auto", "native"):
    try:
        from . import _native as _native_impl
    except ImportError:
        if _choice == "native":
            raise
elif _choice != "numpy":
    raise ValueError(f"SEAMCAM_KERNELS must be auto|native|numpy, got {_choice!r}")

impl = _native_impl if _native_impl is not None else _numpy
BACKEND = impl.NAME

conv2d_forward = impl.conv2d_forward
conv2d_grad_input = impl.conv2d_grad_input
conv2d_grad_kernel = impl.conv2d_grad_kernel
sample_forward = impl.sample_forward
sample_grad_input = impl.sample_grad_input


def available_backends():
    """Importable backend modules, keyed by name (for tests and benchmarks)."""
    out = {_numpy.NAME: _numpy}
    try:
        from . import _native as native_mod
        out[native_mod.NAME] = native_mod
    except ImportError:
        pass
    return out
