"""Kernel selection: compiled extension when importable, numpy otherwise.

Set ``LORENZ_ATLAS_PURE=1`` to force the numpy implementation.
"""

import os

from . import _pykernels

BACKEND = "numpy"
_impl = _pykernels

if os.environ.get("LORENZ_ATLAS_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"

conv2_trunc = _impl.conv2_trunc
conv2_dot2 = _impl.conv2_dot2
lorenz_taylor = _impl.lorenz_taylor
dot2_matmul = _impl.dot2_matmul


def use(name: str) -> None:
    """Switch backend at runtime ("cython" or "numpy"); used by benchmarks."""
    global _impl, BACKEND, conv2_trunc, conv2_dot2, lorenz_taylor, dot2_matmul
    if name == "numpy":
        _impl = _pykernels
    elif name == "cython":
        from . import _ckernels
        _impl = _ckernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
    conv2_trunc = _impl.conv2_trunc
    conv2_dot2 = _impl.conv2_dot2
    lorenz_taylor = _impl.lorenz_taylor
    dot2_matmul = _impl.dot2_matmul
