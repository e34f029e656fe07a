"""Kernel backend selection.

The compiled extension (``celslm._ckernels``) is used when it was built;
otherwise the numpy fallback is used. Set ``CELSLM_PURE_PYTHON=1`` to force
the fallback. Both backends expose the same four functions and produce
bit-identical results.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("CELSLM_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass

matmul = _impl.matmul
softmax_rows = _impl.softmax_rows
segment_attention = _impl.segment_attention
causal_attention = _impl.causal_attention


def get_backend(name):
    """Return the kernel module for ``"python"`` or ``"cython"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
