"""Backend selection for the hot kernels.

The compiled extension is preferred; the numpy fallback is used when it is
missing or when ``PSTUNE_PURE_PYTHON`` is set to a non-empty value other
than ``0``.
"""

import os

import numpy as np

from . import _kernels_py

QUADRATIC = _kernels_py.QUADRATIC
LOGISTIC = _kernels_py.LOGISTIC
HINGE = _kernels_py.HINGE


def _load_compiled():
    if os.environ.get("PSTUNE_PURE_PYTHON", "") not in ("", "0"):
        return None
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels


_compiled = _load_compiled()
BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py


def get_backend(name=None):
    """Return the kernel module for ``name`` ('cython' or 'python'), default the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            from . import _kernels  # raises ImportError if not built
            return _kernels
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def loss_grad(kind, X, y, idx, w, l2, grad_out):
    return _impl.loss_grad(kind, X, y, idx, w, l2, grad_out)


def example_losses(kind, X, y, w):
    return np.asarray(_impl.example_losses(kind, X, y, w))


def matern52_gram(A, B, inv_lengthscales, signal_variance):
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    inv = np.ascontiguousarray(inv_lengthscales, dtype=np.float64)
    return np.asarray(_impl.matern52_gram(A, B, inv, float(signal_variance)))
