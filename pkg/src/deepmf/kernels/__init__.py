"""Numeric kernel backends.

Two interchangeable implementations of the hot per-element kernels exist:
a compiled Cython extension (``_ckernels``) and a numpy-vectorized fallback
(``pykernels``). The compiled one is picked at import when available; the
``DEEPMF_KERNELS`` environment variable forces a choice (``compiled`` /
``python`` / ``auto``).

Matrix products are not part of this layer: both backends route them through
numpy's BLAS, where a handwritten loop would only lose.

The module-level functions below dispatch to the active backend at call time
and normalize shapes (backends operate on flat arrays).
"""

import os
from contextlib import contextmanager

from ..errors import ConfigError

from . import pykernels

_compiled = None
_requested = os.environ.get("DEEPMF_KERNELS", "auto").lower()
if _requested not in ("auto", "compiled", "python"):
    raise ConfigError(
        f"DEEPMF_KERNELS must be 'auto', 'compiled' or 'python', got {_requested!r}"
    )
if _requested in ("auto", "compiled"):
    try:
        from . import _ckernels as _compiled
    except ImportError:
        _compiled = None
        if _requested == "compiled":
            raise ConfigError(
                "DEEPMF_KERNELS=compiled but the compiled extension is not built; "
                "run 'python setup.py build_ext --inplace' or reinstall"
            ) from None

active = _compiled if _compiled is not None else pykernels

SELU_SCALE = pykernels.SELU_SCALE
SELU_ALPHA = pykernels.SELU_ALPHA


def available():
    """Names of the usable backends."""
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "compiled")
    return tuple(names)


def get(name):
    if name == "python":
        return pykernels
    if name == "compiled":
        if _compiled is None:
            raise ConfigError("compiled kernels are not built")
        return _compiled
    raise ConfigError(f"unknown kernel backend {name!r}")


@contextmanager
def use(name):
    """Temporarily switch the active backend (single-threaded use only)."""
    global active
    previous = active
    active = get(name)
    try:
        yield active
    finally:
        active = previous


def selu_forward(x):
    return active.selu_forward(x.ravel()).reshape(x.shape)


def selu_backward(x, grad_out):
    return active.selu_backward(x.ravel(), grad_out.ravel()).reshape(x.shape)


def logistic(x, slope, center):
    return active.logistic(x.ravel(), slope, center).reshape(x.shape)


def soft_quantize_forward(x, interior, knots, base_levels, delta, lam):
    return active.soft_quantize_forward(x, interior, knots, base_levels, delta, lam)


def soft_quantize_backward(grad_out, sig, seg, delta, lam, n_interior):
    return active.soft_quantize_backward(grad_out, sig, seg, delta, lam, n_interior)


def hard_quantize(x, boundaries, levels):
    return active.hard_quantize(x.ravel(), boundaries, levels).reshape(x.shape)


def adam_step(param, grad, m, v, t, lr, beta1, beta2, eps):
    return active.adam_step(param, grad, m, v, t, lr, beta1, beta2, eps)
