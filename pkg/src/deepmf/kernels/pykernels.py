"""Pure-Python (numpy-vectorized) implementations of the hot kernels.

This is the fallback backend; ``deepmf.kernels._ckernels`` is the compiled
twin with identical signatures and semantics. All arrays are C-contiguous
float64. Segment/interval lookups use bisect-right semantics, so a value
sitting exactly on a boundary belongs to the upper interval.
"""

import numpy as np

NAME = "python"

SELU_SCALE = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717


def selu_forward(x):
    return np.where(x > 0.0, SELU_SCALE * x, (SELU_SCALE * SELU_ALPHA) * np.expm1(x))


def selu_backward(x, grad_out):
    return grad_out * np.where(x > 0.0, SELU_SCALE, (SELU_SCALE * SELU_ALPHA) * np.exp(x))


def logistic(x, slope, center):
    # Stable form: never exponentiates a positive argument.
    z = slope * (x - center)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def soft_quantize_forward(x, interior, knots, base_levels, delta, lam):
    """Piecewise-sigmoid quantizer.

    ``knots`` are the fixed selector points splitting the line into
    ``len(interior)`` segments; segment ``v`` contributes
    ``base_levels[v] + delta * sigmoid(lam * (x - interior[v]))``.
    Inputs outside the knot range reuse the nearest segment's formula.

    Returns ``(y, sig, seg)`` with the sigmoid values and segment indices
    cached for the backward pass.
    """
    seg = np.searchsorted(knots, x, side="right") - 1
    np.clip(seg, 0, len(interior) - 1, out=seg)
    sig = logistic(x - interior[seg], lam, 0.0)
    y = base_levels[seg] + delta * sig
    return y, sig, seg


def soft_quantize_backward(grad_out, sig, seg, delta, lam, n_interior):
    """Gradients of the soft quantizer w.r.t. input and interior boundaries.

    The segment selector is treated as locally constant (zero subgradient).
    """
    local = grad_out * (delta * lam) * (sig * (1.0 - sig))
    grad_b = np.zeros(n_interior, dtype=np.float64)
    np.add.at(grad_b, seg, -local)
    return local, grad_b


def hard_quantize(x, boundaries, levels):
    idx = np.searchsorted(boundaries, x, side="right") - 1
    np.clip(idx, 0, len(levels) - 1, out=idx)
    return levels[idx]


def adam_step(param, grad, m, v, t, lr, beta1, beta2, eps):
    """One fused adaptive-moment update. Mutates ``m`` and ``v`` in place,
    returns the new parameter array."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    return param - lr * (mhat / (np.sqrt(vhat) + eps))
