"""Hard and soft (annealed sigmoid) quantizers with learnable boundaries.

A quantizer maps the real line onto ``d`` uniformly spaced levels
``I_1 < ... < I_d`` (gap ``delta``) through ``d`` consecutive half-open
intervals ``[b_{v-1}, b_v)``; a value sitting exactly on a boundary goes to
the upper interval, and out-of-range values clamp to the extreme levels.

The smooth surrogate replaces each interval step with a logistic ramp: the
line is split at fixed selector knots ``q = [b_0, I_2, ..., I_{d-1}, b_d]``
into ``d - 1`` segments, and within segment ``v`` the output is
``I_v + delta * sigmoid(lam * (x - b_v))``. As ``lam`` grows the surrogate
converges to the hard quantizer. The interior boundaries ``b_1..b_{d-1}``
are learnable; the endpoints stay fixed at the uniform reference.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels, ndcore
from .errors import ConfigError
from .ndcore import Tensor

_GAP_RTOL = 1e-9


def uniform_levels(num_levels, low=-1.0, high=1.0):
    """``num_levels`` equally spaced level values spanning [low, high]."""
    if num_levels < 2:
        raise ConfigError("a quantizer needs at least 2 levels")
    if not high > low:
        raise ConfigError("level span must have high > low")
    return np.linspace(low, high, num_levels)


def uniform_reference(levels):
    """Reference boundaries of the uniform quantizer for ``levels``.

    Interior boundaries sit at level midpoints; the endpoints extend half a
    gap beyond the extreme levels.
    """
    levels = np.asarray(levels, dtype=np.float64)
    delta = _uniform_gap(levels)
    interior = 0.5 * (levels[:-1] + levels[1:])
    return np.concatenate(([levels[0] - delta / 2], interior, [levels[-1] + delta / 2]))


def _uniform_gap(levels):
    if levels.ndim != 1 or len(levels) < 2:
        raise ConfigError("levels must be a 1-d array of at least 2 values")
    gaps = np.diff(levels)
    if np.any(gaps <= 0):
        raise ConfigError("levels must be strictly increasing")
    delta = float(gaps[0])
    if not np.allclose(gaps, delta, rtol=_GAP_RTOL, atol=0.0):
        raise ConfigError("levels must be uniformly spaced")
    return delta


class Quantizer:
    """Quantizer state: levels, boundaries, sharpness, and derived pieces.

    Mutable single-writer: ``set_interior`` and ``lam`` updates happen
    between training steps only.
    """

    def __init__(self, levels, boundaries=None, lam=1.0):
        levels = np.array(levels, dtype=np.float64)
        self.delta = _uniform_gap(levels)
        levels.setflags(write=False)
        self.levels = levels
        self.reference = uniform_reference(levels)
        self.reference.setflags(write=False)
        if boundaries is None:
            boundaries = self.reference
        self._set_boundaries(np.array(boundaries, dtype=np.float64))
        if not lam > 0:
            raise ConfigError("sharpness lam must be positive")
        self.lam = float(lam)

    def _set_boundaries(self, boundaries):
        if boundaries.shape != (len(self.levels) + 1,):
            raise ConfigError(
                f"need {len(self.levels) + 1} boundaries for "
                f"{len(self.levels)} levels, got {boundaries.shape}"
            )
        if np.any(np.diff(boundaries) <= 0):
            raise ConfigError("boundaries must be strictly increasing")
        boundaries = np.ascontiguousarray(boundaries)
        boundaries.setflags(write=False)
        self.boundaries = boundaries
        # Selector knots depend only on the fixed endpoints and level values.
        knots = np.concatenate(
            ([boundaries[0]], self.levels[1:-1], [boundaries[-1]])
        )
        knots.setflags(write=False)
        self.knots = knots

    @property
    def num_levels(self):
        return len(self.levels)

    @property
    def interior(self):
        """The learnable boundaries b_1..b_{d-1} (a copy)."""
        return self.boundaries[1:-1].copy()

    @property
    def base_levels(self):
        return self.levels[:-1]

    def set_interior(self, interior):
        interior = np.asarray(interior, dtype=np.float64)
        if interior.shape != (self.num_levels - 1,):
            raise ConfigError(
                f"expected {self.num_levels - 1} interior boundaries, "
                f"got {interior.shape}"
            )
        full = np.concatenate(
            ([self.boundaries[0]], interior, [self.boundaries[-1]])
        )
        self._set_boundaries(full)

    def set_lam(self, lam):
        if not lam > 0:
            raise ConfigError("sharpness lam must be positive")
        self.lam = float(lam)

    # -- plain (untaped) evaluation ------------------------------------

    def hard(self, x):
        """Map to the nearest-by-interval level. Scalar in, scalar out."""
        arr = np.asarray(x, dtype=np.float64)
        out = kernels.hard_quantize(arr, self.boundaries, self.levels)
        return float(out) if arr.ndim == 0 else out

    def soft(self, x, lam=None):
        """Smooth surrogate value(s) at ``x``."""
        lam = self.lam if lam is None else float(lam)
        arr = np.asarray(x, dtype=np.float64)
        y, _, _ = kernels.soft_quantize_forward(
            arr.ravel(), self.boundaries[1:-1], self.knots, self.base_levels,
            self.delta, lam,
        )
        return float(y[0]) if arr.ndim == 0 else y.reshape(arr.shape)

    def soft_grad(self, x, lam=None):
        """(dG/dx, dG/db_active) at scalar or vector ``x``.

        Within a segment the two are exact negatives of each other; the
        segment selector itself is treated as locally constant.
        """
        lam = self.lam if lam is None else float(lam)
        arr = np.asarray(x, dtype=np.float64)
        _, sig, _ = kernels.soft_quantize_forward(
            arr.ravel(), self.boundaries[1:-1], self.knots, self.base_levels,
            self.delta, lam,
        )
        dx = (self.delta * lam) * sig * (1.0 - sig)
        if arr.ndim == 0:
            return float(dx[0]), float(-dx[0])
        return dx.reshape(arr.shape), -dx.reshape(arr.shape)

    def boundary_penalty(self):
        """Squared Euclidean distance of the boundaries from the reference."""
        diff = self.boundaries - self.reference
        return float(diff @ diff)

    # -- differentiable evaluation --------------------------------------

    def apply_soft(self, x, interior, lam=None):
        """Soft-quantize a 1-d tensor, recording on the active tape.

        ``interior`` is the learnable boundary tensor; gradients flow to both
        ``x`` and ``interior`` (zero subgradient through the selector).
        """
        lam = self.lam if lam is None else float(lam)
        if interior.shape != (self.num_levels - 1,):
            raise ConfigError(
                f"expected {self.num_levels - 1} interior boundaries, "
                f"got {interior.shape}"
            )
        y, sig, seg = kernels.soft_quantize_forward(
            x.data.ravel(), interior.data, self.knots, self.base_levels,
            self.delta, lam,
        )
        out = Tensor._wrap(y.reshape(x.shape))
        n_interior = interior.size
        delta = self.delta

        def vjp(g):
            gx, gb = kernels.soft_quantize_backward(
                g.ravel(), sig, seg, delta, lam, n_interior
            )
            return gx.reshape(x.shape), gb

        ndcore._record(out, (x, interior), vjp)
        return out

    # -- serialization ---------------------------------------------------

    def to_state(self):
        return {
            "levels": self.levels.tolist(),
            "boundaries": self.boundaries.tolist(),
            "lam": self.lam,
        }

    @classmethod
    def from_state(cls, state):
        return cls(state["levels"], boundaries=state["boundaries"], lam=state["lam"])


@dataclass(frozen=True)
class AnnealSchedule:
    """Geometric sharpness schedule from lam_start to lam_end over T steps."""

    lam_start: float
    lam_end: float
    total: int

    def __post_init__(self):
        if not self.lam_start > 0:
            raise ConfigError("lam_start must be positive")
        if self.lam_end < self.lam_start:
            raise ConfigError("lam_end must be >= lam_start")
        if self.total < 1:
            raise ConfigError("schedule length must be >= 1")


def anneal(schedule, t):
    """Sharpness at step ``t``: geometric interpolation, clamped to [0, T]."""
    t = min(max(t, 0), schedule.total)
    ratio = schedule.lam_end / schedule.lam_start
    return schedule.lam_start * ratio ** (t / schedule.total)
