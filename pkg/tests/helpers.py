"""Shared test utilities: finite-difference oracles and toy problems."""

import numpy as np

from deepmf import model as model_mod
from deepmf import ndcore as nd
from deepmf.data import scale_values
from deepmf.kernels import SELU_ALPHA, SELU_SCALE
from deepmf.model import BranchConfig
from deepmf.quantizer import Quantizer, uniform_levels


def finite_difference(f, arrays, h=1e-5):
    """Central-difference gradients of scalar ``f(arrays)`` per coordinate."""
    grads = []
    for k in range(len(arrays)):
        g = np.zeros_like(arrays[k], dtype=np.float64)
        gf = g.ravel()
        for i in range(arrays[k].size):
            work = [a.astype(np.float64).copy() for a in arrays]
            work[k].ravel()[i] += h
            fp = f(work)
            work[k].ravel()[i] -= 2 * h
            fm = f(work)
            gf[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_err(a, b, floor=1e-10):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def manual_selu(x):
    return np.where(x > 0, SELU_SCALE * x, SELU_SCALE * SELU_ALPHA * (np.exp(x) - 1.0))


def manual_branch(layers, nonlinearity, x):
    """Plain-numpy re-walk of a branch; returns (latents, preactivations)."""
    h = np.asarray(x, dtype=np.float64)
    pres = []
    last = len(layers) - 1
    for k, layer in enumerate(layers):
        h = h @ layer.w.data + layer.b.data
        pres.append(h.copy())
        if k != last and nonlinearity == "selu":
            h = manual_selu(h)
    return h, pres


def manual_cosine(u, v, floor=1e-12):
    nu = np.maximum(np.sqrt((u * u).sum(axis=1)), floor)
    nv = np.maximum(np.sqrt((v * v).sum(axis=1)), floor)
    return (u * v).sum(axis=1) / (nu * nv)


class ToyProblem:
    """Fully observed random matrix plus a small two-branch model.

    Provides the dense input batches covering every observed entry, the
    parameter list in a stable order, and objective closures that rebuild
    the model from raw arrays (used by the finite-difference oracle).
    """

    def __init__(self, seed, n=6, m=5, hidden=(4,), latent=3,
                 nonlinearity="selu", alpha=1.0, beta=5.0):
        rng = np.random.default_rng(seed)
        self.n, self.m = n, m
        self.alpha, self.beta = alpha, beta
        values = rng.integers(int(alpha), int(beta) + 1, size=(n, m)).astype(float)
        self.values = values
        self.scaled = scale_values(values, alpha, beta)
        entries = np.arange(n * m)
        self.rows, self.cols = np.divmod(entries, m)
        self.targets = self.scaled[self.rows, self.cols]
        self.x = self.scaled[self.rows]          # (n*m, m) row input vectors
        self.y = self.scaled.T[self.cols]        # (n*m, n) column input vectors
        self.row_config = BranchConfig(m, hidden, latent, nonlinearity)
        self.col_config = BranchConfig(n, hidden, latent, nonlinearity)
        self.model = model_mod.init(self.row_config, self.col_config, seed)
        self.param_names = [name for name, _ in self.model.parameters()]

    def param_arrays(self):
        return [np.array(t.data) for _, t in self.model.parameters()]

    def set_params(self, arrays):
        for name, arr in zip(self.param_names, arrays):
            self.model.set_parameter(name, arr)

    def randomize(self, seed, spread=0.6):
        rng = np.random.default_rng(seed)
        self.set_params([rng.normal(0.0, spread, size=a.shape)
                         for a in self.param_arrays()])

    def predictions(self):
        u, _ = manual_branch(self.model.row_layers,
                             self.row_config.nonlinearity, self.x)
        v, _ = manual_branch(self.model.col_layers,
                             self.col_config.nonlinearity, self.y)
        return manual_cosine(u, v)

    def preactivations(self):
        _, pu = manual_branch(self.model.row_layers,
                              self.row_config.nonlinearity, self.x)
        _, pv = manual_branch(self.model.col_layers,
                              self.col_config.nonlinearity, self.y)
        return np.concatenate([p.ravel() for p in pu[:-1] + pv[:-1]]) \
            if len(pu) > 1 else np.array([1.0])


def smooth_parameter_seeds(problem_seed, count, quantizer=None, start=0,
                           knot_margin=1e-3, kink_margin=1e-3, spread=0.6):
    """Parameter seeds whose toy objective is locally smooth.

    A seed qualifies when every hidden preactivation stays away from the
    SELU kink at 0 and (for a quantized objective) every prediction stays
    away from the selector knots, so central differences see a smooth
    function.
    """
    problem = ToyProblem(problem_seed)
    good = []
    seed = start
    while len(good) < count:
        problem.randomize(seed, spread=spread)
        pre = problem.preactivations()
        ok = np.min(np.abs(pre)) > kink_margin
        if ok and quantizer is not None:
            f = problem.predictions()
            dist = np.min(np.abs(f[:, None] - quantizer.knots[None, :]))
            ok = dist > knot_margin
        if ok:
            good.append(seed)
        seed += 1
        if seed - start > 500:
            raise RuntimeError("could not find smooth parameter seeds")
    return good


def default_quantizer(lam=12.0, num_levels=5):
    return Quantizer(uniform_levels(num_levels), lam=lam)


def rank1_matrix(seed=123, n=20, m=15):
    """Fully observed rank-1 matrix with strictly interior rating values.

    Interior values matter: the cosine head reaches the scaled endpoints
    +-1 only asymptotically, so a fixture that must be fit to high accuracy
    cannot place mass exactly at the endpoints.
    """
    from deepmf.data import RatingMatrix

    rng = np.random.default_rng(seed)
    raw = np.outer(rng.uniform(0.5, 1.5, n), rng.uniform(0.5, 1.5, m))
    vals = 1.2 + 3.6 * (raw - raw.min()) / (raw.max() - raw.min())
    rows, cols = np.divmod(np.arange(n * m), m)
    return RatingMatrix(n, m, rows, cols, vals[rows, cols], 1, 5)


def rank3_quantized_matrix(seed, n=200, m=150, density=0.3):
    """Rank-3 scores quantized at their quintiles onto the levels {1..5}.

    Quantile boundaries balance the five levels (about 20% each), so the
    extreme levels actually occur; the level values themselves stay the
    uniform grid.
    """
    from deepmf.data import RatingMatrix

    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(n, 3)) @ rng.normal(size=(3, m))
    qs = np.quantile(raw, [0.2, 0.4, 0.6, 0.8])
    q = 1.0 + np.searchsorted(qs, raw, side="right")
    n_obs = int(density * n * m)
    idx = rng.choice(n * m, size=n_obs, replace=False)
    rows, cols = np.divmod(np.sort(idx), m)
    return RatingMatrix(n, m, rows, cols, q[rows, cols].astype(float), 1, 5)


def sparse_random_matrix(seed, n=12, m=10, density=0.6, alpha=1.0, beta=5.0):
    from deepmf.data import RatingMatrix

    rng = np.random.default_rng(seed)
    n_obs = max(int(density * n * m), 1)
    idx = rng.choice(n * m, size=n_obs, replace=False)
    rows, cols = np.divmod(np.sort(idx), m)
    vals = rng.integers(int(alpha), int(beta) + 1, size=n_obs).astype(float)
    return RatingMatrix(n, m, rows, cols, vals, alpha, beta)
