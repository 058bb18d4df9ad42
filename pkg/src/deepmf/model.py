"""Two-branch factorization model with a cosine-similarity head.

Each branch is a stack of fully connected layers embedding a dense row (or
column) vector into a shared d-dimensional latent space; the predicted
entry is the cosine similarity of the two latents, a value in [-1, 1] that
matches the scaled rating domain. Rows and columns unseen during training
are handled by the very same code path: their input vectors are simply
built from whatever observations describe them on the seen universe.

Model files are binary: an 8-byte magic tag, a little-endian uint64 header
length, a JSON header (configs, scaling, quantizer scalars, array table),
then the raw float64 little-endian array blobs in table order. Save/load
round-trips bit-exactly.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ndcore as nd
from .errors import ConfigError, DimensionError, FormatError
from .ndcore import Tensor
from .quantizer import Quantizer
from .rng import stream

MAGIC = b"DMFMODL1"
MODEL_FORMAT = "deepmf-model"
MODEL_VERSION = 1

NONLINEARITIES = ("selu", "identity")


@dataclass(frozen=True)
class BranchConfig:
    """Shape of one embedding branch."""

    input_dim: int
    hidden_dims: tuple
    latent_dim: int
    nonlinearity: str = "selu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.latent_dim < 1:
            raise ConfigError("input_dim and latent_dim must be >= 1")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden layer widths must be >= 1")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigError(
                f"nonlinearity must be one of {NONLINEARITIES}, got {self.nonlinearity!r}"
            )

    @property
    def dims(self):
        return (self.input_dim, *self.hidden_dims, self.latent_dim)

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "latent_dim": self.latent_dim,
            "nonlinearity": self.nonlinearity,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["input_dim"], tuple(d["hidden_dims"]), d["latent_dim"],
                   d["nonlinearity"])


@dataclass
class Layer:
    w: Tensor
    b: Tensor


@dataclass
class DmfModel:
    """Weights of both branches plus scaling/quantizer metadata."""

    row_config: BranchConfig
    col_config: BranchConfig
    row_layers: list
    col_layers: list
    alpha: float = None
    beta: float = None
    quantizer: Quantizer = field(default=None)

    def set_scaling(self, alpha, beta):
        if not beta > alpha:
            raise ConfigError(f"need beta > alpha, got [{alpha}, {beta}]")
        self.alpha = float(alpha)
        self.beta = float(beta)

    @property
    def mu(self):
        return (self.alpha + self.beta) / 2.0

    def parameters(self):
        """(name, tensor) pairs in a fixed, deterministic order."""
        out = []
        for branch, layers in (("row", self.row_layers), ("col", self.col_layers)):
            for k, layer in enumerate(layers):
                out.append((f"{branch}.{k}.w", layer.w))
                out.append((f"{branch}.{k}.b", layer.b))
        return out

    def weight_tensors(self):
        """Weight matrices only (biases are excluded from regularization)."""
        return [layer.w for layer in self.row_layers + self.col_layers]

    def set_parameter(self, name, values):
        branch, k, kind = name.split(".")
        layers = self.row_layers if branch == "row" else self.col_layers
        t = values if isinstance(values, Tensor) else nd.parameter(values)
        setattr(layers[int(k)], kind, t)


def init(row_config, col_config, seed):
    """Fresh model with scaled-uniform weights and zero biases."""
    if row_config.latent_dim != col_config.latent_dim:
        raise ConfigError(
            f"latent dims differ: row {row_config.latent_dim} vs "
            f"col {col_config.latent_dim}"
        )
    rng = stream(seed, "init")

    def make_layers(config):
        layers = []
        dims = config.dims
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            layers.append(Layer(nd.parameter(w), nd.parameter(np.zeros(fan_out))))
        return layers

    return DmfModel(row_config, col_config, make_layers(row_config),
                    make_layers(col_config))


# --- forward passes ----------------------------------------------------------


def _as_matrix(x, dim, what):
    if isinstance(x, Tensor):
        t = x
    else:
        t = Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if t.ndim == 1:
        t = Tensor(t.data[None, :])
    if t.ndim != 2 or t.shape[1] != dim:
        raise DimensionError(
            f"{what}: expected vectors of length {dim}, got shape {t.shape}"
        )
    return t


def _forward_branch(layers, nonlinearity, h):
    last = len(layers) - 1
    for k, layer in enumerate(layers):
        h = nd.add_bias(nd.matmul(h, layer.w), layer.b)
        if k != last and nonlinearity == "selu":
            h = nd.selu(h)
    return h


def embed_rows(model, x):
    """(B, m) row inputs -> (B, d) latent factors."""
    x = _as_matrix(x, model.row_config.input_dim, "embed_rows")
    return _forward_branch(model.row_layers, model.row_config.nonlinearity, x)


def embed_cols(model, y):
    """(B, n) column inputs -> (B, d) latent factors."""
    y = _as_matrix(y, model.col_config.input_dim, "embed_cols")
    return _forward_branch(model.col_layers, model.col_config.nonlinearity, y)


def embed_row(model, x):
    """Single row vector -> length-d latent tensor."""
    return Tensor(embed_rows(model, x).data[0])


def embed_col(model, y):
    return Tensor(embed_cols(model, y).data[0])


def cosine_head(u, v):
    """Row-wise cosine similarity of two (B, d) latent blocks.

    Denominator norms are clamped below at 1e-12 so degenerate zero latents
    cannot divide by zero; outputs stay in [-1, 1] up to roundoff.
    """
    dots = nd.row_sum(nd.mul(u, v))
    nu = nd.clamp_min(nd.row_l2norm(u), nd.NORM_FLOOR)
    nv = nd.clamp_min(nd.row_l2norm(v), nd.NORM_FLOOR)
    return nd.div(dots, nd.mul(nu, nv))


def predict_batch(model, x, y):
    """(B,) tensor of predictions for paired row/column input batches."""
    u = embed_rows(model, x)
    v = embed_cols(model, y)
    if u.shape[0] != v.shape[0]:
        raise DimensionError(
            f"batch sizes differ: {u.shape[0]} rows vs {v.shape[0]} columns"
        )
    return cosine_head(u, v)


def predict(model, x, y):
    """Scalar prediction in [-1, 1] for one row/column input pair."""
    return float(predict_batch(model, x, y).data[0])


def predict_entries(model, source, rows, cols, chunk=4096):
    """Raw cosine predictions for (row, col) index pairs, in chunks."""
    out = np.empty(len(rows))
    for lo in range(0, len(rows), chunk):
        hi = min(lo + chunk, len(rows))
        x = source.row_batch(rows[lo:hi])
        y = source.col_batch(cols[lo:hi])
        out[lo:hi] = predict_batch(model, x, y).data
    return out


def predict_area(model, area, row_source, col_source, i, j):
    """Prediction for entry (i, j) routed through an extendability area.

    ``area`` is 1..4 and only names which universes the sources represent;
    every area runs the exact same embedding + cosine path, which is the
    point: unseen rows/columns need no retraining.
    """
    if area not in (1, 2, 3, 4):
        raise ConfigError(f"area must be 1..4, got {area}")
    x = row_source.row_vector(i)
    y = col_source.col_vector(j)
    return predict(model, x, y)


# --- serialization -----------------------------------------------------------


def save(model, path):
    """Write the model file (see module docstring for the byte layout)."""
    arrays = []
    blobs = []
    for name, t in model.parameters():
        arrays.append({"name": name, "shape": list(t.shape)})
        blobs.append(t.data.astype("<f8").tobytes(order="C"))
    if model.quantizer is not None:
        q = model.quantizer
        for name, arr in (("quantizer.levels", q.levels),
                          ("quantizer.boundaries", q.boundaries)):
            arrays.append({"name": name, "shape": list(arr.shape)})
            blobs.append(arr.astype("<f8").tobytes(order="C"))
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "row_config": model.row_config.to_dict(),
        "col_config": model.col_config.to_dict(),
        "scaling": None if model.alpha is None else
                   {"alpha": model.alpha, "beta": model.beta},
        "quantizer": None if model.quantizer is None else
                     {"lam": model.quantizer.lam},
        "arrays": arrays,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load(path):
    """Read a model file written by :func:`save`; bit-exact round trip."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path} is not a model file (bad magic)")
    (head_len,) = struct.unpack_from("<Q", raw, len(MAGIC))
    head_start = len(MAGIC) + 8
    if len(raw) < head_start + head_len:
        raise FormatError(f"{path} is truncated (incomplete header)")
    try:
        header = json.loads(raw[head_start : head_start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path} has a corrupt header: {exc}") from None
    if header.get("format") != MODEL_FORMAT:
        raise FormatError(f"{path} is not a model file")
    if header.get("version") != MODEL_VERSION:
        raise FormatError(
            f"model version {header.get('version')} unsupported "
            f"(expected {MODEL_VERSION})"
        )

    offset = head_start + head_len
    stored = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape)) if shape else 8
        if offset + nbytes > len(raw):
            raise FormatError(f"{path} is truncated (missing array data)")
        arr = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)),
                            offset=offset).reshape(shape)
        stored[entry["name"]] = arr
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path} has trailing bytes")

    row_config = BranchConfig.from_dict(header["row_config"])
    col_config = BranchConfig.from_dict(header["col_config"])
    model = DmfModel(row_config, col_config, [], [])

    def take_layers(branch, config):
        layers = []
        for k in range(len(config.dims) - 1):
            layers.append(Layer(
                nd.parameter(stored[f"{branch}.{k}.w"]),
                nd.parameter(stored[f"{branch}.{k}.b"]),
            ))
        return layers

    try:
        model.row_layers = take_layers("row", row_config)
        model.col_layers = take_layers("col", col_config)
    except KeyError as exc:
        raise FormatError(f"{path} is missing array {exc}") from None

    if header["scaling"] is not None:
        model.set_scaling(header["scaling"]["alpha"], header["scaling"]["beta"])
    if header["quantizer"] is not None:
        try:
            model.quantizer = Quantizer(
                stored["quantizer.levels"],
                boundaries=stored["quantizer.boundaries"],
                lam=header["quantizer"]["lam"],
            )
        except KeyError as exc:
            raise FormatError(f"{path} is missing array {exc}") from None
    return model
