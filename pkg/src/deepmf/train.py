"""Objective assembly, minibatch training, and checkpointing.

The real-valued objective is the batch mean of squared error between the
cosine-head prediction and the scaled target, plus ``gamma`` times the
squared Frobenius norm of all weight matrices (biases are exempt). The
discrete objective composes the soft quantizer onto the prediction before
the error, regularizes weights under ``gamma1`` and penalizes boundary
drift from the uniform reference under ``gamma2``; an audit switch instead
quantizes the residual (prediction minus target), kept behind a flag
because rating-valued levels make no dimensional sense for residuals.

Batch means are used throughout, so the expected gradient matches a
full-sum objective normalized by the training-set size; reported
``gamma*`` values are comparable under that normalization.

Optimization is adaptive-moment gradient descent (0.9/0.999, eps 1e-8)
with a separate learning rate for quantizer boundaries, whose gradient
scale grows with the annealed sharpness. After every step the interior
boundaries are projected to stay strictly increasing with a 1e-4 margin.
Early stopping tracks validation RMSE of the deployed behavior: hard
quantized predictions in discrete mode, real-valued otherwise.
"""

import json
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from . import model as model_mod
from . import ndcore as nd
from .data import unscale_values
from .errors import (ConfigError, DimensionError, DivergenceError,
                     FormatError, NonFiniteError)
from .ndcore import Tape, Tensor, backward
from .quantizer import AnnealSchedule, Quantizer, anneal, uniform_levels
from .rng import stream

CHECKPOINT_MAGIC = b"DMFCKPT1"
CHECKPOINT_FORMAT = "deepmf-checkpoint"
CHECKPOINT_VERSION = 1

DIVERGENCE_CAP = 1e6
BOUNDARY_MARGIN = 1e-4


@dataclass
class TrainConfig:
    mode: str = "dmf"  # "dmf" or "dmfd"
    gamma: float = 1e-4
    gamma1: float = 1e-4
    gamma2: float = 1.0
    learning_rate: float = 1e-3
    boundary_learning_rate: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    lambda_start: float = 5.0
    lambda_end: float = 1000.0
    num_levels: int = 5
    residual_quantization: bool = False

    def validate(self):
        if self.mode not in ("dmf", "dmfd"):
            raise ConfigError(f"mode must be 'dmf' or 'dmfd', got {self.mode!r}")
        for name in ("gamma", "gamma1", "gamma2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        for name in ("learning_rate", "boundary_learning_rate"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.mode == "dmfd":
            if self.num_levels < 2:
                raise ConfigError("num_levels must be >= 2")
            AnnealSchedule(self.lambda_start, self.lambda_end, 1)  # range checks
        return self


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: float
    val_mae: float
    lam: "float | None"
    seconds: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self, path, zero_seconds=False):
        lines = ["epoch,train_loss,val_rmse,val_mae,lambda,seconds"]
        for r in self.epochs:
            lam = "" if r.lam is None else repr(r.lam)
            secs = repr(0.0) if zero_seconds else repr(r.seconds)
            lines.append(
                f"{r.epoch},{r.train_loss!r},{r.val_rmse!r},{r.val_mae!r},"
                f"{lam},{secs}"
            )
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    def summary(self):
        if not self.epochs:
            return "no epochs completed\n"
        best = next(r for r in self.epochs if r.epoch == self.best_epoch)
        last = self.epochs[-1]
        return (
            f"epochs: {len(self.epochs)}\n"
            f"best_epoch: {self.best_epoch}\n"
            f"best_val_rmse: {best.val_rmse!r}\n"
            f"best_val_mae: {best.val_mae!r}\n"
            f"final_train_loss: {last.train_loss!r}\n"
        )


class Adam:
    """Adaptive-moment estimation with per-call learning rate."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def begin_step(self):
        self.t += 1

    def update(self, name, tensor, grad, lr):
        """New parameter tensor after one update for ``name``."""
        flat = tensor.data.ravel()
        if grad is None:
            grad = np.zeros(tensor.size)
        grad = np.ascontiguousarray(grad, dtype=np.float64).ravel()
        m = self.m.setdefault(name, np.zeros(tensor.size))
        v = self.v.setdefault(name, np.zeros(tensor.size))
        new = kernels.adam_step(flat, grad, m, v, self.t, lr,
                                self.beta1, self.beta2, self.eps)
        return nd.parameter(new.reshape(tensor.shape))


# --- objectives ---------------------------------------------------------------


def _weight_penalty(model):
    reg = None
    for w in model.weight_tensors():
        term = nd.total(nd.square(w))
        reg = term if reg is None else nd.add(reg, term)
    return reg


def loss_dmf(model, x, y, targets, gamma):
    """(loss, predictions) for one real-valued batch."""
    preds = model_mod.predict_batch(model, x, y)
    fit = nd.mean(nd.square(nd.sub(preds, Tensor(targets))))
    loss = fit if gamma == 0 else nd.add(fit, nd.smul(_weight_penalty(model), gamma))
    return loss, preds


def loss_dmfd(model, quantizer, interior, x, y, targets, gamma1, gamma2,
              lam=None, residual=False):
    """(loss, predictions) for one batch of the discrete objective.

    ``interior`` is the learnable boundary tensor used for this pass.
    Endpoint boundaries are pinned to the uniform reference, so only the
    interior terms of the boundary penalty can be nonzero.
    """
    preds = model_mod.predict_batch(model, x, y)
    t = Tensor(targets)
    if residual:
        fit = nd.mean(nd.square(quantizer.apply_soft(nd.sub(preds, t), interior, lam)))
    else:
        soft = quantizer.apply_soft(preds, interior, lam)
        fit = nd.mean(nd.square(nd.sub(soft, t)))
    loss = fit if gamma1 == 0 else nd.add(fit, nd.smul(_weight_penalty(model), gamma1))
    if gamma2 != 0:
        drift = nd.sub(interior, Tensor(quantizer.reference[1:-1]))
        loss = nd.add(loss, nd.smul(nd.total(nd.square(drift)), gamma2))
    return loss, preds


def project_interior(interior, b0, bd, margin=BOUNDARY_MARGIN):
    """Restore strict ordering between the fixed endpoints.

    Right-to-left pass clamps below the upper neighbor, left-to-right pass
    clamps above the lower; with a sane span both constraints coexist.
    """
    out = np.array(interior, dtype=np.float64)
    hi = bd
    for k in range(len(out) - 1, -1, -1):
        out[k] = min(out[k], hi - margin)
        hi = out[k]
    lo = b0
    for k in range(len(out)):
        out[k] = max(out[k], lo + margin)
        lo = out[k]
    full = np.concatenate(([b0], out, [bd]))
    if np.any(np.diff(full) <= 0):
        raise ConfigError("boundary projection failed: span too tight for margin")
    return out


# --- inference helpers --------------------------------------------------------


def predict_discrete(model, quantizer, x, y):
    """Hard-quantized prediction mapped back to the original rating domain."""
    f = model_mod.predict(model, x, y)
    return float(unscale_values(quantizer.hard(f), model.alpha, model.beta))


def predict_discrete_batch(model, quantizer, x, y):
    f = model_mod.predict_batch(model, x, y).data
    return unscale_values(quantizer.hard(f), model.alpha, model.beta)


def _validation_metrics(model, task, mode, quantizer):
    if len(task.val_rows) == 0:
        return float("nan"), float("nan")
    raw = model_mod.predict_entries(model, task.source, task.val_rows, task.val_cols)
    if mode == "dmfd":
        preds = unscale_values(quantizer.hard(raw), model.alpha, model.beta)
    else:
        preds = unscale_values(raw, model.alpha, model.beta)
    err = preds - task.val_targets
    rmse = float(np.sqrt(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    return rmse, mae


# --- the loop -----------------------------------------------------------------


def _snapshot(model, quantizer):
    state = {name: t for name, t in model.parameters()}
    if quantizer is not None:
        state["quantizer.interior"] = quantizer.interior
        state["quantizer.lam"] = quantizer.lam
    return state


def _restore(model, quantizer, state):
    for name, t in list(model.parameters()):
        model.set_parameter(name, state[name])
    if quantizer is not None:
        quantizer.set_interior(state["quantizer.interior"])
        quantizer.set_lam(state["quantizer.lam"])


def train(model, task, config, resume_state=None, deterministic_timing=False,
          checkpoint_out=None, stop_after=None):
    """Fit ``model`` on ``task``; returns ``(model, report)``.

    The model is updated in place; the weights left in it are those of the
    best validation epoch. With an empty validation set every epoch counts
    as an improvement and training runs to ``max_epochs``. When
    ``checkpoint_out`` is given, the full optimizer/rng/last-weights state
    is written there so a later run can resume without resetting anything;
    ``stop_after`` caps how many epochs this session runs (the schedule
    keeps following ``max_epochs``), which is how long runs are split
    across sessions.
    """
    config.validate()
    if model.row_config.input_dim != task.row_input_dim:
        raise DimensionError(
            f"row branch expects {model.row_config.input_dim} inputs but the "
            f"data provides {task.row_input_dim}"
        )
    if model.col_config.input_dim != task.col_input_dim:
        raise DimensionError(
            f"column branch expects {model.col_config.input_dim} inputs but "
            f"the data provides {task.col_input_dim}"
        )
    model.set_scaling(task.matrix.alpha, task.matrix.beta)

    quantizer = None
    schedule = None
    if config.mode == "dmfd":
        if model.quantizer is None:
            model.quantizer = Quantizer(uniform_levels(config.num_levels),
                                        lam=config.lambda_start)
        quantizer = model.quantizer
        # Epoch e of E runs at lam((e - 1) / (E - 1)) along the geometric
        # path, so the first epoch uses lam_start and the last lam_end.
        schedule = AnnealSchedule(config.lambda_start, config.lambda_end,
                                  max(config.max_epochs - 1, 1))

    rng = stream(config.seed, "shuffle")
    adam = Adam()
    report = TrainReport()
    best = None
    best_val = np.inf
    since_best = 0
    start_epoch = 1

    if resume_state is not None:
        start_epoch = _apply_resume(model, quantizer, adam, rng, report,
                                    resume_state)
        best_val = resume_state["best_val"]
        since_best = resume_state["since_best"]
        report.best_epoch = resume_state["best_epoch"]
        best = dict(resume_state["best_arrays"])
        if quantizer is not None:
            best["quantizer.lam"] = (resume_state["best_lam"]
                                     if resume_state["best_lam"] is not None
                                     else quantizer.lam)

    n_train = len(task.sgd_rows)
    if n_train == 0:
        raise ConfigError("no training entries")

    session_epochs = 0
    for epoch in range(start_epoch, config.max_epochs + 1):
        t0 = time.perf_counter()
        lam = None
        if quantizer is not None:
            lam = anneal(schedule, epoch - 1)
            quantizer.set_lam(lam)

        perm = rng.permutation(n_train)
        loss_sum = 0.0
        for lo in range(0, n_train, config.batch_size):
            batch = perm[lo : lo + config.batch_size]
            x = task.source.row_batch(task.sgd_rows[batch])
            y = task.source.col_batch(task.sgd_cols[batch])
            targets = task.sgd_targets[batch]
            interior = None
            try:
                with Tape() as tape:
                    if config.mode == "dmf":
                        loss, _ = loss_dmf(model, x, y, targets, config.gamma)
                    else:
                        interior = nd.parameter(quantizer.interior)
                        loss, _ = loss_dmfd(
                            model, quantizer, interior, x, y, targets,
                            config.gamma1, config.gamma2, lam,
                            config.residual_quantization,
                        )
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"non-finite values in epoch {epoch}: {exc}",
                    epoch=epoch, step=lo // config.batch_size,
                ) from None
            loss_val = loss.item()
            if not np.isfinite(loss_val) or loss_val > DIVERGENCE_CAP:
                raise DivergenceError(
                    f"loss {loss_val} exceeded {DIVERGENCE_CAP} in epoch {epoch}",
                    epoch=epoch, step=lo // config.batch_size,
                )
            loss_sum += loss_val * len(batch)

            grads = backward(tape, loss)
            adam.begin_step()
            for name, t in model.parameters():
                model.set_parameter(
                    name, adam.update(name, t, grads.get(t), config.learning_rate)
                )
            if interior is not None:
                stepped = adam.update("quantizer.interior", interior,
                                      grads.get(interior),
                                      config.boundary_learning_rate)
                quantizer.set_interior(project_interior(
                    stepped.data, quantizer.boundaries[0], quantizer.boundaries[-1]
                ))

        val_rmse, val_mae = _validation_metrics(model, task, config.mode, quantizer)
        seconds = 0.0 if deterministic_timing else time.perf_counter() - t0
        report.epochs.append(EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / n_train,
            val_rmse=val_rmse,
            val_mae=val_mae,
            lam=lam,
            seconds=seconds,
        ))

        improved = np.isnan(val_rmse) or val_rmse < best_val
        if improved:
            if not np.isnan(val_rmse):
                best_val = val_rmse
            best = _snapshot(model, quantizer)
            report.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.early_stop_patience:
                break
        session_epochs += 1
        if stop_after is not None and session_epochs >= stop_after:
            break

    last = _snapshot(model, quantizer)
    pack = _ResumePack(last, adam, rng, report, best_val, since_best, best,
                       config)
    if best is not None:
        _restore(model, quantizer, best)
    if checkpoint_out is not None:
        save_checkpoint(checkpoint_out, pack)
    return model, report


class _ResumePack:
    """Everything needed to continue training exactly where it stopped."""

    def __init__(self, last, adam, rng, report, best_val, since_best, best, config):
        self.last = last
        self.adam = adam
        self.rng = rng
        self.report = report
        self.best_val = best_val
        self.since_best = since_best
        self.best = best
        self.config = config


# --- checkpointing ------------------------------------------------------------


def save_checkpoint(path, pack):
    """Serialize a _ResumePack; binary layout mirrors the model file."""
    report = pack.report
    arrays = {}
    for name, t in pack.last.items():
        if name == "quantizer.lam":
            continue
        arrays[f"last.{name}"] = np.asarray(t.data if isinstance(t, Tensor) else t)
    for name in pack.adam.m:
        arrays[f"adam.m.{name}"] = pack.adam.m[name]
        arrays[f"adam.v.{name}"] = pack.adam.v[name]
    if pack.best is not None:
        for name, t in pack.best.items():
            if name == "quantizer.lam":
                continue
            arrays[f"best.{name}"] = np.asarray(t.data if isinstance(t, Tensor) else t)

    table = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        table.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.astype("<f8").tobytes(order="C"))

    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(pack.config),
        "adam_t": pack.adam.t,
        "rng_state": pack.rng.bit_generator.state,
        "epochs_done": len(report.epochs),
        "best_epoch": report.best_epoch,
        "best_val": None if not np.isfinite(pack.best_val) else pack.best_val,
        "since_best": pack.since_best,
        "last_lam": pack.last.get("quantizer.lam"),
        "best_lam": None if pack.best is None else pack.best.get("quantizer.lam"),
        "report": [asdict(r) for r in report.epochs],
        "arrays": table,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint file")
    (head_len,) = struct.unpack_from("<Q", raw, len(CHECKPOINT_MAGIC))
    start = len(CHECKPOINT_MAGIC) + 8
    try:
        header = json.loads(raw[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path} has a corrupt header: {exc}") from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path} is not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint version {header.get('version')} unsupported")
    offset = start + head_len
    arrays = {}
    for item in header["arrays"]:
        shape = tuple(item["shape"])
        count = int(np.prod(shape)) if shape else 1
        if offset + 8 * count > len(raw):
            raise FormatError(f"{path} is truncated")
        arrays[item["name"]] = np.frombuffer(
            raw, dtype="<f8", count=count, offset=offset
        ).reshape(shape)
        offset += 8 * count
    header["_arrays"] = arrays
    return header


def resume_state_from_checkpoint(header, config):
    """Translate a loaded checkpoint into the resume dict ``train`` expects."""
    if header["config"] != asdict(config):
        raise ConfigError("checkpoint was written with a different train config")
    arrays = header["_arrays"]
    last = {n[len("last."):]: arr for n, arr in arrays.items() if n.startswith("last.")}
    best = {n[len("best."):]: arr for n, arr in arrays.items() if n.startswith("best.")}
    adam_m = {n[len("adam.m."):]: arr.copy() for n, arr in arrays.items()
              if n.startswith("adam.m.")}
    adam_v = {n[len("adam.v."):]: arr.copy() for n, arr in arrays.items()
              if n.startswith("adam.v.")}
    return {
        "last_arrays": last,
        "best_arrays": best if best else dict(last),
        "adam_m": adam_m,
        "adam_v": adam_v,
        "adam_t": header["adam_t"],
        "rng_state": header["rng_state"],
        "epochs_done": header["epochs_done"],
        "best_epoch": header["best_epoch"],
        "best_val": np.inf if header["best_val"] is None else header["best_val"],
        "since_best": header["since_best"],
        "last_lam": header["last_lam"],
        "best_lam": header["best_lam"],
        "report_rows": header["report"],
    }


def _apply_resume(model, quantizer, adam, rng, report, state):
    for name, _ in model.parameters():
        model.set_parameter(name, state["last_arrays"][name])
    if quantizer is not None:
        quantizer.set_interior(state["last_arrays"]["quantizer.interior"])
        if state["last_lam"] is not None:
            quantizer.set_lam(state["last_lam"])
    adam.m = dict(state["adam_m"])
    adam.v = dict(state["adam_v"])
    adam.t = state["adam_t"]
    rng.bit_generator.state = state["rng_state"]
    for row in state["report_rows"]:
        report.epochs.append(EpochRecord(**row))
    return state["epochs_done"] + 1
