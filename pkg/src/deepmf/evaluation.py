"""Error metrics and per-area evaluation reports.

Metrics are computed in the original rating domain (predictions are
unscaled first). Three prediction modes are reported:

* ``real`` -- the raw cosine-head value mapped back to [alpha, beta];
* ``discrete`` -- hard-quantized through the model's quantizer;
* ``rounded`` -- the comparison baseline for a real-valued model: unscale,
  then snap to the nearest allowed level with ties going up.

With an extendability split the report carries one scope per area next to
the overall numbers; an empty area is reported as absent, never as zero.
"""

from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .data import unscale_values
from .errors import ConfigError, DimensionError


def _pair_arrays(preds, targets, op):
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 1:
        raise DimensionError(
            f"{op}: need equal-length 1-d arrays, got {preds.shape} and "
            f"{targets.shape}"
        )
    if len(preds) == 0:
        raise DimensionError(f"{op}: empty pair list")
    return preds, targets


def rmse(preds, targets):
    """Root mean square error over prediction/target pairs."""
    preds, targets = _pair_arrays(preds, targets, "rmse")
    err = preds - targets
    return float(np.sqrt(np.mean(err * err)))


def mae(preds, targets):
    """Mean absolute error over prediction/target pairs."""
    preds, targets = _pair_arrays(preds, targets, "mae")
    return float(np.mean(np.abs(preds - targets)))


def round_to_levels(values, levels):
    """Snap to the nearest of uniformly spaced levels; ties round up,
    out-of-range values clamp to the extreme levels."""
    levels = np.asarray(levels, dtype=np.float64)
    gap = levels[1] - levels[0]
    idx = np.floor((np.asarray(values, dtype=np.float64) - levels[0]) / gap + 0.5)
    idx = np.clip(idx, 0, len(levels) - 1).astype(np.int64)
    return levels[idx]


@dataclass(frozen=True)
class ScopeMetrics:
    count: int
    rmse: "float | None"
    mae: "float | None"


@dataclass
class MetricsReport:
    """Per-scope RMSE/MAE for one prediction mode."""

    mode: str
    scopes: dict = field(default_factory=dict)

    def check(self):
        for name, s in self.scopes.items():
            if s.count == 0:
                continue
            if s.rmse < 0 or s.mae < 0:
                raise AssertionError(f"{name}: negative metric")
            # quadratic mean dominates arithmetic mean
            if s.rmse + 1e-12 < s.mae:
                raise AssertionError(f"{name}: rmse {s.rmse} < mae {s.mae}")
        area_counts = [s.count for n, s in self.scopes.items() if n.startswith("area")]
        if area_counts and "overall" in self.scopes:
            if sum(area_counts) != self.scopes["overall"].count:
                raise AssertionError("area counts do not sum to the overall count")
        return self

    def to_csv(self, path):
        lines = ["mode,scope,count,rmse,mae"]
        for name, s in self.scopes.items():
            r = "" if s.rmse is None else repr(s.rmse)
            m = "" if s.mae is None else repr(s.mae)
            lines.append(f"{self.mode},{name},{s.count},{r},{m}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    def format_table(self):
        out = [f"mode: {self.mode}",
               f"{'scope':<10}{'count':>8}  {'rmse':>10}  {'mae':>10}"]
        for name, s in self.scopes.items():
            r = "absent" if s.rmse is None else f"{s.rmse:.4f}"
            m = "absent" if s.mae is None else f"{s.mae:.4f}"
            out.append(f"{name:<10}{s.count:>8}  {r:>10}  {m:>10}")
        areas = [n for n in self.scopes if n.startswith("area")]
        if areas:
            cells = []
            for n in sorted(areas):
                s = self.scopes[n]
                cells.append("-" if s.rmse is None else f"{s.rmse:.3f}")
            out.append("rmse by area (1-4): " + " / ".join(cells))
        return "\n".join(out) + "\n"


def _mode_predictions(model, raw, mode, quantizer, num_levels):
    if mode == "real":
        return unscale_values(raw, model.alpha, model.beta)
    if mode == "discrete":
        if quantizer is None:
            raise ConfigError("discrete evaluation needs a model with a quantizer")
        return unscale_values(quantizer.hard(raw), model.alpha, model.beta)
    if mode == "rounded":
        levels = np.linspace(model.alpha, model.beta, num_levels)
        return round_to_levels(unscale_values(raw, model.alpha, model.beta), levels)
    raise ConfigError(f"unknown evaluation mode {mode!r}")


def evaluate_areas(model, task, mode="real", quantizer=None, num_levels=5):
    """MetricsReport over the test entries, grouped per area when available.

    Every area flows through the same prediction path; the grouping only
    decides which scope a pair is counted under.
    """
    if model.alpha is None:
        raise ConfigError("model carries no scaling metadata")
    if quantizer is None:
        quantizer = model.quantizer
    report = MetricsReport(mode=mode)
    for name, idx in task.eval_groups.items():
        if len(idx) == 0:
            report.scopes[name] = ScopeMetrics(0, None, None)
            continue
        rows = task.matrix.rows[idx]
        cols = task.matrix.cols[idx]
        targets = task.values_orig[idx]
        raw = model_mod.predict_entries(model, task.source, rows, cols)
        preds = _mode_predictions(model, raw, mode, quantizer, num_levels)
        report.scopes[name] = ScopeMetrics(
            len(idx), rmse(preds, targets), mae(preds, targets)
        )
    return report.check()


def rounded_baseline(model, task, num_levels=5):
    """Round-after-training baseline a discrete model is measured against."""
    return evaluate_areas(model, task, mode="rounded", num_levels=num_levels)
