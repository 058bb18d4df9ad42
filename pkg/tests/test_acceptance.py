"""Acceptance suite: seven criteria, one test each, one PASS/FAIL line each.

Criterion 6 (the full MovieLens-1M run) is a long job gated behind the
DEEPMF_ML1M_PATH environment variable; everything else runs at desk scale.
"""

import functools
import json
import os
import time

import numpy as np
import pytest

from deepmf import data
from deepmf import model as M
from deepmf import ndcore as nd
from deepmf import train as T
from deepmf.cli import main as cli_main
from deepmf.data import unscale_values
from deepmf.evaluation import evaluate_areas, mae, rmse, rounded_baseline
from deepmf.quantizer import Quantizer, uniform_levels
from helpers import (ToyProblem, default_quantizer, finite_difference,
                     max_rel_err, rank3_quantized_matrix,
                     smooth_parameter_seeds, sparse_random_matrix)


def verdict(num, name):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"criterion {num} ({name}): FAIL")
                raise
            print(f"criterion {num} ({name}): PASS")
        return wrapper
    return decorate


# --- criterion 1: gradient validation ------------------------------------------


def _dmf_gradients(prob, gamma):
    base = prob.param_arrays()

    def value(arrays):
        prob.set_params(arrays)
        loss, _ = T.loss_dmf(prob.model, prob.x, prob.y, prob.targets, gamma)
        return loss.item()

    prob.set_params(base)
    with nd.Tape() as tape:
        loss, _ = T.loss_dmf(prob.model, prob.x, prob.y, prob.targets, gamma)
    grads = nd.backward(tape, loss)
    analytic = [grads.get(t, np.zeros_like(a))
                for (_, t), a in zip(prob.model.parameters(), base)]
    return analytic, finite_difference(value, base, h=1e-5)


def _dmfd_gradients(prob, quantizer, gamma1, gamma2, lam):
    base = prob.param_arrays() + [quantizer.interior]

    def value(arrays):
        prob.set_params(arrays[:-1])
        loss, _ = T.loss_dmfd(prob.model, quantizer, nd.Tensor(arrays[-1]),
                              prob.x, prob.y, prob.targets, gamma1, gamma2,
                              lam=lam)
        return loss.item()

    prob.set_params(base[:-1])
    interior = nd.parameter(base[-1])
    with nd.Tape() as tape:
        loss, _ = T.loss_dmfd(prob.model, quantizer, interior, prob.x, prob.y,
                              prob.targets, gamma1, gamma2, lam=lam)
    grads = nd.backward(tape, loss)
    tensors = [t for _, t in prob.model.parameters()] + [interior]
    analytic = [grads.get(t, np.zeros_like(a)) for t, a in zip(tensors, base)]
    return analytic, finite_difference(value, base, h=1e-5)


@verdict(1, "gradient validation")
def test_criterion_1_gradients():
    start = time.perf_counter()
    tol = 1e-4
    prob = ToyProblem(7)  # 6x5 toy matrix
    quantizer = default_quantizer(lam=12.0)

    for seed in smooth_parameter_seeds(7, 3):
        prob.randomize(seed)
        analytic, numeric = _dmf_gradients(prob, gamma=0.01)
        worst = max(max_rel_err(a, f) for a, f in zip(analytic, numeric))
        assert worst < tol, f"dmf objective point {seed}: rel err {worst}"

    # parameter points are sampled so every prediction stays >1e-3 away
    # from the selector knots (and hidden preactivations off the kink)
    for seed in smooth_parameter_seeds(7, 3, quantizer=quantizer):
        prob.randomize(seed)
        analytic, numeric = _dmfd_gradients(prob, quantizer, 0.01, 0.5, 12.0)
        worst = max(max_rel_err(a, f) for a, f in zip(analytic, numeric))
        assert worst < tol, f"dmfd objective point {seed}: rel err {worst}"

    assert time.perf_counter() - start < 60.0


# --- criterion 2: quantizer sharp limit -----------------------------------------


@verdict(2, "quantizer sharp limit")
def test_criterion_2_quantizer_limit():
    start = time.perf_counter()
    q = Quantizer(uniform_levels(5), lam=1e6)
    grid = np.linspace(-1.2, 1.2, 10_000)
    margin = np.min(np.abs(grid[:, None] - q.boundaries[None, :]), axis=1)
    keep = grid[margin > 0.01]
    worst = np.max(np.abs(q.soft(keep) - q.hard(keep)))
    assert worst < 1e-3, f"max |soft - hard| = {worst}"
    assert time.perf_counter() - start < 1.0


# --- criterion 3: synthetic discrete recovery ------------------------------------


def _matched_budget_pair(seed):
    matrix = rank3_quantized_matrix(1000 + seed)
    splits = data.random_split(matrix, (0.75, 0.05, 0.20), seed=seed)
    task = data.build_task(matrix, splits)
    common = dict(learning_rate=3e-3, batch_size=256, max_epochs=80,
                  early_stop_patience=80, seed=seed)

    def fresh():
        return M.init(M.BranchConfig(150, (32,), 8),
                      M.BranchConfig(200, (32,), 8), seed)

    dmf, _ = T.train(fresh(), task, T.TrainConfig(mode="dmf", gamma=1e-4,
                                                  **common))
    rounded = rounded_baseline(dmf, task).scopes["overall"].rmse

    dmfd, _ = T.train(fresh(), task, T.TrainConfig(
        mode="dmfd", gamma1=1e-4, gamma2=0.1, lambda_start=3.0,
        lambda_end=60.0, boundary_learning_rate=5e-3, **common))
    discrete = evaluate_areas(dmfd, task, mode="discrete").scopes["overall"].rmse
    return discrete, rounded


@verdict(3, "synthetic discrete recovery")
def test_criterion_3_synthetic_recovery():
    start = time.perf_counter()
    wins = 0
    outcomes = []
    for seed in range(5):
        discrete, rounded = _matched_budget_pair(seed)
        outcomes.append((seed, discrete, rounded))
        if discrete < rounded:
            wins += 1
    assert wins >= 4, f"discrete beat rounded in only {wins}/5 seeds: {outcomes}"
    assert time.perf_counter() - start < 600.0


# --- criterion 4: extendability -------------------------------------------------


def _train_small(task, seed, mode="dmf", epochs=10):
    cfg = T.TrainConfig(mode=mode, gamma=1e-4, max_epochs=epochs,
                        early_stop_patience=epochs, batch_size=32, seed=seed)
    model = M.init(M.BranchConfig(task.row_input_dim, (16,), 6),
                   M.BranchConfig(task.col_input_dim, (16,), 6), seed)
    return T.train(model, task, cfg)[0]


def _clone_row_task(seed=41):
    """A matrix whose last row duplicates a seen row's train-visible part.

    Entries of the clone row that copy the source row's train entries are
    placed in the train partition (they act as the new row's observations);
    clone entries at the source row's test columns become test targets.
    """
    n_seen, m = 12, 10
    base = sparse_random_matrix(seed, n=n_seen, m=m, density=0.8)
    base_splits = data.random_split(base, (0.7, 0.1, 0.2), seed=seed)

    rows = list(base.rows)
    cols = list(base.cols)
    vals = list(base.values)
    train_idx = list(base_splits.train)
    val_idx = list(base_splits.validation)
    test_idx = list(base_splits.test)

    src_row = next(
        r for r in range(n_seen)
        if any(base.rows[k] == r for k in base_splits.train)
        and any(base.rows[k] == r for k in base_splits.test)
    )
    src_train = [k for k in base_splits.train if base.rows[k] == src_row]
    src_test = [k for k in base_splits.test if base.rows[k] == src_row]

    clone = n_seen
    for k in src_train:
        train_idx.append(len(rows))
        rows.append(clone)
        cols.append(base.cols[k])
        vals.append(base.values[k])
    target_cols = []
    for k in src_test:
        test_idx.append(len(rows))
        rows.append(clone)
        cols.append(base.cols[k])
        vals.append(base.values[k])
        target_cols.append(int(base.cols[k]))

    matrix = data.RatingMatrix(n_seen + 1, m, rows, cols, vals, 1, 5)
    splits = data.SplitSets(np.sort(np.array(train_idx)),
                            np.sort(np.array(val_idx)),
                            np.sort(np.array(test_idx)))
    areas = data.classify_areas(matrix, seen_rows=np.arange(n_seen),
                                seen_cols=np.arange(m))
    return data.build_task(matrix, splits, areas), clone, src_row, target_cols


@verdict(4, "extendability")
def test_criterion_4_extendability():
    start = time.perf_counter()

    # (a) general fixture: all four areas populated, finite, in range
    matrix = sparse_random_matrix(17, n=30, m=24, density=0.6)
    areas = data.area_split(matrix, 0.2, 0.2, seed=17)
    splits = data.random_split(matrix, (0.75, 0.05, 0.2), seed=17)
    task = data.build_task(matrix, splits, areas)
    model = _train_small(task, seed=17)
    report = evaluate_areas(model, task, mode="real")
    for name in ("area1", "area2", "area3", "area4"):
        scope = report.scopes[name]
        assert scope.count > 0, f"{name} is empty in the fixture"
        assert np.isfinite(scope.rmse)
    idx = task.eval_groups["area4"]
    preds = unscale_values(
        M.predict_entries(model, task.source, task.matrix.rows[idx],
                          task.matrix.cols[idx]), 1, 5)
    assert np.all(np.isfinite(preds))
    assert np.all((preds >= 1.0 - 1e-9) & (preds <= 5.0 + 1e-9))

    # (b) duplicated-row oracle: the clone's area-2 predictions must equal
    # the source row's area-1 predictions
    task, clone_row, src_row, target_cols = _clone_row_task()
    model = _train_small(task, seed=41)
    for j in target_cols:
        via_area2 = M.predict_area(model, 2, task.source, task.source,
                                   clone_row, j)
        via_area1 = M.predict_area(model, 1, task.source, task.source,
                                   src_row, j)
        assert abs(via_area2 - via_area1) < 1e-9

    assert time.perf_counter() - start < 300.0


# --- criterion 5: metric arithmetic ----------------------------------------------


@verdict(5, "metric arithmetic")
def test_criterion_5_metrics():
    rng = np.random.default_rng(55)
    for trial in range(20):
        n = int(rng.integers(1, 300))
        p = rng.uniform(1, 5, size=n)
        t = rng.uniform(1, 5, size=n)
        want_rmse = np.sqrt(sum((a - b) ** 2 for a, b in zip(p, t)) / n)
        want_mae = sum(abs(a - b) for a, b in zip(p, t)) / n
        assert abs(rmse(p, t) - want_rmse) < 1e-12
        assert abs(mae(p, t) - want_mae) < 1e-12
        assert rmse(p, t) >= mae(p, t) - 1e-12

    # every generated report re-asserts rmse >= mae internally
    matrix = sparse_random_matrix(19, n=16, m=14, density=0.7)
    areas = data.area_split(matrix, 0.25, 0.25, seed=19)
    splits = data.random_split(matrix, (0.7, 0.1, 0.2), seed=19)
    task = data.build_task(matrix, splits, areas)
    model = _train_small(task, seed=19, epochs=4)
    for mode in ("real", "rounded"):
        evaluate_areas(model, task, mode=mode).check()


# --- criterion 6: full-scale reproduction (opt-in long job) ----------------------

ML1M_PATH = os.environ.get("DEEPMF_ML1M_PATH")
CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")

DMF_AREA_TARGETS = {"area1": 0.850, "area2": 0.883, "area3": 0.864,
                    "area4": 0.904}
DMFD_TARGETS = {"rmse": 0.898, "mae": 0.625}
TARGET_TOL = 0.03


@pytest.mark.skipif(
    not ML1M_PATH,
    reason="full-scale MovieLens-1M job: set DEEPMF_ML1M_PATH=<ratings.dat> "
           "(expected runtime: hours on commodity CPU)")
@verdict(6, "full-scale reproduction")
def test_criterion_6_full_scale(tmp_path):
    def run(config_name, out_name):
        with open(os.path.join(CONFIG_DIR, config_name)) as fh:
            doc = json.load(fh)
        doc["data"]["path"] = ML1M_PATH
        doc["output_dir"] = str(tmp_path / out_name)
        cfg_path = tmp_path / config_name
        cfg_path.write_text(json.dumps(doc))
        for cmd in (["prepare"], ["train"]):
            assert cli_main(cmd + ["--config", str(cfg_path)]) == 0
        assert cli_main(["evaluate", "--config", str(cfg_path), "--model",
                         str(tmp_path / out_name / "model.dmf")]) == 0
        return tmp_path / out_name

    out = run("ml1m_dmf.json", "dmf")
    rows = (out / "metrics_real.csv").read_text().strip().split("\n")[1:]
    got = {r.split(",")[1]: float(r.split(",")[3]) for r in rows
           if r.split(",")[3]}
    for area, target in DMF_AREA_TARGETS.items():
        assert abs(got[area] - target) <= TARGET_TOL, (area, got[area], target)

    out = run("ml1m_dmfd.json", "dmfd")
    rows = (out / "metrics_discrete.csv").read_text().strip().split("\n")[1:]
    overall = next(r for r in rows if r.split(",")[1] == "overall")
    assert abs(float(overall.split(",")[3]) - DMFD_TARGETS["rmse"]) <= TARGET_TOL
    assert abs(float(overall.split(",")[4]) - DMFD_TARGETS["mae"]) <= TARGET_TOL


# --- criterion 7: pipeline determinism -------------------------------------------


@verdict(7, "pipeline determinism")
def test_criterion_7_determinism(tmp_path):
    rng = np.random.default_rng(77)
    lines = ["user,item,rating"]
    for u in range(12):
        for i in range(10):
            if rng.random() < 0.8:
                lines.append(f"u{u},i{i},{rng.integers(1, 6)}")
    data_path = tmp_path / "ratings.csv"
    data_path.write_text("\n".join(lines) + "\n")

    def pipeline(name):
        out = tmp_path / name
        doc = {
            "data": {"path": str(data_path), "format": "csv",
                     "alpha": 1, "beta": 5},
            "split": {"train": 0.75, "validation": 0.05, "test": 0.2},
            "area": {"row_holdout": 0.2, "col_holdout": 0.2},
            "model": {"hidden_dims": [8], "latent_dim": 4,
                      "nonlinearity": "selu"},
            "train": {"mode": "dmfd", "batch_size": 16, "max_epochs": 5,
                      "early_stop_patience": 5, "lambda_start": 4.0,
                      "lambda_end": 64.0},
            "seed": 13,
            "output_dir": str(out),
        }
        cfg = tmp_path / f"{name}.json"
        cfg.write_text(json.dumps(doc))
        for cmd in (["prepare"], ["train"]):
            assert cli_main(cmd + ["--config", str(cfg),
                                   "--deterministic"]) == 0
        assert cli_main(["evaluate", "--config", str(cfg), "--model",
                         str(out / "model.dmf"), "--deterministic"]) == 0
        return out

    a = pipeline("one")
    b = pipeline("two")
    for name in ("split_manifest.json", "stats.txt", "model.dmf",
                 "train_report.csv", "metrics_real.csv",
                 "metrics_discrete.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), \
            f"{name} differs between identical runs"
