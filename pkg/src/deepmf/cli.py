"""Command-line entry point: prepare / train / evaluate / predict.

Runs are driven by a JSON config file with strict schema validation
(unknown keys are rejected so typos cannot silently poison an experiment).
All randomness flows from the single config seed, fanned out into named
streams (split, area, init, shuffle), so reruns with the same config are
reproducible; ``--deterministic`` additionally zeroes wall-time columns so
output files are byte-identical across runs.

Exit codes: 0 success, 1 usage or config error, 2 I/O error, 3 numerical
divergence.
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass

from . import data, evaluation
from . import model as model_mod
from . import train as train_mod
from .errors import (ConfigError, DeepmfError, DimensionError,
                     DivergenceError, FormatError, NonFiniteError,
                     ParseError, StateError)
from .model import BranchConfig
from .train import TrainConfig

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_DIVERGED = 3

MANIFEST_NAME = "split_manifest.json"
STATS_NAME = "stats.txt"
MODEL_NAME = "model.dmf"
REPORT_NAME = "train_report.csv"
SUMMARY_NAME = "train_summary.txt"
STATE_NAME = "train_state.ckpt"


# --- config schema -------------------------------------------------------------

_NUMBER = (int, float)

_SCHEMA = {
    "data": {
        "path": (str, None),
        "format": (str, "csv"),
        "alpha": (_NUMBER, 1.0),
        "beta": (_NUMBER, 5.0),
    },
    "split": {
        "train": (_NUMBER, 0.75),
        "validation": (_NUMBER, 0.05),
        "test": (_NUMBER, 0.20),
    },
    "area": {
        "row_holdout": (_NUMBER, 0.2),
        "col_holdout": (_NUMBER, 0.2),
    },
    "model": {
        "hidden_dims": (list, [512, 128]),
        "latent_dim": (int, 64),
        "nonlinearity": (str, "selu"),
    },
    "train": {
        "mode": (str, "dmf"),
        "gamma": (_NUMBER, 1e-4),
        "gamma1": (_NUMBER, 1e-4),
        "gamma2": (_NUMBER, 1.0),
        "learning_rate": (_NUMBER, 1e-3),
        "boundary_learning_rate": (_NUMBER, 1e-4),
        "batch_size": (int, 256),
        "max_epochs": (int, 100),
        "early_stop_patience": (int, 10),
        "lambda_start": (_NUMBER, 5.0),
        "lambda_end": (_NUMBER, 1000.0),
        "num_levels": (int, 5),
        "residual_quantization": (bool, False),
    },
}

_TOP_KEYS = {"data", "split", "area", "model", "train", "seed", "output_dir"}


def _check_section(name, given, schema):
    if not isinstance(given, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    unknown = set(given) - set(schema)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    out = {}
    for key, (types, default) in schema.items():
        if key in given:
            value = given[key]
            # bool is an int subclass; only accept it where bool is asked for
            ok = isinstance(value, types) and not (
                isinstance(value, bool) and types is not bool
            )
            if not ok:
                raise ConfigError(f"{name}.{key} has the wrong type")
            out[key] = value
        elif default is None:
            raise ConfigError(f"missing required key {name}.{key}")
        else:
            out[key] = default
    return out


@dataclass
class RunConfig:
    data_path: str
    data_format: str
    alpha: float
    beta: float
    fractions: tuple
    area: "tuple | None"
    hidden_dims: tuple
    latent_dim: int
    nonlinearity: str
    train_config: TrainConfig
    seed: int
    output_dir: str
    deterministic: bool = False

    def path(self, name):
        return os.path.join(self.output_dir, name)


def load_run_config(path, seed_override=None, output_override=None,
                    deterministic=False):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    dsec = _check_section("data", doc.get("data", {}), _SCHEMA["data"])
    ssec = _check_section("split", doc.get("split", {}), _SCHEMA["split"])
    asec = None
    if doc.get("area") is not None:
        asec = _check_section("area", doc["area"], _SCHEMA["area"])
    msec = _check_section("model", doc.get("model", {}), _SCHEMA["model"])
    tsec = _check_section("train", doc.get("train", {}), _SCHEMA["train"])

    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    if seed_override is not None:
        seed = seed_override
    output_dir = doc.get("output_dir", "runs/default")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string")
    if output_override is not None:
        output_dir = output_override

    if not all(isinstance(h, int) and not isinstance(h, bool) for h in msec["hidden_dims"]):
        raise ConfigError("model.hidden_dims must be a list of integers")

    tc = TrainConfig(
        mode=tsec["mode"],
        gamma=float(tsec["gamma"]),
        gamma1=float(tsec["gamma1"]),
        gamma2=float(tsec["gamma2"]),
        learning_rate=float(tsec["learning_rate"]),
        boundary_learning_rate=float(tsec["boundary_learning_rate"]),
        batch_size=tsec["batch_size"],
        max_epochs=tsec["max_epochs"],
        early_stop_patience=tsec["early_stop_patience"],
        seed=seed,
        lambda_start=float(tsec["lambda_start"]),
        lambda_end=float(tsec["lambda_end"]),
        num_levels=tsec["num_levels"],
        residual_quantization=tsec["residual_quantization"],
    ).validate()

    cfg = RunConfig(
        data_path=dsec["path"],
        data_format=dsec["format"],
        alpha=float(dsec["alpha"]),
        beta=float(dsec["beta"]),
        fractions=(float(ssec["train"]), float(ssec["validation"]),
                   float(ssec["test"])),
        area=None if asec is None else (float(asec["row_holdout"]),
                                        float(asec["col_holdout"])),
        hidden_dims=tuple(msec["hidden_dims"]),
        latent_dim=msec["latent_dim"],
        nonlinearity=msec["nonlinearity"],
        train_config=tc,
        seed=seed,
        output_dir=output_dir,
        deterministic=deterministic,
    )
    return cfg


# --- shared pipeline pieces ------------------------------------------------------


def _load_matrix(cfg):
    return data.load_ratings(cfg.data_path, cfg.data_format, cfg.alpha, cfg.beta)


def _load_task(cfg):
    matrix = _load_matrix(cfg)
    manifest_path = cfg.path(MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(
            f"no split manifest at {manifest_path}; run 'deepmf prepare' first"
        )
    doc = data.read_manifest(manifest_path)
    counts = doc["counts"]
    if (counts["rows"], counts["cols"], counts["observed"]) != (
        matrix.n_rows, matrix.n_cols, matrix.n_observed
    ):
        raise ConfigError(
            f"manifest at {manifest_path} describes a "
            f"{counts['rows']}x{counts['cols']} matrix with "
            f"{counts['observed']} entries, but {cfg.data_path} parsed to "
            f"{matrix.n_rows}x{matrix.n_cols} with {matrix.n_observed}"
        )
    splits = data.splits_from_manifest(doc)
    areas = data.areas_from_manifest(doc)
    return matrix, doc, data.build_task(matrix, splits, areas)


def _branch_configs(cfg, task):
    row = BranchConfig(task.row_input_dim, cfg.hidden_dims, cfg.latent_dim,
                       cfg.nonlinearity)
    col = BranchConfig(task.col_input_dim, cfg.hidden_dims, cfg.latent_dim,
                       cfg.nonlinearity)
    return row, col


# --- commands --------------------------------------------------------------------


def cmd_prepare(cfg):
    matrix = _load_matrix(cfg)
    areas = None
    area_config = None
    if cfg.area is not None:
        areas = data.area_split(matrix, cfg.area[0], cfg.area[1], cfg.seed)
        area_config = {"row_holdout": cfg.area[0], "col_holdout": cfg.area[1]}
    splits = data.random_split(matrix, cfg.fractions, cfg.seed)
    os.makedirs(cfg.output_dir, exist_ok=True)
    doc = data.manifest_dict(cfg.seed, cfg.fractions, area_config, matrix,
                             splits, areas)
    data.write_manifest(cfg.path(MANIFEST_NAME), doc)
    data.write_stats(cfg.path(STATS_NAME), matrix)
    print(f"wrote {cfg.path(MANIFEST_NAME)}")
    print(f"rows={matrix.n_rows} cols={matrix.n_cols} "
          f"observed={matrix.n_observed} density={matrix.density:.4f}")
    print(f"train/val/test = {len(splits.train)}/{len(splits.validation)}/"
          f"{len(splits.test)}")
    if areas is not None:
        sizes = {k: len(v) for k, v in areas.areas.items()}
        print(f"areas: {sizes}")
    return EXIT_OK


def cmd_train(cfg, resume=None, save_state=False, epochs_this_run=None):
    _, _, task = _load_task(cfg)
    row_cfg, col_cfg = _branch_configs(cfg, task)
    model = model_mod.init(row_cfg, col_cfg, cfg.seed)

    resume_state = None
    if resume is not None:
        header = train_mod.load_checkpoint(resume)
        resume_state = train_mod.resume_state_from_checkpoint(header,
                                                              cfg.train_config)
    os.makedirs(cfg.output_dir, exist_ok=True)
    checkpoint_out = cfg.path(STATE_NAME) if save_state else None
    model, report = train_mod.train(
        model, task, cfg.train_config,
        resume_state=resume_state,
        deterministic_timing=cfg.deterministic,
        checkpoint_out=checkpoint_out,
        stop_after=epochs_this_run,
    )
    model_mod.save(model, cfg.path(MODEL_NAME))
    report.to_csv(cfg.path(REPORT_NAME), zero_seconds=cfg.deterministic)
    with open(cfg.path(SUMMARY_NAME), "w", encoding="utf-8") as fh:
        fh.write(report.summary())
    print(f"wrote {cfg.path(MODEL_NAME)}")
    print(report.summary(), end="")
    return EXIT_OK


def cmd_evaluate(cfg, model_path, discrete=False, rounded=False):
    model = model_mod.load(model_path)
    _, _, task = _load_task(cfg)
    if model.row_config.input_dim != task.row_input_dim:
        raise DimensionError(
            f"model row branch expects {model.row_config.input_dim} inputs "
            f"but the data provides {task.row_input_dim}"
        )
    if model.col_config.input_dim != task.col_input_dim:
        raise DimensionError(
            f"model column branch expects {model.col_config.input_dim} "
            f"inputs but the data provides {task.col_input_dim}"
        )
    if discrete and model.quantizer is None:
        raise ConfigError("--discrete requires a model with a quantizer "
                          "(this model is real-valued)")
    modes = ["real"]
    if discrete or model.quantizer is not None:
        modes.append("discrete")
    if rounded:
        modes.append("rounded")
    os.makedirs(cfg.output_dir, exist_ok=True)
    for mode in modes:
        report = evaluation.evaluate_areas(
            model, task, mode=mode, num_levels=cfg.train_config.num_levels
        )
        report.to_csv(cfg.path(f"metrics_{mode}.csv"))
        table = report.format_table()
        with open(cfg.path(f"metrics_{mode}.txt"), "w", encoding="utf-8") as fh:
            fh.write(table)
        print(table, end="")
    return EXIT_OK


def _read_obs_file(path, id_map, new_id, axis_name):
    """(index, rating) pairs for a cold entity from user,item,rating rows."""
    pairs = []
    rows = data.parse_csv_rows(path)
    for line_no, user, item, rating in rows:
        own, other = (user, item) if axis_name == "user" else (item, user)
        if own != new_id:
            raise ConfigError(
                f"{path}:{line_no}: observation row for {own!r} does not "
                f"match the requested cold {axis_name} {new_id!r}"
            )
        if other not in id_map:
            raise ConfigError(
                f"{path}:{line_no}: {other!r} was not seen during training"
            )
        pairs.append((id_map[other], rating))
    if not pairs:
        raise ConfigError(f"{path}: no usable observations")
    return pairs


def cmd_predict(cfg, model_path, user=None, item=None, batch=None,
                user_obs=None, item_obs=None, discrete=False):
    model = model_mod.load(model_path)
    _, doc, task = _load_task(cfg)
    if discrete and model.quantizer is None:
        raise ConfigError("--discrete requires a model with a quantizer")
    users = {u: k for k, u in enumerate(doc["users"])}
    items = {i: k for k, i in enumerate(doc["items"])}
    source = task.source

    def one(user_id, item_id):
        if user_id in users:
            x = source.row_vector(users[user_id])
        elif user_obs is not None:
            pairs = _read_obs_file(user_obs, items, user_id, "user")
            x = source.vector_from_observations(pairs, axis="row")
        else:
            raise ConfigError(
                f"cold user {user_id!r} needs observations "
                f"(--user-obs file with user,item,rating rows)"
            )
        if item_id in items:
            y = source.col_vector(items[item_id])
        elif item_obs is not None:
            pairs = _read_obs_file(item_obs, users, item_id, "item")
            y = source.vector_from_observations(pairs, axis="col")
        else:
            raise ConfigError(
                f"cold item {item_id!r} needs observations "
                f"(--item-obs file with user,item,rating rows)"
            )
        if discrete:
            return train_mod.predict_discrete(model, model.quantizer, x, y)
        raw = model_mod.predict(model, x, y)
        return float(data.unscale_values(raw, model.alpha, model.beta))

    print("user,item,prediction")
    if batch is not None:
        for _, u, i, _r in data.parse_csv_rows(batch, rating_optional=True):
            print(f"{u},{i},{one(u, i)!r}")
    else:
        print(f"{user},{item},{one(user, item)!r}")
    return EXIT_OK


# --- argument parsing --------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_CONFIG)


def _build_parser():
    parser = _Parser(prog="deepmf",
                     description="Deep two-branch matrix completion toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON run config")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    common.add_argument("--output-dir", default=None,
                        help="override the config output directory")
    common.add_argument("--deterministic", action="store_true",
                        help="byte-identical outputs (zeroes timing columns)")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    sub.add_parser("prepare", parents=[common],
                   help="parse data, build splits, write the manifest")

    p_train = sub.add_parser("train", parents=[common],
                             help="train a model on the prepared splits")
    p_train.add_argument("--resume", default=None,
                         help="checkpoint file to continue from")
    p_train.add_argument("--save-state", action="store_true",
                         help="write a resumable checkpoint next to the model")
    p_train.add_argument("--epochs-this-run", type=int, default=None,
                         help="cap epochs for this session (schedule still "
                              "follows max_epochs); combine with --save-state")

    p_eval = sub.add_parser("evaluate", parents=[common],
                            help="metrics over the test split (per area)")
    p_eval.add_argument("--model", required=True, help="model file")
    p_eval.add_argument("--discrete", action="store_true",
                        help="require discrete (quantized) evaluation")
    p_eval.add_argument("--rounded-baseline", dest="rounded",
                        action="store_true",
                        help="also report the round-to-nearest-level baseline")

    p_pred = sub.add_parser("predict", parents=[common],
                            help="predict single pairs or a batch file")
    p_pred.add_argument("--model", required=True, help="model file")
    p_pred.add_argument("--user", default=None)
    p_pred.add_argument("--item", default=None)
    p_pred.add_argument("--batch", default=None,
                        help="CSV of user,item[,rating] pairs to predict")
    p_pred.add_argument("--user-obs", default=None,
                        help="user,item,rating rows describing a cold user")
    p_pred.add_argument("--item-obs", default=None,
                        help="user,item,rating rows describing a cold item")
    p_pred.add_argument("--discrete", action="store_true")
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_run_config(args.config, seed_override=args.seed,
                              output_override=args.output_dir,
                              deterministic=args.deterministic)
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume,
                             save_state=args.save_state,
                             epochs_this_run=args.epochs_this_run)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.model, discrete=args.discrete,
                                rounded=args.rounded)
        if args.command == "predict":
            if args.batch is None and (args.user is None or args.item is None):
                raise ConfigError("predict needs --user and --item, or --batch")
            return cmd_predict(cfg, args.model, user=args.user,
                               item=args.item, batch=args.batch,
                               user_obs=args.user_obs, item_obs=args.item_obs,
                               discrete=args.discrete)
        raise ConfigError(f"unknown command {args.command!r}")
    except DivergenceError as exc:
        sys.stderr.write(f"error: training diverged: {exc}\n")
        return EXIT_DIVERGED
    except (ParseError, FormatError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_IO
    except (ConfigError, DimensionError, StateError, NonFiniteError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG
    except DeepmfError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
