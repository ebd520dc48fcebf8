"""
Command-line entry point.

    python -m bayhem fit LEVEL1.csv LEVEL2.csv --method bayhem --out model.json
    python -m bayhem predict model.json points.csv --out predictions.csv
    python -m bayhem benchmark example1 --replicates 20 --seed 1
    python -m bayhem surface --experiment example1 --resolution 50

Exit codes:
    0  success
    1  unexpected internal error
    2  invalid arguments or options
    3  malformed data or model file
    4  numerical failure or failed fit
"""

import argparse
import hashlib
import json
import logging
import sys
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from bayhem import __version__
from bayhem.bench import (
    METHOD_LABELS,
    PRIOR_BASELINE,
    RMSE_ALIASES,
    RmseVariant,
    draw_designs,
    eval_testfn,
    grid_points,
    load_experiment,
    replicate_rng,
    run_experiment,
)
from bayhem.config import (
    RunConfig,
    config_hash,
    default_log_level,
    load_config_file,
    output_path,
    resolve_run_config,
)
from bayhem.errors import (
    BayHEmError,
    DataError,
    FitError,
    InvalidArgumentError,
    ModelFormatError,
    NumericalError,
    UnsupportedOperationError,
)
from bayhem.gp import Prediction
from bayhem.monitoring import configure_logging
from bayhem.multilevel import FitSettings, Method, MultiLevelData, fit_model, predict_model
from bayhem.persistence import (
    HUMAN_FLOAT_FORMAT,
    base_metadata,
    load_model,
    read_level_csv,
    read_points_csv,
    save_model,
    write_frame,
)

logger = logging.getLogger(__name__)

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "argument": 2,
    "data": 3,
    "numerical": 4,
}


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (DataError, ModelFormatError)):
        return EXIT_CODES["data"]
    if isinstance(error, (InvalidArgumentError, UnsupportedOperationError)):
        return EXIT_CODES["argument"]
    if isinstance(error, (NumericalError, FitError)):
        return EXIT_CODES["numerical"]
    return EXIT_CODES["internal"]


def _file_digest(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()[:16]


def _input_columns(p: int) -> List[str]:
    return [f"x{j + 1}" for j in range(p)]


def _predict_frame(model, X: np.ndarray) -> Prediction:
    if X.shape[0] == 0:
        return Prediction(mean=np.zeros(0), variance=np.zeros(0))
    return predict_model(model, X)


# --- Commands -----------------------------------------------------------------


def cmd_fit(cfg: RunConfig) -> int:
    """Fit the requested method to one CSV per level and write a model file."""
    paths = cfg.values["levels"]
    data = MultiLevelData(tuple(read_level_csv(path, level_index=i + 1) for i, path in enumerate(paths)))
    settings = cfg.fit_settings()
    model = fit_model(data, settings)

    metadata = base_metadata("fit", cfg.hash, settings.optimizer.seed)
    metadata["config"] = cfg.to_dict()
    metadata["inputs"] = {str(path): _file_digest(path) for path in paths}
    out = save_model(model, output_path("model.json", cfg.values.get("out")), metadata)

    summary = pd.DataFrame(model.describe())
    print(f"Fitted {METHOD_LABELS[model.method.value]} on {data.L} level(s), {data.dim} input(s)")
    print(summary.to_string(index=False, float_format=lambda v: HUMAN_FLOAT_FORMAT % v))
    print(f"log-likelihood: {model.log_lik:.6g}")
    print(f"model written to {out}")
    return EXIT_CODES["ok"]


def cmd_predict(cfg: RunConfig) -> int:
    """Predict the top level at every row of a points CSV."""
    model_path, points_path = cfg.values["model"], cfg.values["points"]
    model = load_model(model_path)
    X = read_points_csv(points_path, model.data.dim)
    pred = _predict_frame(model, X)

    frame = pd.DataFrame(X, columns=_input_columns(model.data.dim))
    frame["mean"] = pred.mean
    frame["variance"] = pred.variance
    metadata = base_metadata("predict", cfg.hash, model.settings.optimizer.seed)
    metadata["model"] = _file_digest(model_path)
    metadata["points"] = _file_digest(points_path)
    out = write_frame(frame, output_path("predictions.csv", cfg.values.get("out")), metadata)
    print(f"{len(frame)} predictions written to {out}")
    return EXIT_CODES["ok"]


def cmd_benchmark(cfg: RunConfig) -> int:
    """Run a built-in or user-supplied experiment and write its tables."""
    experiment = load_experiment(cfg.values["experiment"])
    overrides = cfg.settings_overrides()
    settings = experiment.settings
    if overrides:
        settings = FitSettings.from_dict({**settings.to_dict(), **overrides})
    rmse_flag = cfg.values.get("rmse")
    experiment = experiment.with_overrides(
        replicates=cfg.values.get("replicates"),
        seed=cfg.values.get("seed"),
        rmse_variant=RmseVariant(rmse_flag) if rmse_flag is not None else None,
        settings=settings,
    )

    effective = {"run": cfg.to_dict(), "experiment": experiment.to_dict()}
    metadata = base_metadata("benchmark", config_hash(effective), experiment.seed)
    metadata["experiment"] = experiment.name
    report = run_experiment(experiment, jobs=int(cfg.get("jobs", 1)), metadata=metadata)

    out = output_path(f"{experiment.name}.csv", cfg.values.get("out"))
    stem = out.with_suffix("")
    table = report.to_table()
    write_frame(table, out, {**metadata, "config": effective}, float_format=HUMAN_FLOAT_FORMAT)
    write_frame(report.cells, f"{stem}_cells.csv", metadata)
    write_frame(report.records, f"{stem}_records.csv", metadata)
    with open(f"{stem}.json", "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, default=str)
        f.write("\n")

    print(table.to_string(index=False))
    print(f"report written to {out}")
    return EXIT_CODES["ok"]


def cmd_surface(cfg: RunConfig) -> int:
    """Emit truth and predictions over a regular grid, from a model file or an experiment's first design."""
    resolution = int(cfg.get("resolution"))
    if resolution < 2:
        raise InvalidArgumentError(f"grid resolution must be at least 2 per axis, got {resolution}")

    if cfg.values.get("model"):
        model = load_model(cfg.values["model"])
        X_all, _ = model.data.stacked()
        lower, upper = X_all.min(axis=0), X_all.max(axis=0)
        functions = [f for f in (cfg.values.get("functions") or "").split(",") if f]
        models = {model.method.value: model}
        p = model.data.dim
        seed = model.settings.optimizer.seed
    else:
        experiment = load_experiment(cfg.values["experiment"])
        case_label = cfg.values.get("case")
        labels = [case.label for case in experiment.cases]
        if case_label is None:
            case_label = labels[0]
        if case_label not in labels:
            raise InvalidArgumentError(f"experiment {experiment.name} has no case {case_label!r}; cases: {labels}")
        case_index = labels.index(case_label)
        case = experiment.cases[case_index]
        seed = cfg.get("seed", experiment.seed)
        data = draw_designs(case, replicate_rng(seed, case_index, 0))
        methods = [cfg.values["method"]] if "method" in cfg.explicit else [
            m for m in experiment.methods if m != PRIOR_BASELINE
        ]
        settings = experiment.settings
        if cfg.settings_overrides():
            settings = FitSettings.from_dict({**settings.to_dict(), **cfg.settings_overrides()})
        models = {m: fit_model(data, FitSettings.from_dict({**settings.to_dict(), "method": m})) for m in methods}
        lower, upper = case.info.lower, case.info.upper
        functions = [f.value for f in case.functions]
        p = case.info.dim

    X = grid_points(lower, upper, resolution)
    frame = pd.DataFrame(X, columns=_input_columns(p))
    for level, fid in enumerate(functions, start=1):
        frame[f"truth_l{level}"] = eval_testfn(fid, X)
    for method, model in models.items():
        pred = predict_model(model, X)
        frame[f"mean_{method}"] = pred.mean
        frame[f"sd_{method}"] = pred.sd

    metadata = base_metadata("surface", cfg.hash, seed)
    metadata["config"] = cfg.to_dict()
    out = write_frame(frame, output_path("surface.csv", cfg.values.get("out")), metadata)
    print(f"{len(frame)} grid points written to {out}")
    return EXIT_CODES["ok"]


COMMANDS: Dict[str, Callable[[RunConfig], int]] = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "benchmark": cmd_benchmark,
    "surface": cmd_surface,
}


# --- Argument parsing -----------------------------------------------------------


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option values; flags override it")
    common.add_argument("--log-level", default=None, help="Logging level (default: $BAYHEM_LOG_LEVEL or INFO)")
    common.add_argument("--out", help="Output file (default: inside $BAYHEM_OUTPUT_DIR or ./outputs)")
    common.add_argument("--method", choices=[m.value for m in Method])
    common.add_argument("--mode", choices=["shared", "per-level"], help="BayHEm hyperparameter sharing")
    common.add_argument("--objective", choices=["joint", "top-conditional"], help="Shared-mode BayHEm objective")
    common.add_argument("--rho", help="K&O correlation: fixed:<value> or estimate")
    common.add_argument("--mean", choices=["zero", "constant", "linear"], help="Prior mean basis")
    common.add_argument("--jitter", type=float, help="Diagonal jitter relative to sigma2")
    common.add_argument("--links", choices=["estimate", "exact"], help="BayHEm links from lower levels to the top level")
    common.add_argument("--level-trend", choices=["zero", "constant", "linear"], help="Offset basis of estimated level links")
    common.add_argument("--link-nugget", type=float, help="Relative nugget on lower-level runs under estimated links")
    common.add_argument("--n-starts", type=int, help="Optimizer restarts")
    common.add_argument("--max-iter", type=int, help="Nelder-Mead iterations per input dimension")
    common.add_argument("--optimizer-seed", type=int, help="Seed of the restart design")
    common.add_argument("--seed", type=int, help="Design seed (benchmark, surface)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="bayhem", description="Multi-level Gaussian process emulators")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", parents=[common], help="Fit an emulator to one CSV per level")
    fit.add_argument("levels", nargs="+", help="Level CSV files, cheapest level first")

    pred = sub.add_parser("predict", parents=[common], help="Predict the top level at new points")
    pred.add_argument("model", help="Model file written by 'fit'")
    pred.add_argument("points", help="CSV of input points")

    bench = sub.add_parser("benchmark", parents=[common], help="Run a replicated experiment")
    bench.add_argument("experiment", help="Built-in experiment name or path to an experiment JSON file")
    bench.add_argument("--replicates", type=int)
    bench.add_argument("--rmse", choices=[v.value for v in RmseVariant] + sorted(RMSE_ALIASES), help="RMSE formula")
    bench.add_argument("--jobs", type=int, help="Worker processes for replicates")

    surface = sub.add_parser("surface", parents=[common], help="Emit truth and predictions on a grid")
    source = surface.add_mutually_exclusive_group(required=True)
    source.add_argument("--model", help="Model file written by 'fit'")
    source.add_argument("--experiment", help="Experiment whose first design is fitted")
    surface.add_argument("--case", help="Experiment case label (default: the first case)")
    surface.add_argument("--functions", help="Comma-separated test functions per level, for truth columns with --model")
    surface.add_argument("--resolution", type=int, help="Grid points per axis")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    values: Dict[str, Any] = vars(args)
    command = values.pop("command")
    config_file = values.pop("config")
    log_level = values.pop("log_level") or default_log_level()
    try:
        configure_logging(log_level)
    except ValueError as e:
        print(f"bayhem: error: {e}", file=sys.stderr)
        return EXIT_CODES["argument"]

    try:
        cfg = resolve_run_config(command, values, load_config_file(config_file))
        return COMMANDS[command](cfg)
    except BayHEmError as e:
        logger.error(f"{command} failed: {e}")
        print(f"bayhem: error: {e}", file=sys.stderr)
        return exit_code_for(e)
    except Exception as e:
        logger.exception(f"Unexpected error in {command}")
        print(f"bayhem: internal error: {e}", file=sys.stderr)
        return EXIT_CODES["internal"]
