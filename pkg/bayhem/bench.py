"""
Benchmark harness: analytic test functions, Latin hypercube designs, RMSE and
replicated experiments comparing the emulators.

Built-in experiments are JSON files under ``bayhem/experiments``; every
unstated detail (seeds, domains, fixed design points) is pinned there.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import qmc

from bayhem.errors import InvalidArgumentError
from bayhem.gp import LevelData
from bayhem.kernels import as_design
from bayhem.monitoring import timed, with_fallback
from bayhem.multilevel import (
    BayHEmModel,
    FitSettings,
    Method,
    MultiLevelData,
    fit_model,
    predict_model,
)

logger = logging.getLogger(__name__)

EXPERIMENTS_DIR = Path(__file__).parent / "experiments"

# Baseline that predicts the fitted BayHEm prior mean h(x)^T beta everywhere.
PRIOR_BASELINE = "prior"

METHOD_LABELS = {
    Method.SINGLE.value: "Single GP",
    Method.BAYHEM.value: "BayHEm",
    Method.KO.value: "K&O",
    Method.HK.value: "HK",
    PRIOR_BASELINE: "Prior mean",
}


class TestFunction(str, Enum):
    EX1_L1 = "Ex1L1"
    EX1_L2 = "Ex1L2"
    EX2_CORR_L1 = "Ex2CorrL1"
    EX2_CORR_L2 = "Ex2CorrL2"
    EX2_UNCORR_L1 = "Ex2UncorrL1"
    EX2_UNCORR_L2 = "Ex2UncorrL2"
    EX3_L1 = "Ex3L1"
    EX3_L2_SHIFT = "Ex3L2Shift"
    EX3_L2_TILT = "Ex3L2Tilt"
    EX3_L2_STRETCH = "Ex3L2Stretch"


def _ex1_l1(X: np.ndarray) -> np.ndarray:
    x1, x2 = X[:, 0], X[:, 1]
    return (x1 * x2) ** 2 + np.sin(2 * np.pi * x1)


def _ex1_l2(X: np.ndarray) -> np.ndarray:
    x1, x2 = X[:, 0], X[:, 1]
    return _ex1_l1(X) + 2 * x2 * (np.cos(4 * np.pi * x1 * x2) + x1**2 - x1 * x2)


def _ex2_corr_l1(X: np.ndarray) -> np.ndarray:
    x1, x2 = X[:, 0], X[:, 1]
    return _ex1_l1(X) + np.cos(4 * np.pi * x1 * x2)


def _ex2_uncorr_l1(X: np.ndarray) -> np.ndarray:
    x1, x2 = X[:, 0], X[:, 1]
    return (4 * x1**3 - x1 * x2**4) / np.exp(x1 * x2) ** 2 - 2


def _ex3_l1(X: np.ndarray) -> np.ndarray:
    x = X[:, 0]
    return x * np.sin(x) + x


@dataclass(frozen=True)
class TestFunctionInfo:
    fn: Callable[[np.ndarray], np.ndarray]
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.lower)


UNIT_SQUARE = ((0.0, 0.0), (1.0, 1.0))
# The 1-d examples never state their range; [0, 10] shows the crossing of the stretched level.
EX3_INTERVAL = ((0.0,), (10.0,))

REGISTRY: Dict[TestFunction, TestFunctionInfo] = {
    TestFunction.EX1_L1: TestFunctionInfo(_ex1_l1, *UNIT_SQUARE),
    TestFunction.EX1_L2: TestFunctionInfo(_ex1_l2, *UNIT_SQUARE),
    TestFunction.EX2_CORR_L1: TestFunctionInfo(_ex2_corr_l1, *UNIT_SQUARE),
    TestFunction.EX2_CORR_L2: TestFunctionInfo(_ex1_l2, *UNIT_SQUARE),
    TestFunction.EX2_UNCORR_L1: TestFunctionInfo(_ex2_uncorr_l1, *UNIT_SQUARE),
    TestFunction.EX2_UNCORR_L2: TestFunctionInfo(_ex1_l2, *UNIT_SQUARE),
    TestFunction.EX3_L1: TestFunctionInfo(_ex3_l1, *EX3_INTERVAL),
    TestFunction.EX3_L2_SHIFT: TestFunctionInfo(lambda X: _ex3_l1(X) + 4, *EX3_INTERVAL),
    TestFunction.EX3_L2_TILT: TestFunctionInfo(lambda X: _ex3_l1(X) + 2 * X[:, 0], *EX3_INTERVAL),
    TestFunction.EX3_L2_STRETCH: TestFunctionInfo(lambda X: _ex3_l1(X) + 4 * np.sin(X[:, 0] / 2), *EX3_INTERVAL),
}


def function_info(fid: Any) -> TestFunctionInfo:
    try:
        return REGISTRY[TestFunction(fid)]
    except ValueError:
        names = ", ".join(t.value for t in TestFunction)
        raise InvalidArgumentError(f"unknown test function {fid!r}; expected one of {names}") from None


def eval_testfn(fid: Any, X: Any) -> np.ndarray:
    """
    Evaluate a test function at every row of ``X``.

    Raises:
        InvalidArgumentError: If a point lies outside the function's domain.
    """
    info = function_info(fid)
    X = as_design(X, info.dim)
    lower, upper = np.asarray(info.lower), np.asarray(info.upper)
    outside = np.any((X < lower) | (X > upper), axis=1)
    if outside.any():
        i = int(np.argmax(outside))
        raise InvalidArgumentError(
            f"{TestFunction(fid).value}: point {tuple(X[i])} is outside the domain {info.lower} - {info.upper}"
        )
    return info.fn(X)


def lhs_sample(n: int, p: int, rng: Any = None) -> np.ndarray:
    """
    Random Latin hypercube on the unit cube.

    Each column is a random permutation of the strata [i/n, (i+1)/n) with one
    uniform draw inside each stratum.
    """
    if n < 1 or p < 1:
        raise InvalidArgumentError(f"lhs_sample needs n >= 1 and p >= 1, got n={n}, p={p}")
    return qmc.LatinHypercube(d=p, seed=rng).random(n)


def scale_to_domain(U: np.ndarray, lower: Sequence[float], upper: Sequence[float]) -> np.ndarray:
    return qmc.scale(U, lower, upper)


def grid_points(lower: Sequence[float], upper: Sequence[float], resolution: int) -> np.ndarray:
    """Regular grid with ``resolution`` points per axis, first axis varying slowest."""
    if resolution < 2:
        raise InvalidArgumentError(f"grid resolution must be at least 2 per axis, got {resolution}")
    axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(lower, upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


class RmseVariant(str, Enum):
    STANDARD = "standard"
    ROOT_SUM_OVER_N = "paper"

    @classmethod
    def _missing_(cls, value: object) -> Optional["RmseVariant"]:
        key = value.strip().lower() if isinstance(value, str) else None
        return cls(RMSE_ALIASES[key]) if key in RMSE_ALIASES else None


RMSE_ALIASES = {"literal": RmseVariant.ROOT_SUM_OVER_N.value}


def rmse(pred: Any, truth: Any, variant: RmseVariant = RmseVariant.STANDARD) -> float:
    """
    Root mean squared error.

    ``standard`` is sqrt(sum(e^2) / N). ``paper`` (alias ``literal``) is
    sqrt(sum(e^2)) / N, kept for comparison with tables computed that way.
    """
    pred = np.asarray(pred, dtype=float).reshape(-1)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if pred.shape != truth.shape:
        raise InvalidArgumentError(f"rmse: {pred.size} predictions for {truth.size} true values")
    if pred.size == 0:
        raise InvalidArgumentError("rmse needs at least one point")
    ss = float(np.sum((pred - truth) ** 2))
    if RmseVariant(variant) is RmseVariant.ROOT_SUM_OVER_N:
        return float(np.sqrt(ss) / pred.size)
    return float(np.sqrt(ss / pred.size))


# --- Experiment configuration ------------------------------------------------


@dataclass(frozen=True)
class TestSetSpec:
    """``lhs``: random Latin hypercube of ``size`` points from ``seed``; ``grid``: equally spaced points."""

    kind: str = "lhs"
    size: int = 10000
    seed: int = 20240101

    def __post_init__(self):
        if self.kind not in ("lhs", "grid"):
            raise InvalidArgumentError(f"test set kind must be 'lhs' or 'grid', got {self.kind!r}")
        if self.size < 1:
            raise InvalidArgumentError(f"test set size must be >= 1, got {self.size}")


@dataclass(frozen=True)
class CaseConfig:
    """
    One row of a results table: test functions per level and design sizes.

    ``fixed`` maps a 1-based level index to design points used in every
    replicate instead of a fresh Latin hypercube.
    """

    label: str
    functions: Tuple[TestFunction, ...]
    n: Tuple[int, ...]
    fixed: Dict[int, Tuple[Tuple[float, ...], ...]] = field(default_factory=dict)

    def __post_init__(self):
        functions = tuple(TestFunction(f) for f in self.functions)
        n = tuple(int(k) for k in self.n)
        if len(functions) != len(n):
            raise InvalidArgumentError(f"case {self.label}: {len(functions)} functions but {len(n)} design sizes")
        dims = {function_info(f).dim for f in functions}
        if len(dims) != 1:
            raise InvalidArgumentError(f"case {self.label}: test functions have different dimensions")
        fixed = {int(k): tuple(tuple(float(v) for v in np.atleast_1d(pt)) for pt in pts) for k, pts in self.fixed.items()}
        for level, pts in fixed.items():
            if not 1 <= level <= len(n) or len(pts) != n[level - 1]:
                raise InvalidArgumentError(f"case {self.label}: fixed design for level {level} does not match its size")
        object.__setattr__(self, "functions", functions)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "fixed", fixed)

    @property
    def info(self) -> TestFunctionInfo:
        return function_info(self.functions[-1])

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {"label": self.label, "functions": [f.value for f in self.functions], "n": list(self.n)}
        if self.fixed:
            d["fixed"] = {str(k): [list(pt) for pt in pts] for k, pts in sorted(self.fixed.items())}
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "CaseConfig":
        return cls(label=str(d["label"]), functions=tuple(d["functions"]), n=tuple(d["n"]), fixed=d.get("fixed", {}))


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    cases: Tuple[CaseConfig, ...]
    methods: Tuple[str, ...] = (Method.SINGLE.value, Method.BAYHEM.value, Method.KO.value, Method.HK.value)
    replicates: int = 20
    seed: int = 1
    test_set: TestSetSpec = TestSetSpec()
    rmse_variant: RmseVariant = RmseVariant.STANDARD
    settings: FitSettings = FitSettings()
    description: str = ""

    def __post_init__(self):
        if self.replicates < 1:
            raise InvalidArgumentError(f"replicates must be >= 1, got {self.replicates}")
        if not self.cases:
            raise InvalidArgumentError(f"experiment {self.name} has no cases")
        known = set(METHOD_LABELS)
        for method in self.methods:
            if method not in known:
                raise InvalidArgumentError(f"unknown method {method!r}; expected one of {sorted(known)}")
        object.__setattr__(self, "rmse_variant", RmseVariant(self.rmse_variant))

    def to_dict(self) -> Dict[str, Any]:
        settings = self.settings.to_dict()
        settings.pop("method")
        return {
            "name": self.name,
            "description": self.description,
            "seed": self.seed,
            "replicates": self.replicates,
            "methods": list(self.methods),
            "rmse": self.rmse_variant.value,
            "test_set": {"kind": self.test_set.kind, "size": self.test_set.size, "seed": self.test_set.seed},
            "settings": settings,
            "cases": [case.to_dict() for case in self.cases],
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ExperimentConfig":
        try:
            return cls(
                name=str(d["name"]),
                description=str(d.get("description", "")),
                cases=tuple(CaseConfig.from_dict(c) for c in d["cases"]),
                methods=tuple(d.get("methods", cls.methods)),
                replicates=int(d.get("replicates", 20)),
                seed=int(d.get("seed", 1)),
                test_set=TestSetSpec(**d.get("test_set", {})),
                rmse_variant=RmseVariant(d.get("rmse", RmseVariant.STANDARD.value)),
                settings=FitSettings.from_dict(d.get("settings", {})),
            )
        except KeyError as e:
            raise InvalidArgumentError(f"experiment definition is missing the {e.args[0]!r} field") from None

    def with_overrides(self, **overrides: Any) -> "ExperimentConfig":
        """Copy with every non-None keyword applied."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def list_experiments() -> List[str]:
    return sorted(path.stem for path in EXPERIMENTS_DIR.glob("*.json"))


def load_experiment(name_or_path: str) -> ExperimentConfig:
    """
    Load a built-in experiment by name, or an experiment JSON file by path.

    Raises:
        InvalidArgumentError: For an unknown experiment name.
    """
    path = Path(name_or_path)
    if not path.is_file():
        path = EXPERIMENTS_DIR / f"{name_or_path}.json"
    if not path.is_file():
        raise InvalidArgumentError(
            f"unknown experiment {name_or_path!r}; built-in experiments: {', '.join(list_experiments())}"
        )
    with open(path, encoding="utf-8") as f:
        try:
            definition = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidArgumentError(f"{path}: invalid JSON ({e})") from None
    return ExperimentConfig.from_dict(definition)


# --- Running -------------------------------------------------------------------


def replicate_rng(seed: int, case_index: int, replicate: int) -> np.random.Generator:
    """Independent stream per (case, replicate), the same whichever worker runs it."""
    return np.random.default_rng(np.random.SeedSequence([seed, case_index, replicate]))


def draw_designs(case: CaseConfig, rng: np.random.Generator) -> MultiLevelData:
    """Fresh Latin hypercube per level (or the pinned design), evaluated with the level's function."""
    info = case.info
    levels = []
    for index, (fid, n) in enumerate(zip(case.functions, case.n), start=1):
        if index in case.fixed:
            X = np.asarray(case.fixed[index], dtype=float).reshape(n, info.dim)
        else:
            X = scale_to_domain(lhs_sample(n, info.dim, rng), info.lower, info.upper)
        levels.append(LevelData(X, eval_testfn(fid, X), level_index=index))
    return MultiLevelData(tuple(levels))


def make_test_set(case: CaseConfig, spec: TestSetSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Test inputs and top-level truth; independent of the design stream."""
    info = case.info
    if spec.kind == "grid":
        if info.dim != 1:
            raise InvalidArgumentError("equally spaced test sets are only defined for 1-d functions")
        X = np.linspace(info.lower[0], info.upper[0], spec.size).reshape(-1, 1)
    else:
        X = scale_to_domain(lhs_sample(spec.size, info.dim, np.random.default_rng(spec.seed)), info.lower, info.upper)
    return X, eval_testfn(case.functions[-1], X)


def prior_mean_prediction(model: BayHEmModel, X: np.ndarray) -> np.ndarray:
    return model.mean_spec.basis(X) @ model.top_hp.beta


@with_fallback(default_value=float("nan"))
def score_method(
    method: str,
    data: MultiLevelData,
    settings: FitSettings,
    X_test: np.ndarray,
    y_test: np.ndarray,
    variant: RmseVariant,
) -> float:
    """Fit one method and return its top-level RMSE; NaN marks a failed fit."""
    if method == PRIOR_BASELINE:
        model = fit_model(data, replace(settings, method=Method.BAYHEM))
        mean = prior_mean_prediction(model.emulator, X_test)
    else:
        model = fit_model(data, replace(settings, method=Method(method)))
        mean = predict_model(model, X_test).mean
    if not np.all(np.isfinite(mean)):
        raise ArithmeticError(f"{method} produced non-finite predictions")
    return rmse(mean, y_test, variant)


def run_replicate(
    cfg: ExperimentConfig,
    case_index: int,
    replicate: int,
    X_test: np.ndarray,
    y_test: np.ndarray,
) -> List[Dict[str, Any]]:
    case = cfg.cases[case_index]
    data = draw_designs(case, replicate_rng(cfg.seed, case_index, replicate))
    records = []
    for method in cfg.methods:
        value = score_method(method, data, cfg.settings, X_test, y_test, cfg.rmse_variant)
        failed = not np.isfinite(value)
        if failed:
            logger.warning(f"{cfg.name} case {case.label} replicate {replicate}: {method} failed")
        records.append({
            "case": case.label,
            "method": method,
            "replicate": replicate,
            "rmse": value,
            "failed": failed,
        })
    return records


def _run_replicate_job(job: Tuple[ExperimentConfig, int, int, np.ndarray, np.ndarray]) -> List[Dict[str, Any]]:
    return run_replicate(*job)


@dataclass
class BenchmarkReport:
    """
    Per-replicate records plus their per-(case, method) aggregate.

    ``cells`` has one row per case and method with the mean, min and max RMSE
    over successful replicates and the number of failures.
    """

    experiment: ExperimentConfig
    records: pd.DataFrame
    cells: pd.DataFrame
    metadata: Dict[str, Any] = field(default_factory=dict)

    def cell(self, case: str, method: str) -> pd.Series:
        row = self.cells[(self.cells["case"] == str(case)) & (self.cells["method"] == method)]
        if row.empty:
            raise InvalidArgumentError(f"no cell for case {case!r} and method {method!r}")
        return row.iloc[0]

    def mean_rmse(self, case: str, method: str) -> float:
        return float(self.cell(case, method)["mean"])

    def to_table(self) -> pd.DataFrame:
        """Table layout: one row per case, one column per method, cells 'mean (min, max)' at 4 digits."""
        rows = []
        for case in self.experiment.cases:
            row: Dict[str, Any] = {"case": case.label}
            for method in self.experiment.methods:
                c = self.cell(case.label, method)
                if c["successes"] == 0:
                    text = "failed"
                else:
                    text = f"{c['mean']:.4g} ({c['min']:.4g}, {c['max']:.4g})"
                if c["failures"]:
                    text += f" [{int(c['failures'])} failed]"
                row[METHOD_LABELS[method]] = text
            rows.append(row)
        return pd.DataFrame(rows)

    def to_dict(self) -> Dict[str, Any]:
        cells = self.cells.astype(object).where(self.cells.notna(), None)
        return {
            "metadata": self.metadata,
            "experiment": self.experiment.to_dict(),
            "cells": cells.to_dict(orient="records"),
        }


def aggregate(records: pd.DataFrame, cfg: ExperimentConfig) -> pd.DataFrame:
    """Mean, min and max RMSE per (case, method) over successful replicates."""
    rows = []
    for case in cfg.cases:
        for method in cfg.methods:
            subset = records[(records["case"] == case.label) & (records["method"] == method)]
            ok = subset.loc[~subset["failed"], "rmse"].to_numpy(dtype=float)
            rows.append({
                "case": case.label,
                "method": method,
                "mean": float(np.mean(ok)) if ok.size else float("nan"),
                "min": float(np.min(ok)) if ok.size else float("nan"),
                "max": float(np.max(ok)) if ok.size else float("nan"),
                "successes": int(ok.size),
                "failures": int(subset["failed"].sum()),
            })
    return pd.DataFrame(rows, columns=["case", "method", "mean", "min", "max", "successes", "failures"])


@timed("run_experiment", slow_after=600.0)
def run_experiment(cfg: ExperimentConfig, jobs: int = 1, metadata: Optional[Dict[str, Any]] = None) -> BenchmarkReport:
    """
    Run every (case, replicate, method) fit and aggregate the RMSEs.

    Replicates are independent; with ``jobs > 1`` they run in a process pool.
    Records are ordered by case, replicate and method either way, so serial and
    parallel runs give identical reports.
    """
    test_sets = [make_test_set(case, cfg.test_set) for case in cfg.cases]
    jobs_list = [
        (cfg, i, r, *test_sets[i])
        for i in range(len(cfg.cases))
        for r in range(cfg.replicates)
    ]
    logger.info(f"Running {cfg.name}: {len(cfg.cases)} cases x {cfg.replicates} replicates x {len(cfg.methods)} methods")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_replicate_job, jobs_list))
    else:
        results = [_run_replicate_job(job) for job in jobs_list]

    records = pd.DataFrame(
        [record for batch in results for record in batch],
        columns=["case", "method", "replicate", "rmse", "failed"],
    )
    cells = aggregate(records, cfg)
    failures = int(records["failed"].sum())
    if failures:
        logger.warning(f"{cfg.name}: {failures} of {len(records)} fits failed")
    return BenchmarkReport(experiment=cfg, records=records, cells=cells, metadata=dict(metadata or {}))
