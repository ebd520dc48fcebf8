"""
Multi-level emulators behind one fit/predict interface.

- BayHEm: the posterior of level l-1 is the prior of level l. Conditioning is
  done one level at a time with ``condition_level``. Lower levels observe the
  top-level process through a ``LevelLink`` estimated with the
  hyperparameters. With exact links and one shared set of hyperparameters
  this equals a single GP conditioned on all levels' data stacked together.
- K&O: autoregressive co-kriging f_l = rho_{l-1} f_{l-1} + delta_l with
  independent GPs on level 1 and on every discrepancy delta_l.
- HK: hierarchical kriging, where the level-l GP uses the scaled level-(l-1)
  predictor as its regression function.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist

from bayhem.errors import (
    BayHEmError,
    FitError,
    InvalidArgumentError,
    NumericalError,
    UnsupportedOperationError,
)
from bayhem.gp import (
    LOG_2PI,
    FittedGP,
    LevelData,
    OptimizerConfig,
    Prediction,
    build_fitted_gp,
    clamp_variance,
    fit_gp,
    lengthscale_box,
    lower_cholesky,
    multistart_maximize,
    optimize_lengthscales,
    predict,
    profile_gls,
    profile_likelihood,
)
from bayhem.kernels import Hyperparams, KernelSpec, MeanForm, MeanSpec, as_design, cov_matrix
from bayhem.monitoring import timed

logger = logging.getLogger(__name__)

INTERMEDIATE_LEVEL_MESSAGE = (
    "BayHEm hyperparameters are estimated for the top level, so it is not possible to consider "
    "the Gaussian process as valid at intermediate levels"
)


class Method(str, Enum):
    SINGLE = "single"
    BAYHEM = "bayhem"
    KO = "ko"
    HK = "hk"


class ThetaMode(str, Enum):
    SHARED = "shared"
    PER_LEVEL = "per-level"


class Objective(str, Enum):
    JOINT = "joint"
    TOP_CONDITIONAL = "top-conditional"


@dataclass(frozen=True)
class RhoSpec:
    """K&O correlation parameter: a fixed value, or estimated by least squares."""

    estimate: bool = False
    value: float = 1.0

    @classmethod
    def parse(cls, text: str) -> "RhoSpec":
        text = str(text).strip().lower()
        if text == "estimate":
            return cls(estimate=True)
        if text.startswith("fixed:"):
            text = text[len("fixed:"):]
        try:
            return cls(estimate=False, value=float(text))
        except ValueError:
            raise InvalidArgumentError(f"rho must be 'estimate' or 'fixed:<value>', got {text!r}") from None

    def __str__(self) -> str:
        return "estimate" if self.estimate else f"fixed:{self.value!r}"


@dataclass(frozen=True)
class MultiLevelData:
    """Levels ordered cheapest (index 1) to top (index L)."""

    levels: Tuple[LevelData, ...]

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels:
            raise InvalidArgumentError("at least one level is required")
        dims = {level.dim for level in levels}
        if len(dims) != 1:
            raise InvalidArgumentError(f"all levels must share the input dimension, got {sorted(dims)}")
        indices = [level.level_index for level in levels]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise InvalidArgumentError(f"level indices must be strictly increasing, got {indices}")
        object.__setattr__(self, "levels", levels)

    @classmethod
    def from_arrays(cls, pairs: Sequence[Tuple[Any, Any]]) -> "MultiLevelData":
        return cls(tuple(LevelData(X, y, level_index=i + 1) for i, (X, y) in enumerate(pairs)))

    @property
    def L(self) -> int:
        return len(self.levels)

    @property
    def dim(self) -> int:
        return self.levels[0].dim

    @property
    def top(self) -> LevelData:
        return self.levels[-1]

    def stacked(self, upto: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Designs and outputs of the first ``upto`` levels, stacked in level order."""
        chosen = self.levels[: self.L if upto is None else upto]
        if not chosen:
            return np.zeros((0, self.dim)), np.zeros(0)
        return np.vstack([lv.X for lv in chosen]), np.concatenate([lv.y for lv in chosen])


# --- Level links --------------------------------------------------------------


class LinkMode(str, Enum):
    ESTIMATE = "estimate"
    EXACT = "exact"


# Relative nugget on every lower-level run when links are estimated.
DEFAULT_LINK_NUGGET = 1e-4

# Start boxes and search bounds of the link parameters; variances are searched in log space.
LINK_RHO_START = (0.25, 1.25)
LINK_RHO_BOUNDS = (-10.0, 10.0)
LINK_VARIANCE_START = (1e-2, 1.0)
LINK_VARIANCE_BOUNDS = (1e-8, 1e2)


@dataclass(frozen=True)
class LevelLink:
    """
    How the runs of one lower level observe the top-level process f.

        y(x) = rho * f(x) + g(x)^T offset + d(x) + e

    d is a zero-mean GP independent of f, with variance ``variance * sigma2``
    and its own lengthscales; e is white noise of variance ``nugget * sigma2``;
    g is the ``trend`` basis. sigma2 is the variance of f. The default link is
    exact: lower-level runs are treated as runs of the top level.
    """

    rho: float = 1.0
    variance: float = 0.0
    lengthscales: Optional[np.ndarray] = None
    nugget: float = 0.0
    trend: MeanSpec = MeanSpec(MeanForm.ZERO)
    offset: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not np.isfinite(self.rho):
            raise InvalidArgumentError(f"link rho must be finite, got {self.rho}")
        for name in ("variance", "nugget"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise InvalidArgumentError(f"link {name} must be a non-negative finite number, got {value}")
        lengthscales = None
        if self.lengthscales is not None:
            lengthscales = np.array(self.lengthscales, dtype=float).reshape(-1)
            if lengthscales.size == 0 or not np.all(np.isfinite(lengthscales)) or np.any(lengthscales <= 0):
                raise InvalidArgumentError(f"link lengthscales must be strictly positive, got {lengthscales}")
            lengthscales.setflags(write=False)
        elif self.variance > 0:
            raise InvalidArgumentError("a link with a discrepancy variance needs lengthscales")
        offset = np.array(self.offset, dtype=float).reshape(-1)
        offset.setflags(write=False)
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "variance", float(self.variance))
        object.__setattr__(self, "nugget", float(self.nugget))
        object.__setattr__(self, "lengthscales", lengthscales)
        object.__setattr__(self, "offset", offset)

    @property
    def is_exact(self) -> bool:
        return self.rho == 1.0 and self.variance == 0.0 and self.nugget == 0.0 and not np.any(self.offset)

    def mean(self, X: np.ndarray) -> np.ndarray:
        """g(x)^T offset at every row of ``X``."""
        G = self.trend.basis(X)
        if G.shape[1] != self.offset.size:
            raise InvalidArgumentError(
                f"link offset has {self.offset.size} entries, the {self.trend.form.value} trend has {G.shape[1]}"
            )
        return G @ self.offset

    def covariance(self, X: np.ndarray) -> np.ndarray:
        """Covariance of d + e on the design ``X``, per unit sigma2."""
        K = np.zeros((X.shape[0], X.shape[0]))
        if self.variance > 0:
            K += cov_matrix(X, X, Hyperparams(beta=np.zeros(0), sigma2=self.variance, lengthscales=self.lengthscales))
        K[np.diag_indices_from(K)] += self.nugget
        return K

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rho": self.rho,
            "variance": self.variance,
            "lengthscales": None if self.lengthscales is None else [float(d) for d in self.lengthscales],
            "nugget": self.nugget,
            "trend": self.trend.form.value,
            "offset": [float(g) for g in self.offset],
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "LevelLink":
        return cls(
            rho=d.get("rho", 1.0),
            variance=d.get("variance", 0.0),
            lengthscales=d.get("lengthscales"),
            nugget=d.get("nugget", 0.0),
            trend=MeanSpec(MeanForm(d.get("trend", MeanForm.ZERO.value))),
            offset=d.get("offset", []),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LevelLink):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash((self.rho, self.variance, self.nugget, self.offset.tobytes()))


def exact_links(n: int) -> Tuple[LevelLink, ...]:
    return tuple(LevelLink() for _ in range(n))


def linked_correlation(
    levels: Sequence[LevelData],
    lengthscales: np.ndarray,
    links: Sequence[LevelLink],
    kernel_spec: KernelSpec,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Unit-sigma2 covariance of the stacked levels, the last level being f itself.

    Entry (i, j) is s_i s_j c(x_i, x_j), plus the link covariance of the row's
    level when i and j share a lower level, plus the jitter on the diagonal.
    Returns the matrix and the per-row scale s (rho of the row's level, 1 on top).
    """
    if len(links) != len(levels) - 1:
        raise InvalidArgumentError(f"{len(levels)} levels need {len(levels) - 1} links, got {len(links)}")
    X = np.vstack([level.X for level in levels])
    scale = np.concatenate(
        [np.full(level.n, link.rho) for level, link in zip(levels[:-1], links)] + [np.ones(levels[-1].n)]
    )
    unit = Hyperparams(beta=np.zeros(0), sigma2=1.0, lengthscales=lengthscales)
    R = cov_matrix(X, X, unit) * np.outer(scale, scale)
    start = 0
    for level, link in zip(levels[:-1], links):
        stop = start + level.n
        if level.n and not link.is_exact:
            R[start:stop, start:stop] += link.covariance(level.X)
        start = stop
    R[np.diag_indices_from(R)] += kernel_spec.jitter
    return R, scale


# --- Conditioning -----------------------------------------------------------


class PriorProcess:
    """GP prior with mean h(x)^T beta and squared-exponential covariance."""

    def __init__(self, hp: Hyperparams, mean_spec: MeanSpec):
        self.hp = hp
        self.mean_spec = mean_spec

    def mean(self, X: np.ndarray) -> np.ndarray:
        return self.mean_spec.basis(X) @ self.hp.beta

    def cov(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return cov_matrix(A, B, self.hp)

    def var(self, X: np.ndarray) -> np.ndarray:
        return np.full(X.shape[0], self.hp.sigma2)

    def conditioning_designs(self) -> List[np.ndarray]:
        return []


class ConditionedProcess:
    """
    Posterior of ``prior`` after observing ``data`` (one recursion step).

    ``scale`` is the link rho of the observed level: the data saw scale * f.
    """

    def __init__(self, prior: Any, data: LevelData, chol: np.ndarray, alpha: np.ndarray, scale: float = 1.0):
        self.prior = prior
        self.data = data
        self.chol = chol
        self.alpha = alpha
        self.scale = scale

    @property
    def hp(self) -> Hyperparams:
        return self.prior.hp

    def _whitened(self, X: np.ndarray) -> np.ndarray:
        return solve_triangular(self.chol, self.scale * self.prior.cov(self.data.X, X), lower=True)

    def mean(self, X: np.ndarray) -> np.ndarray:
        return self.prior.mean(X) + self.scale * self.prior.cov(X, self.data.X) @ self.alpha

    def cov(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return self.prior.cov(A, B) - self._whitened(A).T @ self._whitened(B)

    def var(self, X: np.ndarray) -> np.ndarray:
        V = self._whitened(X)
        return self.prior.var(X) - np.sum(V**2, axis=0)

    def conditioning_designs(self) -> List[np.ndarray]:
        return self.prior.conditioning_designs() + [self.data.X]


def _collisions(prior: Any, X: np.ndarray, tol: float = 1e-12) -> List[Tuple[Tuple[float, ...], Tuple[float, ...]]]:
    pairs = []
    for earlier in prior.conditioning_designs():
        close = np.argwhere(cdist(X, earlier) <= tol)
        pairs.extend((tuple(X[i]), tuple(earlier[j])) for i, j in close)
    return pairs


def condition_level(prior: Any, data: LevelData, nugget: float = 0.0, link: Optional[LevelLink] = None) -> Any:
    """
    Condition a process on one level's data.

    With the exact link the result has
        m*(x) = m(x) + k(x, X) K^-1 (y - m(X))
        k*(x, x') = k(x, x') - k(x, X) K^-1 k(X, x')
    where m, k are the prior's mean and covariance and K = k(X, X) + nugget * I.
    A general link observes rho * f: the cross-covariance becomes rho * k, K
    becomes rho^2 k(X, X) plus the link covariance, and the link offset is
    subtracted from y. Conditioning on no data returns the prior unchanged.

    Raises:
        NumericalError: If K is singular, naming coinciding earlier design points.
    """
    if data.n == 0:
        return prior
    link = link if link is not None else LevelLink()
    K = link.rho**2 * prior.cov(data.X, data.X)
    if not link.is_exact:
        K += prior.hp.sigma2 * link.covariance(data.X)
    K[np.diag_indices_from(K)] += nugget
    try:
        C = lower_cholesky(K, getattr(prior, "hp", None))
    except NumericalError as e:
        collisions = _collisions(prior, data.X)
        raise NumericalError(
            f"level {data.level_index}: conditioned covariance is singular",
            hyperparams=e.hyperparams,
            collisions=collisions,
        ) from e
    w = solve_triangular(C, data.y - link.rho * prior.mean(data.X) - link.mean(data.X), lower=True)
    alpha = solve_triangular(C.T, w, lower=False)
    return ConditionedProcess(prior, data, C, alpha, link.rho)


def sequential_log_likelihood(
    data: MultiLevelData,
    hp: Hyperparams,
    mean_spec: MeanSpec,
    kernel_spec: KernelSpec,
    links: Optional[Sequence[LevelLink]] = None,
) -> List[float]:
    """
    Terms log p(y_l | y_1, ..., y_{l-1}) for every level under one GP.

    Lower levels are linked to the top level by ``links`` (exact when omitted).
    Their sum is the joint log-likelihood of all stacked data.
    """
    links = exact_links(data.L - 1) if links is None else tuple(links)
    R, scale = linked_correlation(data.levels, hp.lengthscales, links, kernel_spec)
    K = hp.sigma2 * R
    C = lower_cholesky(K, hp)
    X, y = data.stacked()
    offsets = np.concatenate([link.mean(level.X) for level, link in zip(data.levels[:-1], links)] + [np.zeros(data.top.n)])
    mean = scale * (mean_spec.basis(X) @ hp.beta) + offsets
    w = solve_triangular(C, y - mean, lower=True) if len(y) else np.zeros(0)
    log_diag = np.log(np.diag(C))
    terms = []
    start = 0
    for level in data.levels:
        stop = start + level.n
        block = w[start:stop]
        terms.append(float(-0.5 * (block @ block) - np.sum(log_diag[start:stop]) - 0.5 * level.n * LOG_2PI))
        start = stop
    return terms


# --- BayHEm -----------------------------------------------------------------


@dataclass(frozen=True)
class BayHEmModel:
    """
    Fitted BayHEm emulator.

    ``hp_chain`` holds theta_0 alone in shared mode, or (theta_0, ..., theta_{L-1})
    in per-level mode, where theta_{l-1} defines the level-l prior.
    ``links_chain`` runs parallel to it: entry s links every level below the
    top level of stage s to it (stage s of per-level mode covers levels 1..s+1).
    """

    data: MultiLevelData
    mode: ThetaMode
    objective: Objective
    hp_chain: Tuple[Hyperparams, ...]
    links_chain: Tuple[Tuple[LevelLink, ...], ...]
    mean_spec: MeanSpec
    kernel_spec: KernelSpec
    level_log_liks: Tuple[float, ...]
    log_lik: float
    process: Any = field(compare=False, repr=False)

    @property
    def top_hp(self) -> Hyperparams:
        return self.hp_chain[-1]

    @property
    def top_links(self) -> Tuple[LevelLink, ...]:
        return self.links_chain[-1]


def _stage_levels(data: MultiLevelData, mode: ThetaMode, stage: int) -> int:
    """Number of levels covered by ``stage`` (0-based)."""
    return data.L if mode is ThetaMode.SHARED else stage + 1


def build_bayhem(
    data: MultiLevelData,
    mode: ThetaMode,
    hp_chain: Sequence[Hyperparams],
    mean_spec: MeanSpec = MeanSpec(),
    kernel_spec: KernelSpec = KernelSpec(),
    objective: Objective = Objective.JOINT,
    links_chain: Optional[Sequence[Sequence[LevelLink]]] = None,
) -> BayHEmModel:
    """
    Assemble a BayHEm model from known hyperparameters by conditioning level by level.

    ``links_chain`` defaults to exact links everywhere, which makes the
    shared-mode model a single GP conditioned on all levels stacked.
    """
    mode = ThetaMode(mode)
    objective = Objective(objective)
    hp_chain = tuple(hp_chain)
    expected = 1 if mode is ThetaMode.SHARED else data.L
    if len(hp_chain) != expected:
        raise InvalidArgumentError(f"{mode.value} mode needs {expected} hyperparameter sets, got {len(hp_chain)}")
    if links_chain is None:
        links_chain = [exact_links(_stage_levels(data, mode, s) - 1) for s in range(expected)]
    links_chain = tuple(tuple(links) for links in links_chain)
    if len(links_chain) != expected:
        raise InvalidArgumentError(f"{mode.value} mode needs {expected} link sets, got {len(links_chain)}")
    for s, links in enumerate(links_chain):
        if len(links) != _stage_levels(data, mode, s) - 1:
            raise InvalidArgumentError(f"link set {s} has {len(links)} links for {_stage_levels(data, mode, s)} levels")

    top_hp = hp_chain[-1]
    nugget = kernel_spec.jitter * top_hp.sigma2
    process: Any = PriorProcess(top_hp, mean_spec)
    for level, link in zip(data.levels, links_chain[-1] + (None,)):
        process = condition_level(process, level, nugget, link)

    if mode is ThetaMode.SHARED:
        terms = sequential_log_likelihood(data, top_hp, mean_spec, kernel_spec, links_chain[0])
        log_lik = terms[-1] if objective is Objective.TOP_CONDITIONAL and data.L > 1 else sum(terms)
    else:
        terms = []
        for l, (hp, links) in enumerate(zip(hp_chain, links_chain), start=1):
            lower = MultiLevelData(data.levels[:l])
            terms.append(sequential_log_likelihood(lower, hp, mean_spec, kernel_spec, links)[-1])
        log_lik = sum(terms)

    return BayHEmModel(
        data=data,
        mode=mode,
        objective=objective,
        hp_chain=hp_chain,
        links_chain=links_chain,
        mean_spec=mean_spec,
        kernel_spec=kernel_spec,
        level_log_liks=tuple(terms),
        log_lik=float(log_lik),
        process=process,
    )


def _fit_conditional(
    X_obs: np.ndarray,
    y_obs: np.ndarray,
    level: LevelData,
    X_ref: np.ndarray,
    mean_spec: MeanSpec,
    kernel_spec: KernelSpec,
    opt: OptimizerConfig,
) -> Hyperparams:
    """
    Hyperparameters maximizing log p(y_level | y_obs) with exact links.

    beta and sigma2 are profiled on all stacked rows; an empty observed block gives the marginal.
    """
    if len(y_obs) == 0:
        X_obs = y_obs = None

    def log_lik(lengthscales: np.ndarray) -> float:
        return profile_likelihood(lengthscales, level.X, level.y, mean_spec.basis, kernel_spec, X_obs, y_obs).log_lik

    result = optimize_lengthscales(log_lik, X_ref, opt)
    profile = profile_likelihood(result.x, level.X, level.y, mean_spec.basis, kernel_spec, X_obs, y_obs)
    return Hyperparams(beta=profile.beta, sigma2=profile.sigma2, lengthscales=result.x)


def _fit_stacked(
    X: np.ndarray,
    y: np.ndarray,
    mean_spec: MeanSpec,
    kernel_spec: KernelSpec,
    opt: OptimizerConfig,
) -> Hyperparams:
    """Maximize the marginal likelihood of all levels stacked; points may repeat across levels."""

    def log_lik(lengthscales: np.ndarray) -> float:
        return profile_likelihood(lengthscales, X, y, mean_spec.basis, kernel_spec).log_lik

    result = optimize_lengthscales(log_lik, X, opt)
    profile = profile_likelihood(result.x, X, y, mean_spec.basis, kernel_spec)
    return Hyperparams(beta=profile.beta, sigma2=profile.sigma2, lengthscales=result.x)


def _fit_linked(
    levels: Sequence[LevelData],
    mean_spec: MeanSpec,
    kernel_spec: KernelSpec,
    opt: OptimizerConfig,
    level_trend: MeanSpec,
    link_nugget: float,
    conditional: bool,
) -> Tuple[Hyperparams, Tuple[LevelLink, ...]]:
    """
    Fit f's hyperparameters together with a link for every lower level that has data.

    The search runs over log-lengthscales of f followed by (rho, log variance,
    log discrepancy lengthscales) per linked level. beta, the link offsets and
    sigma2 are profiled by generalized least squares on all rows. The objective
    is the joint likelihood, or log p(y_top | lower levels) when ``conditional``.
    """
    lower, top = tuple(levels[:-1]), levels[-1]
    linked = [i for i, level in enumerate(lower) if level.n > 0]
    X = np.vstack([level.X for level in levels])
    y = np.concatenate([level.y for level in levels])
    p = X.shape[1]
    n_obs = len(y) - top.n if conditional else 0

    lo, hi, bounds = lengthscale_box(X, opt)
    log_var_start, log_var_bounds = np.log(LINK_VARIANCE_START), tuple(np.log(LINK_VARIANCE_BOUNDS))
    start_low = np.concatenate([lo] + [np.concatenate([[LINK_RHO_START[0], log_var_start[0]], lo]) for _ in linked])
    start_high = np.concatenate([hi] + [np.concatenate([[LINK_RHO_START[1], log_var_start[1]], hi]) for _ in linked])
    search_bounds = list(bounds) + [b for _ in linked for b in [LINK_RHO_BOUNDS, log_var_bounds] + list(bounds)]

    H = mean_spec.basis(X)
    n_trend = level_trend.n_basis(p)
    G = np.zeros((len(y), n_trend * len(linked)))
    starts = np.cumsum([0] + [level.n for level in levels])
    for k, i in enumerate(linked):
        G[starts[i]:starts[i + 1], k * n_trend:(k + 1) * n_trend] = level_trend.basis(lower[i].X)

    def decode(z: np.ndarray) -> Tuple[np.ndarray, List[LevelLink]]:
        links = list(exact_links(len(lower)))
        for k, i in enumerate(linked):
            block = z[p + k * (p + 2): p + (k + 1) * (p + 2)]
            links[i] = LevelLink(
                rho=block[0],
                variance=np.exp(block[1]),
                lengthscales=np.exp(block[2:]),
                nugget=link_nugget,
                trend=level_trend,
                offset=np.zeros(n_trend),
            )
        return np.exp(z[:p]), links

    def profile(z: np.ndarray):
        lengthscales, links = decode(z)
        R, scale = linked_correlation(levels, lengthscales, links, kernel_spec)
        F = np.hstack([scale[:, None] * H, G])
        return lengthscales, links, profile_gls(R, F, y, n_obs)

    result = multistart_maximize(lambda z: profile(z)[2].log_lik, start_low, start_high, search_bounds, opt)
    lengthscales, links, best = profile(result.x)
    n_mean = H.shape[1]
    hp = Hyperparams(beta=best.beta[:n_mean], sigma2=best.sigma2, lengthscales=lengthscales)
    for k, i in enumerate(linked):
        offset = best.beta[n_mean + k * n_trend: n_mean + (k + 1) * n_trend]
        links[i] = replace(links[i], offset=offset)
        logger.debug(f"Level {lower[i].level_index} link: {links[i].to_dict()}")
    return hp, tuple(links)


@timed("fit_bayhem", slow_after=30.0)
def fit_bayhem(
    data: MultiLevelData,
    mode: ThetaMode = ThetaMode.SHARED,
    mean_spec: MeanSpec = MeanSpec(),
    kernel_spec: KernelSpec = KernelSpec(),
    opt: OptimizerConfig = OptimizerConfig(),
    objective: Objective = Objective.JOINT,
    links: LinkMode = LinkMode.ESTIMATE,
    level_trend: MeanSpec = MeanSpec(),
    link_nugget: float = DEFAULT_LINK_NUGGET,
) -> BayHEmModel:
    """
    Fit a BayHEm emulator.

    Shared mode fits one theta_0 for the whole hierarchy, maximizing either the
    joint likelihood of all levels or only log p(y_L | y_1..y_{L-1}). Per-level
    mode fits theta_0 on level 1, then each theta_{l-1} by maximizing
    log p(y_l | y_1..y_{l-1}) with the earlier levels' data fixed.

    With ``links=ESTIMATE`` every lower level with data is linked to the top
    level of its stage (see ``LevelLink``) and the link parameters are fitted
    alongside theta; ``level_trend`` is the basis of the link offsets. Exact
    links are used when there is nothing to link: a single level, or no data
    at the stage's top level or below it.

    Raises:
        FitError: With the level index of the failing stage.
    """
    mode = ThetaMode(mode)
    objective = Objective(objective)
    links = LinkMode(links)
    X_all, y_all = data.stacked()
    if len(y_all) < 2:
        raise InvalidArgumentError(f"BayHEm needs at least 2 data points in total, got {len(y_all)}")

    def can_link(levels: Sequence[LevelData]) -> bool:
        return links is LinkMode.ESTIMATE and levels[-1].n > 0 and any(level.n for level in levels[:-1])

    if mode is ThetaMode.SHARED:
        top = data.top
        use_conditional = objective is Objective.TOP_CONDITIONAL and data.L > 1
        if use_conditional and top.n == 0:
            raise InvalidArgumentError("the top-conditional objective needs data at the top level")
        try:
            if can_link(data.levels):
                hp0, links0 = _fit_linked(
                    data.levels, mean_spec, kernel_spec, opt, level_trend, link_nugget, use_conditional
                )
            elif use_conditional:
                X_obs, y_obs = data.stacked(data.L - 1)
                hp0 = _fit_conditional(X_obs, y_obs, top, X_all, mean_spec, kernel_spec, opt)
                links0 = exact_links(data.L - 1)
            else:
                hp0 = _fit_stacked(X_all, y_all, mean_spec, kernel_spec, opt)
                links0 = exact_links(data.L - 1)
        except BayHEmError as e:
            raise FitError(f"shared-theta fit failed: {e}", level=data.L) from e
        return build_bayhem(data, mode, (hp0,), mean_spec, kernel_spec, objective, (links0,))

    hp_chain: List[Hyperparams] = []
    links_chain: List[Tuple[LevelLink, ...]] = []
    for l, level in enumerate(data.levels, start=1):
        try:
            if l == 1:
                hp_chain.append(fit_gp(level, mean_spec, kernel_spec, opt).hp)
                links_chain.append(())
                continue
            if level.n == 0:
                logger.warning(f"Level {l} has no data; reusing the level-{l - 1} hyperparameters")
                hp_chain.append(hp_chain[-1])
                links_chain.append(links_chain[-1] + (LevelLink(),))
                continue
            prefix = data.levels[:l]
            if can_link(prefix):
                hp, stage_links = _fit_linked(prefix, mean_spec, kernel_spec, opt, level_trend, link_nugget, True)
            else:
                X_obs, y_obs = data.stacked(l - 1)
                X_ref, _ = data.stacked(l)
                hp = _fit_conditional(X_obs, y_obs, level, X_ref, mean_spec, kernel_spec, opt)
                stage_links = exact_links(l - 1)
            hp_chain.append(hp)
            links_chain.append(stage_links)
        except BayHEmError as e:
            raise FitError(f"per-level fit failed: {e}", level=l) from e
    return build_bayhem(data, mode, tuple(hp_chain), mean_spec, kernel_spec, objective, tuple(links_chain))


def predict_bayhem(
    model: BayHEmModel,
    Xnew: Any,
    level: Optional[int] = None,
    want_cov: bool = False,
) -> Prediction:
    """
    Top-level posterior mean and variance.

    Raises:
        UnsupportedOperationError: If an intermediate level is requested.
    """
    if level is not None and level != model.data.L:
        raise UnsupportedOperationError(f"cannot predict level {level} of {model.data.L}: {INTERMEDIATE_LEVEL_MESSAGE}")
    X = as_design(Xnew, model.data.dim, "Xnew")
    mean = model.process.mean(X)
    variance = clamp_variance(model.process.var(X), model.top_hp.sigma2)
    covariance = model.process.cov(X, X) if want_cov else None
    return Prediction(mean=mean, variance=variance, covariance=covariance)


# --- Kennedy & O'Hagan ------------------------------------------------------


@dataclass(frozen=True)
class Discrepancy:
    """delta_l(x_i) = y_l(x_i) - rho_{l-1} f_{l-1}(x_i) on the level-l design."""

    level_index: int
    values: np.ndarray
    lower_values: np.ndarray
    exact: np.ndarray


@dataclass(frozen=True)
class KOModel:
    data: MultiLevelData
    base_gp: FittedGP
    discrepancy_gps: Tuple[FittedGP, ...]
    rho: Tuple[float, ...]
    rho_spec: RhoSpec
    discrepancies: Tuple[Discrepancy, ...]


def _ko_chain(base_gp: FittedGP, gps: Sequence[FittedGP], rho: Sequence[float], X: np.ndarray, want_cov: bool = False) -> Prediction:
    top = predict(base_gp, X, want_cov)
    mean, variance, covariance = top.mean, top.variance, top.covariance
    for r, gp in zip(rho, gps):
        delta = predict(gp, X, want_cov)
        mean = r * mean + delta.mean
        variance = r**2 * variance + delta.variance
        if want_cov:
            covariance = r**2 * covariance + delta.covariance
    return Prediction(mean=mean, variance=variance, covariance=covariance)


def _lower_level_values(
    lower: LevelData,
    X: np.ndarray,
    predict_lower: Callable[[np.ndarray], np.ndarray],
) -> Tuple[np.ndarray, np.ndarray]:
    """f_{l-1} at the level-l design: exact where the point was run at level l-1, predicted elsewhere."""
    index = {(row + 0.0).tobytes(): i for i, row in enumerate(lower.X)}
    positions = [index.get((row + 0.0).tobytes()) for row in X]
    exact = np.array([pos is not None for pos in positions], dtype=bool)
    values = np.empty(len(X))
    if exact.any():
        values[exact] = lower.y[[pos for pos in positions if pos is not None]]
    if not exact.all():
        logger.warning(
            f"Level {lower.level_index + 1} design is not nested in level {lower.level_index} "
            f"({int((~exact).sum())} of {len(X)} points); using the level-{lower.level_index} emulator mean there"
        )
        values[~exact] = predict_lower(X[~exact])
    return values, exact


def estimate_rho(lower_values: np.ndarray, y: np.ndarray) -> float:
    """No-intercept least-squares slope of y on the lower-level values."""
    denom = float(lower_values @ lower_values)
    return float(lower_values @ y) / denom if denom > 0 else 0.0


def _discrepancy(level: LevelData, lower: LevelData, rho: Optional[float], predict_lower) -> Tuple[Discrepancy, float]:
    lower_values, exact = _lower_level_values(lower, level.X, predict_lower)
    if rho is None:
        rho = estimate_rho(lower_values, level.y)
    values = level.y - rho * lower_values
    return Discrepancy(level.level_index, values, lower_values, exact), rho


def build_ko(
    data: MultiLevelData,
    hps: Sequence[Hyperparams],
    rho: Sequence[float],
    mean_spec: MeanSpec = MeanSpec(),
    kernel_spec: KernelSpec = KernelSpec(),
    rho_spec: Optional[RhoSpec] = None,
) -> KOModel:
    """Assemble a K&O model from known hyperparameters (base GP first) and correlations."""
    if len(hps) != data.L or len(rho) != data.L - 1:
        raise InvalidArgumentError(f"K&O over {data.L} levels needs {data.L} hyperparameter sets and {data.L - 1} rho values")
    base = build_fitted_gp(data.levels[0], hps[0], mean_spec, kernel_spec)
    gps: List[FittedGP] = []
    discrepancies: List[Discrepancy] = []
    for l in range(1, data.L):
        level, lower = data.levels[l], data.levels[l - 1]
        chain = tuple(gps)

        def predict_lower(X, chain=chain):
            return _ko_chain(base, chain, rho[: len(chain)], X).mean

        disc, _ = _discrepancy(level, lower, rho[l - 1], predict_lower)
        discrepancies.append(disc)
        gps.append(build_fitted_gp(LevelData(level.X, disc.values, level.level_index), hps[l], mean_spec, kernel_spec))
    return KOModel(
        data=data,
        base_gp=base,
        discrepancy_gps=tuple(gps),
        rho=tuple(float(r) for r in rho),
        rho_spec=rho_spec or RhoSpec(),
        discrepancies=tuple(discrepancies),
    )


@timed("fit_ko", slow_after=30.0)
def fit_ko(
    data: MultiLevelData,
    rho_spec: RhoSpec = RhoSpec(),
    mean_spec: MeanSpec = MeanSpec(),
    kernel_spec: KernelSpec = KernelSpec(),
    opt: OptimizerConfig = OptimizerConfig(),
) -> KOModel:
    """
    Fit the Kennedy & O'Hagan autoregressive model.

    Level 1 and every discrepancy get independent hyperparameters. With one
    level this is a single GP on level 1.
    """
    try:
        base = fit_gp(data.levels[0], mean_spec, kernel_spec, opt)
    except BayHEmError as e:
        raise FitError(f"K&O base fit failed: {e}", level=1) from e
    hps = [base.hp]
    rhos: List[float] = []
    gps: List[FittedGP] = []
    for l in range(1, data.L):
        level, lower = data.levels[l], data.levels[l - 1]
        chain = tuple(gps)

        def predict_lower(X, chain=chain):
            return _ko_chain(base, chain, rhos[: len(chain)], X).mean

        try:
            disc, rho = _discrepancy(level, lower, None if rho_spec.estimate else rho_spec.value, predict_lower)
            gp = fit_gp(LevelData(level.X, disc.values, level.level_index), mean_spec, kernel_spec, opt)
        except BayHEmError as e:
            raise FitError(f"K&O discrepancy fit failed: {e}", level=level.level_index) from e
        logger.debug(f"K&O level {level.level_index}: rho = {rho:.6g}")
        rhos.append(rho)
        gps.append(gp)
        hps.append(gp.hp)
    return build_ko(data, hps, rhos, mean_spec, kernel_spec, rho_spec)


def predict_ko(model: KOModel, Xnew: Any, want_cov: bool = False) -> Prediction:
    """Recursive composition: m_l = rho m_{l-1} + m_delta, var_l = rho^2 var_{l-1} + var_delta."""
    X = as_design(Xnew, model.data.dim, "Xnew")
    return _ko_chain(model.base_gp, model.discrepancy_gps, model.rho, X, want_cov)


# --- Hierarchical kriging ---------------------------------------------------


@dataclass(frozen=True)
class HKModel:
    data: MultiLevelData
    level_gps: Tuple[FittedGP, ...]

    @property
    def scaling(self) -> Tuple[float, ...]:
        """Fitted coefficient of the lower-level predictor, for levels 2..L."""
        return tuple(float(gp.hp.beta[0]) for gp in self.level_gps[1:])


def _hk_trend(lower_gp: FittedGP) -> Callable[[np.ndarray], np.ndarray]:
    def trend(X: np.ndarray) -> np.ndarray:
        return predict(lower_gp, X).mean.reshape(-1, 1)
    return trend


def build_hk(
    data: MultiLevelData,
    hps: Sequence[Hyperparams],
    mean_spec: MeanSpec = MeanSpec(),
    kernel_spec: KernelSpec = KernelSpec(),
) -> HKModel:
    if len(hps) != data.L:
        raise InvalidArgumentError(f"HK over {data.L} levels needs {data.L} hyperparameter sets, got {len(hps)}")
    gps = [build_fitted_gp(data.levels[0], hps[0], mean_spec, kernel_spec)]
    for level, hp in zip(data.levels[1:], hps[1:]):
        gps.append(build_fitted_gp(level, hp, mean_spec, kernel_spec, trend=_hk_trend(gps[-1])))
    return HKModel(data=data, level_gps=tuple(gps))


@timed("fit_hk", slow_after=30.0)
def fit_hk(
    data: MultiLevelData,
    mean_spec: MeanSpec = MeanSpec(),
    kernel_spec: KernelSpec = KernelSpec(),
    opt: OptimizerConfig = OptimizerConfig(),
) -> HKModel:
    """Fit hierarchical kriging; with one level this is ``fit_gp`` on that level."""
    gps: List[FittedGP] = []
    for level in data.levels:
        trend = _hk_trend(gps[-1]) if gps else None
        try:
            gps.append(fit_gp(level, mean_spec, kernel_spec, opt, trend=trend))
        except BayHEmError as e:
            raise FitError(f"hierarchical kriging fit failed: {e}", level=level.level_index) from e
    return build_hk(data, [gp.hp for gp in gps], mean_spec, kernel_spec)


def predict_hk(model: HKModel, Xnew: Any, want_cov: bool = False) -> Prediction:
    return predict(model.level_gps[-1], Xnew, want_cov)


# --- Unified interface ------------------------------------------------------


@dataclass(frozen=True)
class FitSettings:
    """Everything needed to fit one emulator, independent of the data."""

    method: Method = Method.BAYHEM
    mode: ThetaMode = ThetaMode.SHARED
    objective: Objective = Objective.JOINT
    rho: RhoSpec = RhoSpec()
    mean_spec: MeanSpec = MeanSpec()
    kernel_spec: KernelSpec = KernelSpec()
    optimizer: OptimizerConfig = OptimizerConfig()
    links: LinkMode = LinkMode.ESTIMATE
    level_trend: MeanSpec = MeanSpec()
    link_nugget: float = DEFAULT_LINK_NUGGET

    def __post_init__(self):
        object.__setattr__(self, "links", LinkMode(self.links))
        if not np.isfinite(self.link_nugget) or self.link_nugget < 0:
            raise InvalidArgumentError(f"link nugget must be a non-negative finite number, got {self.link_nugget}")
        object.__setattr__(self, "link_nugget", float(self.link_nugget))

    def to_dict(self) -> Dict[str, Any]:
        opt = self.optimizer
        return {
            "method": Method(self.method).value,
            "mode": ThetaMode(self.mode).value,
            "objective": Objective(self.objective).value,
            "rho": str(self.rho),
            "mean": MeanForm(self.mean_spec.form).value,
            "jitter": self.kernel_spec.jitter,
            "n_starts": opt.n_starts,
            "max_iter": opt.max_iter,
            "optimizer_seed": opt.seed,
            "links": self.links.value,
            "level_trend": MeanForm(self.level_trend.form).value,
            "link_nugget": self.link_nugget,
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "FitSettings":
        defaults = OptimizerConfig()
        return cls(
            method=Method(d.get("method", Method.BAYHEM.value)),
            mode=ThetaMode(d.get("mode", ThetaMode.SHARED.value)),
            objective=Objective(d.get("objective", Objective.JOINT.value)),
            rho=RhoSpec.parse(d.get("rho", "fixed:1.0")),
            mean_spec=MeanSpec(MeanForm(d.get("mean", MeanForm.CONSTANT.value))),
            kernel_spec=KernelSpec(jitter=float(d.get("jitter", KernelSpec().jitter))),
            optimizer=OptimizerConfig(
                n_starts=int(d.get("n_starts", defaults.n_starts)),
                max_iter=int(d.get("max_iter", defaults.max_iter)),
                seed=int(d.get("optimizer_seed", defaults.seed)),
            ),
            links=LinkMode(d.get("links", LinkMode.ESTIMATE.value)),
            level_trend=MeanSpec(MeanForm(d.get("level_trend", MeanForm.CONSTANT.value))),
            link_nugget=float(d.get("link_nugget", DEFAULT_LINK_NUGGET)),
        )


@dataclass(frozen=True)
class MultiLevelModel:
    """A fitted emulator of any method, with the data and settings it was fitted from."""

    method: Method
    settings: FitSettings
    data: MultiLevelData
    emulator: Any

    def hyperparams(self) -> List[Hyperparams]:
        em = self.emulator
        if isinstance(em, FittedGP):
            return [em.hp]
        if isinstance(em, BayHEmModel):
            return list(em.hp_chain)
        if isinstance(em, KOModel):
            return [em.base_gp.hp] + [gp.hp for gp in em.discrepancy_gps]
        return [gp.hp for gp in em.level_gps]

    @property
    def log_lik(self) -> float:
        em = self.emulator
        if isinstance(em, (FittedGP, BayHEmModel)):
            return em.log_lik
        if isinstance(em, KOModel):
            return em.base_gp.log_lik + sum(gp.log_lik for gp in em.discrepancy_gps)
        return sum(gp.log_lik for gp in em.level_gps)

    def state(self) -> Dict[str, Any]:
        """Fitted quantities from which ``build_model`` reconstructs the emulator exactly."""
        state: Dict[str, Any] = {"hyperparams": [hp.to_dict() for hp in self.hyperparams()]}
        if isinstance(self.emulator, KOModel):
            state["rho"] = list(self.emulator.rho)
        if isinstance(self.emulator, BayHEmModel):
            state["links"] = [[link.to_dict() for link in links] for links in self.emulator.links_chain]
        return state

    def describe(self) -> List[Dict[str, Any]]:
        """One summary row per fitted hyperparameter set and per estimated level link."""
        em = self.emulator
        rows = []
        if isinstance(em, FittedGP):
            rows.append({"component": f"GP on level {em.data.level_index}", "log_lik": em.log_lik, **em.hp.to_dict()})
        elif isinstance(em, BayHEmModel):
            names = ["theta_0 (all levels)"] if em.mode is ThetaMode.SHARED else [
                f"theta_{i} (level {i + 1} prior)" for i in range(len(em.hp_chain))
            ]
            for i, (name, hp) in enumerate(zip(names, em.hp_chain)):
                log_lik = em.log_lik if em.mode is ThetaMode.SHARED else em.level_log_liks[i]
                rows.append({"component": name, "log_lik": log_lik, **hp.to_dict()})
            for s, links in enumerate(em.links_chain):
                for i, link in enumerate(links):
                    if link.is_exact:
                        continue
                    stage = "" if em.mode is ThetaMode.SHARED else f" (theta_{s})"
                    rows.append({
                        "component": f"level {i + 1} link{stage}",
                        "rho": link.rho,
                        "link_variance": link.variance,
                        "link_nugget": link.nugget,
                        "offset": [float(g) for g in link.offset],
                        "lengthscales": None if link.lengthscales is None else [float(d) for d in link.lengthscales],
                    })
        elif isinstance(em, KOModel):
            rows.append({"component": "GP on level 1", "log_lik": em.base_gp.log_lik, **em.base_gp.hp.to_dict()})
            for r, gp in zip(em.rho, em.discrepancy_gps):
                rows.append({
                    "component": f"discrepancy level {gp.data.level_index}",
                    "rho": r,
                    "log_lik": gp.log_lik,
                    **gp.hp.to_dict(),
                })
        else:
            for gp in em.level_gps:
                rows.append({"component": f"HK level {gp.data.level_index}", "log_lik": gp.log_lik, **gp.hp.to_dict()})
        return rows


def fit_model(data: MultiLevelData, settings: FitSettings = FitSettings()) -> MultiLevelModel:
    """
    Fit the emulator named by ``settings.method``.

    The single-GP baseline is trained on the top level only.

    Raises:
        InvalidArgumentError: For K&O on fewer than two levels.
        FitError: If fitting fails.
    """
    method = Method(settings.method)
    mean_spec, kernel_spec, opt = settings.mean_spec, settings.kernel_spec, settings.optimizer
    if method is Method.SINGLE:
        try:
            emulator = fit_gp(data.top, mean_spec, kernel_spec, opt)
        except BayHEmError as e:
            raise FitError(f"single GP fit failed: {e}", level=data.top.level_index) from e
    elif method is Method.BAYHEM:
        emulator = fit_bayhem(
            data,
            settings.mode,
            mean_spec,
            kernel_spec,
            opt,
            settings.objective,
            settings.links,
            settings.level_trend,
            settings.link_nugget,
        )
    elif method is Method.KO:
        if data.L < 2:
            raise InvalidArgumentError("K&O requires >= 2 levels")
        emulator = fit_ko(data, settings.rho, mean_spec, kernel_spec, opt)
    else:
        emulator = fit_hk(data, mean_spec, kernel_spec, opt)
    return MultiLevelModel(method=method, settings=settings, data=data, emulator=emulator)


def build_model(data: MultiLevelData, settings: FitSettings, state: Dict[str, Any]) -> MultiLevelModel:
    """Rebuild a fitted model from ``MultiLevelModel.state()`` without re-optimizing."""
    method = Method(settings.method)
    hps = [Hyperparams.from_dict(h) for h in state["hyperparams"]]
    mean_spec, kernel_spec = settings.mean_spec, settings.kernel_spec
    if method is Method.SINGLE:
        emulator = build_fitted_gp(data.top, hps[0], mean_spec, kernel_spec)
    elif method is Method.BAYHEM:
        links = state.get("links")
        links_chain = None if links is None else [[LevelLink.from_dict(link) for link in stage] for stage in links]
        emulator = build_bayhem(data, settings.mode, hps, mean_spec, kernel_spec, settings.objective, links_chain)
    elif method is Method.KO:
        emulator = build_ko(data, hps, state["rho"], mean_spec, kernel_spec, settings.rho)
    else:
        emulator = build_hk(data, hps, mean_spec, kernel_spec)
    return MultiLevelModel(method=method, settings=settings, data=data, emulator=emulator)


def predict_model(model: MultiLevelModel, Xnew: Any, want_cov: bool = False) -> Prediction:
    """Top-level prediction of any fitted model."""
    em = model.emulator
    if isinstance(em, FittedGP):
        return predict(em, Xnew, want_cov)
    if isinstance(em, BayHEmModel):
        return predict_bayhem(em, Xnew, want_cov=want_cov)
    if isinstance(em, KOModel):
        return predict_ko(em, Xnew, want_cov)
    return predict_hk(em, Xnew, want_cov)
