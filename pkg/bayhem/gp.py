"""
Single-level Gaussian process emulator.

Hyperparameters are fitted by maximum marginal likelihood. beta (generalized
least squares) and sigma2 are profiled out in closed form, so the optimizer only
searches over log-lengthscales: Nelder-Mead from a Latin hypercube of starting
points. The same multi-start search serves the multi-level fits, whose
parameter vectors also carry level links.

The same profiled likelihood is used by the multi-level emulators, where it is
evaluated as a conditional likelihood log p(y_new | y_obs).
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cholesky, lstsq, solve_triangular
from scipy.optimize import minimize
from scipy.stats import qmc

from bayhem.errors import FitError, InvalidArgumentError, NumericalError
from bayhem.kernels import Hyperparams, KernelSpec, MeanSpec, as_design, cov_matrix
from bayhem.monitoring import timed

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

# Profiled sigma2 never drops below this; constant data would otherwise give log(0).
SIGMA2_FLOOR = 1e-12

# Objective value reported to the optimizer when a factorization fails.
FAILED_OBJECTIVE = 1e20

Basis = Callable[[np.ndarray], np.ndarray]


def find_duplicate_rows(X: np.ndarray) -> List[Tuple[int, int]]:
    """Return (first, repeat) index pairs of identical rows."""
    seen: Dict[bytes, int] = {}
    pairs = []
    for i, row in enumerate(np.ascontiguousarray(X, dtype=float)):
        key = (row + 0.0).tobytes()
        if key in seen:
            pairs.append((seen[key], i))
        else:
            seen[key] = i
    return pairs


@dataclass(frozen=True)
class LevelData:
    """Design matrix and outputs of one fidelity level (``level_index`` is 1-based)."""

    X: np.ndarray
    y: np.ndarray
    level_index: int = 1

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        X = as_design(X)
        y = np.array(self.y, dtype=float).reshape(-1)
        if y.size != X.shape[0]:
            raise InvalidArgumentError(
                f"level {self.level_index}: y has {y.size} entries but X has {X.shape[0]} rows"
            )
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InvalidArgumentError(f"level {self.level_index}: data contains non-finite values")
        duplicates = find_duplicate_rows(X)
        if duplicates:
            i, j = duplicates[0]
            raise InvalidArgumentError(
                f"level {self.level_index}: design rows {i} and {j} are identical ({tuple(X[i])})"
            )
        if self.level_index < 1:
            raise InvalidArgumentError(f"level_index must be >= 1, got {self.level_index}")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @classmethod
    def empty(cls, p: int, level_index: int = 1) -> "LevelData":
        return cls(X=np.zeros((0, p)), y=np.zeros(0), level_index=level_index)

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    @property
    def dim(self) -> int:
        return int(self.X.shape[1])


@dataclass(frozen=True)
class OptimizerConfig:
    """
    Settings of the multi-start Nelder-Mead search over log-lengthscales.

    Start points are a Latin hypercube over
    [log(start_low * range_j), log(start_high * range_j)]; the search itself is
    bounded to [log(bound_low * range_j), log(bound_high * range_j)], where
    range_j is the spread of the design in dimension j.
    """

    n_starts: int = 10
    max_iter: int = 400
    xatol: float = 1e-4
    fatol: float = 1e-8
    seed: int = 0
    start_low: float = 0.05
    start_high: float = 2.0
    bound_low: float = 1e-3
    bound_high: float = 1e2

    def __post_init__(self):
        if self.n_starts < 1:
            raise InvalidArgumentError(f"n_starts must be >= 1, got {self.n_starts}")
        if not 0 < self.bound_low <= self.start_low < self.start_high <= self.bound_high:
            raise InvalidArgumentError("optimizer box must satisfy 0 < bound_low <= start_low < start_high <= bound_high")


@dataclass(frozen=True)
class Prediction:
    mean: np.ndarray
    variance: np.ndarray
    covariance: Optional[np.ndarray] = None

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.variance)


@dataclass(frozen=True)
class ProfileResult:
    """beta and sigma2 at their maximum-likelihood values for fixed lengthscales."""

    beta: np.ndarray
    sigma2: float
    log_lik: float


@dataclass(frozen=True)
class OptimizationResult:
    """Best point ``x`` of a multi-start search and the objective at every start."""

    x: np.ndarray
    log_lik: float
    start_log_liks: Tuple[float, ...]
    n_failed: int


@dataclass(frozen=True)
class FittedGP:
    """
    Posterior state of a single-level emulator.

    ``trend`` replaces the mean-spec basis when set (hierarchical kriging uses
    the lower-level predictor as its regression function).
    """

    data: LevelData
    hp: Hyperparams
    mean_spec: MeanSpec
    kernel_spec: KernelSpec
    chol: np.ndarray
    alpha: np.ndarray
    log_lik: float
    trend: Optional[Basis] = field(default=None, compare=False, repr=False)

    @property
    def X(self) -> np.ndarray:
        return self.data.X

    @property
    def y(self) -> np.ndarray:
        return self.data.y

    @property
    def dim(self) -> int:
        return self.data.dim

    def basis(self, X: np.ndarray) -> np.ndarray:
        return self.trend(X) if self.trend is not None else self.mean_spec.basis(X)


def lower_cholesky(K: np.ndarray, hp: Optional[Hyperparams] = None) -> np.ndarray:
    """Lower Cholesky factor of ``K``; raises NumericalError when it is not positive definite."""
    if K.shape[0] == 0:
        return np.zeros((0, 0))
    try:
        return cholesky(K, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as e:
        raise NumericalError(
            f"covariance matrix of size {K.shape[0]} is not positive definite: {e}",
            hyperparams=hp.to_dict() if hp is not None else None,
        ) from e


def _solve_lower(C: np.ndarray, b: np.ndarray) -> np.ndarray:
    if C.shape[0] == 0:
        return np.zeros_like(b, dtype=float)
    return solve_triangular(C, b, lower=True)


def profile_gls(
    R: np.ndarray,
    F: np.ndarray,
    y: np.ndarray,
    n_obs: int = 0,
    hp: Optional[Hyperparams] = None,
) -> ProfileResult:
    """
    Profile the regression coefficients and sigma2 out of y ~ N(F beta, sigma2 R).

    beta (generalized least squares) and sigma2 are the maximum-likelihood
    values for all rows. ``log_lik`` is log p(y[n_obs:] | y[:n_obs]) at those
    values: the trailing rows of the whitened system are exactly the
    conditional model of the new block given the observed one. With
    ``n_obs == 0`` it is the marginal likelihood.

    Raises:
        NumericalError: If ``R`` cannot be factorized.
    """
    n = len(y)
    n_new = n - n_obs
    if n_new < 1:
        raise InvalidArgumentError("the conditional likelihood needs at least one new observation")
    C = lower_cholesky(R, hp)
    yt = _solve_lower(C, y)
    if F.shape[1] > 0:
        Ft = _solve_lower(C, F)
        beta = lstsq(Ft, yt)[0]
        resid = yt - Ft @ beta
    else:
        beta = np.zeros(0)
        resid = yt
    sigma2 = max(float(resid @ resid) / n, SIGMA2_FLOOR)
    tail = resid[n_obs:]
    log_det = 2.0 * float(np.sum(np.log(np.diag(C)[n_obs:])))
    log_lik = -0.5 * (n_new * (LOG_2PI + np.log(sigma2)) + log_det + float(tail @ tail) / sigma2)
    return ProfileResult(beta=beta, sigma2=sigma2, log_lik=float(log_lik))


def profile_likelihood(
    lengthscales: np.ndarray,
    X_new: np.ndarray,
    y_new: np.ndarray,
    basis: Basis,
    kernel_spec: KernelSpec,
    X_obs: Optional[np.ndarray] = None,
    y_obs: Optional[np.ndarray] = None,
) -> ProfileResult:
    """
    Concentrated log-likelihood log p(y_new | y_obs) of one GP for fixed lengthscales.

    beta and sigma2 are profiled on the stacked data [y_obs; y_new] (see
    ``profile_gls``). With no observed block this is the marginal likelihood.

    Raises:
        NumericalError: If the correlation matrix cannot be factorized.
    """
    X_new = as_design(X_new)
    p = X_new.shape[1]
    if X_obs is None:
        X_obs, y_obs = np.zeros((0, p)), np.zeros(0)
    X_obs = as_design(X_obs, p)
    if X_new.shape[0] == 0:
        raise InvalidArgumentError("the conditional likelihood needs at least one new observation")

    X = np.vstack([X_obs, X_new])
    y = np.concatenate([np.asarray(y_obs, dtype=float), np.asarray(y_new, dtype=float)])
    F = basis(X)
    unit = Hyperparams(beta=np.zeros(F.shape[1]), sigma2=1.0, lengthscales=lengthscales)
    R = cov_matrix(X, X, unit, kernel_spec, add_jitter=True)
    return profile_gls(R, F, y, X_obs.shape[0], unit)


def log_marginal_likelihood(
    data: LevelData,
    hp: Hyperparams,
    mean_spec: MeanSpec,
    kernel_spec: KernelSpec,
    trend: Optional[Basis] = None,
) -> float:
    """log N(y; m(X), K) with K = K(X, X) + jitter * sigma2 * I."""
    F = trend(data.X) if trend is not None else mean_spec.basis(data.X)
    if F.shape[1] != hp.beta.size:
        raise InvalidArgumentError(f"beta has {hp.beta.size} entries, the basis has {F.shape[1]}")
    r = data.y - F @ hp.beta
    K = cov_matrix(data.X, data.X, hp, kernel_spec, add_jitter=True)
    C = lower_cholesky(K, hp)
    w = _solve_lower(C, r)
    return float(-0.5 * (w @ w) - np.sum(np.log(np.diag(C))) - 0.5 * data.n * LOG_2PI)


def multistart_maximize(
    log_lik_fn: Callable[[np.ndarray], float],
    start_low: np.ndarray,
    start_high: np.ndarray,
    bounds: Sequence[Tuple[float, float]],
    opt: OptimizerConfig,
) -> OptimizationResult:
    """
    Maximize ``log_lik_fn(z)`` by bounded Nelder-Mead from a Latin hypercube of starts.

    Starts fill the box [start_low, start_high]; each restart runs for at most
    ``opt.max_iter`` iterations per parameter. The winner is the restart with
    the highest objective; ties go to the lowest restart index. Evaluations that
    raise NumericalError or return a non-finite value count as failures.

    Raises:
        FitError: If every restart failed.
    """
    start_low, start_high = np.asarray(start_low, dtype=float), np.asarray(start_high, dtype=float)
    d = start_low.size
    unit_starts = qmc.LatinHypercube(d=d, seed=np.random.default_rng(opt.seed)).random(opt.n_starts)
    starts = start_low + (start_high - start_low) * unit_starts

    def objective(z: np.ndarray) -> float:
        try:
            value = -log_lik_fn(z)
        except NumericalError:
            return FAILED_OBJECTIVE
        return value if np.isfinite(value) else FAILED_OBJECTIVE

    best = None
    start_values = []
    n_failed = 0
    for i, z0 in enumerate(starts):
        start_values.append(-objective(z0))
        res = minimize(
            objective,
            z0,
            method="Nelder-Mead",
            bounds=list(bounds),
            options={"xatol": opt.xatol, "fatol": opt.fatol, "maxiter": opt.max_iter * d},
        )
        if res.fun >= FAILED_OBJECTIVE:
            n_failed += 1
            logger.debug(f"Restart {i} failed to find a factorizable point")
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise FitError(f"all {opt.n_starts} optimizer restarts failed")
    if n_failed:
        logger.warning(f"{n_failed} of {opt.n_starts} optimizer restarts failed")
    return OptimizationResult(
        x=np.asarray(best.x, dtype=float),
        log_lik=float(-best.fun),
        start_log_liks=tuple(start_values),
        n_failed=n_failed,
    )


def lengthscale_box(X_ref: np.ndarray, opt: OptimizerConfig) -> Tuple[np.ndarray, np.ndarray, List[Tuple[float, float]]]:
    """Log-lengthscale start box and search bounds, scaled by the spread of ``X_ref`` per dimension."""
    X_ref = as_design(X_ref)
    p = X_ref.shape[1]
    span = np.ptp(X_ref, axis=0) if X_ref.shape[0] > 1 else np.ones(p)
    span = np.where(span > 0, span, 1.0)
    bounds = list(zip(np.log(opt.bound_low * span), np.log(opt.bound_high * span)))
    return np.log(opt.start_low * span), np.log(opt.start_high * span), bounds


def optimize_lengthscales(
    log_lik_fn: Callable[[np.ndarray], float],
    X_ref: np.ndarray,
    opt: OptimizerConfig,
) -> OptimizationResult:
    """
    Maximize ``log_lik_fn(lengthscales)`` by multi-start Nelder-Mead in log space.

    The returned ``x`` holds the lengthscales themselves.

    Raises:
        FitError: If every restart failed.
    """
    lo, hi, bounds = lengthscale_box(X_ref, opt)
    result = multistart_maximize(lambda z: log_lik_fn(np.exp(z)), lo, hi, bounds, opt)
    return replace(result, x=np.exp(result.x))


def build_fitted_gp(
    data: LevelData,
    hp: Hyperparams,
    mean_spec: MeanSpec = MeanSpec(),
    kernel_spec: KernelSpec = KernelSpec(),
    trend: Optional[Basis] = None,
) -> FittedGP:
    """Condition a GP with known hyperparameters on ``data``."""
    if hp.dim != data.dim:
        raise InvalidArgumentError(f"hyperparameters are {hp.dim}-dimensional, data is {data.dim}-dimensional")
    F = trend(data.X) if trend is not None else mean_spec.basis(data.X)
    if F.shape[1] != hp.beta.size:
        raise InvalidArgumentError(f"beta has {hp.beta.size} entries, the basis has {F.shape[1]}")
    K = cov_matrix(data.X, data.X, hp, kernel_spec, add_jitter=True)
    C = lower_cholesky(K, hp)
    r = data.y - F @ hp.beta
    w = _solve_lower(C, r)
    alpha = solve_triangular(C.T, w, lower=False) if data.n else np.zeros(0)
    log_lik = float(-0.5 * (w @ w) - np.sum(np.log(np.diag(C))) - 0.5 * data.n * LOG_2PI)
    return FittedGP(
        data=data,
        hp=hp,
        mean_spec=mean_spec,
        kernel_spec=kernel_spec,
        chol=C,
        alpha=alpha,
        log_lik=log_lik,
        trend=trend,
    )


@timed("fit_gp", slow_after=10.0)
def fit_gp(
    data: LevelData,
    mean_spec: MeanSpec = MeanSpec(),
    kernel_spec: KernelSpec = KernelSpec(),
    opt: OptimizerConfig = OptimizerConfig(),
    trend: Optional[Basis] = None,
) -> FittedGP:
    """
    Fit a single-level GP by maximum marginal likelihood.

    Args:
        data: Training data, at least two distinct points.
        mean_spec: Regression basis of the prior mean.
        kernel_spec: Covariance family and jitter.
        opt: Multi-start optimizer settings.
        trend: Optional regression basis replacing ``mean_spec``.

    Returns:
        FittedGP at the best local maximizer found.

    Raises:
        InvalidArgumentError: If fewer than two points are given.
        FitError: If every optimizer restart failed.
    """
    if data.n < 2:
        raise InvalidArgumentError(f"level {data.level_index}: fitting needs at least 2 points, got {data.n}")
    basis = trend if trend is not None else mean_spec.basis

    def log_lik(lengthscales: np.ndarray) -> float:
        return profile_likelihood(lengthscales, data.X, data.y, basis, kernel_spec).log_lik

    result = optimize_lengthscales(log_lik, data.X, opt)
    profile = profile_likelihood(result.x, data.X, data.y, basis, kernel_spec)
    hp = Hyperparams(beta=profile.beta, sigma2=profile.sigma2, lengthscales=result.x)
    logger.debug(f"Level {data.level_index} fitted: {hp.to_dict()}, log-lik {profile.log_lik:.6g}")
    return build_fitted_gp(data, hp, mean_spec, kernel_spec, trend)


def predict(model: FittedGP, Xnew: Any, want_cov: bool = False) -> Prediction:
    """
    Posterior mean and variance at ``Xnew``.

    mean = m(x) + k(x, X) K^-1 (y - m(X)); variance is the diagonal of
    k(x, x') - k(x, X) K^-1 k(X, x'), clamped at zero.
    """
    Xnew = as_design(Xnew, model.dim, "Xnew")
    Ks = cov_matrix(Xnew, model.X, model.hp)
    mean = model.basis(Xnew) @ model.hp.beta + Ks @ model.alpha
    V = _solve_lower(model.chol, Ks.T)
    variance = model.hp.sigma2 - np.sum(V**2, axis=0)
    covariance = None
    if want_cov:
        covariance = cov_matrix(Xnew, Xnew, model.hp) - V.T @ V
    return Prediction(mean=mean, variance=clamp_variance(variance, model.hp.sigma2), covariance=covariance)


def clamp_variance(variance: np.ndarray, scale: float = 1.0) -> np.ndarray:
    if variance.size and variance.min() < -1e-10 * max(scale, 1.0):
        logger.debug(f"Clamping negative posterior variance {variance.min():.3g}")
    return np.maximum(variance, 0.0)
