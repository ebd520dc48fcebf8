"""
Mean and covariance functions shared by every emulator.

The covariance is the squared exponential

    k(x, x') = sigma2 * exp(-sum_j ((x_j - x'_j) / delta_j) ** 2)

and the mean is a linear model h(x)^T beta over a zero, constant or linear basis.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional

import numpy as np
from scipy.spatial.distance import cdist

from bayhem.errors import InvalidArgumentError

DEFAULT_JITTER = 1e-8


class MeanForm(str, Enum):
    ZERO = "zero"
    CONSTANT = "constant"
    LINEAR = "linear"


class KernelFamily(str, Enum):
    SQUARED_EXPONENTIAL = "squared_exponential"


def as_design(X: Any, p: Optional[int] = None, name: str = "X") -> np.ndarray:
    """Coerce ``X`` to a float 2-d array of shape (n, p), checking ``p`` when given."""
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1) if p in (None, 1) else arr.reshape(1, -1)
    if arr.ndim != 2:
        raise InvalidArgumentError(f"{name} must be a 2-d array, got shape {arr.shape}")
    if p is not None and arr.shape[1] != p:
        raise InvalidArgumentError(f"{name} has {arr.shape[1]} columns, expected {p}")
    return arr


@dataclass(frozen=True)
class MeanSpec:
    """Selects the regression basis h(x)."""

    form: MeanForm = MeanForm.CONSTANT

    def __post_init__(self):
        object.__setattr__(self, "form", MeanForm(self.form))

    def n_basis(self, p: int) -> int:
        if self.form is MeanForm.ZERO:
            return 0
        if self.form is MeanForm.CONSTANT:
            return 1
        return p + 1

    def basis(self, X: np.ndarray) -> np.ndarray:
        """Regression matrix H with one row h(x_i) per design point."""
        X = as_design(X)
        n = X.shape[0]
        if self.form is MeanForm.ZERO:
            return np.zeros((n, 0))
        if self.form is MeanForm.CONSTANT:
            return np.ones((n, 1))
        return np.hstack([np.ones((n, 1)), X])


@dataclass(frozen=True)
class KernelSpec:
    """Covariance family plus the diagonal jitter, relative to sigma2."""

    family: KernelFamily = KernelFamily.SQUARED_EXPONENTIAL
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        if not np.isfinite(self.jitter) or self.jitter < 0:
            raise InvalidArgumentError(f"jitter must be a non-negative finite number, got {self.jitter}")
        if KernelFamily(self.family) is not KernelFamily.SQUARED_EXPONENTIAL:
            raise InvalidArgumentError(f"unsupported kernel family: {self.family}")


@dataclass(frozen=True)
class Hyperparams:
    """
    theta = (beta, sigma2, lengthscales) of one Gaussian process.

    Arrays are copied and made read-only so instances can be shared between threads.
    """

    beta: np.ndarray
    sigma2: float
    lengthscales: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float).reshape(-1)
        lengthscales = np.array(self.lengthscales, dtype=float).reshape(-1)
        if lengthscales.size == 0:
            raise InvalidArgumentError("lengthscales must not be empty")
        if not np.all(np.isfinite(lengthscales)) or np.any(lengthscales <= 0):
            raise InvalidArgumentError(f"lengthscales must be strictly positive, got {lengthscales}")
        if not np.isfinite(self.sigma2) or self.sigma2 < 0:
            raise InvalidArgumentError(f"sigma2 must be non-negative, got {self.sigma2}")
        beta.setflags(write=False)
        lengthscales.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "lengthscales", lengthscales)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def dim(self) -> int:
        return int(self.lengthscales.size)

    def with_sigma2(self, sigma2: float) -> "Hyperparams":
        return Hyperparams(beta=self.beta, sigma2=sigma2, lengthscales=self.lengthscales)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "beta": [float(b) for b in self.beta],
            "sigma2": float(self.sigma2),
            "lengthscales": [float(d) for d in self.lengthscales],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Hyperparams":
        return cls(beta=data["beta"], sigma2=data["sigma2"], lengthscales=data["lengthscales"])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Hyperparams):
            return NotImplemented
        return (
            self.sigma2 == other.sigma2
            and np.array_equal(self.beta, other.beta)
            and np.array_equal(self.lengthscales, other.lengthscales)
        )

    def __hash__(self) -> int:
        return hash((self.sigma2, self.beta.tobytes(), self.lengthscales.tobytes()))


def eval_mean(x: Any, spec: MeanSpec, beta: Any) -> float:
    """Return h(x)^T beta for a single point ``x``."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    expected = spec.n_basis(x.shape[1])
    if beta.size != expected:
        raise InvalidArgumentError(
            f"beta has {beta.size} entries but the {spec.form.value} basis in {x.shape[1]} dims needs {expected}"
        )
    return float(spec.basis(x)[0] @ beta)


def eval_cov(x: Any, x2: Any, hp: Hyperparams) -> float:
    """Squared-exponential covariance between two single points."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    x2 = np.asarray(x2, dtype=float).reshape(1, -1)
    return float(cov_matrix(x, x2, hp)[0, 0])


def cov_matrix(
    A: Any,
    B: Any,
    hp: Hyperparams,
    kernel_spec: Optional[KernelSpec] = None,
    add_jitter: bool = False,
) -> np.ndarray:
    """
    Covariance matrix with entries k(a_i, b_j).

    Args:
        A: Design of shape (n, p).
        B: Design of shape (m, p).
        hp: Hyperparameters; only sigma2 and lengthscales are used.
        kernel_spec: Supplies the jitter when ``add_jitter`` is set.
        add_jitter: Add ``jitter * sigma2`` to the diagonal. Only valid when A is B.

    Returns:
        Array of shape (n, m).
    """
    A = as_design(A, hp.dim, "A")
    B = as_design(B, hp.dim, "B")
    if np.any(hp.lengthscales <= 0):
        raise InvalidArgumentError(f"lengthscales must be strictly positive, got {hp.lengthscales}")
    d2 = cdist(A / hp.lengthscales, B / hp.lengthscales, metric="sqeuclidean")
    K = hp.sigma2 * np.exp(-d2)
    if add_jitter:
        if A.shape != B.shape:
            raise InvalidArgumentError("jitter can only be added to a square covariance of a design with itself")
        jitter = (kernel_spec or KernelSpec()).jitter
        K[np.diag_indices_from(K)] += jitter * hp.sigma2
    return K
