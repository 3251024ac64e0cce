"""One-dimensional kernels, their products over grid axes, and covariance builders.

Product kernels ``k(x, z) = prod_l k_l(x_l, z_l)`` give Kronecker-factored
covariance matrices on Cartesian grids: each axis contributes a small dense
factor. The squared-exponential kernel here is ``exp(-(x-z)^2 / theta^2)``
(unit amplitude, no factor of two); an optional global amplitude ``a^2``
multiplies the first factor only so the Kronecker form is preserved.
"""

from __future__ import annotations

import abc
import json
import math
from dataclasses import dataclass
from functools import reduce

import numpy as np

from .grids import GridSpec
from .kron import KroneckerOperator, RectKroneckerOperator

__all__ = [
    "Kernel1D",
    "SquaredExponential",
    "Periodic",
    "DiscretePSD",
    "ProductKernel",
    "Hyperparams",
]


class Kernel1D(abc.ABC):
    """A positive semi-definite kernel on a single grid axis."""

    @abc.abstractmethod
    def __call__(self, a, b) -> np.ndarray:
        """Covariance matrix with entry (i, j) = k(a_i, b_j)."""

    @abc.abstractmethod
    def param_vector(self) -> np.ndarray:
        """Unconstrained (log-transformed where positive) parameter vector."""

    @abc.abstractmethod
    def with_param_vector(self, vec) -> "Kernel1D":
        """New kernel of the same kind with the given unconstrained parameters."""

    @property
    def n_params(self) -> int:
        return self.param_vector().size

    @abc.abstractmethod
    def to_json(self) -> dict:
        ...

    @staticmethod
    def from_json(obj: dict) -> "Kernel1D":
        kind = obj["type"]
        if kind == "squared_exponential":
            return SquaredExponential(obj["lengthscale"])
        if kind == "periodic":
            return Periodic(Kernel1D.from_json(obj["inner"]), obj["period"])
        if kind == "discrete_psd":
            return DiscretePSD(np.asarray(obj["tril"], dtype=np.float64))
        raise ValueError(f"unknown kernel type {kind!r}")


def _coords(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).ravel()
    if not np.all(np.isfinite(a)):
        raise ValueError("kernel inputs must be finite")
    return a


@dataclass(frozen=True)
class SquaredExponential(Kernel1D):
    """``k(x, z) = exp(-(x - z)^2 / lengthscale^2)``."""

    lengthscale: float

    def __post_init__(self):
        if not self.lengthscale > 0:
            raise ValueError("lengthscale must be positive")

    def __call__(self, a, b) -> np.ndarray:
        a, b = _coords(a), _coords(b)
        diff = a[:, None] - b[None, :]
        return np.exp(-(diff**2) / self.lengthscale**2)

    def param_vector(self) -> np.ndarray:
        return np.array([math.log(self.lengthscale)])

    def with_param_vector(self, vec) -> "SquaredExponential":
        (log_theta,) = np.asarray(vec, dtype=np.float64)
        return SquaredExponential(math.exp(log_theta))

    def to_json(self) -> dict:
        return {"type": "squared_exponential", "lengthscale": self.lengthscale}


@dataclass(frozen=True)
class Periodic(Kernel1D):
    """Periodic wrap of a squared-exponential through coordinate warping.

    Inputs are mapped to the circle, ``u(x) = (sin 2 pi x / P, cos 2 pi x / P)``,
    and the inner kernel is applied to the warped squared distance, which gives
    ``k(x, z) = exp(-(2 - 2 cos(2 pi (x - z) / P)) / theta^2)``.
    """

    inner: SquaredExponential
    period: float

    def __post_init__(self):
        if not self.period > 0:
            raise ValueError("period must be positive")
        if not isinstance(self.inner, SquaredExponential):
            raise TypeError("Periodic requires a SquaredExponential inner kernel")

    def __call__(self, a, b) -> np.ndarray:
        a, b = _coords(a), _coords(b)
        # Wrap the lag first so shifting either input by a whole period is exact.
        lag = np.mod(a[:, None] - b[None, :], self.period)
        d2 = 2.0 - 2.0 * np.cos(2.0 * np.pi * lag / self.period)
        return np.exp(-d2 / self.inner.lengthscale**2)

    def param_vector(self) -> np.ndarray:
        return np.array([math.log(self.inner.lengthscale), math.log(self.period)])

    def with_param_vector(self, vec) -> "Periodic":
        log_theta, log_p = np.asarray(vec, dtype=np.float64)
        return Periodic(SquaredExponential(math.exp(log_theta)), math.exp(log_p))

    def to_json(self) -> dict:
        return {"type": "periodic", "inner": self.inner.to_json(), "period": self.period}


@dataclass(frozen=True, eq=False)
class DiscretePSD(Kernel1D):
    """Free-form PSD covariance over a finite label set (multi-output axis).

    Parameterized by a lower-triangular factor with positive diagonal,
    ``B = L L^T``, so every parameter vector yields a valid PSD matrix. Axis
    coordinates are the integer labels ``0..n-1``.
    """

    tril: np.ndarray

    def __post_init__(self):
        t = np.ascontiguousarray(self.tril, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ValueError("tril must be square")
        if np.abs(np.triu(t, 1)).max(initial=0.0) != 0.0:
            raise ValueError("tril must be lower triangular")
        if np.any(np.diag(t) <= 0):
            raise ValueError("tril diagonal must be positive")
        object.__setattr__(self, "tril", t)

    @classmethod
    def from_matrix(cls, b) -> "DiscretePSD":
        return cls(np.linalg.cholesky(np.asarray(b, dtype=np.float64)))

    @property
    def n_labels(self) -> int:
        return self.tril.shape[0]

    def matrix(self) -> np.ndarray:
        return self.tril @ self.tril.T

    def _labels(self, a) -> np.ndarray:
        a = _coords(a)
        labels = np.rint(a).astype(int)
        if np.abs(a - labels).max(initial=0.0) > 0 or (
            labels.size and (labels.min() < 0 or labels.max() >= self.n_labels)
        ):
            raise ValueError(f"coordinates must be integer labels in [0, {self.n_labels})")
        return labels

    def __call__(self, a, b) -> np.ndarray:
        return self.matrix()[np.ix_(self._labels(a), self._labels(b))]

    def param_vector(self) -> np.ndarray:
        # Row-major lower-triangle entries; diagonal log-transformed.
        n = self.n_labels
        out = []
        for i in range(n):
            for j in range(i + 1):
                v = self.tril[i, j]
                out.append(math.log(v) if i == j else v)
        return np.array(out)

    def with_param_vector(self, vec) -> "DiscretePSD":
        vec = np.asarray(vec, dtype=np.float64)
        n = self.n_labels
        t = np.zeros((n, n))
        k = 0
        for i in range(n):
            for j in range(i + 1):
                t[i, j] = math.exp(vec[k]) if i == j else vec[k]
                k += 1
        return DiscretePSD(t)

    def to_json(self) -> dict:
        return {"type": "discrete_psd", "tril": self.tril.tolist()}


@dataclass(frozen=True, eq=False)
class ProductKernel:
    """Product of one kernel per grid axis, with optional global amplitude a^2."""

    kernels: tuple[Kernel1D, ...]
    amplitude: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(self.kernels))
        if len(self.kernels) < 1:
            raise ValueError("need at least one axis kernel")
        if self.amplitude is not None and not self.amplitude > 0:
            raise ValueError("amplitude must be positive")

    @property
    def ndim(self) -> int:
        return len(self.kernels)

    def _check_grid(self, grid: GridSpec) -> None:
        if grid.ndim != self.ndim:
            raise ValueError(f"kernel has {self.ndim} axes, grid has {grid.ndim}")

    def grid_covariance(self, grid: GridSpec) -> KroneckerOperator:
        """Kronecker covariance ``K = K_1 (x) ... (x) K_d`` on the full grid."""
        self._check_grid(grid)
        factors = [k(a, a) for k, a in zip(self.kernels, grid.axes)]
        if self.amplitude is not None:
            factors[0] = self.amplitude * factors[0]
        return KroneckerOperator(tuple(factors))

    def cross_covariance_point(self, grid: GridSpec, x_star) -> np.ndarray:
        """Length-M vector g with g_i = k(x_i, x_star)."""
        self._check_grid(grid)
        x_star = np.asarray(x_star, dtype=np.float64).ravel()
        if x_star.size != self.ndim:
            raise ValueError(f"test point has {x_star.size} coordinates, expected {self.ndim}")
        cols = [
            k(a, np.array([x]))[:, 0] for k, a, x in zip(self.kernels, grid.axes, x_star)
        ]
        g = reduce(np.multiply.outer, cols).ravel()
        return g if self.amplitude is None else self.amplitude * g

    def cross_covariance_grid(self, grid: GridSpec, test_grid: GridSpec) -> RectKroneckerOperator:
        """Cross-covariance ``G = G_1 (x) ... (x) G_d`` between grid and test grid."""
        self._check_grid(grid)
        self._check_grid(test_grid)
        factors = [k(a, b) for k, a, b in zip(self.kernels, grid.axes, test_grid.axes)]
        if self.amplitude is not None:
            factors[0] = self.amplitude * factors[0]
        return RectKroneckerOperator(tuple(factors))

    def point_variance(self, x_star) -> float:
        """Prior variance k(x_star, x_star)."""
        x_star = np.asarray(x_star, dtype=np.float64).ravel()
        v = 1.0 if self.amplitude is None else self.amplitude
        for k, x in zip(self.kernels, x_star):
            v *= k(np.array([x]), np.array([x]))[0, 0]
        return float(v)


@dataclass(frozen=True, eq=False)
class Hyperparams:
    """Kernel hyperparameters plus the global noise variance sigma^2.

    The packed unconstrained vector used by the optimizer and by serialization
    has a fixed layout: log-parameters of the continuous axis kernels in axis
    order, then ``log a^2`` when the amplitude is enabled, then
    ``log sigma^2``, then the factor entries of any DiscretePSD axes in axis
    order.
    """

    kernel: ProductKernel
    noise_variance: float

    def __post_init__(self):
        if self.noise_variance < 0:
            raise ValueError("noise variance must be non-negative")

    @property
    def sigma2(self) -> float:
        return self.noise_variance

    def _groups(self):
        continuous = [k for k in self.kernel.kernels if not isinstance(k, DiscretePSD)]
        discrete = [k for k in self.kernel.kernels if isinstance(k, DiscretePSD)]
        return continuous, discrete

    def to_vector(self) -> np.ndarray:
        if self.noise_variance == 0:
            raise ValueError("noise variance must be positive to pack for optimization")
        continuous, discrete = self._groups()
        parts = [k.param_vector() for k in continuous]
        if self.kernel.amplitude is not None:
            parts.append(np.array([math.log(self.kernel.amplitude)]))
        parts.append(np.array([math.log(self.noise_variance)]))
        parts.extend(k.param_vector() for k in discrete)
        return np.concatenate(parts)

    def with_vector(self, vec) -> "Hyperparams":
        vec = np.asarray(vec, dtype=np.float64).ravel()
        continuous, discrete = self._groups()
        expected = (
            sum(k.n_params for k in continuous)
            + (1 if self.kernel.amplitude is not None else 0)
            + 1
            + sum(k.n_params for k in discrete)
        )
        if vec.size != expected:
            raise ValueError(f"expected packed vector of length {expected}, got {vec.size}")

        pos = 0
        new_continuous = []
        for k in continuous:
            new_continuous.append(k.with_param_vector(vec[pos : pos + k.n_params]))
            pos += k.n_params
        amplitude = None
        if self.kernel.amplitude is not None:
            amplitude = math.exp(vec[pos])
            pos += 1
        noise = math.exp(vec[pos])
        pos += 1
        new_discrete = []
        for k in discrete:
            new_discrete.append(k.with_param_vector(vec[pos : pos + k.n_params]))
            pos += k.n_params

        it_c, it_d = iter(new_continuous), iter(new_discrete)
        kernels = tuple(
            next(it_d) if isinstance(k, DiscretePSD) else next(it_c)
            for k in self.kernel.kernels
        )
        return Hyperparams(ProductKernel(kernels, amplitude), noise)

    def to_json(self) -> str:
        obj = {f"axis{l}": k.to_json() for l, k in enumerate(self.kernel.kernels)}
        obj["amplitude"] = self.kernel.amplitude
        obj["noise_variance"] = self.noise_variance
        return json.dumps(obj, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Hyperparams":
        obj = json.loads(text)
        kernels = []
        l = 0
        while f"axis{l}" in obj:
            kernels.append(Kernel1D.from_json(obj[f"axis{l}"]))
            l += 1
        if not kernels:
            raise ValueError("no axis kernels in hyperparameter JSON")
        return cls(ProductKernel(tuple(kernels), obj.get("amplitude")), obj["noise_variance"])
