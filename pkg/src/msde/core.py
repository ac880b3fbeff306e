"""Problem abstractions shared by all solvers and experiments.

A problem is the differential inclusion

    dX(t) + f(X(t)) dt  in  b(X(t)) dt + g(X(t)) dW(t),    X(0) = X0,

where f is a maximal monotone operator on R^d exposed only through its
resolvent, b is a globally Lipschitz vector field, and g is a globally
Lipschitz diffusion coefficient into R^{d x m}.  All operator types are
immutable after construction and their evaluation methods are pure, so
instances can be shared freely across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

__all__ = [
    "GrowthParams",
    "MonotoneDrift",
    "LipschitzMap",
    "DiffusionMap",
    "InitialSampler",
    "ConstantInitial",
    "GaussianInitial",
    "ProblemSpec",
    "GateRegime",
    "GateResult",
    "GateError",
    "validate_step_size",
]


@dataclass(frozen=True)
class GrowthParams:
    """Coercivity and growth constants declared for a monotone drift.

    The declared bounds are ``<f_v, v> >= mu*|v|**p - lam`` and
    ``|f_v| <= beta*(1 + |v|**(p-1))`` for every selection f_v of f(v).
    They are author-supplied metadata, spot-validated by randomized tests
    rather than proven.
    """

    p: float
    mu: float
    lam: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.p < 1.0:
            raise ValueError(f"coercivity exponent p must be >= 1, got {self.p}")
        if not self.mu > 0.0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.lam < 0.0 or self.beta < 0.0:
            raise ValueError("lam and beta must be nonnegative")

    @property
    def q(self) -> float:
        """Conjugate exponent p/(p-1); infinite when p == 1."""
        if self.p == 1.0:
            return math.inf
        return self.p / (self.p - 1.0)


class MonotoneDrift:
    """Interface for a maximal monotone drift f, exposed via its resolvent.

    Subclasses implement :meth:`resolvent`, the single-valued map
    ``w -> x`` solving ``x + k f(x) ∋ w`` for ``k > 0``.  Maximal
    monotonicity makes this map nonexpansive, which is what every solver
    in this package relies on.  f itself is never evaluated as a set.
    """

    #: declared coercivity/growth metadata
    growth: GrowthParams

    def resolvent(self, w: np.ndarray, k: float) -> np.ndarray:
        """Solve ``x + k f(x) ∋ w``.  Accepts shape (d,) or batched (B, d)."""
        raise NotImplementedError

    def selection(self, x: np.ndarray) -> np.ndarray:
        """A measurable selection of f(x), used for the initial eta^0.

        Convention: the minimal-norm element where f(x) is a set.
        """
        raise NotImplementedError

    def contains(self, x: np.ndarray) -> bool:
        """Domain predicate; defaults to the whole space."""
        return True

    def implied_selection(self, w: np.ndarray, x: np.ndarray, k: float) -> np.ndarray:
        """The element eta = (w - x)/k of f(x) realized by a resolvent solve."""
        return (w - x) / k


class LipschitzMap:
    """Globally Lipschitz vector field R^d -> R^d with a declared constant."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], constant: float, dim: int):
        if constant < 0.0:
            raise ValueError("Lipschitz constant must be nonnegative")
        self._fn = fn
        self.constant = float(constant)
        self.dim = int(dim)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self._fn(x)

    @property
    def is_zero(self) -> bool:
        return self.constant == 0.0 and getattr(self, "_zero", False)

    @classmethod
    def zero(cls, dim: int) -> "LipschitzMap":
        m = cls(lambda x: np.zeros_like(x), 0.0, dim)
        m._zero = True
        return m

    @classmethod
    def linear(cls, slope: float, dim: int) -> "LipschitzMap":
        """b(x) = slope * x with constant |slope|."""
        return cls(lambda x: slope * x, abs(slope), dim)


class DiffusionMap:
    """Diffusion coefficient R^d -> R^{d x m}, Lipschitz in Frobenius norm."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], constant: float,
                 dim: int, noise_dim: int):
        if constant < 0.0:
            raise ValueError("Lipschitz constant must be nonnegative")
        self._fn = fn
        self.constant = float(constant)
        self.dim = int(dim)
        self.noise_dim = int(noise_dim)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Evaluate g(x); shape (d, m) for input (d,), (B, d, m) for (B, d)."""
        return self._fn(x)

    def apply_increment(self, x: np.ndarray, dw: np.ndarray) -> np.ndarray:
        """g(x) @ dw, batch-aware: x (B, d), dw (B, m) -> (B, d)."""
        gx = self(x)
        if gx.ndim == 2:
            return gx @ dw
        return np.einsum("bij,bj->bi", gx, dw)

    @property
    def growth_constant(self) -> float:
        """Constant in the linear growth bound |g(x)| <= C (1 + |x|);
        the Lipschitz constant enlarged by the value at the origin."""
        g0 = float(np.linalg.norm(self(np.zeros(self.dim))))
        return max(self.constant, g0)

    @classmethod
    def zero(cls, dim: int, noise_dim: int) -> "DiffusionMap":
        def fn(x):
            if x.ndim == 1:
                return np.zeros((dim, noise_dim))
            return np.zeros(x.shape[:-1] + (dim, noise_dim))
        return cls(fn, 0.0, dim, noise_dim)

    @classmethod
    def constant(cls, g0: np.ndarray) -> "DiffusionMap":
        """State-independent coefficient (additive noise)."""
        g0 = np.atleast_2d(np.asarray(g0, dtype=float))
        g0.flags.writeable = False
        d, m = g0.shape

        def fn(x):
            if x.ndim == 1:
                return g0
            return np.broadcast_to(g0, x.shape[:-1] + (d, m))

        obj = cls(fn, 0.0, d, m)
        obj.matrix = g0
        # additive noise: g(x) dW reduces to a fixed matrix-vector product
        obj.apply_increment = lambda x, dw: dw @ g0.T  # type: ignore[method-assign]
        return obj


class InitialSampler:
    """Produces initial states given a dedicated RNG stream."""

    dim: int

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class ConstantInitial(InitialSampler):
    def __init__(self, x0):
        self.x0 = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
        self.x0.flags.writeable = False
        self.dim = self.x0.shape[0]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.x0


class GaussianInitial(InitialSampler):
    def __init__(self, mean, std):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.std = float(std)
        self.dim = self.mean.shape[0]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(self.dim)


@dataclass(frozen=True)
class ProblemSpec:
    """A complete problem instance: operators, initial law, and horizon."""

    d: int
    m: int
    drift: MonotoneDrift
    b: LipschitzMap
    g: DiffusionMap
    initial: InitialSampler
    T: float

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ValueError("dimensions must be positive")
        if not self.T > 0.0:
            raise ValueError("horizon T must be positive")
        if self.b.dim != self.d:
            raise ValueError(f"b has dim {self.b.dim}, expected {self.d}")
        if self.g.dim != self.d or self.g.noise_dim != self.m:
            raise ValueError(
                f"g maps to {self.g.dim}x{self.g.noise_dim}, expected {self.d}x{self.m}")
        if self.initial.dim != self.d:
            raise ValueError(f"initial sampler has dim {self.initial.dim}, expected {self.d}")
        probe = np.zeros(self.d)
        if self.b(probe).shape != (self.d,):
            raise ValueError("b output has wrong shape")
        if self.g(probe).shape != (self.d, self.m):
            raise ValueError("g output has wrong shape")


class GateRegime(Enum):
    """Step-size smallness regimes and their multiplicative factors.

    The scheme is solvable when L_b*k < 1, the moment bounds need
    5*L_b*k < 1, and the convergence estimate needs 8*L_b*k < 1.
    No other factor is accepted.
    """

    SOLVABILITY = 1
    APRIORI = 5
    CONVERGENCE = 8

    @property
    def factor(self) -> int:
        return self.value


class GateError(RuntimeError):
    """A step-size gate was violated; simulation must not proceed."""

    def __init__(self, result: "GateResult"):
        self.result = result
        super().__init__(
            f"{result.regime.name} gate violated: requires "
            f"{result.regime.factor}*L_b*k < 1, got product "
            f"{result.product:.6g} (L_b={result.lipschitz_b:.6g}, k={result.k:.6g})"
        )


@dataclass(frozen=True)
class GateResult:
    """Outcome of a step-size gate check: pass/fail plus the margin."""

    regime: GateRegime
    k: float
    lipschitz_b: float
    product: float
    slack: float
    passed: bool

    def raise_if_failed(self) -> "GateResult":
        if not self.passed:
            raise GateError(self)
        return self


def validate_step_size(spec: ProblemSpec, k: float, regime: GateRegime) -> GateResult:
    """Check factor*L_b*k < 1 for the given regime.

    Returns a :class:`GateResult` carrying the slack 1 - factor*L_b*k.
    Never raises on failure; callers that must not proceed use
    :meth:`GateResult.raise_if_failed`.
    """
    if not k > 0.0:
        raise ValueError(f"step size must be positive, got {k}")
    lb = spec.b.constant
    product = regime.factor * lb * k
    slack = 1.0 - product
    return GateResult(regime=regime, k=k, lipschitz_b=lb, product=product,
                      slack=slack, passed=product < 1.0)
