"""Built-in monotone drifts: sign subdifferential, power potentials, linear maps.

All resolvents are batch-transparent: they accept state arrays of shape
(d,) or (B, d) and act elementwise or along the last axis.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.linalg

from .core import GrowthParams, MonotoneDrift

__all__ = [
    "prox_abs",
    "prox_power",
    "resolvent_linear",
    "AbsSubdifferential",
    "PowerPotentialGrad",
    "MonotoneLinearDrift",
    "ZeroDrift",
    "get_drift",
    "available_models",
]


def prox_abs(w, k):
    """Resolvent of the subdifferential of |x| (soft thresholding).

    Returns (x, eta) with x = sign(w)*max(|w| - k, 0) and eta = (w - x)/k,
    the element of the sign set realized by the implicit step.  eta always
    lies in [-1, 1]; at the kink x = 0 it is forced by the step algebra.
    """
    if not k > 0.0:
        raise ValueError("k must be positive")
    w = np.asarray(w, dtype=float)
    x = np.sign(w) * np.maximum(np.abs(w) - k, 0.0)
    return x, (w - x) / k


def prox_power(w, k, p_pot):
    """Resolvent of the gradient of |x|**p_pot for p_pot > 1.

    Solves x + k*p_pot*|x|**(p_pot-2)*x = w.  The equation is reduced to
    the half-line y + k*p_pot*y**(p_pot-1) = |w|, y in [0, |w|], and the
    solution reflected to sign(w).  A Newton iteration started at the
    upper bracket end decreases monotonically onto the root for any
    p_pot > 1 (the residual is convex for p_pot >= 2 and concave for
    p_pot < 2, increasing in both cases); bisection takes over whenever a
    step would leave the bracket.  Relative tolerance 1e-14.
    """
    if not k > 0.0:
        raise ValueError("k must be positive")
    if not p_pot > 1.0:
        raise ValueError("p_pot must be > 1")
    w = np.asarray(w, dtype=float)
    scalar = w.ndim == 0
    w = np.atleast_1d(w)
    s = np.abs(w)
    a = k * p_pot
    q = p_pot - 1.0

    # bisection-safeguarded Newton on the bracket [0, s]: the bracket ends
    # track the residual sign, and any Newton step that leaves the open
    # bracket is replaced by the midpoint
    lo = np.zeros_like(s)
    hi = s.copy()
    y = s.copy()
    with np.errstate(divide="ignore"):
        for _ in range(200):
            res = y + a * y**q - s
            above = res > 0.0
            hi = np.where(above, y, hi)
            lo = np.where(above, lo, y)
            deriv = 1.0 + (a * q) * y ** (q - 1.0)
            y_new = y - res / deriv
            outside = (y_new < lo) | (y_new > hi)
            y_new = np.where(outside, 0.5 * (lo + hi), y_new)
            done = np.abs(y_new - y) <= 1e-14 * (1.0 + y_new)
            y = y_new
            if np.all(done):
                break

    x = np.sign(w) * y
    eta = (w - x) / k
    if scalar:
        return float(x[0]), float(eta[0])
    return x, eta


def resolvent_linear(w, k, A):
    """Resolvent of the monotone linear drift x -> A x, A positive semi-definite.

    Solves (I + k A) x = w by direct factorization and returns
    (x, eta = A x).  For PSD A the system matrix is symmetric positive
    definite, so a failed factorization signals an invalid A.
    """
    if not k > 0.0:
        raise ValueError("k must be positive")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    w = np.asarray(w, dtype=float)
    d = A.shape[0]
    system = np.eye(d) + k * A
    flat = np.atleast_2d(w)
    x = scipy.linalg.solve(system, flat.T, assume_a="pos").T
    eta = (x @ A.T).reshape(w.shape)
    return x.reshape(w.shape), eta


class AbsSubdifferential(MonotoneDrift):
    """Set-valued sign drift in one dimension: the subdifferential of |x|.

    Coercivity holds with exponent 1 (selections satisfy <eta, x> = |x|)
    and all selections are bounded by one.
    """

    growth = GrowthParams(p=1.0, mu=1.0, lam=0.0, beta=1.0)
    potential = staticmethod(np.abs)

    def resolvent(self, w, k):
        return prox_abs(w, k)[0]

    def selection(self, x):
        # minimal-norm element: 0 at the kink
        return np.sign(np.asarray(x, dtype=float))


class PowerPotentialGrad(MonotoneDrift):
    """Gradient drift of the even power potential |x|**p_pot, one dimension.

    For p_pot in (1, 2) the drift is Hoelder continuous with exponent
    p_pot - 1 but not locally Lipschitz at the origin.
    """

    def __init__(self, p_pot: float):
        if not p_pot > 1.0:
            raise ValueError("p_pot must be > 1")
        self.p_pot = float(p_pot)
        self.growth = GrowthParams(p=self.p_pot, mu=self.p_pot, lam=0.0, beta=self.p_pot)
        #: Hoelder data of the drift itself, recorded for reporting only
        self.holder_exponent = min(self.p_pot - 1.0, 1.0)
        self.holder_constant = 2.0 * self.p_pot

    def potential(self, x):
        return np.abs(x) ** self.p_pot

    def resolvent(self, w, k):
        return prox_power(w, k, self.p_pot)[0]

    def selection(self, x):
        x = np.asarray(x, dtype=float)
        return self.p_pot * np.sign(x) * np.abs(x) ** (self.p_pot - 1.0)


class MonotoneLinearDrift(MonotoneDrift):
    """Linear drift x -> A x for a positive semi-definite matrix A."""

    def __init__(self, A, growth: GrowthParams | None = None):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        if not np.allclose(A, A.T, atol=1e-12):
            raise ValueError("A must be symmetric")
        eigmin = float(np.linalg.eigvalsh(A)[0]) if A.size else 0.0
        if eigmin < -1e-12:
            raise ValueError("A must be positive semi-definite")
        self.A = A
        self.A.flags.writeable = False
        self.d = A.shape[0]
        norm2 = float(np.linalg.norm(A, 2))
        if growth is not None:
            self.growth = growth
        elif eigmin > 0.0:
            self.growth = GrowthParams(p=2.0, mu=eigmin, lam=0.0, beta=norm2)
        else:
            # singular PSD case: the coercivity bound only holds with an
            # infinite additive offset, declared as such
            self.growth = GrowthParams(p=2.0, mu=1.0, lam=math.inf, beta=norm2)
        self._scalar = self.d == 1
        self._a = float(A[0, 0]) if self._scalar else None
        self._factor_cache: dict[float, tuple] = {}

    def potential(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(x * (x @ self.A.T), axis=-1)

    def resolvent(self, w, k):
        w = np.asarray(w, dtype=float)
        if self._scalar:
            return w / (1.0 + k * self._a)
        cf = self._factor_cache.get(k)
        if cf is None:
            cf = scipy.linalg.cho_factor(np.eye(self.d) + k * self.A)
            self._factor_cache[k] = cf
        flat = np.atleast_2d(w)
        x = scipy.linalg.cho_solve(cf, flat.T).T
        return x.reshape(w.shape)

    def selection(self, x):
        x = np.asarray(x, dtype=float)
        if self._scalar:
            return self._a * x
        return x @ self.A.T


class ZeroDrift(MonotoneDrift):
    """The trivial drift f = 0; its resolvent is the identity.

    The coercivity declaration needs an infinite offset (no mu > 0 can
    bound 0 from below by mu*|x|**p globally), recorded honestly.
    """

    growth = GrowthParams(p=2.0, mu=1.0, lam=math.inf, beta=0.0)

    def __init__(self, d: int = 1):
        self.d = int(d)

    def potential(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1]) if x.ndim > 1 else 0.0

    def resolvent(self, w, k):
        return np.asarray(w, dtype=float)

    def selection(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))


def get_drift(name: str, **params) -> MonotoneDrift:
    """Build a registered drift from its string name.

    Recognized names: "abs", "power:<p>" (or "power" with p_pot=...),
    "linear" (a=scalar with dim, or matrix=...), "zero" (dim optional).
    The p-Laplace drift is built by :mod:`msde.fem` from its own keys.
    """
    if name == "abs":
        return AbsSubdifferential()
    if name.startswith("power"):
        if ":" in name:
            p_pot = float(name.split(":", 1)[1])
        else:
            p_pot = float(params["p_pot"])
        return PowerPotentialGrad(p_pot)
    if name == "linear":
        if "matrix" in params:
            return MonotoneLinearDrift(np.asarray(params["matrix"], dtype=float))
        a = float(params.get("a", 1.0))
        dim = int(params.get("dim", 1))
        return MonotoneLinearDrift(a * np.eye(dim))
    if name == "zero":
        return ZeroDrift(int(params.get("dim", 1)))
    raise KeyError(f"unknown model {name!r}; known: {available_models()}")


def available_models() -> list[str]:
    return ["abs", "power:<p>", "linear", "zero", "plaplace"]
