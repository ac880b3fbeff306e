"""1D P1 finite element semi-discretization of the stochastic p-Laplace flow.

The interval (0, L) is split into E uniform elements with homogeneous
Dirichlet boundary; coefficient vectors hold the d = E - 1 interior node
values.  The drift is the nonlinear stiffness vector

    S(x)_j = integral of |v_x'|^(p-2) v_x' phi_j'  over the domain,

which in 1D is exact element arithmetic because the gradient of a P1
function is constant per element.  S is the gradient of the convex energy
Phi_h(x) = (1/p) * sum_e h |c_e|^p, so the implicit step is a strongly
convex minimization solved by damped Newton.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import ConstantInitial, DiffusionMap, GrowthParams, MonotoneDrift, ProblemSpec
from .stepper import StepSolverError

__all__ = [
    "Mesh1D",
    "PLaplaceModel",
    "assemble_mass",
    "apply_stiffness",
    "energy",
    "plaplace_resolvent",
    "project_initial",
    "build_diffusion",
    "named_shape",
    "named_initial_data",
    "build_problem",
]

# 3-point Gauss rule on [0, 1]; exact through degree 5, more than enough
# for every P1 product integrated here
_GAUSS_NODES = np.array([0.5 - math.sqrt(3.0 / 5.0) / 2.0, 0.5,
                         0.5 + math.sqrt(3.0 / 5.0) / 2.0])
_GAUSS_WEIGHTS = np.array([5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0])


@dataclass(frozen=True)
class Mesh1D:
    """Uniform mesh on (0, L) with E elements and d = E - 1 interior nodes."""

    L: float
    E: int

    def __post_init__(self):
        if not self.L > 0.0:
            raise ValueError("domain length must be positive")
        if self.E < 2:
            raise ValueError("need at least 2 elements for one interior node")

    @property
    def h(self) -> float:
        return self.L / self.E

    @property
    def d(self) -> int:
        return self.E - 1

    def interior_nodes(self) -> np.ndarray:
        return self.h * np.arange(1, self.E)


def assemble_mass(mesh: Mesh1D) -> np.ndarray:
    """Mass matrix of the interior hat functions: tridiagonal with
    diagonal 2h/3 and off-diagonal h/6."""
    d, h = mesh.d, mesh.h
    M = np.zeros((d, d))
    idx = np.arange(d)
    M[idx, idx] = 2.0 * h / 3.0
    M[idx[:-1], idx[:-1] + 1] = h / 6.0
    M[idx[:-1] + 1, idx[:-1]] = h / 6.0
    return M


def _element_gradients(x: np.ndarray, mesh: Mesh1D) -> np.ndarray:
    """Constant gradient per element, boundary coefficients zero.

    x has shape (..., d); result (..., E)."""
    pad = np.zeros(x.shape[:-1] + (mesh.E + 1,))
    pad[..., 1:-1] = x
    return np.diff(pad, axis=-1) / mesh.h


def apply_stiffness(x: np.ndarray, model: "PLaplaceModel") -> np.ndarray:
    """Nonlinear stiffness vector S(x); batch-aware along the last axis."""
    c = _element_gradients(np.asarray(x, dtype=float), model.mesh)
    flux = np.abs(c) ** (model.p_lap - 2.0) * c
    return flux[..., :-1] - flux[..., 1:]


def energy(x: np.ndarray, model: "PLaplaceModel") -> np.ndarray:
    """Discrete energy Phi_h(x) = (1/p) sum_e h |c_e|^p."""
    c = _element_gradients(np.asarray(x, dtype=float), model.mesh)
    return np.sum(np.abs(c) ** model.p_lap, axis=-1) * model.mesh.h / model.p_lap


def plaplace_resolvent(w: np.ndarray, k: float, model: "PLaplaceModel") -> tuple:
    """Solve the implicit step x = argmin 0.5|x-w|^2 + k*Phi_h(x).

    Damped Newton with Armijo backtracking on the objective.  The Hessian
    I + k*H(x) is tridiagonal and positive definite for p >= 2, so each
    direction is a symmetric banded solve.  Returns (x, (w - x)/k); the
    second component matches S(x) up to the stationarity residual
    |x + k S(x) - w| <= tol*(1 + |w|).
    """
    if not k > 0.0:
        raise ValueError("k must be positive")
    w = np.asarray(w, dtype=float)
    if w.ndim > 1:
        out_x = np.empty_like(w)
        for i in range(w.shape[0]):
            out_x[i] = plaplace_resolvent(w[i], k, model)[0]
        return out_x, (w - out_x) / k

    mesh, p = model.mesh, model.p_lap
    h = mesh.h
    tol = model.newton_tol * (1.0 + np.linalg.norm(w))

    def objective(x):
        return 0.5 * float(np.sum((x - w) ** 2)) + k * float(energy(x, model))

    x = w.copy()
    fx = objective(x)
    for _ in range(model.newton_max_iters):
        grad = x - w + k * apply_stiffness(x, model)
        gnorm = np.linalg.norm(grad)
        if gnorm <= tol:
            return x, (w - x) / k
        c = _element_gradients(x, mesh)
        dpsi = (p - 1.0) * np.abs(c) ** (p - 2.0)
        ab = np.zeros((2, mesh.d))
        ab[1] = 1.0 + k * (dpsi[:-1] + dpsi[1:]) / h
        ab[0, 1:] = -k * dpsi[1:-1] / h
        delta = scipy.linalg.solveh_banded(ab, -grad)
        slope = float(grad @ delta)
        if -slope <= 1e-14 * (1.0 + abs(fx)):
            # predicted decrease below the rounding resolution of the
            # objective: Armijo is uninformative, take the pure Newton
            # step (quadratically convergent this close to the minimum)
            x = x + delta
            fx = objective(x)
            continue
        t = 1.0
        for _ in range(60):
            x_new = x + t * delta
            f_new = objective(x_new)
            if f_new <= fx + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            raise StepSolverError(
                f"line search failed in p-Laplace step (|grad| = {gnorm:.3e})")
        x, fx = x_new, f_new
    raise StepSolverError(
        f"Newton iteration cap reached in p-Laplace step (|grad| = {gnorm:.3e})")


def project_initial(u0_values, model: "PLaplaceModel") -> np.ndarray:
    """L2-orthogonal projection of a callable onto the interior hat basis.

    Solves M x0 = load with load_j = integral of u0 * phi_j, computed by
    the 3-point Gauss rule per element.
    """
    mesh = model.mesh
    h = mesh.h
    load = np.zeros(mesh.d)
    for e in range(1, mesh.E + 1):
        xi = (e - 1) * h + h * _GAUSS_NODES
        vals = np.asarray([float(u0_values(p)) for p in xi])
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"initial data not finite on element {e}")
        left = h * float(np.sum(_GAUSS_WEIGHTS * vals * (1.0 - _GAUSS_NODES)))
        right = h * float(np.sum(_GAUSS_WEIGHTS * vals * _GAUSS_NODES))
        if e - 2 >= 0 and e - 2 < mesh.d:
            load[e - 2] += left
        if e - 1 < mesh.d:
            load[e - 1] += right
    return scipy.linalg.cho_solve(model.mass_factor, load)


def named_shape(name: str, lipschitz: float, m: int = 1):
    """Scalar shape functions for the pointwise diffusion map.

    Each returns a vectorized callable u -> row in R^m whose Lipschitz
    constant in the Euclidean row norm equals ``lipschitz``.
    """
    row = np.ones(m) / math.sqrt(m)
    if name == "sin":
        return lambda u: lipschitz * np.sin(u)[..., None] * row
    if name == "identity":
        return lambda u: lipschitz * np.asarray(u)[..., None] * row
    raise KeyError(f"unknown shape function {name!r}; known: sin, identity")


def build_diffusion(model: "PLaplaceModel", psi=None, lipschitz: float = 0.0,
                    shape: str = "sin", m: int = 1) -> DiffusionMap:
    """Diffusion g(x) = F gtilde(x) with F a triangular factor of M.

    gtilde(x) is the mass-solve of the load vectors of the pointwise map
    psi applied to the P1 function v_x (Gauss quadrature per element).
    F is the upper Cholesky factor, F^T F = M, so |F v|^2 = <M v, v>
    exactly: every Frobenius-norm quantity the moment and error estimates
    consume (|g|, |g(x) - g(y)|) coincides with the symmetric-square-root
    convention while the factorization stays cheap and triangular.
    """
    if psi is None:
        if lipschitz == 0.0:
            return DiffusionMap.zero(model.d, m)
        psi = named_shape(shape, lipschitz, m)
    mesh = model.mesh
    h = mesh.h
    gauss = _GAUSS_NODES
    wts = _GAUSS_WEIGHTS

    def gtilde(x):
        # v_x at the Gauss points of every element: (..., E, 3)
        pad = np.zeros(x.shape[:-1] + (mesh.E + 1,))
        pad[..., 1:-1] = x
        v = pad[..., :-1, None] * (1.0 - gauss) + pad[..., 1:, None] * gauss
        psi_v = psi(v)  # (..., E, 3, m)
        left = h * np.einsum("q,...eqm->...em", wts * (1.0 - gauss), psi_v)
        right = h * np.einsum("q,...eqm->...em", wts * gauss, psi_v)
        load = np.zeros(x.shape[:-1] + (mesh.d, m))
        load += left[..., 1:, :]
        load += right[..., :-1, :]
        flat = load.reshape(-1, mesh.d, m)
        out = np.empty_like(flat)
        for i in range(flat.shape[0]):
            out[i] = scipy.linalg.cho_solve(model.mass_factor, flat[i])
        return out.reshape(load.shape)

    F = model.noise_factor

    def fn(x):
        x = np.asarray(x, dtype=float)
        gt = gtilde(x)
        return np.einsum("ij,...jm->...im", F, gt)

    constant = lipschitz * math.sqrt(float(np.linalg.eigvalsh(model.mass)[-1]))
    return DiffusionMap(fn, constant, model.d, m)


def named_initial_data(name: str, mesh: Mesh1D):
    if name == "sine":
        return lambda xi: math.sin(math.pi * xi / mesh.L)
    if name == "bump":
        return lambda xi: 4.0 * xi * (mesh.L - xi) / mesh.L**2
    if name == "zero":
        return lambda xi: 0.0
    raise KeyError(f"unknown initial data {name!r}; known: sine, bump, zero")


class PLaplaceModel(MonotoneDrift):
    """Semi-discrete p-Laplace drift as a monotone operator on R^d.

    The coercivity constant follows from <S(x), x> = p*Phi_h(x) =
    h^(1-p) ||Dx||_p^p combined with the norm equivalence on E entries
    and the smallest singular value 2 sin(pi/(2E)) of the difference map.
    """

    def __init__(self, mesh: Mesh1D, p_lap: float, newton_tol: float = 1e-10,
                 newton_max_iters: int = 100):
        if not p_lap >= 2.0:
            raise ValueError("p_lap must be >= 2")
        self.mesh = mesh
        self.p_lap = float(p_lap)
        self.d = mesh.d
        self.newton_tol = float(newton_tol)
        self.newton_max_iters = int(newton_max_iters)
        self.mass = assemble_mass(mesh)
        self.mass.flags.writeable = False
        # PD check and reusable factors; failure here signals a broken mesh.
        # noise_factor is the upper Cholesky factor F with F^T F = mass.
        self.mass_factor = scipy.linalg.cho_factor(self.mass)
        self.noise_factor = scipy.linalg.cholesky(self.mass, lower=False)
        self.noise_factor.flags.writeable = False
        E, h, p = mesh.E, mesh.h, self.p_lap
        sigma_min = 2.0 * math.sin(math.pi / (2.0 * E))
        mu = h ** (1.0 - p) * E ** (1.0 - p / 2.0) * sigma_min**p
        beta = 2.0**p * h ** (1.0 - p)
        self.growth = GrowthParams(p=p, mu=mu, lam=0.0, beta=beta)

    def potential(self, x):
        return energy(x, self)

    def resolvent(self, w, k):
        return plaplace_resolvent(w, k, self)[0]

    def selection(self, x):
        return apply_stiffness(np.asarray(x, dtype=float), self)


def build_problem(config: dict, T: float) -> ProblemSpec:
    """Assemble a p-Laplace :class:`ProblemSpec` from its config keys.

    Keys: L (domain length), elements, p (exponent), diffusion
    ("zero" or "scalar-lipschitz:<L>"), shape (named shape function),
    m (noise dimension), initial (named initial data).
    """
    mesh = Mesh1D(L=float(config.get("L", 1.0)), E=int(config["elements"]))
    model = PLaplaceModel(mesh, float(config["p"]),
                          newton_tol=float(config.get("newton_tol", 1e-10)))
    diff_spec = config.get("diffusion", "zero")
    m = int(config.get("m", 1))
    if diff_spec == "zero":
        g = DiffusionMap.zero(model.d, m)
    elif isinstance(diff_spec, str) and diff_spec.startswith("scalar-lipschitz:"):
        lip = float(diff_spec.split(":", 1)[1])
        g = build_diffusion(model, lipschitz=lip, shape=config.get("shape", "sin"), m=m)
    else:
        raise ValueError(f"unknown diffusion spec {diff_spec!r}")
    u0 = named_initial_data(config.get("initial", "sine"), mesh)
    x0 = project_initial(u0, model)
    from .core import LipschitzMap
    return ProblemSpec(d=model.d, m=m, drift=model, b=LipschitzMap.zero(model.d),
                       g=g, initial=ConstantInitial(x0), T=T)
