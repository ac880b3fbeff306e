"""Backward Euler-Maruyama recursion and per-step inclusion solver.

One step solves the nonlinear inclusion

    x + k eta - k b(x) = w,    eta in f(x),

by the splitting x_{j+1} = R_k(w + k b(x_j)) where R_k is the resolvent
of k f.  The composition of the nonexpansive resolvent with k*b contracts
with ratio k*L_b, so the iteration converges geometrically whenever the
solvability gate L_b*k < 1 holds, and collapses to a single resolvent
call when b vanishes.  The realized selection eta = (w + k b(x) - x)/k
makes the scheme identity hold exactly by construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .core import (GateRegime, LipschitzMap, MonotoneDrift, ProblemSpec,
                   validate_step_size)
from .wiener import BrownianPath, Grid

__all__ = [
    "StepSolverConfig",
    "StepSolverError",
    "Trajectory",
    "InterpolantValues",
    "resolve_step",
    "run_backward_euler",
    "run_ensemble",
    "eval_interpolants",
]


@dataclass(frozen=True)
class StepSolverConfig:
    """Tolerances and iteration caps for the per-step solver.

    ``outer_tol`` is applied to successive iterates, scaled by (1 + |w|)
    so the stopping rule behaves uniformly across state magnitudes.
    ``inner`` carries model-specific tolerance overrides, consumed when
    models are constructed (resolvents own their internal solves).
    """

    outer_max_iters: int = 200
    outer_tol: float = 1e-12
    inner: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.outer_max_iters < 1:
            raise ValueError("outer_max_iters must be positive")
        if not self.outer_tol > 0.0:
            raise ValueError("outer_tol must be positive")


class StepSolverError(RuntimeError):
    """Per-step solve failed; carries the offending step/path when known."""

    def __init__(self, message, step: int | None = None, path_index=None):
        if step is not None:
            message = f"step {step}: {message}"
        if path_index is not None:
            message = f"path {path_index}: {message}"
        super().__init__(message)
        self.step = step
        self.path_index = path_index


def resolve_step(w, k, drift: MonotoneDrift, b: LipschitzMap | None,
                 cfg: StepSolverConfig, x_init=None):
    """Solve one implicit step; returns (x, eta).

    ``w`` may be a single state (d,) or a batch (B, d); the solve is
    performed for all rows simultaneously.  ``x_init`` optionally replaces
    the default starting iterate R_k(w) (used by uniqueness probes).

    Raises :class:`StepSolverError` on gate violation or if the fixed
    point iteration does not converge within ``outer_max_iters``.
    """
    w = np.asarray(w, dtype=float)
    if b is None or b.is_zero:
        x = drift.resolvent(w, k)
        return x, (w - x) / k
    if not b.constant * k < 1.0:
        raise StepSolverError(
            f"solvability gate violated: L_b*k = {b.constant * k:.6g} >= 1")

    scale = 1.0 + np.linalg.norm(w, axis=-1, keepdims=True)
    x = drift.resolvent(w, k) if x_init is None else np.asarray(x_init, dtype=float)
    last = np.inf
    for _ in range(cfg.outer_max_iters):
        x_new = drift.resolvent(w + k * b(x), k)
        diff = np.linalg.norm(x_new - x, axis=-1, keepdims=True)
        x = x_new
        last = float(np.max(diff / scale))
        if np.all(diff <= cfg.outer_tol * scale):
            eta = (w + k * b(x) - x) / k
            return x, eta
    raise StepSolverError(
        f"fixed point iteration did not converge in {cfg.outer_max_iters} "
        f"iterations (last relative update {last:.3e})")


class InterpolantValues(NamedTuple):
    """Interpolant evaluations at one time: linear/right/left state, linear
    selection, and the accumulated piecewise linear noise term."""

    state_lin: np.ndarray
    state_right: np.ndarray
    state_left: np.ndarray
    selection_lin: np.ndarray
    noise_lin: np.ndarray


class Trajectory:
    """States X^n and selections eta^n of one scheme run, plus interpolants.

    ``noise_terms[n-1]`` caches g(X^{n-1}) dW^n for step n.  The scheme
    identity X^n + k eta^n = X^{n-1} + k b(X^n) + noise_terms[n-1] holds
    to solver tolerance for every step (exactly, by construction of eta,
    up to float rounding).
    """

    def __init__(self, grid: Grid, states: np.ndarray, selections: np.ndarray,
                 noise_terms: np.ndarray):
        self.grid = grid
        self.states = np.asarray(states, dtype=float)
        self.selections = np.asarray(selections, dtype=float)
        self.noise_terms = np.asarray(noise_terms, dtype=float)
        if self.states.ndim != 2 or self.states.shape[0] != grid.N + 1:
            raise ValueError("states must have shape (N+1, d)")
        if self.selections.shape != self.states.shape:
            raise ValueError("selections must match states")
        if self.noise_terms.shape != (grid.N, self.states.shape[1]):
            raise ValueError("noise_terms must have shape (N, d)")
        # prefix sums of the noise terms, used by the noise interpolant
        self._noise_prefix = np.zeros_like(self.states)
        np.cumsum(self.noise_terms, axis=0, out=self._noise_prefix[1:])
        for arr in (self.states, self.selections, self.noise_terms, self._noise_prefix):
            arr.flags.writeable = False

    @property
    def d(self) -> int:
        return self.states.shape[1]

    def eval_interpolants(self, t: float) -> InterpolantValues:
        return eval_interpolants(self, t)

    def to_csv(self, path) -> None:
        """Write columns t, X_1..X_d, eta_1..eta_d, one row per grid point."""
        d = self.d
        times = self.grid.times()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"X_{i+1}" for i in range(d)]
                            + [f"eta_{i+1}" for i in range(d)])
            for n in range(self.grid.N + 1):
                row = [repr(float(times[n]))]
                row += [repr(float(v)) for v in self.states[n]]
                row += [repr(float(v)) for v in self.selections[n]]
                writer.writerow(row)


def eval_interpolants(traj: Trajectory, t: float) -> InterpolantValues:
    """Evaluate the grid interpolants of a trajectory at time t.

    On (t_{n-1}, t_n]: the linear state interpolant, the right/left
    piecewise constant interpolants, the linear selection interpolant,
    and the noise interpolant

        N(t) = (t - t_{n-1})/k * g(X^{n-1}) dW^n + sum_{i<n} g(X^{i-1}) dW^i.

    At t = 0 all values reduce to the index-0 quantities and N(0) = 0.
    """
    n = traj.grid.locate(t)
    if n == 0:
        zero = np.zeros(traj.d)
        return InterpolantValues(traj.states[0], traj.states[0], traj.states[0],
                                 traj.selections[0], zero)
    k = traj.grid.k
    theta = (t - (n - 1) * k) / k
    lerp = lambda arr: (1.0 - theta) * arr[n - 1] + theta * arr[n]
    noise = traj._noise_prefix[n - 1] + theta * traj.noise_terms[n - 1]
    return InterpolantValues(lerp(traj.states), traj.states[n], traj.states[n - 1],
                             lerp(traj.selections), noise)


def run_backward_euler(spec: ProblemSpec, path: BrownianPath, cfg: StepSolverConfig,
                       x0, eta0) -> Trajectory:
    """Run the implicit recursion along one Brownian path.

    For n = 1..N:  w = X^{n-1} + g(X^{n-1}) dW^n, then (X^n, eta^n) solves
    the implicit step.  The diffusion is evaluated at the previous state
    (explicit in the noise, implicit in the drift).  eta0 must be a
    selection of f(x0) supplied by the caller.
    """
    validate_step_size(spec, path.grid.k, GateRegime.SOLVABILITY).raise_if_failed()
    if path.m != spec.m:
        raise ValueError(f"path has m={path.m}, problem expects {spec.m}")
    if abs(path.grid.T - spec.T) > 1e-12 * max(1.0, spec.T):
        raise ValueError("path grid horizon does not match the problem")
    x0 = np.asarray(x0, dtype=float)
    if not spec.drift.contains(x0):
        raise ValueError("x0 is outside the drift domain")

    N, d, k = path.grid.N, spec.d, path.grid.k
    states = np.empty((N + 1, d))
    selections = np.empty((N + 1, d))
    noise_terms = np.empty((N, d))
    states[0] = x0
    selections[0] = np.asarray(eta0, dtype=float)
    for n in range(1, N + 1):
        gdw = spec.g(states[n - 1]) @ path.increments[n - 1]
        noise_terms[n - 1] = gdw
        w = states[n - 1] + gdw
        try:
            states[n], selections[n] = resolve_step(w, k, spec.drift, spec.b, cfg)
        except StepSolverError as err:
            raise StepSolverError(str(err), step=n, path_index=path.path_index) from err
    return Trajectory(path.grid, states, selections, noise_terms)


def run_ensemble(spec: ProblemSpec, grid: Grid, knots: np.ndarray, x0: np.ndarray,
                 cfg: StepSolverConfig, with_selections: bool = True):
    """Run the recursion for a whole batch of paths at once.

    ``knots`` has shape (B, N+1, m) and ``x0`` shape (B, d).  Returns
    (states, selections) with shapes (B, N+1, d); selections is None when
    ``with_selections`` is false.  Row i is the same recursion as
    :func:`run_backward_euler` on path i (the per-step solves act
    elementwise along the batch axis).
    """
    validate_step_size(spec, grid.k, GateRegime.SOLVABILITY).raise_if_failed()
    B = knots.shape[0]
    N, d, k = grid.N, spec.d, grid.k
    states = np.empty((B, N + 1, d))
    states[:, 0, :] = x0
    selections = None
    if with_selections:
        selections = np.empty((B, N + 1, d))
        selections[:, 0, :] = spec.drift.selection(x0)
    increments = np.diff(knots, axis=1)
    x = states[:, 0, :]
    for n in range(1, N + 1):
        w = x + spec.g.apply_increment(x, increments[:, n - 1, :])
        try:
            x, eta = resolve_step(w, k, spec.drift, spec.b, cfg)
        except StepSolverError as err:
            raise StepSolverError(str(err), step=n) from err
        states[:, n, :] = x
        if with_selections:
            selections[:, n, :] = eta
    return states, selections
