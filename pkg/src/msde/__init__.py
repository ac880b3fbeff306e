"""Backward Euler-Maruyama solvers for SDEs with maximal monotone drift.

The package covers problem/operator abstractions (:mod:`msde.core`),
Brownian path generation with exact multi-resolution coupling
(:mod:`msde.wiener`), the implicit scheme and its per-step inclusion
solver (:mod:`msde.stepper`), built-in drift models (:mod:`msde.models`),
a 1D p-Laplace finite element model (:mod:`msde.fem`), strong-error and
diagnostic experiments (:mod:`msde.experiments`), and a config-driven
command line front end (:mod:`msde.cli`).
"""

__version__ = "0.1.0"

from .core import (ConstantInitial, DiffusionMap, GateError, GateRegime,
                   GateResult, GaussianInitial, GrowthParams, InitialSampler,
                   LipschitzMap, MonotoneDrift, ProblemSpec, validate_step_size)
from .wiener import (BrownianPath, Grid, coarsen, interpolant_eval,
                     interpolation_error_mc, sample_path)
from .stepper import (StepSolverConfig, StepSolverError, Trajectory,
                      resolve_step, run_backward_euler, run_ensemble)
from .models import (AbsSubdifferential, MonotoneLinearDrift, PowerPotentialGrad,
                     ZeroDrift, get_drift, prox_abs, prox_power, resolvent_linear)
from .experiments import (DiagnosticsReport, RateTable, apriori_diagnostics,
                          eta_integral_error, fit_rate, monotone_gap, strong_error)

__all__ = [name for name in dir() if not name.startswith("_")]
