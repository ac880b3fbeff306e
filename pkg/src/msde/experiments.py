"""Strong-error rate estimation, a priori diagnostics, and monotone-gap probes.

Error estimation is by self-convergence against a fine-grid reference run
of the same scheme on the same Brownian path: one path is sampled at the
reference step and coarsened exactly onto every coarser level, so all
trajectories of one path index share their noise bit-exactly.  The exact
solution is never computed; the measured slope estimates the scheme's
strong order, which the convergence theory bounds from below.

The error functional per level is

    max over comparison times t of  sqrt( E |X_ref(t) - X_lin(t)|^2 ),

the maximum over time of the per-time root mean square, with X_lin the
piecewise linear interpolant of the coarse trajectory.  By default the
comparison times are all reference grid points ("fine"), which probes the
interpolant between coarse knots and is the quantity the convergence
estimates control; "knots" restricts to the coarse grid points, where the
coupling is exact and trivial cases vanish identically.

Per-path seeds are pinned, per-path results are stored by path index, and
reductions run in fixed order with compensated (Kahan) summation, so the
numbers do not depend on scheduling or thread count.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import GateRegime, ProblemSpec, validate_step_size
from .stepper import StepSolverConfig, run_ensemble
from .wiener import Grid, initial_rng, sample_knots_batch

__all__ = [
    "RateRow",
    "RateFit",
    "RateTable",
    "DiagnosticsRow",
    "DiagnosticsReport",
    "GapEstimate",
    "strong_error",
    "eta_integral_error",
    "fit_rate",
    "apriori_diagnostics",
    "monotone_gap",
    "write_rate_csv",
    "write_diagnostics_csv",
]

_BATCH = 1024

# seam for harness self-tests that substitute synthetic trajectories
_run_ensemble = run_ensemble


class _Kahan:
    """Compensated accumulator; summation order independent of scheduling
    because callers feed batches in fixed index order."""

    def __init__(self, shape):
        self.value = np.zeros(shape)
        self._comp = np.zeros(shape)

    def add(self, arr):
        y = np.asarray(arr) - self._comp
        t = self.value + y
        self._comp = (t - self.value) - y
        self.value = t


@dataclass(frozen=True)
class RateRow:
    k: float
    rms_error: float
    mc_standard_error: float
    paths: int


@dataclass(frozen=True)
class RateFit:
    slope: float
    slope_se: float
    intercept: float
    n_used: int
    excluded_ks: tuple = ()


@dataclass
class RateTable:
    """Step sizes versus measured RMS errors, with the log-log fit."""

    rows: list
    k_ref: float
    fit: RateFit | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ks = [r.k for r in self.rows]
        if any(k2 >= k1 for k1, k2 in zip(ks, ks[1:])):
            raise ValueError("k levels must be strictly decreasing")
        for k in ks:
            ratio = k / self.k_ref
            if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
                raise ValueError(f"k={k} is not an integer multiple of k_ref={self.k_ref}")


def fit_rate(table: RateTable) -> RateFit:
    """Ordinary least squares of log2(rms_error) on log2(k).

    Rows with exactly zero error (exact-match levels) are excluded with a
    warning; the slope standard error comes from the fit residuals.
    """
    if len(table.rows) < 3:
        raise ValueError("need at least 3 levels to fit a rate")
    used = [r for r in table.rows if r.rms_error > 0.0]
    excluded = tuple(r.k for r in table.rows if r.rms_error == 0.0)
    if excluded:
        warnings.warn(
            f"levels {excluded} have exactly zero error (exact match); "
            "excluded from the log-log regression")
    if len(used) < 3:
        raise ValueError("fewer than 3 levels with nonzero error; cannot fit")
    x = np.log2([r.k for r in used])
    y = np.log2([r.rms_error for r in used])
    xbar, ybar = x.mean(), y.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    slope = float(np.sum((x - xbar) * (y - ybar)) / sxx)
    intercept = float(ybar - slope * xbar)
    resid = y - (intercept + slope * x)
    dof = len(used) - 2
    s2 = float(np.sum(resid**2) / dof) if dof > 0 else 0.0
    return RateFit(slope=slope, slope_se=float(np.sqrt(s2 / sxx)),
                   intercept=intercept, n_used=len(used), excluded_ks=excluded)


def _level_factors(k_levels, k_ref, T):
    factors = []
    n_ref = round(T / k_ref)
    if abs(T / n_ref - k_ref) > 1e-9 * k_ref:
        raise ValueError(f"k_ref={k_ref} does not divide the horizon T={T}")
    for k in k_levels:
        f = k / k_ref
        if abs(f - round(f)) > 1e-9 or round(f) < 1:
            raise ValueError(f"k={k} is not an integer multiple of k_ref={k_ref}")
        factors.append(round(f))
    return n_ref, factors


def _batches(paths, batch):
    return [range(lo, min(lo + batch, paths)) for lo in range(0, paths, batch)]


def _initial_batch(spec, seed, indices):
    out = np.empty((len(indices), spec.d))
    for row, i in enumerate(indices):
        out[row] = spec.initial.sample(initial_rng(seed, int(i)))
    return out


def _map_batches(worker, jobs, threads):
    if threads <= 1:
        return [worker(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, jobs))


def _sq_diff(a, b):
    return np.einsum("...d,...d->...", a - b, a - b)


def _fine_sq_diff(ref_states, c_states, factor):
    """Squared deviation between the reference states and the piecewise
    linear interpolant of the coarse states, at every reference grid
    point; shapes (B, Nref+1, d) and (B, Nc+1, d) -> (B, Nref+1).

    Works stride-by-stride so no (B, Nref, d) interpolant array is ever
    materialized."""
    B, nref_p1, d = ref_states.shape
    nc = c_states.shape[1] - 1
    sq = np.empty((B, nref_p1))
    for r in range(factor):
        theta = r / factor
        lin = (1.0 - theta) * c_states[:, :-1, :] + theta * c_states[:, 1:, :]
        sq[:, r::factor][:, :nc] = _sq_diff(ref_states[:, r::factor][:, :nc, :], lin)
    sq[:, -1] = _sq_diff(ref_states[:, -1, :], c_states[:, -1, :])
    return sq


def _coupled_study(spec, k_levels, k_ref, paths, seed, cfg, quantity,
                   comparison, gate, threads, batch):
    """Shared driver for the coupled multi-resolution error experiments."""
    n_ref, factors = _level_factors(k_levels, k_ref, spec.T)
    grid_ref = Grid(spec.T, n_ref)
    gates = [validate_step_size(spec, k, gate).raise_if_failed() for k in k_levels]
    gates.append(validate_step_size(spec, k_ref, gate).raise_if_failed())
    need_eta = quantity == "eta_sum"

    # per level: accumulators over the comparison-time axis
    n_times = []
    for f in factors:
        if quantity == "state" and comparison == "fine":
            n_times.append(n_ref + 1)
        else:
            n_times.append(n_ref // f + 1)
    acc_sq = [_Kahan(n) for n in n_times]
    acc_qd = [_Kahan(n) for n in n_times]

    def running_sum(sel, k):
        out = np.zeros_like(sel)
        np.cumsum(sel[:, 1:, :], axis=1, out=out[:, 1:, :])
        return k * out

    def worker(indices):
        knots = sample_knots_batch(seed, indices, grid_ref, spec.m)
        x0 = _initial_batch(spec, seed, indices)
        ref_states, ref_sel = _run_ensemble(spec, grid_ref, knots, x0, cfg,
                                            with_selections=need_eta)
        if need_eta:
            ref_q = running_sum(ref_sel, k_ref)
        results = []
        for f, k in zip(factors, k_levels):
            grid_c = Grid(spec.T, n_ref // f)
            c_states, c_sel = _run_ensemble(spec, grid_c, knots[:, ::f, :], x0, cfg,
                                            with_selections=need_eta)
            if quantity == "state":
                if comparison == "fine":
                    sq = _fine_sq_diff(ref_states, c_states, f)
                else:
                    sq = _sq_diff(ref_states[:, ::f, :], c_states)
            else:
                sq = _sq_diff(ref_q[:, ::f, :], running_sum(c_sel, k))
            results.append((sq.sum(axis=0), np.einsum("bn,bn->n", sq, sq)))
        return results

    for res in _map_batches(worker, _batches(paths, batch), threads):
        for lvl, (s, s2) in enumerate(res):
            acc_sq[lvl].add(s)
            acc_qd[lvl].add(s2)

    rows = []
    for lvl, k in enumerate(k_levels):
        mean_sq = acc_sq[lvl].value / paths
        j = int(np.argmax(mean_sq))
        rms = float(np.sqrt(mean_sq[j]))
        var_sq = max(float(acc_qd[lvl].value[j] / paths - mean_sq[j] ** 2), 0.0)
        se_mean_sq = np.sqrt(var_sq / paths)
        se = float(se_mean_sq / (2.0 * rms)) if rms > 0.0 else 0.0
        rows.append(RateRow(k=k, rms_error=rms, mc_standard_error=se, paths=paths))

    table = RateTable(rows=rows, k_ref=k_ref, metadata={
        "quantity": quantity,
        "comparison": comparison,
        "seed": seed,
        "gate_slacks": [{"regime": g.regime.name, "k": g.k, "slack": g.slack}
                        for g in gates],
        "bias_note": ("reference is the same scheme at k_ref; the fitted "
                      "slope estimates the scheme's self-convergence order"),
    })
    try:
        table.fit = fit_rate(table)
    except ValueError:
        table.fit = None
    return table


def strong_error(spec: ProblemSpec, k_levels, k_ref, paths: int, seed: int,
                 cfg: StepSolverConfig, comparison: str = "fine",
                 threads: int = 1, batch: int = _BATCH) -> RateTable:
    """Coupled-path strong error table across step sizes.

    Per path index: one Brownian path is sampled at ``k_ref``, the
    reference trajectory is run on it, the path is coarsened to each
    level, and the per-time mean square deviation between the reference
    and the coarse interpolant is accumulated.  See the module docstring
    for the error functional and the ``comparison`` modes.
    """
    if comparison not in ("fine", "knots"):
        raise ValueError("comparison must be 'fine' or 'knots'")
    return _coupled_study(spec, list(k_levels), k_ref, paths, seed, cfg,
                          quantity="state", comparison=comparison,
                          gate=GateRegime.CONVERGENCE, threads=threads, batch=batch)


def eta_integral_error(spec: ProblemSpec, k_levels, k_ref, paths: int, seed: int,
                       cfg: StepSolverConfig, threads: int = 1,
                       batch: int = _BATCH) -> RateTable:
    """Coupled-path error table for the running selection sums.

    The compared quantity is k * sum_{j<=n} eta^j at shared grid points,
    against the reference running sum at ``k_ref``; the functional is the
    max over shared times of the per-time RMS difference.
    """
    return _coupled_study(spec, list(k_levels), k_ref, paths, seed, cfg,
                          quantity="eta_sum", comparison="knots",
                          gate=GateRegime.CONVERGENCE, threads=threads, batch=batch)


@dataclass(frozen=True)
class DiagnosticsRow:
    """Monte Carlo estimates of the bounded-moment quantities at one step size.

    max_second_moment = max_n E|X^n|^2, sum_increments = 0.5 * sum_n
    E|X^n - X^(n-1)|^2, coercive_sum = 2*mu*k*sum_n E|X^n|^p, and
    potential_sum = k*sum_n E Phi(X^n) when the drift exposes a potential.
    monotone_gap = k*sum_n E<eta^n - eta^(n-1), X^n - X^(n-1)>.
    """

    k: float
    max_second_moment: float
    max_second_moment_se: float
    sum_increments: float
    sum_increments_se: float
    coercive_sum: float
    coercive_sum_se: float
    monotone_gap: float
    gap_se: float
    potential_sum: float
    potential_sum_se: float
    gate_slack: float
    paths: int


@dataclass
class DiagnosticsReport:
    rows: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for row in self.rows:
            vals = [row.max_second_moment, row.sum_increments, row.coercive_sum]
            if not all(np.isfinite(v) and v >= 0.0 for v in vals):
                raise ValueError(f"non-finite or negative diagnostics at k={row.k}")


def _mean_se(total, total_sq, n):
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0)
    return float(mean), float(np.sqrt(var / n))


def _diagnose_level(spec, k, paths, seed, cfg, threads, batch):
    n_steps = round(spec.T / k)
    if abs(spec.T / n_steps - k) > 1e-9 * k:
        raise ValueError(f"k={k} does not divide the horizon T={spec.T}")
    gate = validate_step_size(spec, k, GateRegime.APRIORI).raise_if_failed()
    grid = Grid(spec.T, n_steps)
    growth = spec.drift.growth
    potential = getattr(spec.drift, "potential", None)

    acc_sq_t = _Kahan(n_steps + 1)     # sum over paths of |X^n|^2 per n
    acc_sq_t2 = _Kahan(n_steps + 1)
    scalars = _Kahan(8)                # paired (sum, sum of squares) per quantity

    def worker(indices):
        knots = sample_knots_batch(seed, indices, grid, spec.m)
        x0 = _initial_batch(spec, seed, indices)
        states, sel = _run_ensemble(spec, grid, knots, x0, cfg, with_selections=True)
        sq_norm = np.sum(states * states, axis=2)          # (B, N+1)
        dx = np.diff(states, axis=1)
        incr = 0.5 * np.sum(dx * dx, axis=(1, 2))          # per path
        coer = 2.0 * growth.mu * k * np.sum(
            np.sum(states[:, 1:, :] ** 2, axis=2) ** (growth.p / 2.0), axis=1)
        deta = np.diff(sel, axis=1)
        gap = k * np.sum(deta * dx, axis=(1, 2))
        if potential is not None:
            pot = k * np.sum(potential(states[:, 1:, :]), axis=1)
        else:
            pot = np.full(len(indices), np.nan)
        sc = np.array([incr.sum(), (incr**2).sum(), coer.sum(), (coer**2).sum(),
                       gap.sum(), (gap**2).sum(), pot.sum(), (pot**2).sum()])
        return sq_norm.sum(axis=0), (sq_norm**2).sum(axis=0), sc

    for s, s2, sc in _map_batches(worker, _batches(paths, batch), threads):
        acc_sq_t.add(s)
        acc_sq_t2.add(s2)
        scalars.add(sc)

    mean_t = acc_sq_t.value / paths
    j = int(np.argmax(mean_t[1:])) + 1  # the bound covers n >= 1
    var_j = max(acc_sq_t2.value[j] / paths - mean_t[j] ** 2, 0.0)
    sc = scalars.value
    incr, incr_se = _mean_se(sc[0], sc[1], paths)
    coer, coer_se = _mean_se(sc[2], sc[3], paths)
    gap, gap_se = _mean_se(sc[4], sc[5], paths)
    pot, pot_se = _mean_se(sc[6], sc[7], paths)
    return DiagnosticsRow(
        k=k,
        max_second_moment=float(mean_t[j]),
        max_second_moment_se=float(np.sqrt(var_j / paths)),
        sum_increments=incr, sum_increments_se=incr_se,
        coercive_sum=coer, coercive_sum_se=coer_se,
        monotone_gap=gap, gap_se=gap_se,
        potential_sum=pot, potential_sum_se=pot_se,
        gate_slack=gate.slack, paths=paths)


def apriori_diagnostics(spec: ProblemSpec, k_levels, paths: int, seed: int,
                        cfg: StepSolverConfig, threads: int = 1,
                        batch: int = _BATCH) -> DiagnosticsReport:
    """Monte Carlo estimates of the bounded-moment quantities per level.

    Requires the moment-bound gate 5*L_b*k < 1 at every level.  The same
    per-path seeds are used at every level.
    """
    rows = [_diagnose_level(spec, k, paths, seed, cfg, threads, batch)
            for k in k_levels]
    return DiagnosticsReport(rows=rows, metadata={"seed": seed, "paths": paths})


@dataclass(frozen=True)
class GapEstimate:
    value: float
    standard_error: float
    k: float
    paths: int


def monotone_gap(spec: ProblemSpec, k: float, paths: int, seed: int,
                 cfg: StepSolverConfig, threads: int = 1,
                 batch: int = _BATCH) -> GapEstimate:
    """Estimate k * sum_n E<eta^n - eta^(n-1), X^n - X^(n-1)>.

    Each summand is nonnegative pathwise (up to solver tolerance) by
    monotonicity, so the estimate should never fall below a few standard
    errors of zero.
    """
    row = _diagnose_level(spec, k, paths, seed, cfg, threads, batch)
    return GapEstimate(value=row.monotone_gap, standard_error=row.gap_se,
                       k=k, paths=paths)


def write_rate_csv(table: RateTable, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("k,rms_error,mc_se,paths\n")
        for r in table.rows:
            fh.write(f"{r.k!r},{r.rms_error!r},{r.mc_standard_error!r},{r.paths}\n")


def write_diagnostics_csv(report: DiagnosticsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("k,max_second_moment,sum_increments,coercive_sum,monotone_gap,gap_se\n")
        for r in report.rows:
            fh.write(f"{r.k!r},{r.max_second_moment!r},{r.sum_increments!r},"
                     f"{r.coercive_sum!r},{r.monotone_gap!r},{r.gap_se!r}\n")
