"""Config-driven command line front end.

Subcommands:
    msde run --config cfg.json [--threads N] [--out DIR]
    msde validate --config cfg.json
    msde list-models

Configs are JSON with four sections (problem, experiment, solver, output);
unknown keys are rejected.  All step-size gates are checked before any
simulation starts.  Outputs are a CSV per experiment kind plus a
``<prefix>.meta.json`` sidecar echoing the config, the effective seed,
every gate slack checked, and wall time.  CSV bytes depend only on
(config, seed) for a given platform; the thread count never changes them.
The environment variable MSDE_SEED overrides the config seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, fem, models
from .core import (ConstantInitial, DiffusionMap, GateError, GateRegime,
                   GaussianInitial, LipschitzMap, ProblemSpec, validate_step_size)
from .experiments import (apriori_diagnostics, eta_integral_error, monotone_gap,
                          strong_error, write_diagnostics_csv, write_rate_csv)
from .stepper import StepSolverConfig, StepSolverError
from .wiener import Grid, interpolation_error_mc

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_GATE = 3
EXIT_SOLVER = 4

_KINDS = ("rate", "diagnostics", "gap", "eta-rate", "wiener-check")


class ConfigError(ValueError):
    pass


def _section(cfg: dict, name: str, allowed: set, required: set = frozenset()) -> dict:
    sec = cfg.get(name)
    if sec is None:
        if required or name in ("problem", "experiment"):
            raise ConfigError(f"missing section {name!r}")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be an object")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    missing = required - set(sec)
    if missing:
        raise ConfigError(f"missing keys in {name!r}: {sorted(missing)}")
    return sec


def _build_b(spec: dict | None, dim: int) -> LipschitzMap:
    if spec is None or spec.get("kind", "zero") == "zero":
        return LipschitzMap.zero(dim)
    if spec["kind"] == "linear":
        return LipschitzMap.linear(float(spec["slope"]), dim)
    raise ConfigError(f"unknown b kind {spec.get('kind')!r}")


def _build_g(spec: dict | None, dim: int) -> DiffusionMap:
    if spec is None or spec.get("kind", "zero") == "zero":
        return DiffusionMap.zero(dim, int((spec or {}).get("m", 1)))
    if spec["kind"] == "constant":
        g0 = np.atleast_2d(np.asarray(spec["value"], dtype=float))
        if g0.shape[0] != dim:
            raise ConfigError(f"g value has {g0.shape[0]} rows, problem dim is {dim}")
        return DiffusionMap.constant(g0)
    raise ConfigError(f"unknown g kind {spec.get('kind')!r}")


def _build_x0(spec: dict | None, dim: int):
    if spec is None:
        raise ConfigError("problem.x0 is required for this model")
    kind = spec.get("kind")
    if kind == "constant":
        x0 = np.atleast_1d(np.asarray(spec["value"], dtype=float))
        if x0.shape[0] != dim:
            raise ConfigError(f"x0 has dim {x0.shape[0]}, problem dim is {dim}")
        return ConstantInitial(x0)
    if kind == "normal":
        mean = np.atleast_1d(np.asarray(spec.get("mean", [0.0] * dim), dtype=float))
        return GaussianInitial(mean, float(spec.get("std", 1.0)))
    raise ConfigError(f"unknown x0 kind {kind!r}")


def build_problem(pcfg: dict) -> ProblemSpec:
    allowed = {"model", "model_params", "plaplace", "b", "g", "x0", "T"}
    unknown = set(pcfg) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in 'problem': {sorted(unknown)}")
    if "model" not in pcfg or "T" not in pcfg:
        raise ConfigError("problem requires 'model' and 'T'")
    name = pcfg["model"]
    T = float(pcfg["T"])
    if name == "plaplace":
        for bad in ("b", "g", "x0", "model_params"):
            if bad in pcfg:
                raise ConfigError(
                    "plaplace problems define diffusion and initial data via "
                    f"their 'plaplace' keys; remove problem.{bad}")
        if "plaplace" not in pcfg:
            raise ConfigError("problem.plaplace section required for the plaplace model")
        return fem.build_problem(pcfg["plaplace"], T)
    try:
        drift = models.get_drift(name, **pcfg.get("model_params", {}))
    except KeyError as err:
        raise ConfigError(str(err)) from err
    d = getattr(drift, "d", 1)
    b = _build_b(pcfg.get("b"), d)
    g = _build_g(pcfg.get("g"), d)
    x0 = _build_x0(pcfg.get("x0"), d)
    return ProblemSpec(d=d, m=g.noise_dim, drift=drift, b=b, g=g, initial=x0, T=T)


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config parse error at line {err.lineno}, "
                          f"column {err.colno}: {err.msg}")
    if not isinstance(cfg, dict):
        raise ConfigError("top-level config must be a JSON object")
    unknown = set(cfg) - {"problem", "experiment", "solver", "output"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    return cfg


def _experiment_section(cfg):
    return _section(cfg, "experiment",
                    allowed={"kind", "k_levels", "k_ref", "paths", "seed",
                             "refine", "comparison"},
                    required={"kind", "k_levels", "paths", "seed"})


def _solver_config(cfg) -> StepSolverConfig:
    sec = _section(cfg, "solver", allowed={"outer_max_iters", "outer_tol", "inner"})
    return StepSolverConfig(
        outer_max_iters=int(sec.get("outer_max_iters", 200)),
        outer_tol=float(sec.get("outer_tol", 1e-12)),
        inner=sec.get("inner", {}))


def _check_gates(spec: ProblemSpec, kind: str, ks) -> list:
    """Validate every relevant gate; raises GateError on the first failure.

    Solvability is always checked first so the tightest violated regime
    is the one named.
    """
    regimes = [GateRegime.SOLVABILITY]
    if kind in ("rate", "eta-rate"):
        regimes.append(GateRegime.CONVERGENCE)
    elif kind in ("diagnostics", "gap"):
        regimes.append(GateRegime.APRIORI)
    checked = []
    for regime in regimes:
        for k in ks:
            res = validate_step_size(spec, float(k), regime)
            checked.append(res)
            res.raise_if_failed()
    return checked


def _k_list(exp: dict, kind: str):
    ks = [float(k) for k in exp["k_levels"]]
    if not ks:
        raise ConfigError("experiment.k_levels must be non-empty")
    if kind in ("rate", "eta-rate"):
        if "k_ref" not in exp:
            raise ConfigError(f"experiment.k_ref is required for kind {kind!r}")
        return ks, float(exp["k_ref"])
    return ks, None


def _effective_seed(exp: dict) -> tuple[int, bool]:
    env = os.environ.get("MSDE_SEED")
    if env is not None:
        try:
            return int(env), True
        except ValueError:
            raise ConfigError(f"MSDE_SEED must be an integer, got {env!r}")
    return int(exp["seed"]), False


def _prefixed(prefix: str, base: str) -> str:
    return f"{prefix}.{base}" if prefix else base


def run_config(cfg: dict, threads: int = 1, out_dir: str | None = None) -> dict:
    """Execute a parsed config; returns the sidecar metadata dict."""
    t_start = time.perf_counter()
    exp = _experiment_section(cfg)
    kind = exp["kind"]
    if kind not in _KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; known: {_KINDS}")
    out_sec = _section(cfg, "output", allowed={"directory", "prefix"})
    directory = Path(out_dir or out_sec.get("directory", "."))
    prefix = out_sec.get("prefix", "")
    solver = _solver_config(cfg)
    seed, seed_overridden = _effective_seed(exp)
    paths = int(exp["paths"])
    ks, k_ref = _k_list(exp, kind)

    meta = {
        "version": __version__,
        "config": cfg,
        "seed": seed,
        "seed_from_env": seed_overridden,
        "threads": threads,
        "kind": kind,
        "gate_slacks": [],
    }
    outputs = {}

    if kind == "wiener-check":
        pcfg = cfg.get("problem", {})
        gspec = pcfg.get("g")
        if not gspec or gspec.get("kind") != "constant":
            raise ConfigError("wiener-check requires problem.g of kind 'constant'")
        g0 = np.atleast_2d(np.asarray(gspec["value"], dtype=float))
        T = float(pcfg.get("T", 1.0))
        refine = int(exp.get("refine", 32))
        rows = []
        for k in ks:
            n = round(T / k)
            if abs(T / n - k) > 1e-9 * k:
                raise ConfigError(f"k={k} does not divide T={T}")
            res = interpolation_error_mc(g0, Grid(T, n), paths, seed, refine=refine)
            rows.append(res)
        csv_path = directory / _prefixed(prefix, "wiener.csv")
        directory.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            fh.write("k,estimate,mc_se,target\n")
            for r in rows:
                fh.write(f"{r.k!r},{r.estimate!r},{r.standard_error!r},{r.target!r}\n")
        outputs["csv"] = str(csv_path)
        meta["results"] = [{"k": r.k, "estimate": r.estimate, "se": r.standard_error,
                            "target": r.target, "refine": r.refine} for r in rows]
    else:
        spec = build_problem(cfg.get("problem", {}))
        gate_ks = list(ks) + ([k_ref] if k_ref is not None else [])
        checked = _check_gates(spec, kind, gate_ks)
        meta["gate_slacks"] = [{"regime": g.regime.name, "k": g.k,
                                "product": g.product, "slack": g.slack}
                               for g in checked]
        directory.mkdir(parents=True, exist_ok=True)
        if kind in ("rate", "eta-rate"):
            if kind == "rate":
                table = strong_error(spec, ks, k_ref, paths, seed, solver,
                                     comparison=exp.get("comparison", "fine"),
                                     threads=threads)
                base = "rate.csv"
            else:
                table = eta_integral_error(spec, ks, k_ref, paths, seed, solver,
                                           threads=threads)
                base = "eta_rate.csv"
            csv_path = directory / _prefixed(prefix, base)
            write_rate_csv(table, csv_path)
            outputs["csv"] = str(csv_path)
            meta["table_metadata"] = table.metadata
            if table.fit is not None:
                meta["fit"] = {"slope": table.fit.slope, "slope_se": table.fit.slope_se,
                               "intercept": table.fit.intercept}
        elif kind == "diagnostics":
            report = apriori_diagnostics(spec, ks, paths, seed, solver, threads=threads)
            csv_path = directory / _prefixed(prefix, "diagnostics.csv")
            write_diagnostics_csv(report, csv_path)
            outputs["csv"] = str(csv_path)
            meta["diagnostics"] = [row.__dict__ for row in report.rows]
        elif kind == "gap":
            rows = [monotone_gap(spec, k, paths, seed, solver, threads=threads)
                    for k in ks]
            csv_path = directory / _prefixed(prefix, "gap.csv")
            with open(csv_path, "w", newline="") as fh:
                fh.write("k,gap,gap_se,paths\n")
                for r in rows:
                    fh.write(f"{r.k!r},{r.value!r},{r.standard_error!r},{r.paths}\n")
            outputs["csv"] = str(csv_path)
            meta["gaps"] = [{"k": r.k, "value": r.value, "se": r.standard_error}
                            for r in rows]

    meta["outputs"] = outputs
    meta["wall_time_seconds"] = time.perf_counter() - t_start
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / _prefixed(prefix, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, default=str)
        fh.write("\n")
    return meta


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    run_config(cfg, threads=args.threads, out_dir=args.out)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    exp = _experiment_section(cfg)
    kind = exp["kind"]
    if kind not in _KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; known: {_KINDS}")
    _solver_config(cfg)
    _section(cfg, "output", allowed={"directory", "prefix"})
    seed, _ = _effective_seed(exp)
    ks, k_ref = _k_list(exp, kind)
    if kind == "wiener-check":
        pcfg = cfg.get("problem", {})
        gspec = pcfg.get("g")
        if not gspec or gspec.get("kind") != "constant":
            raise ConfigError("wiener-check requires problem.g of kind 'constant'")
        print("config OK (no gates apply to wiener-check)")
        return EXIT_OK
    spec = build_problem(cfg.get("problem", {}))
    gate_ks = list(ks) + ([k_ref] if k_ref is not None else [])
    checked = _check_gates(spec, kind, gate_ks)
    print(f"config OK; seed={seed}")
    for g in checked:
        print(f"  {g.regime.name}: k={g.k:g} product={g.product:.6g} slack={g.slack:.6g}")
    return EXIT_OK


def cmd_list_models(_args) -> int:
    for name in models.available_models():
        print(name)
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="msde",
        description="Backward Euler-Maruyama experiments for monotone-drift SDEs")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a JSON config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--threads", type=int, default=1,
                       help="cap on path-level parallelism (results identical for any N)")
    p_run.add_argument("--out", default=None, help="override output directory")
    p_run.set_defaults(fn=cmd_run)

    p_val = sub.add_parser("validate", help="parse config and check gates only")
    p_val.add_argument("--config", required=True)
    p_val.set_defaults(fn=cmd_validate)

    p_ls = sub.add_parser("list-models", help="list registered drift models")
    p_ls.set_defaults(fn=cmd_list_models)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except GateError as err:
        print(f"gate violation: {err}", file=sys.stderr)
        return EXIT_GATE
    except StepSolverError as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
