"""Config-driven command line.

Usage::

    ffbsde SUBCOMMAND CONFIG.json [--section.key=value ...]

Subcommands: solve, pi-solve, converge, contract, stability, oracle-compare,
control-demo, validate.  Overrides take JSON values (``--solver.paths=4096``,
``--study.horizons=[0.1,0.2]``); anything that does not parse as JSON is kept
as a string.

Exit codes: 0 success, 2 the run completed but its check failed (or the study
was inconclusive), 1 operational error (bad config, unknown subcommand, ...).

Every run writes ``summary.txt`` into the output directory: ``key = value``
lines sorted by key after a leading ``generated_at`` timestamp.  Common keys:
``subcommand``, ``verdict`` (pass | fail | inconclusive: noise floor), and the
numbers behind the verdict (documented per subcommand below).
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import catalog
from .bsde import BsdeConfig
from .errors import ConfigError, FfbsdeError, InconclusiveStudyError
from .experiments import (contraction_study, convergence_study, stability_study, write_csv,
                          write_contraction_csv, write_convergence_csv, write_stability_csv,
                          write_summary)
from .flow import export_solution_csv, solve_equilibrium, solve_pi_equilibrium
from .model import make_partition, make_uniform_grid, validate_problem
from .oracle import export_affine_oracle_csv, solve_affine_oracle, spike_variation_check

SUBCOMMANDS = ("solve", "pi-solve", "converge", "contract", "stability", "oracle-compare",
               "control-demo", "validate")

SECTION_DEFAULTS = {
    "grid": {"J": 64},
    "partition": {"N": 8, "sizes": [2, 4, 8, 16, 32]},
    "solver": {"paths": 4096, "seed": 0, "tol": 1e-8, "max_iter": 50, "degree": 2,
               "ridge": 0.0, "workers": 1},
    "study": {
        "slope_range": [0.7, 1.3],
        "horizons": [0.125, 0.25, 0.5],
        "ratio_bound": 0.9,
        "scales": [0.01, 0.02],
        "shift": None,
        "stability_range": [1.6, 2.4],
        "oracle_fine_steps": 512,
        "oracle_tol": 0.05,
        "spike_time": 0.125,
        "spike_eps": [0.04, 0.02, 0.01],
        "spike_offsets": [-0.5, -0.25, 0.5],
        "negative_shift": 0.5,
    },
    "output": {"dir": "out", "max_paths": 256, "full_fields": False},
}

_INT_KEYS = {("grid", "J"), ("partition", "N"), ("solver", "paths"), ("solver", "seed"),
             ("solver", "max_iter"), ("solver", "degree"), ("solver", "workers"),
             ("study", "oracle_fine_steps"), ("output", "max_paths")}
_NONNEG_INT_KEYS = {("solver", "seed"), ("solver", "degree")}
_BOOL_KEYS = {("output", "full_fields")}
_STR_KEYS = {("output", "dir")}
_INT_LIST_KEYS = {("partition", "sizes")}
_PAIR_KEYS = {("study", "slope_range"), ("study", "stability_range")}
_LIST_KEYS = {("study", "horizons"), ("study", "scales"), ("study", "spike_eps"),
              ("study", "spike_offsets")}
_OPTIONAL_LIST_KEYS = {("study", "shift")}


@dataclass
class RunConfig:
    """Fully populated run configuration; ``to_dict`` gives the parsed form."""

    problem: dict
    grid: dict = field(default_factory=lambda: dict(SECTION_DEFAULTS["grid"]))
    partition: dict = field(default_factory=lambda: copy.deepcopy(SECTION_DEFAULTS["partition"]))
    solver: dict = field(default_factory=lambda: dict(SECTION_DEFAULTS["solver"]))
    study: dict = field(default_factory=lambda: copy.deepcopy(SECTION_DEFAULTS["study"]))
    output: dict = field(default_factory=lambda: dict(SECTION_DEFAULTS["output"]))

    def to_dict(self):
        return copy.deepcopy({"problem": self.problem, "grid": self.grid,
                              "partition": self.partition, "solver": self.solver,
                              "study": self.study, "output": self.output})

    @property
    def bsde_config(self):
        return BsdeConfig(degree=self.solver["degree"], ridge=self.solver["ridge"])


def _check_value(sec, key, v):
    where = f"{sec}.{key}"
    if (sec, key) in _INT_KEYS:
        lo = 0 if (sec, key) in _NONNEG_INT_KEYS else 1
        if isinstance(v, bool) or not isinstance(v, int) or v < lo:
            raise ConfigError(f"{where}: expected an integer >= {lo}, got {v!r}")
        return v
    if (sec, key) in _BOOL_KEYS:
        if not isinstance(v, bool):
            raise ConfigError(f"{where}: expected true or false, got {v!r}")
        return v
    if (sec, key) in _STR_KEYS:
        if not isinstance(v, str) or not v:
            raise ConfigError(f"{where}: expected a non-empty string")
        return v
    if (sec, key) in _INT_LIST_KEYS:
        if not isinstance(v, list) or not v or any(
                isinstance(x, bool) or not isinstance(x, int) or x < 1 for x in v):
            raise ConfigError(f"{where}: expected a non-empty list of positive integers")
        return list(v)
    if (sec, key) in _OPTIONAL_LIST_KEYS and v is None:
        return None
    if (sec, key) in _LIST_KEYS | _PAIR_KEYS | _OPTIONAL_LIST_KEYS:
        out = catalog._numlist(where, v)
        if (sec, key) in _PAIR_KEYS and (len(out) != 2 or out[0] > out[1]):
            raise ConfigError(f"{where}: expected [low, high]")
        return out
    out = catalog._num(where, v)
    if key == "tol" and not out > 0:
        raise ConfigError(f"{where}: must be positive")
    if key == "ridge" and out < 0:
        raise ConfigError(f"{where}: must be non-negative")
    return out


def parse_config(raw):
    """Validate a raw config mapping and return a RunConfig with defaults filled."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object at top level")
    unknown = sorted(set(raw) - set(SECTION_DEFAULTS) - {"problem"})
    if unknown:
        raise ConfigError(f"config: unknown section(s) {', '.join(unknown)}")
    if "problem" not in raw:
        raise ConfigError("config: missing section 'problem'")
    sections = {"problem": catalog.normalize_problem(raw["problem"])}
    for sec, defaults in SECTION_DEFAULTS.items():
        given = raw.get(sec, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{sec}: expected an object")
        unknown = sorted(set(given) - set(defaults))
        if unknown:
            raise ConfigError(f"{sec}: unknown key(s) {', '.join(unknown)}")
        sections[sec] = {k: _check_value(sec, k, copy.deepcopy(given.get(k, v)))
                         for k, v in defaults.items()}
    return RunConfig(**sections)


def apply_overrides(raw, overrides):
    """Apply ``--a.b=value`` style overrides to a raw config mapping (copied)."""
    raw = copy.deepcopy(raw)
    for item in overrides:
        text = item[2:] if item.startswith("--") else item
        key, sep, value = text.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r}: expected --section.key=value")
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
        parts = key.split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p} is not a section")
        node[parts[-1]] = value
    return raw


def load_config(path, overrides=()):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_config(apply_overrides(raw, overrides))


# -- subcommands ------------------------------------------------------------------


def _grid(cfg):
    return make_uniform_grid(cfg.problem["T"], cfg.grid["J"])


def _solver_args(cfg):
    s = cfg.solver
    return dict(paths=s["paths"], seed=s["seed"], tol=s["tol"], max_iter=s["max_iter"],
                config=cfg.bsde_config)


def _report_entries(sol):
    rep = sol.report
    return {"iterations": rep.iterations, "converged": rep.converged,
            "final_increment": rep.increments[-1] if rep.increments else 0.0,
            "mean_ratio": rep.mean_ratio}


def cmd_validate(cfg, out):
    rep = validate_problem(catalog.build_problem(cfg.problem), seed=cfg.solver["seed"])
    entries = {"R": rep.R, "max_lipschitz_ratio": rep.max_lipschitz_ratio,
               "modulus_ratio": rep.modulus_ratio, "violations": len(rep.violations)}
    for i, v in enumerate(rep.violations):
        entries[f"violation_{i}"] = v
    return rep.ok, entries


def cmd_solve(cfg, out):
    spec = catalog.build_problem(cfg.problem)
    sol = solve_equilibrium(spec, _grid(cfg), keep_slices=cfg.output["full_fields"],
                            **_solver_args(cfg))
    export_solution_csv(sol, out, cfg.output["max_paths"], cfg.output["full_fields"])
    return sol.report.converged, _report_entries(sol)


def cmd_pi_solve(cfg, out):
    spec = catalog.build_problem(cfg.problem)
    grid = _grid(cfg)
    part = make_partition(grid, cfg.partition["N"])
    sol = solve_pi_equilibrium(spec, grid, part, keep_slices=cfg.output["full_fields"],
                               **_solver_args(cfg))
    export_solution_csv(sol, out, cfg.output["max_paths"], cfg.output["full_fields"])
    entries = _report_entries(sol)
    entries.update({"N": part.N, "mesh": float(part.mesh)})
    return sol.report.converged, entries


def cmd_converge(cfg, out):
    spec = catalog.build_problem(cfg.problem)
    path = os.path.join(out, "convergence.csv")
    try:
        study = convergence_study(spec, _grid(cfg), cfg.partition["sizes"],
                                  workers=cfg.solver["workers"], **_solver_args(cfg))
    except InconclusiveStudyError as exc:
        write_convergence_csv(path, exc.rows)
        return None, {"usable_rows": sum(r.usable for r in exc.rows), "message": str(exc)}
    write_convergence_csv(path, study.rows)
    lo, hi = cfg.study["slope_range"]
    return lo <= study.slope <= hi, {"slope": study.slope,
                                     "usable_rows": sum(r.usable for r in study.rows),
                                     "all_converged": all(study.converged)}


def cmd_contract(cfg, out):
    problem = cfg.problem

    def builder(T):
        p = copy.deepcopy(problem)
        p["T"] = T
        return catalog.build_problem(p)

    s = cfg.solver
    rows = contraction_study(builder, cfg.study["horizons"], cfg.grid["J"], s["paths"],
                             s["seed"], s["tol"], s["max_iter"], cfg.bsde_config,
                             workers=s["workers"])
    write_contraction_csv(os.path.join(out, "contraction.csv"), rows)
    means = [r.ratio_mean for r in rows]
    small_ok = bool(rows[0].ratios) and max(rows[0].ratios) <= cfg.study["ratio_bound"]
    increasing = all(np.isfinite(means)) and all(b > a for a, b in zip(means, means[1:]))
    entries = {"smallest_horizon_max_ratio": max(rows[0].ratios) if rows[0].ratios else 0.0,
               "ratio_means_increasing": increasing,
               "diverged_rows": sum(r.diverged for r in rows)}
    return small_ok and increasing, entries


def cmd_stability(cfg, out):
    spec = catalog.build_problem(cfg.problem)
    s = cfg.solver
    rows = stability_study(spec, cfg.study["scales"], _grid(cfg), s["paths"], s["seed"],
                           s["tol"], s["max_iter"], cfg.bsde_config, cfg.study["shift"],
                           workers=s["workers"])
    write_stability_csv(os.path.join(out, "stability.csv"), rows)
    nz = [r for r in rows if r.scale != 0]
    if len(nz) < 2 or nz[0].distance == 0:
        return False, {"distance_ratio": float("nan")}
    ratio = nz[1].distance / nz[0].distance
    lo, hi = cfg.study["stability_range"]
    return lo <= ratio <= hi, {"distance_ratio": ratio,
                               "scale_ratio": nz[1].scale / nz[0].scale}


@dataclass(frozen=True)
class _ComparisonRow:
    node: int
    time: float
    rel_l2_error: float


def cmd_oracle_compare(cfg, out):
    aspec = catalog.build_affine(cfg.problem)
    spec = catalog.build_problem(cfg.problem)
    grid = _grid(cfg)
    sol = solve_equilibrium(spec, grid, **_solver_args(cfg))
    oracle = solve_affine_oracle(aspec, cfg.study["oracle_fine_steps"])
    ref = oracle.diagonal_on_paths(sol.ensemble.X, grid.times)
    num = np.sqrt(np.mean((sol.diag.Y_diag - ref) ** 2, axis=0))[:, 0]
    den = np.sqrt(np.mean(ref ** 2, axis=0))[:, 0]
    rel = num / np.where(den > 0, den, 1.0)
    rows = [_ComparisonRow(j, float(grid.times[j]), float(rel[j])) for j in range(grid.J + 1)]
    write_csv(os.path.join(out, "comparison.csv"), ["node", "time", "rel_l2_error"], rows)
    export_affine_oracle_csv(oracle, os.path.join(out, "oracle.csv"))
    worst = float(rel.max())
    entries = _report_entries(sol)
    entries.update({"max_rel_error": worst, "oracle_iterations": oracle.iterations})
    return worst <= cfg.study["oracle_tol"] and sol.report.converged, entries


@dataclass(frozen=True)
class _SpikeRow:
    control: str
    offset: float
    eps: float
    increment: float
    standard_error: float
    passed: bool


def cmd_control_demo(cfg, out):
    lq = catalog.build_control(cfg.problem)
    grid = _grid(cfg)
    sol = solve_equilibrium(lq.spec, grid, **_solver_args(cfg))
    st = cfg.study
    shift = st["negative_shift"]
    rows = []
    for label, control in (("equilibrium", None),
                           ("shifted", lambda s, x, p: lq.control(s, x, p) + shift)):
        for off in st["spike_offsets"]:
            res = spike_variation_check(lq, sol, st["spike_time"], off, st["spike_eps"],
                                        control=control)
            rows += [_SpikeRow(label, off, r.eps, r.increment, r.standard_error, r.passes())
                     for r in res]
    write_csv(os.path.join(out, "spike.csv"),
              ["control", "offset", "eps", "increment", "standard_error", "passed"], rows)
    eq_ok = all(r.passed for r in rows if r.control == "equilibrium")
    neg_fails = not all(r.passed for r in rows if r.control == "shifted")
    entries = _report_entries(sol)
    entries.update({"equilibrium_passes": eq_ok, "negative_control_fails": neg_fails,
                    "min_increment": min(r.increment for r in rows
                                         if r.control == "equilibrium")})
    return eq_ok and neg_fails and sol.report.converged, entries


COMMANDS = {
    "solve": cmd_solve,
    "pi-solve": cmd_pi_solve,
    "converge": cmd_converge,
    "contract": cmd_contract,
    "stability": cmd_stability,
    "oracle-compare": cmd_oracle_compare,
    "control-demo": cmd_control_demo,
    "validate": cmd_validate,
}


def run(subcommand, config_path, overrides=(), stderr=None):
    """Execute one subcommand; returns the process exit code."""
    stderr = sys.stderr if stderr is None else stderr
    if subcommand not in COMMANDS:
        print(f"error: unknown subcommand {subcommand!r}; choose from "
              f"{', '.join(SUBCOMMANDS)}", file=stderr)
        return 1
    try:
        cfg = load_config(config_path, overrides)
        out = cfg.output["dir"]
        os.makedirs(out, exist_ok=True)
        ok, entries = COMMANDS[subcommand](cfg, out)
    except (FfbsdeError, OSError) as exc:
        print(f"error: {exc}", file=stderr)
        return 1
    if ok is None:
        verdict = "inconclusive: noise floor"
    else:
        verdict = "pass" if ok else "fail"
    entries = dict(entries, subcommand=subcommand, verdict=verdict)
    write_summary(os.path.join(out, "summary.txt"), entries)
    print(f"{subcommand}: {verdict}")
    return 0 if ok else 2


def main(argv=None):
    parser = argparse.ArgumentParser(prog="ffbsde", description=__doc__.split("\n\n")[0])
    parser.add_argument("subcommand", help=", ".join(SUBCOMMANDS))
    parser.add_argument("config", help="JSON run configuration")
    args, overrides = parser.parse_known_args(argv)
    bad = [o for o in overrides if not o.startswith("--") or "=" not in o]
    if bad:
        print(f"error: unrecognised argument(s) {' '.join(bad)}", file=sys.stderr)
        return 1
    return run(args.subcommand, args.config, overrides)


if __name__ == "__main__":
    sys.exit(main())
