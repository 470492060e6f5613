"""Desk-scale studies: partition convergence, Picard contraction, stability.

CSV headers (exact):

    convergence.csv   mesh,N,err_X,err_diag,paths,seed
    contraction.csv   T,ratio_mean,iters,converged
    stability.csv     scale,distance,ratio

Floats are written with ``repr`` so files are byte-reproducible.
"""

from __future__ import annotations

import csv
import datetime
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .bsde import BsdeConfig
from .errors import BlowUpError, InconclusiveStudyError, InvalidArgumentError
from .flow import (NOISE_FLOOR_FACTOR, ROUNDOFF_FLOOR, solve_equilibrium,
                   solve_pi_equilibrium, sup_l2_norm)
from .model import make_partition, make_uniform_grid
from .paths import sample_brownian

CONVERGENCE_HEADER = ["mesh", "N", "err_X", "err_diag", "paths", "seed"]
CONTRACTION_HEADER = ["T", "ratio_mean", "iters", "converged"]
STABILITY_HEADER = ["scale", "distance", "ratio"]


def _map(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def sup_mean_square_path(delta):
    """E[max_j |delta_j|^2]^{1/2} for an array (paths, nodes, ...)."""
    v = np.asarray(delta, dtype=float)
    sq = np.sum(v.reshape(v.shape[0], v.shape[1], -1) ** 2, axis=2)
    return float(np.sqrt(np.mean(np.max(sq, axis=1))))


# -- convergence in the partition mesh ----------------------------------------


@dataclass(frozen=True)
class ConvergenceRow:
    mesh: float
    N: int
    err_X: float
    err_diag: float
    paths: int
    seed: int
    se_diag: float = 0.0
    usable: bool = False


@dataclass
class ConvergenceStudy:
    rows: list
    slope: float
    reference_iterations: int = 0
    converged: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.rows, self.slope))


def fit_loglog_slope(rows):
    mesh = np.log([r.mesh for r in rows])
    err = np.log([r.err_diag for r in rows])
    return float(np.polyfit(mesh, err, 1)[0])


def convergence_study(spec, grid, partition_sizes, paths, seed, tol=1e-8, max_iter=50,
                      config=BsdeConfig(), workers=1):
    """Errors of the partitioned solves against the full-grid solve.

    Every solve uses one Brownian bundle.  The full grid (N = J) is the
    reference.  The slope of log err_diag against log mesh is fitted by least
    squares over rows whose error exceeds ``NOISE_FLOOR_FACTOR`` standard
    errors; fewer than three such rows raise ``InconclusiveStudyError`` with
    the rows attached as ``.rows``.
    """
    sizes = [int(N) for N in partition_sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])) or not sizes or sizes[0] < 1:
        raise InvalidArgumentError("partition sizes must be positive and strictly increasing")
    if any(grid.J % N for N in sizes):
        raise InvalidArgumentError(f"every partition size must divide J={grid.J}")
    bundle = sample_brownian(grid, paths, spec.d, seed)
    ref = solve_equilibrium(spec, grid, paths, seed, tol, max_iter, config, bundle=bundle)

    def one(N):
        part = make_partition(grid, N)
        sol = solve_pi_equilibrium(spec, grid, part, paths, seed, tol, max_iter, config,
                                   bundle=bundle)
        err_X = sup_mean_square_path(sol.ensemble.X - ref.ensemble.X)
        err_d, se = sup_l2_norm(sol.diag.Y_diag - ref.diag.Y_diag)
        usable = err_d > NOISE_FLOOR_FACTOR * se and err_d > ROUNDOFF_FLOOR
        row = ConvergenceRow(float(part.mesh), N, err_X, err_d, int(paths), int(seed),
                             se, bool(usable))
        return row, sol.report.converged

    out = _map(one, sizes, workers)
    rows = [r for r, _ in out]
    usable = [r for r in rows if r.usable]
    if len(usable) < 3:
        err = InconclusiveStudyError(
            f"inconclusive: noise floor ({len(usable)} of {len(rows)} rows above "
            f"{NOISE_FLOOR_FACTOR:g} standard errors); use more paths or coarser partitions")
        err.rows = rows
        raise err
    return ConvergenceStudy(rows, fit_loglog_slope(usable), ref.report.iterations,
                            [ref.report.converged] + [c for _, c in out])


# -- Picard contraction over horizons ---------------------------------------------


@dataclass(frozen=True)
class ContractionRow:
    T: float
    ratio_mean: float
    iters: int
    converged: bool
    ratios: tuple = ()
    diverged: bool = False


def contraction_study(spec_builder, horizons, J, paths, seed, tol=1e-10, max_iter=60,
                      config=BsdeConfig(), workers=1):
    """Mean above-floor Picard ratio of the full-grid solve for each horizon.

    ``spec_builder(T)`` returns the problem on [0, T].  A blow-up or a run
    whose increments end above where they started is marked diverged.
    """
    hs = [float(T) for T in horizons]
    if any(b <= a for a, b in zip(hs, hs[1:])):
        raise InvalidArgumentError("horizons must be strictly increasing")

    def one(T):
        spec = spec_builder(T)
        grid = make_uniform_grid(T, J)
        try:
            sol = solve_equilibrium(spec, grid, paths, seed, tol, max_iter, config)
        except BlowUpError:
            return ContractionRow(T, float("nan"), 0, False, (), True)
        rep = sol.report
        diverged = (not rep.converged and rep.iterations > 1
                    and rep.increments[-1] >= rep.increments[0])
        return ContractionRow(T, rep.mean_ratio, rep.iterations, rep.converged,
                              tuple(rep.valid_ratios), diverged)

    return _map(one, hs, workers)


# -- stability under terminal perturbations ---------------------------------------


@dataclass(frozen=True)
class StabilityRow:
    scale: float
    distance: float
    ratio: float


def shift_terminal(spec, shift):
    """Problem with G replaced by G + shift (a constant vector)."""
    shift = np.asarray(shift, dtype=float).reshape(spec.m)
    G = spec.G

    def G_shifted(t, xi, xbar, x):
        return G(t, xi, xbar, x) + shift

    return replace(spec, G=G_shifted, name=f"{spec.name}+dG")


def solution_distance(a, b):
    """Distance between two solutions on one bundle:

    ( E[sup|dX|^2] + max_k E[ sup_j |dY^k_j|^2 + sum_j |dZ^k_j|^2 dt_j ] )^{1/2}

    using the retained slices of both solutions.
    """
    dX = sup_mean_square_path(a.ensemble.X - b.ensemble.X) ** 2
    dt = a.grid.dt
    worst = 0.0
    for k, sa in a.slices.items():
        sb = b.slices[k]
        dY = np.sum((sa.Y - sb.Y).reshape(sa.Y.shape[0], sa.Y.shape[1], -1) ** 2, axis=2)
        dZ = np.sum((sa.Z - sb.Z).reshape(sa.Z.shape[0], sa.Z.shape[1], -1) ** 2, axis=2)
        val = float(np.mean(dY.max(axis=1) + dZ @ dt[k:]))
        worst = max(worst, val)
    return float(np.sqrt(dX + worst))


def stability_study(spec, scales, grid, paths, seed, tol=1e-12, max_iter=60,
                    config=BsdeConfig(), shift=None, workers=1):
    """Distance between the base solution and the one with G + scale * shift."""
    shift = np.ones(spec.m) if shift is None else np.asarray(shift, dtype=float)
    bundle = sample_brownian(grid, paths, spec.d, seed)
    base = solve_equilibrium(spec, grid, paths, seed, tol, max_iter, config,
                             keep_slices=True, bundle=bundle)

    def one(scale):
        scale = float(scale)
        pert = shift_terminal(spec, scale * shift)
        sol = solve_equilibrium(pert, grid, paths, seed, tol, max_iter, config,
                                keep_slices=True, bundle=bundle)
        dist = solution_distance(base, sol)
        return StabilityRow(scale, dist, dist / scale if scale != 0 else float("nan"))

    return _map(one, list(scales), workers)


# -- output ----------------------------------------------------------------------


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_csv(path, header, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(getattr(r, h)) for h in header])
    return path


def write_convergence_csv(path, rows):
    return write_csv(path, CONVERGENCE_HEADER, rows)


def write_contraction_csv(path, rows):
    return write_csv(path, CONTRACTION_HEADER, rows)


def write_stability_csv(path, rows):
    return write_csv(path, STABILITY_HEADER, rows)


def write_summary(path, entries):
    """Flat ``key = value`` file, keys sorted, with a leading ``generated_at``."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    lines = [f"generated_at = {stamp}"]
    for key in sorted(entries):
        v = entries[key]
        if isinstance(v, (bool, np.bool_)):
            v = "true" if v else "false"
        elif isinstance(v, (float, np.floating)):
            v = repr(float(v))
        lines.append(f"{key} = {v}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_summary(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                key, _, value = line.partition(" = ")
                out[key] = value
    return out
