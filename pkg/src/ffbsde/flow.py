"""Picard map, equilibrium solvers and the stacked classical reduction.

One application of the map Phi to a diagonal input D:

  1. simulate X driven by D,
  2. solve the BSDE member anchored at every partition point t_0..t_{N-1},
  3. read the new diagonal off the members: node j takes the value of the
     member whose interval [t_k, t_{k+1}) contains t_j (last interval closed).

The equilibrium is the fixed point reached by iterating from D = 0 on one
fixed set of Brownian increments.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .bsde import BsdeConfig, solve_bsde_family
from .errors import InvalidArgumentError, UnsupportedReductionError
from .model import Partition, ProblemSpec, make_partition
from .paths import DiagonalProcess, sample_brownian, simulate_forward

NOISE_FLOOR_FACTOR = 10.0
ROUNDOFF_FLOOR = 1e-13


def sup_l2_norm(values):
    """max over nodes of E[|v_j|^2]^{1/2} with its Monte Carlo standard error.

    ``values`` has shape (paths, nodes, ...).  The standard error refers to the
    node attaining the maximum (delta method on the sample mean of |v_j|^2).
    """
    v = np.asarray(values, dtype=float)
    P = v.shape[0]
    sq = np.sum(v.reshape(P, v.shape[1], -1) ** 2, axis=2)
    ms = sq.mean(axis=0)
    j = int(np.argmax(ms))
    norm = float(np.sqrt(ms[j]))
    if norm == 0.0 or P < 2:
        return norm, 0.0
    se_ms = float(sq[:, j].std(ddof=1)) / np.sqrt(P)
    return norm, se_ms / (2.0 * norm)


@dataclass
class PicardReport:
    tol: float
    increments: list = field(default_factory=list)
    standard_errors: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self):
        return len(self.increments)

    def above_floor(self, i):
        inc, se = self.increments[i], self.standard_errors[i]
        return inc > NOISE_FLOOR_FACTOR * se and inc > ROUNDOFF_FLOOR

    def add(self, increment, se):
        self.increments.append(increment)
        self.standard_errors.append(se)
        i = len(self.increments) - 1
        ratio = None
        if i > 0 and self.above_floor(i - 1) and self.above_floor(i):
            ratio = increment / self.increments[i - 1]
        self.ratios.append(ratio)

    @property
    def valid_ratios(self):
        return [r for r in self.ratios if r is not None]

    @property
    def mean_ratio(self):
        r = self.valid_ratios
        return float(np.mean(r)) if r else float("nan")


@dataclass(eq=False)
class EquilibriumSolution:
    """Converged (or last) Picard iterate with its forward paths and BSDE slices.

    ``diag`` is the output of the last map application, so it coincides with
    the kept slices on their windows.  ``ensemble`` is X re-simulated with
    ``diag``; the slices themselves were computed on the paths driven by the
    previous iterate, which differs from ``diag`` by at most ``tol``.
    """

    ensemble: object
    slices: dict
    diag: DiagonalProcess
    report: PicardReport
    partition: Partition
    config: BsdeConfig

    @property
    def grid(self):
        return self.partition.grid


def extract_diagonal(slices, partition, grid):
    if not partition.grid.same_as(grid):
        raise InvalidArgumentError("partition belongs to a different grid")
    pieces = []
    for a, k in enumerate(partition.anchor_indices):
        sl = slices.get(int(k))
        if sl is None:
            raise InvalidArgumentError(f"no BSDE slice for anchor node {k}")
        lo, hi = partition.window(a)
        pieces.append(sl.Y[:, lo - k:hi - k, :])
    return DiagonalProcess(np.concatenate(pieces, axis=1), grid)


def phi_step(spec, grid, bundle, partition, diag_in, config=BsdeConfig(), keep_slices=True):
    """One application of the Picard map.

    Returns ``(diag_out, ensemble, slices)``.  ``keep_slices`` is True (all),
    False (none) or a collection of anchor positions.
    """
    if not partition.grid.same_as(grid) or not bundle.grid.same_as(grid):
        raise InvalidArgumentError("grid, partition and bundle must share the grid")
    ensemble = simulate_forward(spec, diag_in, bundle)
    anchors = partition.anchor_indices
    if keep_slices is True:
        keep = range(len(anchors))
    elif keep_slices is False or keep_slices is None:
        keep = ()
    else:
        keep = keep_slices
    windows = [partition.window(a) for a in range(len(anchors))]
    slices, pieces = solve_bsde_family(spec, ensemble, diag_in, anchors, config,
                                       keep=keep, windows=windows)
    diag_out = DiagonalProcess(np.concatenate(pieces, axis=1), grid)
    return diag_out, ensemble, slices


def solve_pi_equilibrium(spec, grid, partition, paths, seed, tol, max_iter,
                         config=BsdeConfig(), keep_slices=False, bundle=None):
    """Picard iteration of the partitioned flow, starting from a zero diagonal.

    ``bundle`` may be passed to share noise between solves; otherwise it is
    drawn from ``(grid, paths, seed)``.  Exhausting ``max_iter`` returns the
    last iterate with ``report.converged`` False.
    """
    if not tol > 0:
        raise InvalidArgumentError("tol must be positive")
    if int(max_iter) != max_iter or max_iter < 1:
        raise InvalidArgumentError("max_iter must be a positive integer")
    if bundle is None:
        bundle = sample_brownian(grid, paths, spec.d, seed)
    elif bundle.paths != paths:
        raise InvalidArgumentError("bundle path count differs from paths")
    report = PicardReport(tol=float(tol))
    diag = DiagonalProcess.zeros(grid, bundle.paths, spec.m)
    slices = {}
    for _ in range(int(max_iter)):
        new_diag, _, slices = phi_step(spec, grid, bundle, partition, diag, config, keep_slices)
        inc, se = sup_l2_norm(new_diag.Y_diag - diag.Y_diag)
        report.add(inc, se)
        diag = new_diag
        if inc <= tol:
            report.converged = True
            break
    ensemble = simulate_forward(spec, diag, bundle)
    return EquilibriumSolution(ensemble, slices, diag, report, partition, config)


def solve_equilibrium(spec, grid, paths, seed, tol, max_iter, config=BsdeConfig(),
                      keep_slices=False, bundle=None):
    """Equilibrium surrogate: every grid node is an anchor."""
    return solve_pi_equilibrium(spec, grid, make_partition(grid, grid.J), paths, seed,
                                tol, max_iter, config, keep_slices, bundle)


# -- stacked classical system ------------------------------------------------


def stack_coefficients(spec, partition):
    """Rewrite the partitioned flow as one classical FBSDE of backward dimension m*N.

    Block k of the stacked backward state is the member anchored at t_{k-1};
    its driver is zero before t_{k-1}.  The selector picks block k on
    [t_{k-1}, t_k) and the last block on the closed final interval.  Only
    valid when F and G ignore their anchor arguments.
    """
    if spec.depends_on_anchor:
        raise UnsupportedReductionError(
            "stacking requires F and G independent of the anchor arguments (xi, xbar)")
    m, N = spec.m, partition.N
    anchor_times = [float(t) for t in partition.anchors[:-1]]
    bounds = [float(t) for t in partition.anchors]

    def block(s):
        # left-closed intervals, last one closed at T
        for k in range(N - 1):
            if bounds[k] <= s < bounds[k + 1]:
                return k
        return N - 1

    def select(s, ystack):
        k = block(s)
        return ystack[:, k * m:(k + 1) * m]

    def B(s, x, eta):
        return spec.B(s, x, select(s, eta))

    def Sigma(s, x, eta):
        return spec.Sigma(s, x, select(s, eta))

    def F(t, s, xi, xbar, x, eta, y, z):
        P = x.shape[0]
        out = np.zeros((P, m * N))
        eta_sel = select(s, eta)
        for k, tk in enumerate(anchor_times):
            if s < tk:
                continue
            sl = slice(k * m, (k + 1) * m)
            out[:, sl] = spec.driver(tk, s, xi, xbar, x, eta_sel, y[:, sl], z[:, sl, :])
        return out

    def G(t, xi, xbar, x):
        return np.concatenate([spec.terminal(tk, xi, xbar, x) for tk in anchor_times], axis=1)

    return ProblemSpec(
        n=spec.n, m=m * N, d=spec.d, T=spec.T, x0=spec.x0, B=B, Sigma=Sigma, F=F, G=G,
        lipschitz_L=spec.lipschitz_L, rho=lambda u: 0.0 * u, depends_on_anchor=False,
        markovian=spec.markovian, name=f"{spec.name}-stacked{N}")


def unstack_slices(stacked_slice, partition, m):
    """Split a stacked member back into per-anchor arrays on their own windows."""
    out = {}
    for a, k in enumerate(partition.anchor_indices):
        k = int(k)
        sl = slice(a * m, (a + 1) * m)
        off = k - stacked_slice.anchor_index
        out[k] = (stacked_slice.Y[:, off:, sl], stacked_slice.Z[:, off:, sl, :])
    return out


# -- CSV export -----------------------------------------------------------------


def _fmt(v):
    return repr(float(v))


def export_solution_csv(solution, outdir, max_paths=256, full_fields=False, prefix=""):
    """Write diagonal, report and (optionally) slice fields as CSV files.

    Per-path files carry columns path,node,time,component,value for the first
    ``max_paths`` paths; ``*_mean`` files carry node,time,component,value with
    the path average.  Returns the list of written paths.
    """
    os.makedirs(outdir, exist_ok=True)
    written = []
    times = solution.grid.times
    Y = solution.diag.Y_diag
    P = min(max_paths, Y.shape[0])

    fn = os.path.join(outdir, f"{prefix}diagonal.csv")
    with open(fn, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "node", "time", "component", "value"])
        for p in range(P):
            for j in range(Y.shape[1]):
                for c in range(Y.shape[2]):
                    w.writerow([p, j, _fmt(times[j]), c, _fmt(Y[p, j, c])])
    written.append(fn)

    fn = os.path.join(outdir, f"{prefix}diagonal_mean.csv")
    mean = Y.mean(axis=0)
    with open(fn, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "time", "component", "value"])
        for j in range(mean.shape[0]):
            for c in range(mean.shape[1]):
                w.writerow([j, _fmt(times[j]), c, _fmt(mean[j, c])])
    written.append(fn)

    fn = os.path.join(outdir, f"{prefix}picard_report.csv")
    rep = solution.report
    with open(fn, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "increment", "standard_error", "ratio"])
        for i in range(rep.iterations):
            r = rep.ratios[i]
            w.writerow([i + 1, _fmt(rep.increments[i]), _fmt(rep.standard_errors[i]),
                        "" if r is None else _fmt(r)])
    written.append(fn)

    if full_fields and solution.slices:
        fn = os.path.join(outdir, f"{prefix}fields.csv")
        with open(fn, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["anchor", "field", "path", "node", "time", "component", "value"])
            for k in sorted(solution.slices):
                sl = solution.slices[k]
                for p in range(P):
                    for r in range(sl.Y.shape[1]):
                        for c in range(sl.Y.shape[2]):
                            w.writerow([k, "Y", p, k + r, _fmt(times[k + r]), c, _fmt(sl.Y[p, r, c])])
                    Zf = sl.Z.reshape(sl.Z.shape[0], sl.Z.shape[1], -1)
                    for r in range(Zf.shape[1]):
                        for c in range(Zf.shape[2]):
                            w.writerow([k, "Z", p, k + r, _fmt(times[k + r]), c, _fmt(Zf[p, r, c])])
        written.append(fn)
    return written
