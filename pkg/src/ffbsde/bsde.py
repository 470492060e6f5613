"""Explicit least-squares Monte Carlo solver for the BSDE family.

For an anchor node k, with Ê_j the regression estimate at node j,

    Y_J = G(t_k, X_k, Ê_k[X_J], X_J)
    Z_j = Ê_j[Y_{j+1} dW_j^T] / dt_j
    Y_j = Ê_j[Y_{j+1}] + F(t_k, t_j, X_k, Ê_k[X_j], X_j, D_j, Ê_j[Y_{j+1}], Z_j) dt_j

for j = J-1, ..., k, where D is the frozen diagonal input.  All anchors share
the regression at node j, so the family is solved in a single backward sweep.
Members whose next value is constant across paths are propagated exactly:
Ê_j[Y_{j+1}] is that constant and Z_j is zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .condexp import Projector, RegressionBasis, _constant_columns
from .model import call_coefficient
from .errors import BlowUpError, InvalidArgumentError, UnsupportedProblemError


# path chunk size (in array elements) for the pathwise part of the sweep
CHUNK_ELEMENTS = 1 << 14


@dataclass(frozen=True)
class BsdeConfig:
    degree: int = 2
    ridge: float = 0.0


@dataclass(frozen=True, eq=False)
class BsdeSlice:
    """(Y, Z) of the member anchored at grid node ``anchor_index``.

    ``Y[:, r]`` is the value at node ``anchor_index + r`` (r = 0..J-k) and
    ``Z[:, r]`` the (m, d) integrand on step ``anchor_index + r`` (r = 0..J-k-1).
    """

    anchor_index: int
    Y: np.ndarray
    Z: np.ndarray

    def Y_at(self, node):
        return self.Y[:, node - self.anchor_index]


def _check_inputs(spec, ensemble, diag):
    if not spec.markovian:
        raise UnsupportedProblemError("regression scheme requires markovian coefficients")
    if not diag.grid.same_as(ensemble.grid):
        raise InvalidArgumentError("ensemble and diagonal live on different grids")
    if diag.paths != ensemble.paths:
        raise InvalidArgumentError("ensemble and diagonal have different path counts")
    if diag.m != spec.m:
        raise InvalidArgumentError("diagonal dimension does not match m")


def solve_bsde_family(spec, ensemble, diag, anchors, config=BsdeConfig(), keep=(),
                      windows=None):
    """Solve every member anchored at ``anchors`` (strictly increasing grid indices).

    ``keep`` lists anchor positions whose full (Y, Z) are retained; ``windows``
    optionally gives, per anchor position, a node range [lo, hi) whose Y values
    are copied out.  Returns ``(slices, window_values)`` with ``slices`` keyed
    by anchor grid index.
    """
    _check_inputs(spec, ensemble, diag)
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1)
    grid = ensemble.grid
    J = grid.J
    if anchors.size == 0 or np.any(np.diff(anchors) <= 0) or anchors[0] < 0 or anchors[-1] > J:
        raise InvalidArgumentError("anchors must be strictly increasing grid indices")
    X = ensemble.X
    dW_all = ensemble.bundle.increments
    times = grid.times
    P, n, m, d = X.shape[0], spec.n, spec.m, spec.d
    K = anchors.size
    keep = set(int(a) for a in keep) if keep is not True else set(range(K))
    basis = RegressionBasis(config.degree, n)

    # E_{t_k}[X_j] for every j, stored as regression coefficients on the
    # anchor-node design so it can be evaluated node by node
    flatX = X.reshape(P, (J + 1) * n)
    constX = _constant_columns(flatX)
    anchor_design = np.empty((basis.size, P, K))
    anchor_coef = np.empty((K, basis.size, J + 1, n))
    for a, k in enumerate(anchors):
        proj = Projector(X[:, k, :], basis, config.ridge)
        anchor_design[:, :, a] = basis.design((X[:, k, :] - proj.center) / proj.scale).T
        anchor_coef[a] = proj.coefficients(flatX, constX).reshape(basis.size, J + 1, n)
    t_anchor = times[anchors]

    def _driver(t, s, xi, xbar, x, eta, y, z):
        shape = (z.shape[0], m) if np.ndim(t) == 0 else (z.shape[0], z.shape[1], m)
        return call_coefficient("F", spec.F, (t, s, xi, xbar, x, eta, y, z), shape)

    def _terminal(t, xi, xbar, x):
        shape = (xi.shape[0], m) if np.ndim(t) == 0 else (xi.shape[0], xi.shape[1], m)
        return call_coefficient("G", spec.G, (t, xi, xbar, x), shape)
    XI = np.ascontiguousarray(X[:, anchors, :])  # (P, K, n)

    def xbar_at(rows, j, Ka):
        out = anchor_design[0, rows, :Ka, None] * anchor_coef[:Ka, 0, j, :]
        for q in range(1, basis.size):
            out += anchor_design[q, rows, :Ka, None] * anchor_coef[:Ka, q, j, :]
        return out

    def batched(fn, Ka, arrays, lead=()):
        """F or G for anchors 0..Ka-1; ``arrays`` broadcast to (c, Ka, ...)."""
        c = arrays[0].shape[0]
        if spec.anchor_batched:
            return fn(t_anchor[None, :Ka, None], *lead, *arrays)
        out = np.empty((c, Ka, m))
        for a in range(Ka):
            args = [v[:, a if v.shape[1] > 1 else 0] for v in arrays]
            out[:, a] = fn(float(t_anchor[a]), *lead, *args)
        return out

    kept_Y = {a: np.empty((P, J + 1 - anchors[a], m)) for a in keep}
    kept_Z = {a: np.empty((P, J - anchors[a], m, d)) for a in keep}
    win_out = None
    if windows is not None:
        win_out = [np.empty((P, hi - lo, m)) for lo, hi in windows]

    def record(Ka, j, Y):
        for a in kept_Y:
            if a < Ka:
                kept_Y[a][:, j - anchors[a]] = Y[:, a]
        if win_out is not None:
            for a in range(Ka):
                lo, hi = windows[a]
                if lo <= j < hi:
                    win_out[a][:, j - lo] = Y[:, a]

    # Ycur[:, a] is the current value of the member anchored at anchors[a];
    # column extremes are tracked so constant columns are known without a pass
    XJ = X[:, J, :]
    xbarJ = xbar_at(slice(None), J, K)
    Ycur = np.array(batched(_terminal, K, (XI, xbarJ, XJ[:, None, :])), order="C")
    if not np.all(np.isfinite(Ycur)):
        raise BlowUpError("terminal value", J)
    record(K, J, Ycur)
    ymin = Ycur.min(axis=0).reshape(-1)
    ymax = Ycur.max(axis=0).reshape(-1)

    for j in range(J - 1, -1, -1):
        Ka = int(np.searchsorted(anchors, j, side="right"))
        if Ka == 0:
            break
        q = Ka * m
        dt = float(grid.dt[j])
        tj = float(times[j])
        proj = Projector(X[:, j, :], basis, config.ridge)
        Yflat = Ycur[:, :Ka].reshape(P, q)
        C1, C2 = proj.noise_coefficients(Yflat, dW_all[:, j, :])
        C2 /= dt
        const = ymin[:q] == ymax[:q]
        any_const = bool(const.any())
        if any_const:
            # E_j[c dW_j] = 0 exactly for a constant c
            C2.reshape(C2.shape[0], q, d)[:, const, :] = 0.0
        new_min = np.full(q, np.inf)
        new_max = np.full(q, -np.inf)
        step = max(1, CHUNK_ELEMENTS // (q * max(d, n)))
        if keep:
            Zfull = np.empty((P, Ka, m, d))
        for c0 in range(0, P, step):
            sl = slice(c0, min(P, c0 + step))
            U = proj.U[sl]
            Yhat = U @ C1
            if any_const:
                Yhat[:, const] = Yflat[sl][:, const]
            c = Yhat.shape[0]
            Yhat = Yhat.reshape(c, Ka, m)
            Z = (U @ C2).reshape(c, Ka, m, d)
            xbar = xbar_at(sl, j, Ka)
            f = batched(_driver, Ka, (
                XI[sl, :Ka], xbar, X[sl, j, None, :], diag.Y_diag[sl, j, None, :], Yhat, Z),
                lead=(tj,))
            Ynew = Ycur[sl, :Ka]
            np.multiply(f, dt, out=Ynew)
            Ynew += Yhat
            flat = Ynew.reshape(c, q)
            np.minimum(new_min, flat.min(axis=0), out=new_min)
            np.maximum(new_max, flat.max(axis=0), out=new_max)
            if keep:
                Zfull[sl] = Z
        if not (np.all(np.isfinite(new_min)) and np.all(np.isfinite(new_max))):
            raise BlowUpError("backward value Y", j)
        ymin[:q] = new_min
        ymax[:q] = new_max
        record(Ka, j, Ycur)
        for a in kept_Z:
            if a < Ka:
                kept_Z[a][:, j - anchors[a]] = Zfull[:, a]

    slices = {int(anchors[a]): BsdeSlice(int(anchors[a]), kept_Y[a], kept_Z[a]) for a in keep}
    return slices, win_out


def solve_bsde(spec, ensemble, diag, anchor_index, config=BsdeConfig()):
    """Solve the single member anchored at grid node ``anchor_index``."""
    if not 0 <= anchor_index <= ensemble.grid.J:
        raise InvalidArgumentError(f"anchor index {anchor_index} outside the grid")
    slices, _ = solve_bsde_family(spec, ensemble, diag, [anchor_index], config, keep=True)
    return slices[int(anchor_index)]
