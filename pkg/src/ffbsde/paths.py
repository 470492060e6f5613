"""Seeded Brownian increments and Euler-Maruyama simulation of the forward state."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BlowUpError, InvalidArgumentError
from .model import ProblemSpec, TimeGrid


@dataclass(frozen=True, eq=False)
class BrownianBundle:
    """Gaussian increments of shape (paths, J, d) with variance dt per step."""

    increments: np.ndarray
    seed: int
    grid: TimeGrid

    @property
    def paths(self):
        return self.increments.shape[0]

    @property
    def d(self):
        return self.increments.shape[2]

    def brownian_paths(self):
        """W at every grid node, shape (paths, J+1, d); W_0 = 0."""
        W = np.zeros((self.paths, self.grid.J + 1, self.d))
        np.cumsum(self.increments, axis=1, out=W[:, 1:])
        return W


@dataclass(frozen=True, eq=False)
class DiagonalProcess:
    """Feedback process s -> Y^s_s sampled on the grid, shape (paths, J+1, m)."""

    Y_diag: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        Y = np.asarray(self.Y_diag, dtype=float)
        if Y.ndim != 3 or Y.shape[1] != self.grid.J + 1:
            raise InvalidArgumentError(
                f"diagonal must have shape (paths, {self.grid.J + 1}, m), got {Y.shape}")
        if not np.all(np.isfinite(Y)):
            raise InvalidArgumentError("diagonal has non-finite entries")
        object.__setattr__(self, "Y_diag", Y)

    @classmethod
    def zeros(cls, grid, paths, m):
        return cls(np.zeros((paths, grid.J + 1, m)), grid)

    @property
    def paths(self):
        return self.Y_diag.shape[0]

    @property
    def m(self):
        return self.Y_diag.shape[2]


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Forward state X of shape (paths, J+1, n) and the noise that produced it."""

    X: np.ndarray
    bundle: BrownianBundle
    spec: ProblemSpec

    @property
    def grid(self):
        return self.bundle.grid

    @property
    def paths(self):
        return self.X.shape[0]


def sample_brownian(grid, paths, d, seed):
    if int(paths) != paths or paths < 1:
        raise InvalidArgumentError(f"paths must be a positive integer, got {paths}")
    if int(d) != d or d < 1:
        raise InvalidArgumentError(f"d must be a positive integer, got {d}")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((int(paths), grid.J, int(d)))
    z *= np.sqrt(grid.dt)[None, :, None]
    z.setflags(write=False)
    return BrownianBundle(z, seed, grid)


def simulate_forward(spec, diag, bundle):
    """Euler-Maruyama with the diagonal taken at the left end of each step.

    X_{j+1} = X_j + B(t_j, X_j, Y_j) dt_j + Sigma(t_j, X_j, Y_j) dW_j.
    """
    grid = bundle.grid
    if not diag.grid.same_as(grid):
        raise InvalidArgumentError("diagonal and Brownian bundle live on different grids")
    if diag.paths != bundle.paths:
        raise InvalidArgumentError(
            f"diagonal has {diag.paths} paths, bundle has {bundle.paths}")
    if diag.m != spec.m or bundle.d != spec.d:
        raise InvalidArgumentError("diagonal/bundle dimensions do not match the problem")
    P, J = bundle.paths, grid.J
    X = np.empty((P, J + 1, spec.n))
    X[:, 0, :] = spec.x0
    dW = bundle.increments
    for j in range(J):
        s = float(grid.times[j])
        x = X[:, j, :]
        eta = diag.Y_diag[:, j, :]
        drift = spec.drift(s, x, eta)
        vol = spec.diffusion(s, x, eta)
        X[:, j + 1, :] = x + drift * grid.dt[j] + np.einsum("pnd,pd->pn", vol, dW[:, j, :])
        bad = ~np.isfinite(X[:, j + 1, :]).all(axis=1)
        if bad.any():
            raise BlowUpError("forward state", j + 1, int(np.flatnonzero(bad)[0]))
    X.setflags(write=False)
    return PathEnsemble(X, bundle, spec)


# -- debug dump -------------------------------------------------------------
# Layout: three little-endian int64 (paths, J+1, n), then X as little-endian
# float64 in row-major (path, node, component) order.


def dump_ensemble(ensemble, path):
    X = ensemble.X
    with open(path, "wb") as fh:
        fh.write(np.asarray(X.shape, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(X, dtype="<f8").tobytes())


def load_ensemble_array(path):
    with open(path, "rb") as fh:
        header = np.frombuffer(fh.read(24), dtype="<i8")
        data = np.frombuffer(fh.read(), dtype="<f8")
    shape = tuple(int(v) for v in header)
    if data.size != np.prod(shape):
        raise InvalidArgumentError(f"dump size mismatch: header {shape}, {data.size} values")
    return data.reshape(shape).astype(float)
