"""Problem definitions, time grids, partitions and assumption checks.

Coefficient callables are evaluated on batches of paths.  With ``P`` the batch
size the expected signatures are::

    B(s, x, eta)                        -> (P, n)
    Sigma(s, x, eta)                    -> (P, n, d)
    F(t, s, xi, xbar, x, eta, y, z)     -> (P, m)
    G(t, xi, xbar, x)                   -> (P, m)

where ``x, xi, xbar`` have shape (P, n), ``eta, y`` shape (P, m) and ``z``
shape (P, m, d).  Times ``t`` and ``s`` are Python floats.  Outputs only need
to be broadcastable to the stated shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import CoefficientEvaluationError, InvalidArgumentError

# -- coefficient evaluation helpers ---------------------------------------


def call_coefficient(name, fn, args, shape):
    """Evaluate ``fn(*args)``, broadcast to ``shape`` and reject non-finite output."""
    try:
        out = fn(*args)
    except (ArithmeticError, ValueError, TypeError) as exc:
        raise CoefficientEvaluationError(name, _describe(args), repr(exc)) from exc
    try:
        out = np.broadcast_to(np.asarray(out, dtype=float), shape)
    except ValueError as exc:
        raise CoefficientEvaluationError(
            name, _describe(args), f"output not broadcastable to {shape}") from exc
    if not np.all(np.isfinite(out)):
        raise CoefficientEvaluationError(name, _describe(args), "non-finite output")
    return out


def _describe(args):
    parts = []
    for a in args:
        if np.ndim(a) == 0:
            parts.append(f"{float(a):.6g}")
        else:
            parts.append(f"array{np.shape(a)}")
    return "(" + ", ".join(parts) + ")"


# -- problem ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """A flow of forward-backward SDEs together with its declared assumption data.

    ``depends_on_anchor`` says whether F and G use their ``xi``/``xbar``
    arguments.  ``markovian`` must be true for the regression solvers: the
    coefficients are deterministic functions of the arguments listed above.
    ``anchor_batched`` declares that F and G also accept an extra anchor axis:
    ``t`` of shape (1, K, 1) and the other arguments broadcastable to
    (P, K, ...), with output broadcastable to (P, K, m).  Solvers then
    evaluate all K anchors in one call.
    """

    n: int
    m: int
    d: int
    T: float
    x0: np.ndarray
    B: Callable
    Sigma: Callable
    F: Callable
    G: Callable
    lipschitz_L: float = 1.0
    rho: Callable = field(default=lambda u: u)
    depends_on_anchor: bool = True
    markovian: bool = True
    name: str = "custom"
    anchor_batched: bool = False

    def __post_init__(self):
        for key in ("n", "m", "d"):
            v = getattr(self, key)
            if int(v) != v or v < 1:
                raise InvalidArgumentError(f"{key} must be a positive integer, got {v}")
        if not self.T > 0:
            raise InvalidArgumentError(f"horizon T must be positive, got {self.T}")
        x0 = np.array(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.n,):
            raise InvalidArgumentError(f"x0 must have length n={self.n}, got {x0.shape}")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "T", float(self.T))
        if not self.lipschitz_L > 0:
            raise InvalidArgumentError("lipschitz_L must be positive")
        _check_rho(self.rho, self.T)

    # batched evaluation with shape/finiteness checks
    def drift(self, s, x, eta):
        return call_coefficient("B", self.B, (s, x, eta), (x.shape[0], self.n))

    def diffusion(self, s, x, eta):
        return call_coefficient("Sigma", self.Sigma, (s, x, eta), (x.shape[0], self.n, self.d))

    def driver(self, t, s, xi, xbar, x, eta, y, z):
        return call_coefficient(
            "F", self.F, (t, s, xi, xbar, x, eta, y, z), (x.shape[0], self.m))

    def terminal(self, t, xi, xbar, x):
        return call_coefficient("G", self.G, (t, xi, xbar, x), (x.shape[0], self.m))


def _check_rho(rho, T, samples=65):
    u = np.linspace(0.0, T, samples)
    vals = np.array([float(rho(v)) for v in u])
    if vals[0] != 0.0:
        raise InvalidArgumentError(f"rho(0) must be 0, got {vals[0]}")
    if not np.all(np.isfinite(vals)) or np.any(np.diff(vals) < 0):
        raise InvalidArgumentError("rho must be finite and non-decreasing on [0, T]")


# -- grids and partitions --------------------------------------------------


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        if t.size < 2 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise InvalidArgumentError("grid times must start at 0 and increase strictly")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)
        dt = np.diff(t)
        dt.setflags(write=False)
        object.__setattr__(self, "dt", dt)

    @property
    def J(self):
        return self.times.size - 1

    @property
    def T(self):
        return float(self.times[-1])

    def same_as(self, other):
        return self is other or np.array_equal(self.times, other.times)


def make_uniform_grid(T, J):
    if not T > 0:
        raise InvalidArgumentError(f"T must be positive, got {T}")
    if int(J) != J or J < 1:
        raise InvalidArgumentError(f"J must be a positive integer, got {J}")
    return TimeGrid(np.linspace(0.0, float(T), int(J) + 1))


@dataclass(frozen=True, eq=False)
class Partition:
    """Anchor nodes 0 = t_0 < ... < t_N = T, all taken from ``grid``.

    ``indices`` are grid node indices of all N+1 points.  ``owner[j]`` is the
    anchor position k such that grid time j lies in [t_k, t_{k+1}); the last
    interval is closed.
    """

    grid: TimeGrid
    indices: np.ndarray

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64).reshape(-1)
        J = self.grid.J
        if idx.size < 2 or idx[0] != 0 or idx[-1] != J or np.any(np.diff(idx) <= 0):
            raise InvalidArgumentError("partition must run from node 0 to node J strictly increasing")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        owner = np.empty(J + 1, dtype=np.int64)
        for k in range(idx.size - 1):
            owner[idx[k]:idx[k + 1]] = k
        owner[J] = idx.size - 2
        owner.setflags(write=False)
        object.__setattr__(self, "owner", owner)

    @property
    def N(self):
        return self.indices.size - 1

    @property
    def anchors(self):
        """Times of all partition points t_0..t_N (grid values, bit-exact)."""
        return self.grid.times[self.indices]

    @property
    def anchor_indices(self):
        """Grid indices of the N anchors t_0..t_{N-1} that carry a BSDE."""
        return self.indices[:-1]

    @property
    def mesh(self):
        return float(np.max(np.diff(self.anchors)))

    def window(self, k):
        """Grid-node range [lo, hi) on which anchor ``k`` feeds the diagonal."""
        lo = int(self.indices[k])
        hi = int(self.indices[k + 1]) if k < self.N - 1 else self.grid.J + 1
        return lo, hi


def make_partition(grid, N):
    """Uniform partition with N intervals; anchors snap to the nearest grid nodes."""
    if int(N) != N or N < 1:
        raise InvalidArgumentError(f"N must be a positive integer, got {N}")
    N = int(N)
    J = grid.J
    if N > J:
        raise InvalidArgumentError(f"N={N} exceeds grid resolution J={J}")
    if J % N == 0:
        idx = np.arange(0, J + 1, J // N)
    else:
        targets = np.linspace(0.0, grid.T, N + 1)
        idx = np.abs(grid.times[None, :] - targets[:, None]).argmin(axis=1)
        if np.any(np.diff(idx) <= 0):
            raise InvalidArgumentError(f"N={N} anchors do not map to distinct grid nodes")
    return Partition(grid, idx)


def partition_from_times(grid, times):
    """Partition whose points are the grid nodes exactly equal to ``times``."""
    idx = []
    for t in times:
        hit = np.flatnonzero(grid.times == t)
        if hit.size != 1:
            raise InvalidArgumentError(f"partition point {t} is not a grid node")
        idx.append(int(hit[0]))
    return Partition(grid, idx)


# -- assumption spot checks ------------------------------------------------


@dataclass
class ValidationReport:
    R: float
    lipschitz_ratios: dict
    modulus_ratio: float
    violations: list

    @property
    def max_lipschitz_ratio(self):
        return max(self.lipschitz_ratios.values()) if self.lipschitz_ratios else 0.0

    @property
    def ok(self):
        return not self.violations


def _norm(a):
    a = np.asarray(a)
    return np.sqrt(np.sum(a.reshape(a.shape[0], -1) ** 2, axis=1))


def validate_problem(spec, probe_count=32, seed=0):
    """Estimate R and spot-check the Lipschitz and time-modulus declarations.

    R is computed with a midpoint rule on ``probe_count`` nodes (coefficients
    are deterministic, so the expectations are trivial).  Lipschitz ratios
    perturb one argument group at a time on random probe points.  Violations
    are listed, never raised.
    """
    if probe_count < 2:
        raise InvalidArgumentError("probe_count must be at least 2")
    n, m, d, T = spec.n, spec.m, spec.d, spec.T
    one_n = np.zeros((1, n))
    one_m = np.zeros((1, m))
    one_z = np.zeros((1, m, d))
    s_mid = (np.arange(probe_count) + 0.5) * T / probe_count
    h = T / probe_count

    B0 = sum(_norm(spec.drift(s, one_n, one_m))[0] for s in s_mid) * h
    S0 = sum(_norm(spec.diffusion(s, one_n, one_m))[0] ** 2 for s in s_mid) * h
    sup_t = 0.0
    t_probe = np.linspace(0.0, T, probe_count)
    for t in t_probe:
        hs = (T - t) / probe_count
        s_in = t + (np.arange(probe_count) + 0.5) * hs
        Fint = sum(_norm(spec.driver(t, s, one_n, one_n, one_n, one_m, one_m, one_z))[0]
                   for s in s_in) * hs
        G0 = _norm(spec.terminal(t, one_n, one_n, one_n))[0]
        sup_t = max(sup_t, Fint ** 2 + G0 ** 2)
    R = float(B0 ** 2 + S0 + sup_t)

    rng = np.random.default_rng(seed)
    P = probe_count
    L = spec.lipschitz_L
    ratios = {"B": 0.0, "Sigma": 0.0, "F": 0.0, "G": 0.0}
    mod_ratio = 0.0
    for _ in range(4):
        s = float(rng.uniform(0.0, T))
        t = float(rng.uniform(0.0, s))
        args = {
            "xi": rng.standard_normal((P, n)), "xbar": rng.standard_normal((P, n)),
            "x": rng.standard_normal((P, n)), "eta": rng.standard_normal((P, m)),
            "y": rng.standard_normal((P, m)), "z": rng.standard_normal((P, m, d)),
        }

        def evaluate(which, a, tt=t):
            if which == "B":
                return spec.drift(s, a["x"], a["eta"])
            if which == "Sigma":
                return spec.diffusion(s, a["x"], a["eta"])
            if which == "F":
                return spec.driver(tt, s, a["xi"], a["xbar"], a["x"], a["eta"], a["y"], a["z"])
            return spec.terminal(tt, a["xi"], a["xbar"], a["x"])

        groups = {
            "B": ("x", "eta"), "Sigma": ("x", "eta"),
            "F": ("xi", "xbar", "x", "eta", "y", "z"), "G": ("xi", "xbar", "x"),
        }
        for which, keys in groups.items():
            base = evaluate(which, args)
            for key in keys:
                moved = dict(args)
                delta = rng.standard_normal(args[key].shape)
                moved[key] = args[key] + delta
                r = _norm(evaluate(which, moved) - base) / _norm(delta)
                ratios[which] = max(ratios[which], float(np.max(r)))

        t2 = float(rng.uniform(0.0, s))
        gap = spec.rho(abs(t - t2))
        if gap > 0:
            diff = (_norm(evaluate("F", args, t) - evaluate("F", args, t2))
                    + _norm(evaluate("G", args, t) - evaluate("G", args, t2)))
            scale = 1.0 + sum(_norm(args[k]) for k in ("xi", "xbar", "x", "eta", "y", "z"))
            mod_ratio = max(mod_ratio, float(np.max(diff / (gap * scale))))

    violations = []
    for which, r in ratios.items():
        if r > L * (1 + 1e-9):
            violations.append(f"lipschitz:{which} observed {r:.6g} > L={L:.6g}")
    if mod_ratio > 1 + 1e-9:
        violations.append(f"modulus: observed ratio {mod_ratio:.6g} > 1")
    return ValidationReport(R=R, lipschitz_ratios=ratios, modulus_ratio=mod_ratio,
                            violations=violations)
