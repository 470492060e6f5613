"""Independent reference solutions.

Affine family (n = m = d = 1)::

    B = b x + bbar eta,   Sigma = sigma,
    F = f1 x + f2 eta + f3 y + f4(t),
    G = g1 x + g2 xi + g3 xbar + g4(t).

If the diagonal is affine, D_s = abar(s) X_s + hbar(s), then X has drift
beta(s) X + gamma(s) with beta = b + bbar abar, gamma = bbar hbar, and
E_t[X_s] = phi(t,s) X_t + psi(t,s).  Substituting

    Y^t_s = A(t,s) X_s + P(t,s) X_t + Q(t,s) E_t[X_s] + h(t,s)

into dY^t_s = -F ds + Z dW and matching the coefficients of X_s, X_t,
E_t[X_s] and 1 gives, backwards from s = T,

    A' = -(beta + f3) A - f1 - f2 abar          A(T) = g1
    P' = -f3 P                                  P(T) = g2
    Q' = -(beta + f3) Q                         Q(T) = g3
    h' = -(A + Q) gamma - f2 hbar - f3 h - f4(t)   h(T) = g4(t)

with Z = A sigma.  None of A, P, Q depends on the anchor t here, only h.
The diagonal of the output is abar = A + P + Q and hbar(s) = h(s, s); the
map (abar, hbar) -> (abar_out, hbar_out) is the Picard map in closed form and
is iterated to its fixed point.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from .condexp import Projector, RegressionBasis
from .errors import InvalidArgumentError, OracleDivergenceError, UnsupportedProblemError
from .model import ProblemSpec


def _zero(t):
    return 0.0


def _time_lipschitz(fn, T, samples=2049):
    t = np.linspace(0.0, T, samples)
    v = np.array([float(fn(s)) for s in t])
    return float(np.max(np.abs(np.diff(v)) / np.diff(t))) if samples > 1 else 0.0


@dataclass(frozen=True)
class AffineProblemSpec:
    b: float = 0.0
    bbar: float = 0.0
    sigma: float = 0.0
    f1: float = 0.0
    f2: float = 0.0
    f3: float = 0.0
    f4: Callable = _zero
    g1: float = 0.0
    g2: float = 0.0
    g3: float = 0.0
    g4: Callable = _zero
    x0: float = 1.0
    T: float = 0.5

    @property
    def depends_on_anchor(self):
        return self.g2 != 0.0 or self.g3 != 0.0

    def to_problem_spec(self):
        b, bbar, sigma = self.b, self.bbar, self.sigma
        f1, f2, f3, f4 = self.f1, self.f2, self.f3, self.f4
        g1, g2, g3, g4 = self.g1, self.g2, self.g3, self.g4

        def B(s, x, eta):
            return b * x + bbar * eta

        def Sigma(s, x, eta):
            return np.full((x.shape[0], 1, 1), sigma)

        def F(t, s, xi, xbar, x, eta, y, z):
            return f1 * x + f2 * eta + f3 * y + f4(t)

        def G(t, xi, xbar, x):
            return g1 * x + g2 * xi + g3 * xbar + g4(t)

        L = max(abs(b), abs(bbar), abs(f1), abs(f2), abs(f3),
                abs(g1), abs(g2), abs(g3), 1e-12)
        c = _time_lipschitz(f4, self.T) + _time_lipschitz(g4, self.T)
        return ProblemSpec(
            n=1, m=1, d=1, T=self.T, x0=[self.x0], B=B, Sigma=Sigma, F=F, G=G,
            lipschitz_L=L, rho=lambda u, c=c: c * u,
            depends_on_anchor=self.depends_on_anchor, markovian=True, name="affine",
            anchor_batched=True)


@dataclass(eq=False)
class AffineOracleSolution:
    """Reference fields on the fine grid ``s`` (K+1 nodes).

    ``h[i, j]`` is h(s_i, s_j) for j >= i (NaN below the diagonal).
    ``phi``/``psi`` give E_{s_i}[X_{s_j}] = phi[i, j] X_{s_i} + psi[i, j].
    """

    s: np.ndarray
    A: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    h: np.ndarray
    abar: np.ndarray
    hbar: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    sigma: float
    iterations: int
    increments: list = field(default_factory=list)

    @property
    def Z(self):
        return self.A * self.sigma

    def _interp(self, values, times):
        times = np.asarray(times, dtype=float)
        idx = np.searchsorted(self.s, times)
        exact = (idx < self.s.size) & (self.s[np.minimum(idx, self.s.size - 1)] == times)
        if np.all(exact):
            return values[idx]
        return CubicSpline(self.s, values)(times)

    def diagonal_coefficients(self, times):
        return self._interp(self.abar, times), self._interp(self.hbar, times)

    def diagonal_on_paths(self, X, times):
        """Oracle diagonal abar(t_j) X_j + hbar(t_j) on simulated paths (P, J+1, 1)."""
        a, h = self.diagonal_coefficients(times)
        return a[None, :, None] * X + h[None, :, None]

    def mean_state(self, x0):
        """E[X_s] on the fine grid."""
        return self.phi[0] * x0 + self.psi[0]


def _rk4_backward(rhs, y_T, s):
    """Classical RK4 from s[-1] down to s[0]; returns values on every node."""
    K = s.size - 1
    out = np.empty((K + 1,) + np.shape(y_T))
    out[K] = y_T
    y = np.array(y_T, dtype=float)
    for i in range(K, 0, -1):
        h = s[i - 1] - s[i]
        si, sm, so = s[i], 0.5 * (s[i] + s[i - 1]), s[i - 1]
        k1 = rhs(si, y)
        k2 = rhs(sm, y + 0.5 * h * k1)
        k3 = rhs(sm, y + 0.5 * h * k2)
        k4 = rhs(so, y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[i - 1] = y
    return out


def _rk4_forward(rhs, y0, s):
    K = s.size - 1
    out = np.empty((K + 1,) + np.shape(y0))
    out[0] = y0
    y = np.array(y0, dtype=float)
    for i in range(K):
        h = s[i + 1] - s[i]
        sm = 0.5 * (s[i] + s[i + 1])
        k1 = rhs(s[i], y)
        k2 = rhs(sm, y + 0.5 * h * k1)
        k3 = rhs(sm, y + 0.5 * h * k2)
        k4 = rhs(s[i + 1], y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[i + 1] = y
    return out


def affine_phi_map(aspec, s, abar_in, hbar_in):
    """Closed-form Picard map on affine diagonals sampled on the fine grid ``s``.

    Returns a dict with the output fields (A, P, Q, h, abar, hbar, phi, psi).
    """
    a_fn = CubicSpline(s, abar_in)
    h_fn = CubicSpline(s, hbar_in)
    K = s.size - 1
    b, bbar, f1, f2, f3 = aspec.b, aspec.bbar, aspec.f1, aspec.f2, aspec.f3
    f4 = np.array([float(aspec.f4(t)) for t in s])
    g4 = np.array([float(aspec.g4(t)) for t in s])

    # state layout: [A, P, Q, h(t_0..t_K)]
    def rhs(u, y):
        ab, hb = a_fn(u), h_fn(u)
        beta = b + bbar * ab
        gamma = bbar * hb
        A, P, Q, h = y[0], y[1], y[2], y[3:]
        out = np.empty_like(y)
        out[0] = -(beta + f3) * A - f1 - f2 * ab
        out[1] = -f3 * P
        out[2] = -(beta + f3) * Q
        out[3:] = -(A + Q) * gamma - f2 * hb - f3 * h - f4
        return out

    yT = np.concatenate([[aspec.g1, aspec.g2, aspec.g3], g4])
    sol = _rk4_backward(rhs, yT, s)
    A, P, Q = sol[:, 0], sol[:, 1], sol[:, 2]
    h = sol[:, 3:].T.copy()  # h[anchor, s]
    h[np.tril_indices(K + 1, -1)] = np.nan

    # conditional mean via the fundamental solution E(s) = exp(int_0^s beta)
    # and C(s) = int_0^s gamma / E: phi = E_s / E_t, psi = E_s (C_s - C_t)
    def mean_rhs(u, y):
        return np.array([(b + bbar * a_fn(u)) * y[0], bbar * h_fn(u) / y[0]])

    EC = _rk4_forward(mean_rhs, np.array([1.0, 0.0]), s)
    E, C = EC[:, 0], EC[:, 1]
    phi = E[None, :] / E[:, None]
    psi = E[None, :] * (C[None, :] - C[:, None])
    lower = np.tril_indices(K + 1, -1)
    phi[lower] = np.nan
    psi[lower] = np.nan

    return {"A": A, "P": P, "Q": Q, "h": h, "abar": A + P + Q,
            "hbar": np.diag(h).copy(), "phi": phi, "psi": psi}


def solve_affine_oracle(aspec, fine_steps=512, fp_tol=1e-12, fp_max_iter=200):
    """Fixed point of ``affine_phi_map`` starting from the zero diagonal."""
    if fine_steps < 64:
        raise InvalidArgumentError("fine_steps must be at least 64")
    s = np.linspace(0.0, aspec.T, int(fine_steps) + 1)
    abar = np.zeros_like(s)
    hbar = np.zeros_like(s)
    increments = []
    for it in range(1, int(fp_max_iter) + 1):
        # a diverging fixed point overflows; that is reported below
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = affine_phi_map(aspec, s, abar, hbar)
            inc = max(np.max(np.abs(out["abar"] - abar)), np.max(np.abs(out["hbar"] - hbar)))
        increments.append(float(inc))
        if not np.isfinite(inc):
            raise OracleDivergenceError(
                f"affine oracle fixed point diverged at iteration {it} (non-finite fields)")
        abar, hbar = out["abar"], out["hbar"]
        if inc <= fp_tol:
            return AffineOracleSolution(s=s, A=out["A"], P=out["P"], Q=out["Q"], h=out["h"],
                                        abar=abar, hbar=hbar, phi=out["phi"], psi=out["psi"],
                                        sigma=aspec.sigma, iterations=it,
                                        increments=increments)
    raise OracleDivergenceError(
        f"affine oracle fixed point not reached in {fp_max_iter} iterations "
        f"(last increment {increments[-1]:.3g})")


def export_affine_oracle_csv(solution, path):
    """One row per fine-grid pair t <= s.

    The diagonal is abar(s) x + hbar(s); on t = s rows the ``diagonal`` column
    holds the intercept hbar(s) (abar(s) is A + P + Q on the same row), other
    rows leave it empty.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    s = solution.s
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "s", "A", "P", "Q", "h", "diagonal"])
        for i in range(s.size):
            for j in range(i, s.size):
                diag = repr(float(solution.hbar[j])) if i == j else ""
                w.writerow([repr(float(s[i])), repr(float(s[j])), repr(float(solution.A[j])),
                            repr(float(solution.P[j])), repr(float(solution.Q[j])),
                            repr(float(solution.h[i, j])), diag])
    return path


# -- deterministic oracle ----------------------------------------------------


@dataclass(eq=False)
class DeterministicOracleSolution:
    s: np.ndarray
    X: np.ndarray        # (K+1, n)
    Y: np.ndarray        # (K+1 anchors, K+1 nodes, m); NaN before the anchor
    diag: np.ndarray     # (K+1, m)
    iterations: int


def _assert_no_noise(spec, probes=16, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(probes):
        s = float(rng.uniform(0.0, spec.T))
        x = rng.standard_normal((4, spec.n))
        eta = rng.standard_normal((4, spec.m))
        if np.any(spec.diffusion(s, x, eta) != 0.0):
            raise InvalidArgumentError("deterministic oracle needs Sigma identically zero")


def _row(v, k):
    return np.broadcast_to(np.asarray(v, dtype=float), (1, k)).reshape(k)


def _members_batched(spec, s, X, Xs, D):
    """All members at once: row r of the state is the member anchored at s_r,
    advanced only while s_r lies at or before the current time."""
    K, m, d = s.size - 1, spec.m, spec.d
    Y = np.full((K + 1, K + 1, m), np.nan)
    tcol = s[:, None]
    XT = np.broadcast_to(X[K], X.shape)
    y = np.asarray(spec.G(tcol, X, XT, XT), dtype=float)
    y = np.broadcast_to(y, (K + 1, m)).copy()
    Y[:, K] = y

    def rhs(u, yy, r):
        xu = np.broadcast_to(Xs(u), (r, X.shape[1]))
        eta = np.broadcast_to(D(u), (r, m))
        out = spec.F(tcol[:r], u, X[:r], xu, xu, eta, yy, np.zeros((r, m, d)))
        return -np.broadcast_to(np.asarray(out, dtype=float), (r, m))

    for i in range(K, 0, -1):
        r = i  # anchors s_0..s_{i-1} are live on [s_{i-1}, s_i]
        h = s[i - 1] - s[i]
        sm = 0.5 * (s[i] + s[i - 1])
        yy = y[:r]
        k1 = rhs(s[i], yy, r)
        k2 = rhs(sm, yy + 0.5 * h * k1, r)
        k3 = rhs(sm, yy + 0.5 * h * k2, r)
        k4 = rhs(s[i - 1], yy + h * k3, r)
        y[:r] = yy + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        Y[:r, i - 1] = y[:r]
    return Y


def solve_deterministic_oracle(spec, fine_steps=256, tol=1e-12, max_iter=200):
    """Dense-grid Picard on the diagonal of a noise-free flow.

    Without noise every conditional expectation is the value itself, so each
    member solves the ODE  y' = -F(t, s, X_t, X_s, X_s, D(s), y, 0),
    y(T) = G(t, X_t, X_T, X_T), and X' = B(s, X, D(s)).  Both are integrated
    with RK4; X and D are cubic-spline interpolated at half steps.
    """
    _assert_no_noise(spec)
    K = int(fine_steps)
    if K < 2:
        raise InvalidArgumentError("fine_steps must be at least 2")
    n, m, d = spec.n, spec.m, spec.d
    s = np.linspace(0.0, spec.T, K + 1)
    z0 = np.zeros((1, m, d))
    diag = np.zeros((K + 1, m))
    for it in range(1, int(max_iter) + 1):
        D = CubicSpline(s, diag, axis=0)
        X = _rk4_forward(lambda u, x: _row(spec.B(u, x[None, :], D(u)[None, :]), n),
                         spec.x0.copy(), s)
        Xs = CubicSpline(s, X, axis=0)
        if spec.anchor_batched:
            Y = _members_batched(spec, s, X, Xs, D)
        else:
            Y = np.full((K + 1, K + 1, m), np.nan)
            for i in range(K + 1):
                t = float(s[i])
                xi = X[i][None, :]

                def rhs(u, y, t=t, xi=xi):
                    xu = Xs(u)[None, :]
                    return -_row(spec.F(t, u, xi, xu, xu, D(u)[None, :], y[None, :], z0), m)

                yT = _row(spec.G(t, xi, X[K][None, :], X[K][None, :]), m)
                Y[i, i:] = _rk4_backward(rhs, yT, s[i:])
        new_diag = Y[np.arange(K + 1), np.arange(K + 1)]
        inc = float(np.max(np.abs(new_diag - diag)))
        if not np.isfinite(inc):
            break
        diag = new_diag
        if inc <= tol:
            return DeterministicOracleSolution(s=s, X=X, Y=Y, diag=diag, iterations=it)
    raise OracleDivergenceError(f"deterministic oracle did not converge in {max_iter} iterations")


# -- time-inconsistent LQ control ---------------------------------------------


@dataclass(frozen=True)
class LQControlProblem:
    """dx = (a x + c u) ds + sigma dW with cost viewed from (t, x_t)

        E_t[ int_t^T e^{-lam (s-t)} (q x^2 + r u^2)/2 ds + e^{-lam (T-t)} g x_T^2 / 2 ]
          + gamma/2 * E_t[x_T]^2.

    The minimiser of the Hamiltonian at s = t is u = -c p / r.
    """

    a: float = 0.0
    c: float = 1.0
    sigma: float = 0.0
    q: float = 0.0
    r: float = 1.0
    g: float = 0.0
    gamma: float = 0.0
    lam: float = 0.0
    x0: float = 1.0
    T: float = 0.5
    spec: ProblemSpec = field(default=None, compare=False, repr=False)

    def control(self, s, x, p):
        return -self.c * np.asarray(p) / self.r

    def running_cost(self, t, s, x, u):
        return np.exp(-self.lam * (s - t)) * 0.5 * (self.q * x ** 2 + self.r * u ** 2)

    def terminal_cost(self, t, x):
        return np.exp(-self.lam * (self.T - t)) * 0.5 * self.g * x ** 2

    def mean_cost(self, t, xbar):
        return 0.5 * self.gamma * xbar ** 2


def build_lq_control_problem(a=0.0, c=1.0, sigma=0.0, q=0.0, r=1.0, g=0.0, gamma=0.0,
                             lam=0.0, x0=1.0, T=0.5):
    """Equilibrium-control flow: state, adjoint driver dH/dx and adjoint terminal."""
    if not r > 0:
        raise UnsupportedProblemError("control cost weight r must be positive (convex Hamiltonian)")

    def B(s, x, eta):
        return a * x - (c * c / r) * eta

    def Sigma(s, x, eta):
        return np.full((x.shape[0], 1, 1), sigma)

    def F(t, s, xi, xbar, x, eta, y, z):
        return a * y + np.exp(-lam * (s - t)) * q * x

    def G(t, xi, xbar, x):
        return np.exp(-lam * (T - t)) * g * x + gamma * xbar

    L = max(abs(a), c * c / r, abs(q) * max(1.0, np.exp(lam * T)),
            abs(g) * max(1.0, np.exp(lam * T)), abs(gamma), 1e-12)
    mod = abs(lam) * np.exp(abs(lam) * T) * (abs(q) + abs(g))
    spec = ProblemSpec(n=1, m=1, d=1, T=T, x0=[x0], B=B, Sigma=Sigma, F=F, G=G,
                       lipschitz_L=L, rho=lambda u: mod * u,
                       depends_on_anchor=gamma != 0.0, markovian=True, name="lq",
                       anchor_batched=True)
    return LQControlProblem(a=a, c=c, sigma=sigma, q=q, r=r, g=g, gamma=gamma, lam=lam,
                            x0=x0, T=T, spec=spec)


@dataclass(frozen=True)
class SpikeResult:
    eps: float
    increment: float
    standard_error: float

    def passes(self, n_se=3.0):
        return self.increment >= -n_se * self.standard_error


def _grid_index(times, t, what):
    hit = np.flatnonzero(np.isclose(times, t, rtol=0.0, atol=1e-12 * max(1.0, times[-1])))
    if hit.size != 1:
        raise InvalidArgumentError(f"{what}={t} is not a grid node")
    return int(hit[0])


def spike_variation_check(problem, equilibrium, t, v, eps_list, control=None,
                          relative=True, degree=None):
    """Normalised cost increments (J(spiked) - J(equilibrium)) / eps.

    The equilibrium control is read off the solution as
    ``control(s, X_s, D_s)`` (default: the Hamiltonian minimiser) along a state
    re-simulated with that control; the spiked control uses ``v`` on
    [t, t+eps) and the unchanged control values afterwards.  ``v`` is added to
    the time-t control when ``relative`` is true.  E_t[x_T] is estimated by
    regression on x_t; the increment is averaged over paths with common noise.
    """
    control = problem.control if control is None else control
    grid = equilibrium.grid
    times = grid.times
    if not 0.0 <= t < grid.T:
        raise InvalidArgumentError("spike time must lie in [0, T)")
    it = _grid_index(times, t, "t")
    eps_list = [float(e) for e in eps_list]
    if any(e <= 0 for e in eps_list):
        raise InvalidArgumentError("eps values must be positive")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise InvalidArgumentError("eps values must be strictly decreasing")
    if any(t + e > grid.T * (1 + 1e-12) for e in eps_list):
        raise InvalidArgumentError("spike interval extends beyond the horizon")
    dW = equilibrium.ensemble.bundle.increments[:, :, 0]
    D = equilibrium.diag.Y_diag[:, :, 0]
    P, J = dW.shape[0], grid.J
    a, c, sig = problem.a, problem.c, problem.sigma
    dt = grid.dt

    x = np.empty((P, J + 1))
    u = np.empty((P, J))
    x[:, 0] = problem.x0
    for j in range(J):
        u[:, j] = control(times[j], x[:, j], D[:, j])
        x[:, j + 1] = x[:, j] + (a * x[:, j] + c * u[:, j]) * dt[j] + sig * dW[:, j]

    deg = equilibrium.config.degree if degree is None else degree
    proj = Projector(x[:, it:it + 1], RegressionBasis(deg, 1))

    def cost(xp, up):
        run = sum(problem.running_cost(t, times[j], xp[:, j], up[:, j]) * dt[j]
                  for j in range(it, J))
        term = problem.terminal_cost(t, xp[:, J])
        mean_T = proj.fitted(xp[:, J:J + 1])[:, 0]
        return run + term + problem.mean_cost(t, mean_T)

    base = cost(x, u)
    v_arr = np.broadcast_to(np.asarray(v, dtype=float), (P,))
    v_path = u[:, it] + v_arr if relative else v_arr
    results = []
    for e in eps_list:
        n_steps = int(round(e / dt[it]))
        if n_steps < 1 or abs(times[it + n_steps] - times[it] - e) > 1e-9 * max(1.0, e):
            raise InvalidArgumentError(f"eps={e} is not a whole number of grid steps")
        xs = x.copy()
        us = u.copy()
        us[:, it:it + n_steps] = v_path[:, None]
        for j in range(it, J):
            xs[:, j + 1] = xs[:, j] + (a * xs[:, j] + c * us[:, j]) * dt[j] + sig * dW[:, j]
        diff = (cost(xs, us) - base) / e
        se = float(diff.std(ddof=1) / np.sqrt(P)) if P > 1 else 0.0
        results.append(SpikeResult(e, float(diff.mean()), se))
    return results
