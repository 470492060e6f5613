"""Least-squares Monte Carlo estimates of conditional expectations.

E[target | X_{t_j}] is approximated by projecting the target onto polynomials
of total degree <= ``degree`` in the state at node j.  States are centred and
scaled before expansion; this does not change the spanned space, only the
conditioning of the design matrix.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class RegressionBasis:
    """All monomials of total degree <= ``degree`` in ``n`` variables."""

    degree: int = 2
    n: int = 1

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise InvalidArgumentError(f"degree must be a non-negative integer, got {self.degree}")
        exps = []
        for total in range(self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(self.n), total):
                e = [0] * self.n
                for i in combo:
                    e[i] += 1
                exps.append(tuple(e))
        object.__setattr__(self, "exponents", tuple(exps))

    @property
    def size(self):
        return comb(self.n + self.degree, self.degree)

    def design(self, z):
        """Design matrix (P, size) of the already standardised states ``z``."""
        z = np.asarray(z, dtype=float)
        P = z.shape[0]
        D = np.empty((P, self.size))
        for col, e in enumerate(self.exponents):
            v = np.ones(P)
            for i, p in enumerate(e):
                if p:
                    v = v * z[:, i] ** p
            D[:, col] = v
        return D


def standardise(states):
    center = states.mean(axis=0)
    scale = states.std(axis=0)
    flat = scale <= 1e-12 * (1.0 + np.abs(center))
    scale = np.where(flat, 1.0, scale)
    return center, scale


class Projector:
    """Orthogonal projection onto the basis span at one node (SVD based).

    Singular values below ``max(P, p) * eps * s_max`` are dropped, which gives
    the minimum-norm least-squares solution for rank-deficient designs.  A
    positive ``ridge`` shrinks each component by s^2 / (s^2 + ridge).
    """

    def __init__(self, states, basis, ridge=0.0):
        states = np.asarray(states, dtype=float)
        if states.ndim != 2 or states.shape[0] == 0:
            raise InvalidArgumentError("need a non-empty (paths, n) state array")
        if ridge < 0:
            raise InvalidArgumentError("ridge must be non-negative")
        self.basis = basis
        self.center, self.scale = standardise(states)
        D = basis.design((states - self.center) / self.scale)
        U, s, Vt = np.linalg.svd(D, full_matrices=False)
        cutoff = max(D.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
        keep = s > cutoff
        if ridge > 0:
            filt = np.where(keep, s / (s ** 2 + ridge), 0.0)
            shrink = np.where(keep, s ** 2 / (s ** 2 + ridge), 0.0)
        else:
            filt = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
            shrink = keep.astype(float)
        # dropped directions are zeroed rather than removed
        self.U = U * keep
        self.shrink = shrink
        self.coef_map = (Vt.T * filt)  # coefficients = coef_map @ U^T @ targets
        self.rank = int(keep.sum())

    def fitted(self, targets):
        """Projection of ``targets`` (P, q) evaluated on the training states.

        Columns that are constant across paths are returned unchanged, so
        constants are reproduced bit-exactly.
        """
        out = self.U @ ((self.U.T @ targets) * self.shrink[:, None])
        const = _constant_columns(targets)
        if const.any():
            out[:, const] = targets[:, const]
        return out

    def noise_coefficients(self, targets, dW):
        """Coefficients on ``U`` of the projections of ``targets`` and of
        ``targets * dW[:, i]`` for each i, shapes (p, q) and (p, q * d).

        The products are never formed: their coefficients come from the
        weighted design U * dW.  Fitted values are ``U @ coefficients``.
        """
        q = targets.shape[1]
        d = dW.shape[1]
        p = self.U.shape[1]
        W = np.concatenate([self.U] + [self.U * dW[:, i:i + 1] for i in range(d)], axis=1)
        C = W.T @ targets
        C *= np.tile(self.shrink, 1 + d)[:, None]
        C2 = C[p:].reshape(d, p, q).transpose(1, 2, 0).reshape(p, q * d)
        return np.ascontiguousarray(C[:p]), C2

    def fitted_with_noise(self, targets, dW):
        """Fitted values of ``targets`` (P, q) and of ``targets * dW[:, i]`` (P, q, d)."""
        C1, C2 = self.noise_coefficients(targets, dW)
        fit = self.U @ C1
        const = _constant_columns(targets)
        if const.any():
            fit[:, const] = targets[:, const]
        return fit, (self.U @ C2).reshape(targets.shape[0], targets.shape[1], dW.shape[1])

    def coefficients(self, targets, const=None):
        coef = self.coef_map @ (self.U.T @ targets)
        if const is None:
            const = _constant_columns(targets)
        if const.any():
            # index 0 of the basis is the constant monomial
            coef[:, const] = 0.0
            coef[0, const] = targets[0, const]
        return coef


def _constant_columns(targets):
    return np.all(targets == targets[:1], axis=0)


@dataclass(frozen=True, eq=False)
class CondExpModel:
    coefficients: np.ndarray
    at_node: int
    basis: RegressionBasis
    center: np.ndarray = None
    scale: np.ndarray = None
    training_states: np.ndarray = None

    def __post_init__(self):
        n = self.basis.n
        if self.center is None:
            object.__setattr__(self, "center", np.zeros(n))
        if self.scale is None:
            object.__setattr__(self, "scale", np.ones(n))


def _as_targets(targets, P):
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    if targets.shape[0] != P:
        raise InvalidArgumentError(f"targets have {targets.shape[0]} rows, expected {P}")
    if not np.all(np.isfinite(targets)):
        raise InvalidArgumentError("targets contain non-finite values")
    return targets


def fit_conditional(ensemble, at_node, targets, degree=2, ridge=0.0):
    """Regress ``targets`` (paths, q) on polynomials of X at ``at_node``."""
    X = ensemble.X if hasattr(ensemble, "X") else np.asarray(ensemble)
    if X.shape[0] == 0:
        raise InvalidArgumentError("cannot fit on zero paths")
    if not 0 <= at_node < X.shape[1]:
        raise InvalidArgumentError(f"node {at_node} outside 0..{X.shape[1] - 1}")
    states = X[:, at_node, :]
    targets = _as_targets(targets, X.shape[0])
    basis = RegressionBasis(degree, X.shape[2])
    proj = Projector(states, basis, ridge)
    return CondExpModel(proj.coefficients(targets), at_node, basis,
                        proj.center, proj.scale, states)


def evaluate(model, states):
    states = np.asarray(states, dtype=float)
    if states.ndim != 2 or states.shape[1] != model.basis.n:
        raise InvalidArgumentError(f"states must be (paths, {model.basis.n})")
    D = model.basis.design((states - model.center) / model.scale)
    return D @ model.coefficients


def tower_check(model, targets):
    """|mean of fitted values - mean of targets| on the training states."""
    if model.training_states is None:
        raise InvalidArgumentError("model carries no training states")
    targets = _as_targets(targets, model.training_states.shape[0])
    fitted = evaluate(model, model.training_states)
    return float(np.max(np.abs(fitted.mean(axis=0) - targets.mean(axis=0))))
