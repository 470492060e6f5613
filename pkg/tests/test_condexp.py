import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ffbsde import (CondExpModel, InvalidArgumentError, Projector, RegressionBasis, evaluate,
                    fit_conditional, tower_check)


def random_fixture(seed, P, n, degree, q, duplicates):
    """States (P, 1, n) at node 0 and targets (P, q); optional repeated rows."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((P, 1, n)) * rng.uniform(0.1, 10.0, n) + rng.uniform(-5, 5, n)
    if duplicates:
        X[P // 2:] = X[: P - P // 2]
    Y = np.sin(X[:, 0, :1] * rng.uniform(0.5, 2.0)) + rng.standard_normal((P, q))
    return X, Y


def design(model, states):
    return model.basis.design((states - model.center) / model.scale)


fixtures = dict(seed=st.integers(0, 2**32 - 1), P=st.integers(5, 200), n=st.integers(1, 3),
                degree=st.integers(0, 3), q=st.integers(1, 3), duplicates=st.booleans())


@settings(max_examples=100, deadline=None)
@given(**fixtures)
def test_residuals_orthogonal_to_basis(seed, P, n, degree, q, duplicates):
    X, Y = random_fixture(seed, P, n, degree, q, duplicates)
    model = fit_conditional(X, 0, Y, degree)
    D = design(model, X[:, 0])
    resid = Y - evaluate(model, X[:, 0])
    scale = np.linalg.norm(D) * np.linalg.norm(Y)
    assert np.max(np.abs(D.T @ resid)) <= 1e-10 * scale


@settings(max_examples=100, deadline=None)
@given(**fixtures)
def test_refit_on_predictions_is_idempotent(seed, P, n, degree, q, duplicates):
    X, Y = random_fixture(seed, P, n, degree, q, duplicates)
    model = fit_conditional(X, 0, Y, degree)
    again = fit_conditional(X, 0, evaluate(model, X[:, 0]), degree)
    ref = np.max(np.abs(model.coefficients))
    assert np.max(np.abs(again.coefficients - model.coefficients)) <= 1e-10 * max(ref, 1.0)


@settings(max_examples=100, deadline=None)
@given(**fixtures)
def test_mean_preserved(seed, P, n, degree, q, duplicates):
    X, Y = random_fixture(seed, P, n, degree, q, duplicates)
    model = fit_conditional(X, 0, Y, degree)
    assert tower_check(model, Y) <= 1e-10 * max(1.0, np.max(np.abs(Y)))


def test_basis_size_and_exponents():
    assert RegressionBasis(2, 1).size == 3
    assert RegressionBasis(2, 3).size == 10
    assert RegressionBasis(0, 4).size == 1
    assert RegressionBasis(1, 2).exponents == ((0, 0), (1, 0), (0, 1))
    with pytest.raises(InvalidArgumentError):
        RegressionBasis(-1, 1)


def test_constant_targets_predicted_exactly():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((50, 2, 2))
    Y = np.full((50, 2), [3.25, -1.5])
    for degree in (0, 1, 3):
        model = fit_conditional(X, 1, Y, degree)
        np.testing.assert_array_equal(evaluate(model, rng.standard_normal((7, 2)) * 100),
                                      np.broadcast_to([3.25, -1.5], (7, 2)))
        assert tower_check(model, Y) == 0.0


def test_deterministic_node_gives_sample_mean():
    rng = np.random.default_rng(1)
    X = np.empty((40, 3, 1))
    X[:, 0] = 0.7
    X[:, 1:] = rng.standard_normal((40, 2, 1))
    Y = rng.standard_normal((40, 2))
    model = fit_conditional(X, 0, Y, degree=2)
    np.testing.assert_allclose(evaluate(model, X[:, 0]), np.broadcast_to(Y.mean(axis=0), (40, 2)),
                               rtol=0, atol=1e-13)


def test_rank_deficient_five_path_instance():
    X = np.full((5, 1, 1), 2.0)
    Y = np.array([[1.0], [4.0], [-2.0], [0.5], [3.0]])
    model = fit_conditional(X, 0, Y, degree=2)
    assert tower_check(model, Y) <= 1e-10
    np.testing.assert_allclose(evaluate(model, X[:, 0]), 1.3, atol=1e-13)


def test_fit_matches_explicit_normal_equations():
    x = np.array([-1.0, 0.5, 2.0, 3.0, 4.5])
    y = np.array([2.0, -1.0, 0.5, 4.0, 3.0])
    D = np.column_stack([np.ones(5), x, x ** 2])
    beta = np.linalg.solve(D.T @ D, D.T @ y)
    model = fit_conditional(x.reshape(5, 1, 1), 0, y, degree=2)
    np.testing.assert_allclose(evaluate(model, x[:, None])[:, 0], D @ beta, rtol=0, atol=1e-10)


def test_martingale_regression_recovers_identity():
    rng = np.random.default_rng(2)
    P = 20_000
    W_t = rng.standard_normal(P) * np.sqrt(0.3)
    W_T = W_t + rng.standard_normal(P) * np.sqrt(0.7)
    X = np.stack([W_t, W_T], axis=1)[:, :, None]
    model = fit_conditional(X, 0, W_T, degree=1)
    c0, c1 = model.coefficients[:, 0]
    slope = c1 / model.scale[0]
    intercept = c0 - slope * model.center[0]
    resid = W_T - (intercept + slope * W_t)
    s = resid.std(ddof=2)
    se_slope = s / (W_t.std() * np.sqrt(P))
    se_int = s * np.sqrt(1.0 / P + W_t.mean() ** 2 / (P * W_t.var()))
    assert abs(slope - 1.0) <= 3 * se_slope
    assert abs(intercept) <= 3 * se_int


def test_evaluate_identity_and_constant_models():
    basis = RegressionBasis(1, 2)
    ident = CondExpModel(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), 0, basis)
    states = np.random.default_rng(3).standard_normal((6, 2))
    np.testing.assert_array_equal(evaluate(ident, states), states)
    const = CondExpModel(np.array([[2.5], [0.0], [0.0]]), 0, basis)
    np.testing.assert_array_equal(evaluate(const, states), np.full((6, 1), 2.5))
    with pytest.raises(InvalidArgumentError):
        evaluate(ident, np.zeros((3, 3)))


def test_fit_rejects_bad_input():
    X = np.zeros((4, 2, 1))
    with pytest.raises(InvalidArgumentError):
        fit_conditional(X, 0, np.array([1.0, np.nan, 0.0, 0.0]))
    with pytest.raises(InvalidArgumentError):
        fit_conditional(X, 0, np.zeros(3))
    with pytest.raises(InvalidArgumentError):
        fit_conditional(X, 2, np.zeros(4))
    with pytest.raises(InvalidArgumentError):
        fit_conditional(np.zeros((0, 2, 1)), 0, np.zeros(0))


def test_ridge_shrinks_towards_zero():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((100, 1, 1))
    Y = 3.0 * X[:, 0] + rng.standard_normal((100, 1))
    plain = fit_conditional(X, 0, Y, degree=2)
    default = fit_conditional(X, 0, Y, degree=2, ridge=0.0)
    ridged = fit_conditional(X, 0, Y, degree=2, ridge=50.0)
    np.testing.assert_array_equal(plain.coefficients, default.coefficients)
    assert np.linalg.norm(ridged.coefficients) < np.linalg.norm(plain.coefficients)
    with pytest.raises(InvalidArgumentError):
        fit_conditional(X, 0, Y, ridge=-1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), P=st.integers(5, 200), d=st.integers(1, 3),
       q=st.integers(1, 3), degree=st.integers(0, 2))
def test_noise_products_match_explicit_projection(seed, P, d, q, degree):
    rng = np.random.default_rng(seed)
    states = rng.standard_normal((P, 1))
    Y = rng.standard_normal((P, q))
    dW = rng.standard_normal((P, d))
    proj = Projector(states, RegressionBasis(degree, 1))
    fit, fit_noise = proj.fitted_with_noise(Y, dW)
    np.testing.assert_allclose(fit, proj.fitted(Y), atol=1e-12)
    explicit = proj.fitted((Y[:, :, None] * dW[:, None, :]).reshape(P, q * d))
    np.testing.assert_allclose(fit_noise.reshape(P, q * d), explicit, atol=1e-12)
