import numpy as np
import pytest
from scipy.optimize import minimize

from spectag.errors import ConvergenceError, DataError
from spectag.svm import (default_max_iter, dual_objective, rbf_kernel, rbf_matrix, smo_train,
                         solve_dual)


def qp_oracle(K, y, C):
    """Dual optimum by SLSQP on the box- and equality-constrained QP."""
    n = len(y)
    Q = (y[:, None] * y[None, :]) * K

    def neg(a):
        return 0.5 * a @ Q @ a - a.sum()

    def grad(a):
        return Q @ a - 1.0

    res = minimize(neg, np.zeros(n), jac=grad, method="SLSQP", bounds=[(0, C)] * n,
                   constraints=[{"type": "eq", "fun": lambda a: a @ y, "jac": lambda a: y}],
                   options={"ftol": 1e-14, "maxiter": 2000})
    return -res.fun


def blobs(rng, n=100, sep=4.0):
    x = np.vstack([rng.normal(-sep / 2, 0.5, (n, 2)), rng.normal(sep / 2, 0.5, (n, 2))])
    y = np.concatenate([np.ones(n), -np.ones(n)])
    return x, y


def test_kernel_values():
    assert rbf_kernel(np.array([1.0, 2.0]), np.array([1.0, 2.0]), 0.3) == 1.0
    x = np.zeros(3)
    x2 = np.array([1.0, 0.0, 0.0])
    assert rbf_kernel(x, x2, 1.0) == pytest.approx(np.exp(-1), abs=1e-12)
    assert rbf_kernel(np.zeros(2), np.array([3.0, 4.0]), 0.01) == pytest.approx(0.77880078307, abs=1e-10)


def test_kernel_matrix_matches_scalar(rng):
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    k = rbf_matrix(a, b, 0.7)
    assert np.allclose(k, [[rbf_kernel(u, v, 0.7) for v in b] for u in a], atol=1e-14)


def test_separable_blobs_fit_perfectly(rng):
    x, y = blobs(rng)
    model = smo_train(x, y, C=10, gamma=1.0)
    assert np.all(model.predict(x) == y)


def test_xor():
    x = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    y = np.array([1.0, 1.0, -1.0, -1.0])
    model = smo_train(x, y, C=100, gamma=1.0)
    assert np.all(np.sign(model.decision_function(x)) == y)


@pytest.mark.parametrize("seed", range(8))
def test_dual_matches_qp_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 41))
    x = rng.normal(size=(n, 3))
    y = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
    y[0], y[1] = 1.0, -1.0
    C = float(10 ** rng.uniform(-1, 2))
    K = rbf_matrix(x, x, 0.5)
    res = solve_dual(K, y, C, tol=1e-6)
    assert res.converged
    ours = dual_objective(res.alpha, y, K)
    ref = qp_oracle(K, y, C)
    assert ours == pytest.approx(ref, rel=1e-4)
    assert np.all(res.alpha >= 0) and np.all(res.alpha <= C)
    assert abs(res.alpha @ y) < 1e-6


def test_decision_function_equals_kernel_expansion(rng):
    x, y = blobs(rng, 30, sep=1.0)
    model = smo_train(x, y, C=5, gamma=0.8)
    manual = np.array([sum(c * rbf_kernel(xi, sv, 0.8) for c, sv in zip(model.coef, model.support_vectors))
                       for xi in x]) + model.bias
    assert np.allclose(model.decision_function(x), manual, atol=1e-12)
    # at least one support vector from each side
    assert (model.coef > 0).any() and (model.coef < 0).any()


def test_warm_start_reaches_same_optimum(rng):
    x, y = blobs(rng, 30, sep=1.0)
    K = rbf_matrix(x, x, 1.0)
    cold = solve_dual(K, y, 50.0, tol=1e-6)
    warm = solve_dual(K, y, 50.0, tol=1e-6, alpha0=solve_dual(K, y, 5.0, tol=1e-6).alpha)
    assert dual_objective(warm.alpha, y, K) == pytest.approx(dual_objective(cold.alpha, y, K), rel=1e-6)


def test_iteration_cap_raises_in_strict_mode(rng):
    x, y = blobs(rng, 50, sep=0.2)
    with pytest.raises(ConvergenceError, match="violation"):
        smo_train(x, y, C=1e6, gamma=1.0, max_iter=3)
    model = smo_train(x, y, C=1e6, gamma=1.0, max_iter=3, strict=False)
    assert model.iterations == 3


def test_input_errors(rng):
    x = rng.normal(size=(5, 2))
    with pytest.raises(DataError):
        smo_train(x, np.ones(5), C=1, gamma=1)
    with pytest.raises(ValueError):
        smo_train(x, np.array([1, -1, 1, -1, 1.0]), C=0, gamma=1)


def test_default_cap():
    assert default_max_iter(7) == 490
