"""Binary RBF-kernel SVM trained by sequential minimal optimisation.

The dual problem

    max  sum(a) - 1/2 sum_kl y_k y_l K(x_k, x_l) a_k a_l
    s.t. sum(a * y) = 0,  0 <= a_k <= C

is solved two coordinates at a time, always picking the maximal violating
pair of the KKT conditions.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConvergenceError, DataError

log = logging.getLogger(__name__)

_TAU = 1e-12


def rbf_kernel(x: np.ndarray, x2: np.ndarray, gamma: float) -> float:
    """exp(-gamma * ||x - x2||^2)."""
    x = np.asarray(x, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x.shape != x2.shape:
        raise ValueError(f"vector lengths differ: {x.shape} vs {x2.shape}")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    d = x - x2
    return float(np.exp(-gamma * np.dot(d, d)))


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.einsum("ij,ij->i", a, a)
    bb = np.einsum("ij,ij->i", b, b)
    d = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    np.maximum(d, 0.0, out=d)
    return d


def rbf_matrix(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * squared_distances(np.asarray(a, float), np.asarray(b, float)))


@njit(cache=True)
def _smo(K, y, C, tol, max_iter, alpha, grad):
    """Maximal-violating-pair SMO on a precomputed kernel.

    ``alpha`` and ``grad`` (gradient of the minimisation form, Q a - e) are
    updated in place. Returns (iterations, final violation).
    """
    n = y.shape[0]
    it = 0
    gap = np.inf
    while it < max_iter:
        i = -1
        j = -1
        g_max = -np.inf
        g_min = np.inf
        for t in range(n):
            v = -y[t] * grad[t]
            up = (y[t] > 0 and alpha[t] < C) or (y[t] < 0 and alpha[t] > 0)
            low = (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C)
            if up and v > g_max:
                g_max = v
                i = t
            if low and v < g_min:
                g_min = v
                j = t
        gap = g_max - g_min
        if i < 0 or j < 0 or gap < tol:
            break
        it += 1

        kii = K[i, i]
        kjj = K[j, j]
        kij = K[i, j]
        old_i = alpha[i]
        old_j = alpha[j]
        if y[i] != y[j]:
            quad = kii + kjj - 2.0 * kij
            if quad <= 0:
                quad = _TAU
            delta = (-grad[i] - grad[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            else:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = C + diff
        else:
            quad = kii + kjj - 2.0 * kij
            if quad <= 0:
                quad = _TAU
            delta = (grad[i] - grad[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = total - C
            else:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = total
            if total > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = total - C
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = total

        di = (alpha[i] - old_i) * y[i]
        dj = (alpha[j] - old_j) * y[j]
        for t in range(n):
            grad[t] += y[t] * (K[t, i] * di + K[t, j] * dj)
    return it, gap


@njit(cache=True)
def _bias(y, C, alpha, grad):
    """Offset b of the decision function sum(a y K) + b."""
    ub = np.inf
    lb = -np.inf
    total = 0.0
    n_free = 0
    for t in range(y.shape[0]):
        yg = y[t] * grad[t]
        at_upper = alpha[t] >= C
        at_lower = alpha[t] <= 0
        if at_upper:
            if y[t] < 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        elif at_lower:
            if y[t] > 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        else:
            n_free += 1
            total += yg
    if n_free > 0:
        rho = total / n_free
    else:
        rho = (ub + lb) / 2.0
    return -rho


@dataclass
class BinarySvmModel:
    support_vectors: np.ndarray  # (n_sv, d) standardised features
    coef: np.ndarray  # a_k * y_k for each support vector
    bias: float
    gamma: float
    C: float
    pair: tuple[int, int] = (0, 1)  # (class for y=+1, class for y=-1)
    iterations: int = 0

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return rbf_matrix(x, self.support_vectors, self.gamma) @ self.coef + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.where(self.decision_function(x) >= 0, 1, -1)


@dataclass
class SmoResult:
    alpha: np.ndarray
    bias: float
    iterations: int
    violation: float
    converged: bool


def default_max_iter(n: int) -> int:
    # ten passes, each pass being N_t pair updates
    return 10 * n * n


def solve_dual(
    K: np.ndarray,
    y: np.ndarray,
    C: float,
    tol: float = 1e-3,
    max_iter: int | None = None,
    alpha0: np.ndarray | None = None,
) -> SmoResult:
    """SMO on a precomputed kernel matrix; ``alpha0`` warm-starts from a feasible point."""
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if C <= 0:
        raise ValueError("C must be positive")
    if not ((y > 0).any() and (y < 0).any()):
        raise DataError("SMO needs samples of both classes")
    K = np.ascontiguousarray(K, dtype=np.float64)
    if alpha0 is None:
        alpha = np.zeros(n)
        grad = -np.ones(n)
    else:
        alpha = np.clip(np.asarray(alpha0, dtype=np.float64), 0.0, C).copy()
        grad = y * (K @ (alpha * y)) - 1.0
    if max_iter is None:
        max_iter = default_max_iter(n)
    it, gap = _smo(K, y, float(C), float(tol), int(max_iter), alpha, grad)
    b = _bias(y, float(C), alpha, grad)
    return SmoResult(alpha, float(b), int(it), float(gap), bool(gap < tol))


def smo_train(
    x: np.ndarray,
    y: np.ndarray,
    C: float,
    gamma: float,
    tol: float = 1e-3,
    max_iter: int | None = None,
    pair: tuple[int, int] = (0, 1),
    strict: bool = True,
) -> BinarySvmModel:
    """Train a binary RBF SVM on labels in {+1, -1}.

    With ``strict`` a run that hits the iteration cap raises
    ``ConvergenceError``; otherwise it logs a warning and keeps the iterate.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    K = rbf_matrix(x, x, gamma)
    res = solve_dual(K, y, C, tol, max_iter)
    if not res.converged:
        msg = (f"SMO stopped after {res.iterations} updates with KKT violation "
               f"{res.violation:.3g} > {tol:g} (C={C:g}, gamma={gamma:g}, n={len(y)})")
        if strict:
            raise ConvergenceError(msg)
        log.warning(msg)
    return model_from_dual(x, y, res, C, gamma, pair)


def model_from_dual(x, y, res: SmoResult, C: float, gamma: float, pair=(0, 1)) -> BinarySvmModel:
    sv = res.alpha > 0
    return BinarySvmModel(
        support_vectors=np.ascontiguousarray(x[sv]),
        coef=res.alpha[sv] * y[sv],
        bias=res.bias,
        gamma=float(gamma),
        C=float(C),
        pair=tuple(pair),
        iterations=res.iterations,
    )


def dual_objective(alpha: np.ndarray, y: np.ndarray, K: np.ndarray) -> float:
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ K @ ay)
