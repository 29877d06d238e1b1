"""Sigmoid calibration of SVM outputs and pairwise probability coupling."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DataError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SigmoidCalibration:
    """r = 1 / (1 + exp(A * d + B))."""

    A: float
    B: float
    fallback: bool = False

    def __call__(self, d) -> np.ndarray:
        z = self.A * np.asarray(d, dtype=np.float64) + self.B
        # evaluate on the side that cannot overflow
        out = np.empty_like(z)
        pos = z >= 0
        ez = np.exp(-z[pos])
        out[pos] = ez / (1.0 + ez)
        out[~pos] = 1.0 / (1.0 + np.exp(z[~pos]))
        return out


FALLBACK = SigmoidCalibration(-1.0, 0.0, fallback=True)


def _objective(A, B, d, t):
    f = d * A + B
    return float(np.sum(np.where(f >= 0, t * f + np.log1p(np.exp(-np.abs(f))),
                                 (t - 1) * f + np.log1p(np.exp(-np.abs(f))))))


def platt_fit(decision_values, labels, max_iter: int = 100) -> SigmoidCalibration:
    """Fit A, B by regularised maximum likelihood (Newton with backtracking).

    Targets are smoothed to (N+ + 1)/(N+ + 2) and 1/(N- + 2). Labels are +1/-1
    (or booleans); positives should have large decision values.
    """
    d = np.asarray(decision_values, dtype=np.float64).ravel()
    lab = np.asarray(labels).ravel()
    pos = lab > 0
    if d.shape != pos.shape:
        raise DataError("decision values and labels differ in length")
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("sigmoid calibration needs both labels")
    if np.ptp(d) == 0:
        log.warning("all %d decision values equal %.6g; using fallback calibration", d.size, d[0])
        return FALLBACK

    hi = (n_pos + 1.0) / (n_pos + 2.0)
    lo = 1.0 / (n_neg + 2.0)
    t = np.where(pos, hi, lo)
    A, B = 0.0, float(np.log((n_neg + 1.0) / (n_pos + 1.0)))
    fval = _objective(A, B, d, t)
    min_step, sigma, eps = 1e-10, 1e-12, 1e-5
    for _ in range(max_iter):
        f = d * A + B
        e = np.exp(-np.abs(f))
        p = np.where(f >= 0, e / (1 + e), 1 / (1 + e))
        q = 1 - p
        d2 = p * q
        h11 = sigma + np.dot(d * d, d2)
        h22 = sigma + d2.sum()
        h21 = np.dot(d, d2)
        d1 = t - p
        g1 = np.dot(d, d1)
        g2 = d1.sum()
        if abs(g1) < eps and abs(g2) < eps:
            break
        det = h11 * h22 - h21 * h21
        dA = -(h22 * g1 - h21 * g2) / det
        dB = -(-h21 * g1 + h11 * g2) / det
        gd = g1 * dA + g2 * dB
        step = 1.0
        while step >= min_step:
            nA, nB = A + step * dA, B + step * dB
            nf = _objective(nA, nB, d, t)
            if nf < fval + 1e-4 * step * gd:
                A, B, fval = nA, nB, nf
                break
            step /= 2
        else:
            log.debug("sigmoid fit: line search failed")
            break
    return SigmoidCalibration(float(A), float(B))


def coupling_matrix(r: np.ndarray) -> np.ndarray:
    """Column-stochastic Q with p = Q p equivalent to the pairwise consistency equations."""
    r = np.asarray(r, dtype=np.float64)
    j = r.shape[-1]
    off = r.copy()
    idx = np.arange(j)
    off[..., idx, idx] = 0.0
    q = off / (j - 1)
    q[..., idx, idx] = off.sum(axis=-1) / (j - 1)
    return q


def pairwise_couple(r: np.ndarray, tol: float = 1e-10, max_iter: int = 1000) -> np.ndarray:
    """Class probabilities p from pairwise estimates r[i, j] ~ P(i | i or j).

    Solves p_j = sum_{i != j} (p_j + p_i) / (J - 1) * r[j, i] with sum(p) = 1 by
    normalised fixed-point iteration. ``r`` may be (J, J) or a batch (n, J, J).
    """
    r = np.asarray(r, dtype=np.float64)
    single = r.ndim == 2
    if single:
        r = r[None]
    n, j, j2 = r.shape
    if j != j2 or j < 2:
        raise DataError(f"pairwise matrix must be square with J >= 2, got {r.shape[1:]}")
    q = coupling_matrix(r)
    p = np.full((n, j), 1.0 / j)
    for _ in range(max_iter):
        nxt = np.einsum("nij,nj->ni", q, p)
        nxt /= nxt.sum(axis=1, keepdims=True)
        delta = np.abs(nxt - p).max()
        p = nxt
        if delta < tol:
            break
    else:
        raise ConvergenceError(f"pairwise coupling did not converge in {max_iter} iterations (last change {delta:.3g})")
    np.maximum(p, 0.0, out=p)
    p /= p.sum(axis=1, keepdims=True)
    return p[0] if single else p
