"""One-against-one RBF SVM with calibrated pairwise probabilities."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibration import SigmoidCalibration, pairwise_couple, platt_fit
from .errors import DataError
from .svm import BinarySvmModel, model_from_dual, rbf_matrix, solve_dual, squared_distances

log = logging.getLogger(__name__)

FORMAT_TAG = "spectag-model/1"
CALIBRATION_FOLDS = 5
PROBABILITY_FLOOR = 1e-7
# SMO update budget per training sample for grid-search cells; far cheaper than
# the full cap and ample for every cell that is worth selecting
GRID_UPDATES_PER_SAMPLE = 50

DEFAULT_GAMMA_GRID = tuple(float(v) for v in np.logspace(-8, 1, 10))
DEFAULT_C_GRID = tuple(float(v) for v in np.logspace(1, 10, 10))


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return cls(x.mean(axis=0), std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.shape[0]:
            raise DataError(f"feature length {x.shape[-1]} != expected {self.mean.shape[0]}")
        return (x - self.mean) / self.std


@dataclass
class PairModel:
    svm: BinarySvmModel
    calibration: SigmoidCalibration


@dataclass
class MulticlassModel:
    class_names: tuple[str, ...]
    class_ids: tuple[int, ...]  # dataset class id of each model class
    standardizer: Standardizer
    pairs: dict[tuple[int, int], PairModel]  # keyed by model-class indices (i < j)
    metadata: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    @property
    def n_features(self) -> int:
        return self.standardizer.mean.shape[0]

    def pairwise_probabilities(self, x: np.ndarray) -> np.ndarray:
        """(n, J, J) matrix with r[:, i, j] ~ P(class i | i or j)."""
        z = self.standardizer.transform(np.atleast_2d(x))
        j = self.n_classes
        r = np.full((z.shape[0], j, j), 0.5)
        for (a, b) in sorted(self.pairs):
            pm = self.pairs[(a, b)]
            rab = pm.calibration(pm.svm.decision_function(z))
            rab = np.clip(rab, PROBABILITY_FLOOR, 1 - PROBABILITY_FLOOR)
            r[:, a, b] = rab
            r[:, b, a] = 1 - rab
        return r

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """(n, J) class probabilities; columns follow ``class_ids``."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        p = pairwise_couple(self.pairwise_probabilities(x))
        if p.ndim == 1:
            p = p[None]
        return p[0] if single else p

    def predict(self, x: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(self.predict_proba(x))
        return np.asarray(self.class_ids)[p.argmax(axis=1)]


def predict_proba(model: MulticlassModel, x: np.ndarray) -> np.ndarray:
    return model.predict_proba(x)


# --- folds --------------------------------------------------------------

def stratified_folds(labels: np.ndarray, k: int, seed: int) -> list[np.ndarray]:
    """Split indices into ``k`` folds preserving class proportions (seeded shuffle)."""
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("need at least two folds")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            raise DataError(f"class {cls} has {idx.size} samples, fewer than {k} folds")
        idx = idx[rng.permutation(idx.size)]
        for n, i in enumerate(idx):
            folds[(n + offset) % k].append(int(i))
        offset += idx.size
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


# --- training -------------------------------------------------------------

def _pair_labels(y: np.ndarray, a: int, b: int) -> tuple[np.ndarray, np.ndarray]:
    sel = np.flatnonzero((y == a) | (y == b))
    return sel, np.where(y[sel] == a, 1.0, -1.0)


def _cross_fitted_decisions(K: np.ndarray, yb: np.ndarray, C: float, folds: int, seed: int, tol: float) -> np.ndarray:
    """Out-of-fold decision values for sigmoid fitting."""
    n = yb.size
    k = min(folds, int((yb > 0).sum()), int((yb < 0).sum()))
    if k < 2:
        res = solve_dual(K, yb, C, tol)
        return K @ (res.alpha * yb) + res.bias
    dec = np.empty(n)
    for test in stratified_folds(yb, k, seed):
        train = np.setdiff1d(np.arange(n), test)
        res = solve_dual(K[np.ix_(train, train)], yb[train], C, tol)
        dec[test] = K[np.ix_(test, train)] @ (res.alpha * yb[train]) + res.bias
    return dec


def fit(
    features: np.ndarray,
    labels: Sequence[int],
    C: float,
    gamma: float,
    class_names: Sequence[str] | None = None,
    tol: float = 1e-3,
    seed: int = 0,
    metadata: dict | None = None,
) -> MulticlassModel:
    """Standardise, then train one calibrated binary SVM per class pair.

    ``labels`` are dataset class ids; ``class_names`` (optional) is indexed by
    those ids.
    """
    x = np.asarray(features, dtype=np.float64)
    y_ids = np.asarray(labels)
    classes = [int(c) for c in np.unique(y_ids)]
    if len(classes) < 2:
        raise DataError("need at least two classes to train")
    for c in classes:
        if np.count_nonzero(y_ids == c) < 2:
            raise DataError(f"class {c} has fewer than 2 training samples")
    y = np.searchsorted(classes, y_ids)

    std = Standardizer.fit(x)
    z = std.transform(x)
    d2 = squared_distances(z, z)
    K_full = np.exp(-gamma * d2)
    pairs = {}
    for a, b in combinations(range(len(classes)), 2):
        sel, yb = _pair_labels(y, a, b)
        K = K_full[np.ix_(sel, sel)]
        res = solve_dual(K, yb, C, tol)
        if not res.converged:
            log.warning("pair (%d, %d): SMO stopped at violation %.3g", a, b, res.violation)
        svm = model_from_dual(z[sel], yb, res, C, gamma, pair=(classes[a], classes[b]))
        dec = _cross_fitted_decisions(K, yb, C, CALIBRATION_FOLDS, seed, tol)
        pairs[(a, b)] = PairModel(svm, platt_fit(dec, yb))

    if class_names is None:
        names = tuple(str(c) for c in classes)
    else:
        names = tuple(class_names[c] for c in classes)
    meta = {"C": float(C), "gamma": float(gamma), "tol": tol, "seed": seed}
    meta.update(metadata or {})
    return MulticlassModel(names, tuple(classes), std, pairs, meta)


# --- hyperparameter search ------------------------------------------------

@dataclass
class GridResult:
    C: float
    gamma: float
    table: list[dict]  # one row per (C, gamma): mean / std fold accuracy


def _vote(decisions: dict[tuple[int, int], np.ndarray], n: int, j: int) -> np.ndarray:
    votes = np.zeros((n, j), dtype=np.int64)
    for (a, b), d in decisions.items():
        win_a = d >= 0
        votes[win_a, a] += 1
        votes[~win_a, b] += 1
    return votes.argmax(axis=1)  # ties -> lowest class index


def grid_search(
    features: np.ndarray,
    labels: Sequence[int],
    gamma_grid: Sequence[float] = DEFAULT_GAMMA_GRID,
    C_grid: Sequence[float] = DEFAULT_C_GRID,
    folds: int = 10,
    seed: int = 0,
    tol: float = 1e-3,
    updates_per_sample: int = GRID_UPDATES_PER_SAMPLE,
) -> GridResult:
    """Stratified k-fold search over (C, gamma) by one-vs-one voting accuracy.

    Highest mean accuracy wins; ties go to the smaller C, then the smaller gamma.
    Each binary solve gets ``updates_per_sample`` * n SMO updates; cells whose
    solves hit that budget are still scored and counted in the table.
    """
    if not len(gamma_grid) or not len(C_grid):
        raise ValueError("grids must be nonempty")
    x = np.asarray(features, dtype=np.float64)
    y_ids = np.asarray(labels)
    classes = np.unique(y_ids)
    y = np.searchsorted(classes, y_ids)
    j = len(classes)
    fold_idx = stratified_folds(y, folds, seed)
    z = Standardizer.fit(x).transform(x)
    d2 = squared_distances(z, z)
    c_sorted = sorted(float(c) for c in C_grid)
    acc = {(c, float(g)): [] for c in c_sorted for g in gamma_grid}
    capped = {key: 0 for key in acc}

    for g in sorted(float(v) for v in gamma_grid):
        K_full = np.exp(-g * d2)
        for test in fold_idx:
            train = np.setdiff1d(np.arange(y.size), test)
            decisions = {c: {} for c in c_sorted}
            for a, b in combinations(range(j), 2):
                sel_local, yb = _pair_labels(y[train], a, b)
                sel = train[sel_local]
                K = K_full[np.ix_(sel, sel)]
                K_test = K_full[np.ix_(test, sel)]
                alpha = None
                for c in c_sorted:  # warm start: the previous optimum stays feasible for a larger C
                    res = solve_dual(K, yb, c, tol, max_iter=updates_per_sample * yb.size, alpha0=alpha)
                    alpha = res.alpha
                    capped[(c, g)] += not res.converged
                    decisions[c][(a, b)] = K_test @ (res.alpha * yb) + res.bias
            for c in c_sorted:
                pred = _vote(decisions[c], test.size, j)
                acc[(c, g)].append(float(np.mean(pred == y[test])))
        log.info("grid search: gamma=%g done", g)

    table = []
    for (c, g), scores in acc.items():
        table.append({"C": c, "gamma": g, "mean_accuracy": float(np.mean(scores)),
                      "std_accuracy": float(np.std(scores)), "folds": len(scores),
                      "unconverged_solves": capped[(c, g)]})
    table.sort(key=lambda row: (row["C"], row["gamma"]))
    best = max(table, key=lambda row: (row["mean_accuracy"], -row["C"], -row["gamma"]))
    return GridResult(best["C"], best["gamma"], table)


# --- persistence ----------------------------------------------------------

def _arr(a: np.ndarray) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def model_to_dict(model: MulticlassModel) -> dict:
    return {
        "format": FORMAT_TAG,
        "class_names": list(model.class_names),
        "class_ids": list(model.class_ids),
        "standardizer": {"mean": _arr(model.standardizer.mean), "std": _arr(model.standardizer.std)},
        "pairs": [
            {
                "i": a,
                "j": b,
                "support_vectors": _arr(pm.svm.support_vectors),
                "coef": _arr(pm.svm.coef),
                "bias": pm.svm.bias,
                "gamma": pm.svm.gamma,
                "C": pm.svm.C,
                "pair": list(pm.svm.pair),
                "iterations": pm.svm.iterations,
                "sigmoid": {"A": pm.calibration.A, "B": pm.calibration.B, "fallback": pm.calibration.fallback},
            }
            for (a, b), pm in sorted(model.pairs.items())
        ],
        "metadata": model.metadata,
    }


def model_from_dict(data: dict) -> MulticlassModel:
    if data.get("format") != FORMAT_TAG:
        raise DataError(f"unsupported model format {data.get('format')!r}")
    pairs = {}
    for p in data["pairs"]:
        sv = np.asarray(p["support_vectors"], dtype=np.float64).reshape(len(p["coef"]), -1)
        svm = BinarySvmModel(sv, np.asarray(p["coef"], dtype=np.float64), float(p["bias"]),
                             float(p["gamma"]), float(p["C"]), tuple(p["pair"]), int(p["iterations"]))
        s = p["sigmoid"]
        pairs[(int(p["i"]), int(p["j"]))] = PairModel(svm, SigmoidCalibration(float(s["A"]), float(s["B"]), bool(s["fallback"])))
    std = Standardizer(np.asarray(data["standardizer"]["mean"]), np.asarray(data["standardizer"]["std"]))
    return MulticlassModel(tuple(data["class_names"]), tuple(data["class_ids"]), std, pairs, data.get("metadata", {}))


def save_model(model: MulticlassModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path: str | Path) -> MulticlassModel:
    return model_from_dict(json.loads(Path(path).read_text()))
