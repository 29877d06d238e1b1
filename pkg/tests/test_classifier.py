import numpy as np
import pytest

from spectag.classifier import (DEFAULT_C_GRID, DEFAULT_GAMMA_GRID, Standardizer, fit, grid_search,
                                load_model, model_from_dict, model_to_dict, save_model, stratified_folds)
from spectag.errors import DataError


def gaussian_classes(rng, j=3, n=25, d=4, sep=6.0):
    centres = rng.normal(scale=sep, size=(j, d))
    x = np.vstack([c + rng.normal(size=(n, d)) for c in centres])
    y = np.repeat(np.arange(j), n)
    return x, y


def test_default_grids():
    assert np.allclose(DEFAULT_GAMMA_GRID, [10.0 ** k for k in range(-8, 2)], rtol=1e-12)
    assert np.allclose(DEFAULT_C_GRID, [10.0 ** k for k in range(1, 11)], rtol=1e-12)


def test_standardizer(rng):
    x = rng.normal(3.0, 2.0, size=(200, 5))
    x[:, 2] = 7.0
    s = Standardizer.fit(x)
    z = s.transform(x)
    assert np.all(np.abs(z.mean(axis=0)) < 1e-9)
    assert np.allclose(z[:, [0, 1, 3, 4]].std(axis=0), 1.0, atol=1e-6)
    assert s.std[2] == 1.0
    with pytest.raises(DataError):
        s.transform(np.zeros((1, 4)))


def test_stratified_folds(rng):
    y = np.repeat([0, 1, 2], [30, 20, 12])
    folds = stratified_folds(y, 10, seed=3)
    allidx = np.sort(np.concatenate(folds))
    assert np.array_equal(allidx, np.arange(y.size))
    for f in folds:
        assert set(y[f]) == {0, 1, 2}
    assert all(np.array_equal(a, b) for a, b in zip(folds, stratified_folds(y, 10, seed=3)))
    with pytest.raises(DataError):
        stratified_folds(np.repeat([0, 1], [20, 5]), 10, 0)


@pytest.mark.parametrize("j,pairs", [(2, 1), (3, 3), (6, 15)])
def test_pair_count(rng, j, pairs):
    x, y = gaussian_classes(rng, j=j, n=12)
    model = fit(x, y, C=10, gamma=0.1)
    assert len(model.pairs) == pairs
    assert model.n_classes == j


def test_probabilities_valid_and_accurate(rng):
    x, y = gaussian_classes(rng)
    model = fit(x, y, C=10, gamma=0.05, class_names=["a", "b", "c"])
    p = model.predict_proba(x)
    assert p.shape == (x.shape[0], 3)
    assert np.allclose(p.sum(axis=1), 1, atol=1e-9)
    assert (p >= 0).all()
    assert np.mean(model.predict(x) == y) == 1.0
    assert model.class_names == ("a", "b", "c")


def test_deep_interior_point_argmax(rng):
    x, y = gaussian_classes(rng, j=4, n=20, sep=10)
    model = fit(x, y, C=10, gamma=0.05)
    for c in range(4):
        centre = x[y == c].mean(axis=0)
        assert model.predict(centre[None])[0] == c


def test_binary_probability_equals_calibrated_pair(rng):
    x, y = gaussian_classes(rng, j=2, n=20, sep=2)
    model = fit(x, y, C=1, gamma=0.2)
    pm = model.pairs[(0, 1)]
    r = pm.calibration(pm.svm.decision_function(model.standardizer.transform(x)))
    p = model.predict_proba(x)
    assert np.allclose(p[:, 0], np.clip(r, 1e-7, 1 - 1e-7), atol=1e-9)
    assert np.allclose(p[:, 1], 1 - p[:, 0], atol=1e-12)


def test_svm_constraints(rng):
    x, y = gaussian_classes(rng, j=3, n=20, sep=1.5)
    C = 5.0
    model = fit(x, y, C=C, gamma=0.3)
    for pm in model.pairs.values():
        coef = pm.svm.coef
        assert np.all(np.abs(coef) <= C + 1e-12)
        assert abs(coef.sum()) < 1e-6  # sum a_k y_k
        assert (coef > 0).any() and (coef < 0).any()


def test_class_ids_need_not_be_contiguous(rng):
    x, y = gaussian_classes(rng, j=3, n=15)
    names = ["c0", "c1", "c2", "c3", "c4", "c5"]
    ids = np.array([1, 3, 5])[y]
    model = fit(x, ids, C=10, gamma=0.05, class_names=names)
    assert model.class_ids == (1, 3, 5)
    assert model.class_names == ("c1", "c3", "c5")
    assert set(model.predict(x)) <= {1, 3, 5}


def test_too_few_samples():
    x = np.zeros((3, 2))
    with pytest.raises(DataError):
        fit(x, [0, 0, 1], C=1, gamma=1)
    with pytest.raises(DataError):
        fit(x, [0, 0, 0], C=1, gamma=1)


def test_persistence_round_trip(rng, tmp_path):
    x, y = gaussian_classes(rng, j=3, n=15, sep=2)
    model = fit(x, y, C=10, gamma=0.1, metadata={"wavelengths": [1.0, 2.0]})
    path = tmp_path / "m.json"
    save_model(model, path)
    again = load_model(path)
    assert np.array_equal(again.predict_proba(x), model.predict_proba(x))
    assert again.metadata == model.metadata
    bad = model_to_dict(model)
    bad["format"] = "other"
    with pytest.raises(DataError):
        model_from_dict(bad)


def test_grid_search_table_and_selection(rng):
    x, y = gaussian_classes(rng, j=3, n=20, sep=4)
    g = grid_search(x, y, gamma_grid=(1e-3, 1e-1, 10.0), C_grid=(1.0, 100.0), folds=5, seed=0)
    assert len(g.table) == 6
    best = max(r["mean_accuracy"] for r in g.table)
    chosen = [r for r in g.table if r["C"] == g.C and r["gamma"] == g.gamma][0]
    assert chosen["mean_accuracy"] == best
    # ties resolve to the smallest C, then the smallest gamma
    tied = [r for r in g.table if r["mean_accuracy"] == best]
    assert (g.C, g.gamma) == min((r["C"], r["gamma"]) for r in tied)
    again = grid_search(x, y, gamma_grid=(1e-3, 1e-1, 10.0), C_grid=(1.0, 100.0), folds=5, seed=0)
    assert again.table == g.table


def test_grid_search_default_table_size(rng):
    x, y = gaussian_classes(rng, j=2, n=12, d=2, sep=8)
    g = grid_search(x, y, folds=3)
    assert len(g.table) == 100
