import numpy as np
import pytest

from spectag.confidence import ConfidenceThreshold, Metric
from spectag.config import PipelineConfig
from spectag.errors import CalibrationError, DataError
from spectag.phantom import ORGAN_SPECTRA, ORGANS, PhantomSpec, generate_phantom, phantom_dataset
from spectag.pipeline import (ImageTags, SuperpixelPrediction, acc_spx, acc_tag, classify_image, confusion_matrix,
                              extract_image, extract_many, leave_one_organ_out, low_confidence_fraction,
                              superpixel_truth, tag_image, tau_sweep, train, truth_tags, with_threshold,
                              write_overlays)
from spectag.superpixel import SuperpixelSegmentation
from spectag.imaging import GroundTruth


def pred(predicted, truth=None, gc=1.0, confident=True, j=6, spx=0):
    p = np.zeros(j)
    p[predicted] = 1.0
    return SuperpixelPrediction(spx, predicted, p, {"gc": gc, "ppci": gc, "max": gc}, confident, truth)


def test_acc_spx_definition():
    assert acc_spx([pred(0, 0), pred(1, 1)]) == 1.0
    preds = [pred(0, 0), pred(1, 1), pred(2, 0)] + [pred(3, 0, confident=False)] * 5
    assert acc_spx(preds) == pytest.approx(2 / 3)
    assert acc_spx([pred(0, 0, confident=False)]) is None


def test_tagging():
    preds = [pred(0), pred(0), pred(2)]
    assert tag_image(preds).tags == {0, 2}
    assert tag_image(preds + preds).tags == tag_image(preds).tags
    t = tag_image([pred(1, confident=False)])
    assert t.tags == frozenset() and t.abstained


def test_acc_tag_definition():
    assert acc_tag([ImageTags(frozenset({0, 2}), frozenset({0, 2}))])["acc_tag"] == 1.0
    assert acc_tag([ImageTags(frozenset({0}), frozenset({0, 2}))])["acc_tag"] == 0.5
    r = acc_tag([ImageTags(frozenset({0, 1}), frozenset({0}))])
    assert r["acc_tag"] == 1.0 and r["tag_precision"] == 0.5
    r = acc_tag([ImageTags(frozenset(), frozenset({0})), ImageTags(frozenset({3}), frozenset())])
    assert r["acc_tag"] is None and r["abstained"] == 1 and r["excluded_no_truth"] == 1


def test_confusion_matrix():
    pct, counts = confusion_matrix([pred(0, 0), pred(1, 1), pred(2, 2)], [0, 1, 2])
    assert np.array_equal(pct, 100 * np.eye(3))
    pct, _ = confusion_matrix([pred(0, 0), pred(1, 0), pred(1, 0, confident=False)], [0, 1, 2])
    assert pct[0].tolist() == [50, 50, 0]
    assert pct[1].tolist() == [0, 0, 0]


def test_threshold_monotonicity_and_sweep():
    rng = np.random.default_rng(0)
    per_image = [[pred(int(rng.integers(3)), int(rng.integers(3)), gc=float(rng.uniform()), spx=k)
                  for k in range(20)] for _ in range(6)]
    rows = tau_sweep(per_image, (0.5, 0.6, 0.7, 0.8, 0.9))
    assert len(rows) == 5
    fr = [r["confident_fraction"] for r in rows]
    assert all(a >= b for a, b in zip(fr, fr[1:]))
    flat = [p for ps in per_image for p in ps]
    low = with_threshold(flat, ConfidenceThreshold(0.3))
    high = with_threshold(flat, ConfidenceThreshold(0.7))
    assert {id(p) for p in []} == set()
    kept_low = {(p.spx_id, k) for k, p in enumerate(low) if p.confident}
    kept_high = {(p.spx_id, k) for k, p in enumerate(high) if p.confident}
    assert kept_high <= kept_low
    assert all(p.confident for p in with_threshold(flat, None))


def test_low_confidence_fraction():
    thr = ConfidenceThreshold(0.9)
    preds = [pred(0, gc=0.95), pred(0, gc=0.9), pred(0, gc=0.2)]
    assert low_confidence_fraction(preds, thr) == pytest.approx(2 / 3)
    assert low_confidence_fraction(preds, ConfidenceThreshold(1.0)) == 1.0
    assert low_confidence_fraction([], thr) is None


def test_superpixel_truth_majority_and_purity():
    lab = np.zeros((4, 4), dtype=int)
    lab[:, 2:] = 1
    seg = SuperpixelSegmentation.from_labels(lab)
    gt = np.zeros((4, 4), dtype=int)
    gt[:, 2:] = 3
    gt[0, 3] = 4
    gt[0, 0] = -1
    maj, pur = superpixel_truth(seg, GroundTruth(gt, ORGANS), np.array([0, 1]))
    assert maj.tolist() == [0, 3]
    assert pur.tolist() == [1.0, 7 / 8]


@pytest.fixture(scope="module")
def tiny_dataset():
    base = PhantomSpec(height=96, width=96, n_sites=4, max_classes=3)
    cfg = PipelineConfig(avg_size=24, jobs=1, C=100.0, gamma=1e-3)
    items = phantom_dataset(base, train_subjects=2, test_subjects=1, n_train=8, n_test=3, seed=5)
    records = extract_many(items, cfg)
    return cfg, records


def test_end_to_end_small(tiny_dataset, tmp_path):
    cfg, records = tiny_dataset
    train_recs = [r for r in records if r.split == "train"]
    test_recs = [r for r in records if r.split == "test"]
    assert {r.subject for r in train_recs}.isdisjoint({r.subject for r in test_recs})
    model, grid = train(train_recs, cfg, ORGANS)
    assert grid is None and model.metadata["C"] == 100.0
    rec = test_recs[0]
    thr = ConfidenceThreshold(0.0)
    from spectag.pipeline import predict_record
    preds = predict_record(model, rec, thr)
    assert len(preds) == len(rec.desc.ids)
    for p in preds:
        assert p.probabilities.sum() == pytest.approx(1.0, abs=1e-9)
        assert p.predicted == model.class_ids[int(np.argmax(p.probabilities))]
        assert p.confident == (p.scores["gc"] > 0.0)
    a, b = write_overlays(rec, preds, Metric.GC, tmp_path)
    assert a.exists() and b.exists()


def test_parallel_extraction_matches_serial(tiny_dataset):
    cfg, records = tiny_dataset
    base = PhantomSpec(height=96, width=96, n_sites=4, max_classes=3)
    items = phantom_dataset(base, train_subjects=2, test_subjects=1, n_train=8, n_test=3, seed=5)[:3]
    par = extract_many(items, cfg.replace(jobs=2))
    for a, b in zip(par, records[:3]):
        assert np.array_equal(a.features(), b.features())
        assert np.array_equal(a.labels, b.labels)


def test_loo_rows(tiny_dataset):
    cfg, records = tiny_dataset
    train_recs = [r for r in records if r.split == "train"]
    test_recs = [r for r in records if r.split == "test"]
    classes = sorted({int(c) for r in train_recs for c in r.truth if c >= 0})
    rows = leave_one_organ_out(train_recs, test_recs, cfg, ORGANS, 100.0, 1e-3, tau=1.0)
    assert len(rows) == len(classes)
    for row in rows:
        for key in ("lc_ex", "lc_in"):
            assert row[key] is None or row[key] == 100.0


def test_noiseless_two_class_is_perfect():
    base = PhantomSpec(class_names=ORGANS[:2], spectra=(ORGAN_SPECTRA[0], ORGAN_SPECTRA[3]),
                       textures=((3.0, 0.05), (1.5, 0.05)), height=96, width=96, n_sites=3,
                       noise=0.0, spectral_jitter=0.0, specular_discs=0)
    cfg = PipelineConfig(avg_size=24, jobs=1, C=10.0, gamma=1e-3)
    items = phantom_dataset(base, train_subjects=1, test_subjects=1, n_train=4, n_test=2, subject_scale=0.0, seed=1)
    records = extract_many(items, cfg)
    model, _ = train([r for r in records if r.split == "train"], cfg, ORGANS[:2])
    item = items[-1]()
    preds = classify_image(item.raw, item.calib, model, cfg, ConfidenceThreshold(0.9), item.truth)
    judged = [p for p in preds if p.confident and p.truth is not None and not p.mixed]
    assert judged and all(p.correct for p in judged)


def test_calibration_error_propagates():
    raw, calib, gt = generate_phantom(PhantomSpec(height=48, width=48))
    calib.white.data[:, :, 2] = calib.dark.data[:, :, 2]
    with pytest.raises(CalibrationError):
        extract_image(raw, calib, PipelineConfig(avg_size=12), gt)


def test_train_needs_records():
    with pytest.raises(DataError):
        train([], PipelineConfig(), ORGANS)
