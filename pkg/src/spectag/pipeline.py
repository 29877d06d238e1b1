"""End-to-end classification, tagging and evaluation."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from . import classifier
from .confidence import ConfidenceThreshold, Metric, score
from .config import PipelineConfig
from .errors import DataError
from .features import RegionDescriptors, describe_regions, feature_matrix
from .imaging import (CalibrationPair, ChannelStack, GroundTruth, anisotropic_diffusion,
                      mask_specular, normalize_reflectance, rgb_indices, simulate_rgb)
from .superpixel import SuperpixelSegmentation, lsc_segment

log = logging.getLogger(__name__)

NO_CLASS = -1


# --- per-image feature extraction -----------------------------------------

def preprocess(raw: ChannelStack, calib: CalibrationPair, cfg: PipelineConfig):
    """Reflectance, specular mask, diffused reflectance and superpixels of one image."""
    sr = normalize_reflectance(raw, calib)
    rgb_idx = rgb_indices(sr, cfg.rgb_bands)
    mask = mask_specular(sr, rgb_idx, cfg.v_threshold)
    smooth = np.empty_like(sr.data)
    for c in range(sr.channels):
        smooth[:, :, c] = anisotropic_diffusion(sr.channel(c), cfg.diffusion_iterations,
                                                cfg.diffusion_kappa, cfg.diffusion_step, mask)
    sr_d = ChannelStack(smooth, sr.wavelengths, sr.fwhm)
    seg = lsc_segment(simulate_rgb(sr_d, rgb_idx), cfg.avg_size, cfg.compactness)
    return sr_d, mask, seg


def superpixel_truth(seg: SuperpixelSegmentation, gt: GroundTruth, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Majority class and its pixel share for each listed superpixel (-1 if unlabeled)."""
    j = len(gt.class_names)
    lab = gt.labels.ravel()
    keep = lab != GroundTruth.UNLABELED
    counts = np.bincount(seg.labels.ravel()[keep] * j + lab[keep], minlength=seg.n * j).reshape(seg.n, j)
    counts = counts[ids]
    total = counts.sum(axis=1)
    majority = np.where(total > 0, counts.argmax(axis=1), NO_CLASS)
    with np.errstate(invalid="ignore", divide="ignore"):
        purity = np.where(total > 0, counts.max(axis=1) / total, 0.0)
    return majority, purity


@dataclass
class ImageRecord:
    """Everything downstream stages need from one image, computed once."""

    image_id: str
    subject: int
    split: str
    desc: RegionDescriptors
    truth: np.ndarray  # majority class per desc.ids
    purity: np.ndarray
    labels: np.ndarray = field(repr=False)  # superpixel label map
    mask: np.ndarray = field(repr=False)
    n_superpixels: int = 0

    def features(self, channels: Sequence[int] | None = None) -> np.ndarray:
        return feature_matrix(self.desc, channels)


def extract_image(raw: ChannelStack, calib: CalibrationPair, cfg: PipelineConfig,
                  truth: GroundTruth | None = None, image_id: str = "", subject: int = 0,
                  split: str = "test") -> ImageRecord:
    sr, mask, seg = preprocess(raw, calib, cfg)
    desc = describe_regions(sr, seg, mask, cfg.lbp)
    if truth is not None:
        majority, purity = superpixel_truth(seg, truth, desc.ids)
    else:
        majority = np.full(len(desc.ids), NO_CLASS)
        purity = np.zeros(len(desc.ids))
    if desc.degenerate:
        log.debug("%s: %d degenerate superpixels", image_id, len(desc.degenerate))
    return ImageRecord(image_id, subject, split, desc, majority, purity, seg.labels, mask, seg.n)


def _extract_job(args):
    loader, cfg = args
    item = loader()
    return extract_image(item.raw, item.calib, cfg, item.truth, item.image_id, item.subject, item.split)


def worker_count(jobs: int) -> int:
    return jobs if jobs > 0 else (os.cpu_count() or 1)


def extract_many(items: Iterable, cfg: PipelineConfig) -> list[ImageRecord]:
    """Extract records for dataset items (objects with raw/calib/truth/image_id/subject/split).

    Items may also be zero-argument callables returning such objects, which
    keeps image data out of the parent process when running in parallel.
    """
    items = list(items)
    loaders = [it if callable(it) else (lambda it=it: it) for it in items]
    n = worker_count(cfg.jobs)
    if n == 1 or len(items) < 2:
        return [_extract_job((ld, cfg)) for ld in loaders]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_extract_job, [(ld, cfg) for ld in loaders]))


# --- predictions ------------------------------------------------------------

@dataclass
class SuperpixelPrediction:
    spx_id: int
    predicted: int  # dataset class id
    probabilities: np.ndarray
    scores: dict  # metric name -> score
    confident: bool
    truth: int | None = None
    mixed: bool = False

    @property
    def correct(self) -> bool:
        return self.truth is not None and self.predicted == self.truth


def _confident(scores: dict, thr: ConfidenceThreshold | None) -> bool:
    if thr is None:  # Base case: every prediction counts
        return True
    return scores[thr.metric.value] > thr.tau


def predict_features(model: classifier.MulticlassModel, x: np.ndarray, ids: Sequence[int],
                     thr: ConfidenceThreshold | None, truth: Sequence[int] | None = None,
                     purity: Sequence[float] | None = None, mixed_purity: float = 0.6) -> list[SuperpixelPrediction]:
    if len(ids) == 0:
        return []
    proba = np.atleast_2d(model.predict_proba(x))
    class_ids = np.asarray(model.class_ids)
    sc = {m.value: np.atleast_1d(score(proba, m)) for m in Metric}
    preds = []
    for k, spx in enumerate(ids):
        scores = {m: float(v[k]) for m, v in sc.items()}
        t = None if truth is None or truth[k] == NO_CLASS else int(truth[k])
        mixed = purity is not None and purity[k] < mixed_purity
        preds.append(SuperpixelPrediction(int(spx), int(class_ids[proba[k].argmax()]), proba[k],
                                          scores, _confident(scores, thr), t, bool(mixed)))
    return preds


def model_channels(model: classifier.MulticlassModel, desc: RegionDescriptors) -> list[int]:
    wl = model.metadata.get("wavelengths")
    if wl is None:
        return list(range(len(desc.wavelengths)))
    return desc.channel_indices(wl)


def predict_record(model, record: ImageRecord, thr: ConfidenceThreshold | None, mixed_purity: float = 0.6):
    channels = model_channels(model, record.desc)
    return predict_features(model, record.features(channels), record.desc.ids, thr,
                            record.truth, record.purity, mixed_purity)


def classify_image(raw: ChannelStack, calib: CalibrationPair, model: classifier.MulticlassModel,
                   cfg: PipelineConfig, thr: ConfidenceThreshold | None = None,
                   truth: GroundTruth | None = None) -> list[SuperpixelPrediction]:
    """Normalise, mask, diffuse, segment, describe and classify one image."""
    record = extract_image(raw, calib, cfg, truth)
    return predict_record(model, record, thr, cfg.mixed_purity)


def with_threshold(preds: Sequence[SuperpixelPrediction], thr: ConfidenceThreshold | None):
    return [replace(p, confident=_confident(p.scores, thr)) for p in preds]


# --- tagging and metrics ------------------------------------------------------

@dataclass(frozen=True)
class ImageTags:
    tags: frozenset
    truth: frozenset | None = None

    @property
    def abstained(self) -> bool:
        return not self.tags


def tag_image(preds: Iterable[SuperpixelPrediction], truth: Iterable[int] | None = None) -> ImageTags:
    """Organ tags from the confident superpixels only."""
    tags = frozenset(p.predicted for p in preds if p.confident)
    return ImageTags(tags, None if truth is None else frozenset(truth))


def truth_tags(preds: Iterable[SuperpixelPrediction]) -> frozenset:
    return frozenset(p.truth for p in preds if p.truth is not None)


def acc_spx(preds: Iterable[SuperpixelPrediction]) -> float | None:
    """Correct confident / all confident; None when nothing is confident."""
    conf = [p for p in preds if p.confident and p.truth is not None]
    if not conf:
        return None
    return sum(p.correct for p in conf) / len(conf)


def tag_accuracy(tags: ImageTags) -> float | None:
    if not tags.truth:
        return None
    return len(tags.tags & tags.truth) / len(tags.truth)


def acc_tag(all_tags: Sequence[ImageTags]) -> dict:
    """Mean per-image tag recall over images that have truth and did not abstain."""
    values, abstained, no_truth = [], 0, 0
    for t in all_tags:
        if not t.truth:
            no_truth += 1
            log.warning("image without ground-truth tags excluded from Acc_Tag")
            continue
        if t.abstained:
            abstained += 1
            continue
        values.append(tag_accuracy(t))
    precision = [len(t.tags & t.truth) / len(t.tags) for t in all_tags if t.truth and t.tags]
    return {
        "acc_tag": float(np.mean(values)) if values else None,
        "images": len(values),
        "abstained": abstained,
        "excluded_no_truth": no_truth,
        "tag_precision": float(np.mean(precision)) if precision else None,
    }


def confusion_matrix(preds: Iterable[SuperpixelPrediction], class_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalised percentages (truth x prediction) over confident superpixels, and raw counts."""
    index = {c: k for k, c in enumerate(class_ids)}
    j = len(class_ids)
    counts = np.zeros((j, j), dtype=np.int64)
    for p in preds:
        if p.confident and p.truth in index and p.predicted in index:
            counts[index[p.truth], index[p.predicted]] += 1
    rows = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        pct = np.where(rows > 0, 100.0 * counts / rows, 0.0)
    return pct, counts


def _median_iqr(values: Sequence[float]) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    q1, med, q3 = np.percentile(vals, [25, 50, 75])
    return float(med), float(q3 - q1)


def tau_sweep(per_image: Sequence[Sequence[SuperpixelPrediction]], taus: Sequence[float],
              metric: Metric | str = Metric.GC) -> list[dict]:
    """Median / IQR of per-image Acc_Spx and the confident fraction for each tau."""
    metric = Metric(metric)
    rows = []
    total = sum(len(p) for p in per_image)
    for tau in taus:
        thr = ConfidenceThreshold(tau, metric)
        accs, pooled = [], []
        for preds in per_image:
            re = with_threshold(preds, thr)
            accs.append(acc_spx(re))
            pooled.extend(re)
        med, iqr = _median_iqr(accs)
        n_conf = sum(p.confident for p in pooled)
        rows.append({"tau": float(tau), "metric": metric.value, "median_acc_spx": med, "iqr_acc_spx": iqr,
                     "pooled_acc_spx": acc_spx(pooled),
                     "confident_fraction": n_conf / total if total else 0.0,
                     "images_with_confident": sum(a is not None for a in accs)})
    return rows


def low_confidence_fraction(preds: Iterable[SuperpixelPrediction], thr: ConfidenceThreshold) -> float | None:
    preds = list(preds)
    if not preds:
        return None
    return sum(p.scores[thr.metric.value] <= thr.tau for p in preds) / len(preds)


# --- training ---------------------------------------------------------------

def training_matrix(records: Sequence[ImageRecord], channels: Sequence[int] | None,
                    mixed_purity: float = 0.6, exclude: Iterable[int] = ()) -> tuple[np.ndarray, np.ndarray]:
    """Stack features of labelled, non-mixed superpixels."""
    exclude = set(exclude)
    xs, ys = [], []
    for rec in records:
        keep = (rec.truth != NO_CLASS) & (rec.purity >= mixed_purity)
        if exclude:
            keep &= ~np.isin(rec.truth, list(exclude))
        if keep.any():
            xs.append(rec.features(channels)[keep])
            ys.append(rec.truth[keep])
    if not xs:
        raise DataError("no labelled training superpixels")
    return np.concatenate(xs), np.concatenate(ys)


def train(records: Sequence[ImageRecord], cfg: PipelineConfig, class_names: Sequence[str],
          wavelengths: Sequence[float] | None = None, exclude: Iterable[int] = (),
          C: float | None = None, gamma: float | None = None):
    """Grid-search (unless C/gamma are fixed) and fit. Returns (model, grid result or None)."""
    if not records:
        raise DataError("training split is empty")
    desc = records[0].desc
    channels = None if wavelengths is None else desc.channel_indices(wavelengths)
    x, y = training_matrix(records, channels, cfg.mixed_purity, exclude)
    grid = None
    if C is None:
        C, gamma = cfg.C, cfg.gamma
    if C is None:
        grid = classifier.grid_search(x, y, cfg.gamma_grid, cfg.C_grid, cfg.folds, cfg.seed, cfg.smo_tol)
        C, gamma = grid.C, grid.gamma
    used = tuple(desc.wavelengths) if wavelengths is None else tuple(float(w) for w in wavelengths)
    meta = {"wavelengths": list(used), "folds": cfg.folds, "n_train": int(len(y)),
            "gamma_grid": list(cfg.gamma_grid), "C_grid": list(cfg.C_grid),
            "grid_searched": grid is not None}
    model = classifier.fit(x, y, C, gamma, class_names, cfg.smo_tol, cfg.seed, meta)
    return model, grid


# --- evaluation -------------------------------------------------------------

def _nan_to_none(a: np.ndarray) -> list:
    return [[None if not np.isfinite(v) else round(float(v), 10) for v in row] for row in a]


def evaluate(model: classifier.MulticlassModel, records: Sequence[ImageRecord], cfg: PipelineConfig,
             class_names: Sequence[str]) -> dict:
    """Base and thresholded superpixel accuracy, tagging, confusion matrices and tau sweeps."""
    per_image = [predict_record(model, rec, None, cfg.mixed_purity) for rec in records]
    thr = ConfidenceThreshold(cfg.tau, cfg.metric)
    class_ids = list(model.class_ids)

    images = []
    base_tags, conf_tags = [], []
    for rec, preds in zip(records, per_image):
        truth = truth_tags(preds)
        thresholded = with_threshold(preds, thr)
        bt = tag_image(preds, truth)
        ct = tag_image(thresholded, truth)
        base_tags.append(bt)
        conf_tags.append(ct)
        images.append({
            "image_id": rec.image_id,
            "superpixels": rec.n_superpixels,
            "predicted": len(preds),
            "no_prediction": len(rec.desc.degenerate),
            "acc_spx_base": acc_spx(preds),
            "acc_spx_tau": acc_spx(thresholded),
            "confident_fraction": (sum(p.confident for p in thresholded) / len(preds)) if preds else None,
            "truth_tags": sorted(class_names[c] for c in truth),
            "tags_base": sorted(class_names[c] for c in bt.tags),
            "tags_tau": sorted(class_names[c] for c in ct.tags),
        })

    base_med, base_iqr = _median_iqr([im["acc_spx_base"] for im in images])
    all_preds = [p for preds in per_image for p in preds]
    cm_tau, counts_tau = confusion_matrix(with_threshold(all_preds, thr), class_ids)
    cm_base, counts_base = confusion_matrix(all_preds, class_ids)
    sweeps = {m.value: tau_sweep(per_image, cfg.tau_grid, m) for m in Metric}
    return {
        "classes": [class_names[c] for c in class_ids],
        "hyperparameters": {"C": model.metadata.get("C"), "gamma": model.metadata.get("gamma")},
        "wavelengths": model.metadata.get("wavelengths"),
        "base": {"tau": None, "median_acc_spx": base_med, "iqr_acc_spx": base_iqr,
                 "pooled_acc_spx": acc_spx(all_preds)},
        "threshold": {"tau": cfg.tau, "metric": cfg.metric.value,
                      "median_acc_spx": _median_iqr([im["acc_spx_tau"] for im in images])[0],
                      "iqr_acc_spx": _median_iqr([im["acc_spx_tau"] for im in images])[1],
                      "pooled_acc_spx": acc_spx(with_threshold(all_preds, thr))},
        "tau_sweep": sweeps,
        "tagging": {"base": acc_tag(base_tags), "tau": acc_tag(conf_tags)},
        "confusion_matrix": {"tau": _nan_to_none(cm_tau), "tau_counts": counts_tau.tolist(),
                             "base": _nan_to_none(cm_base), "base_counts": counts_base.tolist()},
        "counts": {"images": len(records), "superpixels": sum(r.n_superpixels for r in records),
                   "predicted": len(all_preds),
                   "no_prediction": sum(len(r.desc.degenerate) for r in records),
                   "mixed": sum(p.mixed for p in all_preds)},
        "images": images,
    }


def leave_one_organ_out(train_records: Sequence[ImageRecord], test_records: Sequence[ImageRecord],
                        cfg: PipelineConfig, class_names: Sequence[str], C: float, gamma: float,
                        tau: float = 0.9, metric: Metric | str = Metric.GC,
                        wavelengths: Sequence[float] | None = None) -> list[dict]:
    """Retrain without each organ in turn; %LC on the held-out organ (Ex) vs the rest (In)."""
    classes = sorted({int(c) for r in train_records for c in r.truth if c != NO_CLASS})
    if len(classes) < 3:
        raise DataError("leave-one-organ-out needs at least three classes")
    thr = ConfidenceThreshold(tau, metric)
    rows = []
    for organ in classes:
        model, _ = train(train_records, cfg, class_names, wavelengths, exclude=[organ], C=C, gamma=gamma)
        preds = [p for rec in test_records for p in predict_record(model, rec, thr, cfg.mixed_purity)]
        ex = [p for p in preds if p.truth == organ]
        inc = [p for p in preds if p.truth is not None and p.truth != organ]
        lc_ex = low_confidence_fraction(ex, thr)
        lc_in = low_confidence_fraction(inc, thr)
        rows.append({"organ": class_names[organ], "class_id": organ,
                     "lc_ex": None if lc_ex is None else 100.0 * lc_ex,
                     "lc_in": None if lc_in is None else 100.0 * lc_in,
                     "n_ex": len(ex), "n_in": len(inc)})
        log.info("leave-one-out %s: %%LC Ex=%s In=%s", class_names[organ], rows[-1]["lc_ex"], rows[-1]["lc_in"])
    return rows


# --- overlays ---------------------------------------------------------------

PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
], dtype=np.uint8)
LOW_CONFIDENCE_GRAY = (128, 128, 128)
SENTINEL = (255, 0, 255)


def write_overlays(record: ImageRecord, preds: Sequence[SuperpixelPrediction], metric: Metric | str,
                   out_dir: str | Path) -> tuple[Path, Path]:
    """Classification map (confident superpixels in class colours, others gray) and confidence map."""
    metric = Metric(metric)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    h, w = record.labels.shape
    cls_img = np.zeros((h, w, 3), dtype=np.uint8)
    conf_img = np.zeros((h, w, 3), dtype=np.uint8)
    cls_img[:] = SENTINEL
    conf_img[:] = SENTINEL
    n = record.n_superpixels
    colour = np.tile(np.array(SENTINEL, dtype=np.uint8), (n, 1))
    grey = np.tile(np.array(SENTINEL, dtype=np.uint8), (n, 1))
    for p in preds:
        colour[p.spx_id] = PALETTE[p.predicted % len(PALETTE)] if p.confident else LOW_CONFIDENCE_GRAY
        if p.confident:
            v = int(round(255 * np.clip(p.scores[metric.value], 0, 1)))
            grey[p.spx_id] = (v, v, v)
    cls_img = colour[record.labels]
    conf_img = grey[record.labels]
    cls_img[record.mask] = SENTINEL
    conf_img[record.mask] = SENTINEL
    a = out_dir / f"{record.image_id}_classes.png"
    b = out_dir / f"{record.image_id}_confidence.png"
    Image.fromarray(cls_img, mode="RGB").save(a)
    Image.fromarray(conf_img, mode="RGB").save(b)
    return a, b
