"""Per-superpixel texture (LBP-riu2 histograms) and average-spectrum features.

Feature layout per channel i: [H(1,8) | H(2,16) | H(3,24) | AS_i], channels in
stack order. Each histogram block sums to one; the AS entries of all channels
together have unit L2 norm.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .errors import DegenerateRegionError
from .imaging import ChannelStack
from .superpixel import SuperpixelSegmentation

INVALID = -1
MIN_VALID_PIXELS = 16
DEFAULT_PAIRS = ((1, 8), (2, 16), (3, 24))
_SNAP = 1e-9


@dataclass(frozen=True)
class LbpConfig:
    pairs: tuple[tuple[int, int], ...] = DEFAULT_PAIRS

    def __post_init__(self):
        for r, p in self.pairs:
            if r < 1 or p < 4:
                raise ValueError(f"LBP needs R >= 1 and P >= 4, got ({r}, {p})")

    @property
    def histogram_length(self) -> int:
        return sum(p + 2 for _, p in self.pairs)


def sample_offsets(radius: int, points: int) -> np.ndarray:
    """(dy, dx) of the P circle samples; first at angle 0, counter-clockwise on screen."""
    angles = 2.0 * np.pi * np.arange(points) / points
    dx = radius * np.cos(angles)
    dy = -radius * np.sin(angles)
    off = np.stack([dy, dx], axis=1)
    near = np.abs(off - np.round(off)) < _SNAP
    off[near] = np.round(off[near])
    return off


def riu2_code(bits: np.ndarray) -> np.ndarray:
    """Rotation-invariant uniform code from thresholded samples.

    ``bits`` has the neighbour index on the last axis. Returns the number of
    set bits where the circular 0/1 transition count is at most 2, else P + 1.
    """
    bits = np.asarray(bits, dtype=np.int8)
    p = bits.shape[-1]
    transitions = np.abs(bits - np.roll(bits, 1, axis=-1)).sum(axis=-1)
    ones = bits.sum(axis=-1)
    return np.where(transitions <= 2, ones, p + 1)


@njit(cache=True)
def _riu2_kernel(g, r, y0, x0, fy, fx):
    h, w = g.shape
    points = y0.shape[0]
    out = np.empty((h - 2 * r, w - 2 * r), dtype=np.int16)
    bits = np.empty(points, dtype=np.int8)
    for i in range(r, h - r):
        for j in range(r, w - r):
            gc = g[i, j]
            for k in range(points):
                a = i + y0[k]
                b = j + x0[k]
                # interpolate as a + f * (b - a) so a flat patch reproduces its value exactly
                top = g[a, b]
                if fx[k] > 0:
                    top = top + fx[k] * (g[a, b + 1] - top)
                if fy[k] > 0:
                    bot = g[a + 1, b]
                    if fx[k] > 0:
                        bot = bot + fx[k] * (g[a + 1, b + 1] - bot)
                    top = top + fy[k] * (bot - top)
                bits[k] = 1 if top >= gc else 0
            ones = 0
            trans = 0
            for k in range(points):
                ones += bits[k]
                if bits[k] != bits[k - 1]:
                    trans += 1
            out[i - r, j - r] = ones if trans <= 2 else points + 1
    return out


def lbp_code_map(channel: np.ndarray, radius: int, points: int, mask: np.ndarray | None = None) -> np.ndarray:
    """LBP-riu2 code per pixel; -1 where the neighbourhood leaves the image or touches ``mask``."""
    if radius < 1 or points < 4:
        raise ValueError(f"LBP needs R >= 1 and P >= 4, got ({radius}, {points})")
    g = np.asarray(channel, dtype=np.float64)
    h, w = g.shape
    codes = np.full((h, w), INVALID, dtype=np.int16)
    r = radius
    if h <= 2 * r or w <= 2 * r:
        return codes
    ih, iw = h - 2 * r, w - 2 * r

    def shifted(arr, oy, ox):
        return arr[r + oy:r + oy + ih, r + ox:r + ox + iw]

    offsets = sample_offsets(r, points)
    y0 = np.floor(offsets[:, 0]).astype(np.int64)
    x0 = np.floor(offsets[:, 1]).astype(np.int64)
    fy = offsets[:, 0] - y0
    fx = offsets[:, 1] - x0
    support = {(0, 0)}
    for k in range(points):
        support.add((y0[k], x0[k]))
        if fx[k] > 0:
            support.add((y0[k], x0[k] + 1))
        if fy[k] > 0:
            support.add((y0[k] + 1, x0[k]))
            if fx[k] > 0:
                support.add((y0[k] + 1, x0[k] + 1))
    inner = _riu2_kernel(g, r, y0, x0, fy, fx)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        touched = np.zeros((ih, iw), dtype=bool)
        for oy, ox in support:
            touched |= shifted(m, oy, ox)
        inner[touched] = INVALID
    codes[r:h - r, r:w - r] = inner
    return codes


def lbp_histogram(codes: np.ndarray, region: np.ndarray, points: int) -> np.ndarray:
    """Sum-to-one histogram of codes 0..P+1 over the valid pixels of ``region`` (flat indices)."""
    vals = np.asarray(codes).ravel()[np.asarray(region)]
    vals = vals[vals != INVALID]
    if vals.size == 0:
        raise DegenerateRegionError("region has no pixel with a valid LBP neighbourhood")
    hist = np.bincount(vals, minlength=points + 2).astype(np.float64)
    return hist / vals.size


def average_spectrum(sr: ChannelStack, region: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Mean reflectance per channel over unmasked region pixels, L2-normalised."""
    region = np.asarray(region)
    if mask is not None:
        region = region[~np.asarray(mask, dtype=bool).ravel()[region]]
    if region.size == 0:
        raise DegenerateRegionError("every pixel of the region is masked")
    pixels = sr.data.reshape(-1, sr.channels)[region]
    mean = pixels.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise DegenerateRegionError("average spectrum is identically zero")
    return mean / norm


@dataclass
class RegionDescriptors:
    """Channel-separable per-superpixel statistics.

    ``histograms`` is (n_spx, N_C, l_HLBP) and ``mean_spectra`` (n_spx, N_C),
    unnormalised. Storing them per channel lets any band subset be assembled
    without recomputing texture.
    """

    ids: np.ndarray
    histograms: np.ndarray
    mean_spectra: np.ndarray
    wavelengths: tuple[float, ...]
    degenerate: list[int] = field(default_factory=list)

    def channel_indices(self, wavelengths: Sequence[float]) -> list[int]:
        out = []
        for w in wavelengths:
            matches = [i for i, v in enumerate(self.wavelengths) if abs(v - w) < 0.5]
            if not matches:
                raise KeyError(f"wavelength {w:g} nm not available")
            out.append(matches[0])
        return out


@dataclass
class FeatureSet:
    ids: np.ndarray  # superpixel ids, ascending
    matrix: np.ndarray  # (K, 55 * N_C)
    degenerate: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


def describe_regions(
    sr: ChannelStack,
    seg: SuperpixelSegmentation,
    mask: np.ndarray | None = None,
    cfg: LbpConfig = LbpConfig(),
) -> RegionDescriptors:
    if seg.shape != sr.shape:
        raise ValueError(f"segmentation {seg.shape} and stack {sr.shape} differ in size")
    n = seg.n
    flat_labels = seg.labels.ravel()
    mask_flat = np.zeros(flat_labels.size, dtype=bool) if mask is None else np.asarray(mask, bool).ravel()

    # validity of an LBP neighbourhood depends on geometry and mask only, not the channel
    code_maps = []
    enough = np.ones(n, dtype=bool)
    for r, p in cfg.pairs:
        maps = [lbp_code_map(sr.channel(c), r, p, mask).ravel() for c in range(sr.channels)]
        valid = maps[0] != INVALID
        valid_count = np.bincount(flat_labels[valid], minlength=n)
        enough &= valid_count >= MIN_VALID_PIXELS
        code_maps.append((p, maps, valid, valid_count))

    usable = np.bincount(flat_labels[~mask_flat], minlength=n)
    means = np.empty((n, sr.channels))
    data = sr.data.reshape(-1, sr.channels)
    for c in range(sr.channels):
        sums = np.bincount(flat_labels[~mask_flat], weights=data[~mask_flat, c], minlength=n)
        with np.errstate(invalid="ignore", divide="ignore"):
            means[:, c] = sums / usable
    ok = enough & (usable > 0) & (np.linalg.norm(np.nan_to_num(means), axis=1) > 0)

    hists = np.zeros((n, sr.channels, cfg.histogram_length))
    offset = 0
    for p, maps, valid, valid_count in code_maps:
        bins = p + 2
        lab = flat_labels[valid]
        for c, codes in enumerate(maps):
            counts = np.bincount(lab * bins + codes[valid], minlength=n * bins).reshape(n, bins)
            with np.errstate(invalid="ignore", divide="ignore"):
                hists[:, c, offset:offset + bins] = counts / valid_count[:, None]
        offset += bins

    ids = np.flatnonzero(ok)
    return RegionDescriptors(
        ids=ids,
        histograms=hists[ids],
        mean_spectra=means[ids],
        wavelengths=sr.wavelengths,
        degenerate=[int(k) for k in np.flatnonzero(~ok)],
    )


def feature_matrix(desc: RegionDescriptors, channels: Sequence[int] | None = None) -> np.ndarray:
    """Concatenate per-channel [histograms | AS] blocks for the chosen channels."""
    idx = list(range(len(desc.wavelengths))) if channels is None else list(channels)
    spectra = desc.mean_spectra[:, idx]
    spectra = spectra / np.linalg.norm(spectra, axis=1, keepdims=True)
    blocks = np.concatenate([desc.histograms[:, idx, :], spectra[:, :, None]], axis=2)
    return blocks.reshape(len(desc.ids), -1)


def assemble_features(
    sr: ChannelStack,
    seg: SuperpixelSegmentation,
    mask: np.ndarray | None = None,
    cfg: LbpConfig = LbpConfig(),
) -> FeatureSet:
    """Feature vectors for every non-degenerate superpixel, length (l_HLBP + 1) * N_C."""
    desc = describe_regions(sr, seg, mask, cfg)
    return FeatureSet(desc.ids, feature_matrix(desc), desc.degenerate)


def write_feature_csv(path: str | Path, rows: list[tuple[str, int, np.ndarray, str]]) -> None:
    """One row per superpixel: image_id, spx_id, feature columns, gt_label."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    width = len(rows[0][2]) if rows else 0
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "spx_id", *[f"f{i}" for i in range(width)], "gt_label"])
        for image_id, spx, vec, gt in rows:
            writer.writerow([image_id, spx, *(repr(float(v)) for v in vec), gt])
