"""Linear spectral clustering (LSC) superpixels.

Pixels are lifted into a 10-D embedding whose inner product approximates a
normalised-cuts kernel; weighted k-means in that space, restricted to a local
search window around each seed, yields compact, boundary-adherent regions.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from PIL import Image
from skimage.color import rgb2lab
from skimage.measure import label as connected_label

from .errors import DataError
from .imaging import ChannelStack

COLOR_COEFF = 20.0
# Spatial weight per unit compactness; 0.1 gives regular regions on sensor-noise-level texture.
SPATIAL_COEFF = 100.0
MAX_ITERATIONS = 20
CONVERGED_FRACTION = 1e-3


@dataclass
class SuperpixelSegmentation:
    labels: np.ndarray  # (H, W) int32, dense ids 0..N-1
    regions: list[np.ndarray] = field(repr=False)  # flat pixel indices per id
    adjacency: list[set[int]] = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.regions)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n)

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "SuperpixelSegmentation":
        """Build from an arbitrary label map, relabelling densely in raster order."""
        labels = np.asarray(labels)
        _, first, inverse = np.unique(labels.ravel(), return_index=True, return_inverse=True)
        # rank unique values by first raster occurrence
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        dense = rank[inverse].reshape(labels.shape).astype(np.int32)
        n = order.size
        flat = dense.ravel()
        sort_idx = np.argsort(flat, kind="stable")
        bounds = np.searchsorted(flat[sort_idx], np.arange(n + 1))
        regions = [sort_idx[bounds[k]:bounds[k + 1]] for k in range(n)]
        adjacency: list[set[int]] = [set() for _ in range(n)]
        for a, b in _neighbour_pairs(dense):
            adjacency[a].add(b)
            adjacency[b].add(a)
        return cls(dense, regions, adjacency)


def _neighbour_pairs(labels: np.ndarray) -> np.ndarray:
    """Unique unordered pairs of distinct 4-adjacent labels."""
    h = np.stack([labels[:, :-1].ravel(), labels[:, 1:].ravel()], axis=1)
    v = np.stack([labels[:-1, :].ravel(), labels[1:, :].ravel()], axis=1)
    pairs = np.concatenate([h, v])
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs.sort(axis=1)
    if pairs.size == 0:
        return pairs
    return np.unique(pairs, axis=0)


def _boundary_counts(labels: np.ndarray) -> Counter:
    """Shared 4-neighbour edge counts between distinct labels, keyed (a, b) with a < b."""
    h = np.stack([labels[:, :-1].ravel(), labels[:, 1:].ravel()], axis=1)
    v = np.stack([labels[:-1, :].ravel(), labels[1:, :].ravel()], axis=1)
    pairs = np.concatenate([h, v])
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs.sort(axis=1)
    if pairs.size == 0:
        return Counter()
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    return Counter({(int(a), int(b)): int(c) for (a, b), c in zip(uniq, counts)})


def lsc_embedding(rgb: np.ndarray, step_x: float, step_y: float, compactness: float) -> np.ndarray:
    """10-D LSC feature map, shape (H, W, 10)."""
    lab = rgb2lab(np.clip(rgb, 0.0, 1.0))
    half_pi = np.pi / 2
    theta_l = lab[..., 0] / 100.0 * half_pi
    theta_a = (lab[..., 1] + 128.0) / 255.0 * half_pi
    theta_b = (lab[..., 2] + 128.0) / 255.0 * half_pi
    h, w = rgb.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    theta_x = xx / step_x * half_pi
    theta_y = yy / step_y * half_pi
    cc = COLOR_COEFF
    cs = SPATIAL_COEFF * compactness
    return np.stack(
        [
            cc * np.cos(theta_l), cc * np.sin(theta_l),
            2.55 * cc * np.cos(theta_a), 2.55 * cc * np.sin(theta_a),
            2.55 * cc * np.cos(theta_b), 2.55 * cc * np.sin(theta_b),
            cs * np.cos(theta_x), cs * np.sin(theta_x),
            cs * np.cos(theta_y), cs * np.sin(theta_y),
        ],
        axis=-1,
    )


def _grid_seeds(h: int, w: int, avg_size: int) -> tuple[np.ndarray, float, float]:
    nx = max(1, int(round(w / avg_size)))
    ny = max(1, int(round(h / avg_size)))
    step_x = w / nx
    step_y = h / ny
    xs = ((np.arange(nx) + 0.5) * step_x).astype(int)
    ys = ((np.arange(ny) + 0.5) * step_y).astype(int)
    seeds = np.array([(y, x) for y in ys for x in xs], dtype=np.int64)
    return seeds, step_x, step_y


def _perturb_seeds(seeds: np.ndarray, gray: np.ndarray) -> np.ndarray:
    """Move each seed to the lowest-gradient pixel of its 3x3 neighbourhood."""
    gy, gx = np.gradient(gray)
    grad = gx * gx + gy * gy
    h, w = gray.shape
    out = seeds.copy()
    for k, (y, x) in enumerate(seeds):
        best = (np.inf, y, x)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and grad[yy, xx] < best[0]:
                    best = (grad[yy, xx], yy, xx)
        out[k] = best[1:]
    return out


def _initial_labels(h: int, w: int, step_x: float, step_y: float, nx: int) -> np.ndarray:
    cx = np.minimum((np.arange(w) / step_x).astype(int), nx - 1)
    ny = int(round(h / step_y))
    cy = np.minimum((np.arange(h) / step_y).astype(int), ny - 1)
    return (cy[:, None] * nx + cx[None, :]).astype(np.int64)


@njit(cache=True)
def _assign(psi, centers, cpos, ry, rx, labels):
    """Nearest-centre assignment inside each centre's local search window."""
    h, w, dim = psi.shape
    dist = np.full((h, w), np.inf)
    new = labels.copy()
    for c in range(centers.shape[0]):
        cy = int(cpos[c, 0])
        cx = int(cpos[c, 1])
        for i in range(max(0, cy - ry), min(h, cy + ry + 1)):
            for j in range(max(0, cx - rx), min(w, cx + rx + 1)):
                d = 0.0
                for k in range(dim):
                    t = psi[i, j, k] - centers[c, k]
                    d += t * t
                # strict: on ties the lower cluster id (visited first) keeps the pixel
                if d < dist[i, j]:
                    dist[i, j] = d
                    new[i, j] = c
    return new


@njit(cache=True)
def _update_centres(phi, weight, labels, centers, cpos):
    """Weighted-mean centres in feature space plus mean pixel position, in place."""
    h, w, dim = phi.shape
    k = centers.shape[0]
    fsum = np.zeros((k, dim))
    wsum = np.zeros(k)
    psum = np.zeros((k, 2))
    count = np.zeros(k)
    for i in range(h):
        for j in range(w):
            c = labels[i, j]
            for d in range(dim):
                fsum[c, d] += phi[i, j, d]
            wsum[c] += weight[i, j]
            psum[c, 0] += i
            psum[c, 1] += j
            count[c] += 1
    for c in range(k):
        if count[c] > 0:
            for d in range(dim):
                centers[c, d] = fsum[c, d] / wsum[c]
            cpos[c, 0] = psum[c, 0] / count[c]
            cpos[c, 1] = psum[c, 1] / count[c]


def _kmeans(phi: np.ndarray, seeds: np.ndarray, step_x: float, step_y: float, init_labels: np.ndarray) -> np.ndarray:
    h, w, _ = phi.shape
    k = len(seeds)
    flat_phi = phi.reshape(-1, phi.shape[-1])
    weight = flat_phi @ flat_phi.mean(axis=0)
    psi = phi / weight.reshape(h, w, 1)

    centers = psi[seeds[:, 0], seeds[:, 1]].copy()
    cpos = seeds.astype(np.float64)
    labels = init_labels.copy()
    rx, ry = int(np.ceil(step_x)), int(np.ceil(step_y))
    for _ in range(MAX_ITERATIONS):
        new = _assign(psi, centers, cpos, ry, rx, labels)
        changed = int(np.count_nonzero(new != labels))
        labels = new
        _update_centres(phi, weight.reshape(h, w), labels, centers, cpos)
        if changed < CONVERGED_FRACTION * h * w:
            break
    return labels


def enforce_connectivity(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Merge orphaned and undersized fragments into their best-bordering neighbour.

    Each cluster keeps its largest 4-connected component provided it has at
    least ``min_size`` pixels; every other fragment joins the adjacent region
    with which it shares the longest boundary (ties: lowest fragment id).
    """
    comp = connected_label(labels, background=-1, connectivity=1) - 1  # 0-based
    n = int(comp.max()) + 1
    if n <= 1:
        return np.zeros_like(labels, dtype=np.int64)
    sizes = np.bincount(comp.ravel(), minlength=n)
    owner = np.zeros(n, dtype=np.int64)
    owner[comp.ravel()] = labels.ravel()

    keep = np.zeros(n, dtype=bool)
    order = np.lexsort((np.arange(n), -sizes, owner))  # by cluster, then size desc, then id
    seen = set()
    for c in order:
        if owner[c] not in seen:
            seen.add(owner[c])
            keep[c] = sizes[c] >= min_size

    if keep.all():
        return comp

    border: dict[int, Counter] = {c: Counter() for c in range(n)}
    for (a, b), cnt in _boundary_counts(comp).items():
        border[a][b] += cnt
        border[b][a] += cnt

    parent = np.arange(n)
    group_size = sizes.astype(np.int64).copy()
    to_merge = [int(c) for c in np.lexsort((np.arange(n), sizes)) if not keep[c]]
    for c in to_merge:
        if parent[c] != c or not border[c]:
            continue
        target = max(border[c].items(), key=lambda kv: (kv[1], -kv[0]))[0]
        # absorb c into target
        parent[c] = target
        group_size[target] += group_size[c]
        for nb, cnt in border.pop(c).items():
            border[nb].pop(c, None)
            if nb != target:
                border[target][nb] += cnt
                border[nb][target] += cnt
    # resolve chains
    for c in range(n):
        r = c
        while parent[r] != r:
            r = parent[r]
        parent[c] = r
    return parent[comp]


def lsc_segment(rgb: ChannelStack, avg_size: int = 150, compactness: float = 0.1) -> SuperpixelSegmentation:
    """Superpixels of a three-channel composite.

    Seeds sit on a regular grid of pitch ``avg_size``; the result is a total
    partition into 4-connected regions with dense ids.
    """
    if rgb.channels != 3:
        raise DataError(f"LSC expects a 3-channel composite, got {rgb.channels} channels")
    if not 0 < compactness <= 1:
        raise ValueError("compactness must lie in (0, 1]")
    h, w = rgb.shape
    if avg_size < 2 or avg_size * avg_size >= w * h:
        raise DataError(f"image {w}x{h} is smaller than one seed cell of side {avg_size}")
    seeds, step_x, step_y = _grid_seeds(h, w, avg_size)
    nx = max(1, int(round(w / avg_size)))
    phi = lsc_embedding(rgb.data, step_x, step_y, compactness)
    gray = rgb.data.mean(axis=2)
    seeds = _perturb_seeds(seeds, gray)
    init = _initial_labels(h, w, step_x, step_y, nx)
    labels = _kmeans(phi, seeds, step_x, step_y, init)
    labels = enforce_connectivity(labels, max(1, (avg_size * avg_size) // 16))
    return SuperpixelSegmentation.from_labels(labels)


def region_stats(seg: SuperpixelSegmentation, mask: np.ndarray | None) -> np.ndarray:
    """Per-region count of unmasked pixels."""
    if mask is None:
        return seg.sizes()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != seg.shape:
        raise DataError(f"mask shape {mask.shape} != segmentation shape {seg.shape}")
    return np.bincount(seg.labels.ravel(), weights=(~mask).ravel(), minlength=seg.n).astype(np.int64)


def boundary_map(labels: np.ndarray) -> np.ndarray:
    b = np.zeros(labels.shape, dtype=bool)
    b[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    b[:-1, :] |= labels[:-1, :] != labels[1:, :]
    return b


def save_label_png(seg: SuperpixelSegmentation, path: str | Path) -> None:
    Image.fromarray(seg.labels.astype(np.uint16)).save(path)


def save_boundary_overlay(rgb: ChannelStack, seg: SuperpixelSegmentation, path: str | Path) -> None:
    img = (np.clip(rgb.data, 0, 1) * 255).astype(np.uint8)
    img[boundary_map(seg.labels)] = (255, 255, 0)
    Image.fromarray(img, mode="RGB").save(path)
