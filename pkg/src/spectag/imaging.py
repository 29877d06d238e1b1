"""Multi-channel image stacks: reflectance calibration, denoising, specular masking."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit
from PIL import Image

from .errors import CalibrationError, DataError

# Band layout of the 8-channel multispectral camera (centre wavelength, FWHM), nm.
MI_WAVELENGTHS = (470.0, 480.0, 511.0, 560.0, 580.0, 600.0, 660.0, 700.0)
MI_FWHM = (20.0, 25.0, 20.0, 20.0, 20.0, 20.0, 20.0, 20.0)
RGB_WAVELENGTHS = (700.0, 560.0, 470.0)

CALIBRATION_EPS = 1e-9
UINT16_MAX = 65535


@dataclass
class ChannelStack:
    """H x W x N_C image with per-channel band metadata.

    ``data`` holds raw counts or reflectance as float64, shape (H, W, N_C).
    """

    data: np.ndarray
    wavelengths: tuple[float, ...]
    fwhm: tuple[float, ...] = field(default=())

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3:
            raise DataError(f"stack data must be H x W x C, got shape {self.data.shape}")
        self.wavelengths = tuple(float(w) for w in self.wavelengths)
        if not self.fwhm:
            self.fwhm = (20.0,) * len(self.wavelengths)
        self.fwhm = tuple(float(w) for w in self.fwhm)
        if not (self.channels == len(self.wavelengths) == len(self.fwhm)):
            raise DataError(
                f"{self.channels} channels but {len(self.wavelengths)} wavelengths "
                f"and {len(self.fwhm)} FWHM values"
            )

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def channel(self, i: int) -> np.ndarray:
        return self.data[:, :, i]

    def index_of(self, wavelength: float) -> int:
        for i, w in enumerate(self.wavelengths):
            if abs(w - wavelength) < 0.5:
                return i
        raise DataError(f"wavelength {wavelength:g} nm not present in stack {self.wavelengths}")

    def select(self, indices: Sequence[int]) -> "ChannelStack":
        idx = list(indices)
        return ChannelStack(
            self.data[:, :, idx].copy(),
            tuple(self.wavelengths[i] for i in idx),
            tuple(self.fwhm[i] for i in idx),
        )


@dataclass
class CalibrationPair:
    dark: ChannelStack
    white: ChannelStack

    def __post_init__(self):
        if self.dark.data.shape != self.white.data.shape:
            raise DataError("dark and white references differ in shape")
        if self.dark.wavelengths != self.white.wavelengths:
            raise DataError("dark and white references differ in wavelengths")


@dataclass
class GroundTruth:
    """Per-pixel class ids; -1 marks unlabeled pixels."""

    labels: np.ndarray
    class_names: tuple[str, ...]

    UNLABELED = -1

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        self.class_names = tuple(self.class_names)
        bad = (self.labels != self.UNLABELED) & (
            (self.labels < 0) | (self.labels >= len(self.class_names))
        )
        if bad.any():
            raise DataError("ground truth references class ids outside the organ list")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def present_classes(self) -> set[int]:
        ids = np.unique(self.labels)
        return {int(i) for i in ids if i != self.UNLABELED}


def _check_compatible(a: ChannelStack, b: ChannelStack, what: str) -> None:
    if a.data.shape != b.data.shape:
        raise DataError(f"{what}: shape {a.data.shape} != {b.data.shape}")
    if a.wavelengths != b.wavelengths:
        raise DataError(f"{what}: wavelengths {a.wavelengths} != {b.wavelengths}")


def normalize_reflectance(raw: ChannelStack, calib: CalibrationPair, clamp: bool = True) -> ChannelStack:
    """Convert raw counts to reflectance with dark/white references.

    Sr = (I - D) / (W - D), clamped to [0, 1] unless ``clamp`` is False.
    """
    _check_compatible(raw, calib.dark, "raw vs dark reference")
    _check_compatible(raw, calib.white, "raw vs white reference")
    span = calib.white.data - calib.dark.data
    degenerate = np.abs(span) < CALIBRATION_EPS
    if degenerate.any():
        ch = int(np.argwhere(degenerate.any(axis=(0, 1)))[0, 0])
        raise CalibrationError(
            f"white and dark references coincide in channel {ch} "
            f"({raw.wavelengths[ch]:g} nm) at {int(degenerate[:, :, ch].sum())} pixels"
        )
    sr = (raw.data - calib.dark.data) / span
    if clamp:
        np.clip(sr, 0.0, 1.0, out=sr)
    return ChannelStack(sr, raw.wavelengths, raw.fwhm)


@njit(cache=True)
def _diffuse(u, free, iterations, kappa, step):
    h, w = u.shape
    delta = np.empty_like(u)
    for _ in range(iterations):
        delta[:] = 0.0
        # each link's flux is added to one end and removed from the other, so the sum is conserved
        for i in range(h - 1):
            for j in range(w):
                if free[i, j] and free[i + 1, j]:
                    d = u[i + 1, j] - u[i, j]
                    f = np.exp(-(d / kappa) ** 2) * d
                    delta[i, j] += f
                    delta[i + 1, j] -= f
        for i in range(h):
            for j in range(w - 1):
                if free[i, j] and free[i, j + 1]:
                    d = u[i, j + 1] - u[i, j]
                    f = np.exp(-(d / kappa) ** 2) * d
                    delta[i, j] += f
                    delta[i, j + 1] -= f
        for i in range(h):
            for j in range(w):
                u[i, j] += step * delta[i, j]


def anisotropic_diffusion(
    channel: np.ndarray,
    iterations: int = 15,
    kappa: float = 0.02,
    step: float = 0.2,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Perona-Malik diffusion with conduction exp(-(grad/kappa)^2).

    Four-neighbour scheme with zero-flux (Neumann) borders. Pixels set in
    ``mask`` neither give nor receive flux and are returned unchanged.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if not 0 < step <= 0.25:
        raise ValueError("step must lie in (0, 0.25] for a stable 4-neighbour scheme")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    u = np.array(channel, dtype=np.float64)
    if not np.isfinite(u).all():
        raise DataError("anisotropic_diffusion: non-finite input values")
    if iterations == 0:
        return u

    free = np.ones(u.shape, dtype=np.bool_) if mask is None else ~np.asarray(mask, dtype=bool)
    _diffuse(u, free, iterations, float(kappa), float(step))
    return u


def value_channel(stack: ChannelStack, rgb_indices: Sequence[int]) -> np.ndarray:
    """HSV value (per-pixel max over the three colour channels)."""
    if stack.channels < 3:
        raise DataError("specular masking needs at least 3 channels")
    idx = list(rgb_indices)
    if len(idx) != 3 or any(not 0 <= i < stack.channels for i in idx):
        raise DataError(f"invalid RGB channel indices {idx} for a {stack.channels}-channel stack")
    return stack.data[:, :, idx].max(axis=2)


def mask_specular(stack: ChannelStack, rgb_indices: Sequence[int], v_threshold: float = 0.95) -> np.ndarray:
    """Boolean mask of specular pixels: HSV value strictly above ``v_threshold``."""
    if not 0 < v_threshold <= 1:
        raise ValueError("v_threshold must lie in (0, 1]")
    return value_channel(stack, rgb_indices) > v_threshold


def rgb_indices(stack: ChannelStack, wavelengths: Sequence[float] = RGB_WAVELENGTHS) -> list[int]:
    return [stack.index_of(w) for w in wavelengths]


def simulate_rgb(stack: ChannelStack, band_indices: Sequence[int] | None = None) -> ChannelStack:
    """Pick three bands as an R, G, B composite (default 700/560/470 nm)."""
    if band_indices is None:
        band_indices = rgb_indices(stack)
    idx = list(band_indices)
    if len(idx) != 3 or len(set(idx)) != 3:
        raise DataError(f"need three distinct band indices, got {idx}")
    if any(not 0 <= i < stack.channels for i in idx):
        raise DataError(f"band index out of range in {idx}")
    return stack.select(idx)


# --- on-disk format -------------------------------------------------------

def _channel_filename(k: int, wavelength: float) -> str:
    return f"ch{k}_{wavelength:g}nm.png"


def to_uint16(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * UINT16_MAX).astype(np.uint16)


def save_stack(stack: ChannelStack, directory: str | Path) -> None:
    """Write one 16-bit PNG per channel plus a ``stack.json`` sidecar.

    Values are expected on the unit interval and quantised to 16 bits.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for k, wl in enumerate(stack.wavelengths):
        name = _channel_filename(k, wl)
        Image.fromarray(to_uint16(stack.data[:, :, k])).save(directory / name)
        files.append(name)
    meta = {
        "wavelengths": list(stack.wavelengths),
        "fwhm": list(stack.fwhm),
        "channels": files,
        "width": stack.width,
        "height": stack.height,
    }
    (directory / "stack.json").write_text(json.dumps(meta, indent=2))


def load_stack(directory: str | Path) -> ChannelStack:
    directory = Path(directory)
    sidecar = directory / "stack.json"
    if not sidecar.exists():
        raise DataError(f"missing stack sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    planes = []
    for name in meta["channels"]:
        path = directory / name
        if not path.exists():
            raise DataError(f"missing channel image {path}")
        arr = np.asarray(Image.open(path))
        if arr.dtype != np.uint16:
            arr = arr.astype(np.uint16)
        planes.append(arr.astype(np.float64) / UINT16_MAX)
    return ChannelStack(np.stack(planes, axis=2), meta["wavelengths"], meta["fwhm"])


def save_calibration(calib: CalibrationPair, directory: str | Path) -> None:
    directory = Path(directory)
    save_stack(calib.dark, directory / "dark")
    save_stack(calib.white, directory / "white")


def load_calibration(directory: str | Path) -> CalibrationPair:
    directory = Path(directory)
    return CalibrationPair(load_stack(directory / "dark"), load_stack(directory / "white"))


def save_ground_truth(gt: GroundTruth, png_path: str | Path) -> None:
    """8-bit indexed PNG (255 = unlabeled) plus ``labels.json`` beside it."""
    png_path = Path(png_path)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.where(gt.labels == GroundTruth.UNLABELED, 255, gt.labels).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(png_path)
    labels = {str(i): name for i, name in enumerate(gt.class_names)}
    (png_path.parent / "labels.json").write_text(json.dumps(labels, indent=2))


def load_ground_truth(png_path: str | Path) -> GroundTruth:
    png_path = Path(png_path)
    labels_file = png_path.parent / "labels.json"
    if not png_path.exists() or not labels_file.exists():
        raise DataError(f"missing ground truth {png_path} or {labels_file}")
    names = json.loads(labels_file.read_text())
    class_names = tuple(names[str(i)] for i in range(len(names)))
    arr = np.asarray(Image.open(png_path)).astype(np.int32)
    arr[arr == 255] = GroundTruth.UNLABELED
    return GroundTruth(arr, class_names)
