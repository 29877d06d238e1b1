"""Synthetic labelled multispectral scenes standing in for real laparoscopic data.

A scene is a Voronoi partition of the image into organ patches. Each patch
gets its class's mean reflectance spectrum, modulated by a class-specific
band-limited texture, a smooth illumination field and additive sensor noise;
saturated discs imitate specular highlights. Raw counts are produced through
a dark floor and a vignetted white reference so that reflectance calibration
has real work to do.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError
from .imaging import MI_FWHM, MI_WAVELENGTHS, CalibrationPair, ChannelStack, GroundTruth

ORGANS = ("liver", "gallbladder", "spleen", "diaphragm", "intestine", "abdominal wall")

# Mean reflectance per organ at 470, 480, 511, 560, 580, 600, 660, 700 nm.
# Liver and spleen agree at 470/560/700 nm and differ around 580-600 nm, so an
# RGB composite sees them as near twins while the full stack does not.
ORGAN_SPECTRA = (
    (0.12, 0.13, 0.15, 0.20, 0.16, 0.30, 0.42, 0.48),  # liver
    (0.22, 0.26, 0.36, 0.42, 0.40, 0.46, 0.52, 0.55),  # gallbladder
    (0.12, 0.13, 0.16, 0.20, 0.30, 0.18, 0.40, 0.48),  # spleen
    (0.30, 0.31, 0.33, 0.34, 0.38, 0.50, 0.60, 0.63),  # diaphragm
    (0.28, 0.27, 0.26, 0.27, 0.26, 0.42, 0.55, 0.60),  # intestine
    (0.35, 0.36, 0.38, 0.38, 0.40, 0.56, 0.66, 0.70),  # abdominal wall
)

# (correlation length in pixels, relative amplitude) of each organ's texture.
ORGAN_TEXTURES = (
    (3.0, 0.10),
    (6.0, 0.04),
    (3.0, 0.10),
    (1.5, 0.08),
    (4.5, 0.14),
    (2.0, 0.06),
)


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one synthetic scene; the scene is a pure function of it."""

    class_names: tuple[str, ...] = ORGANS
    spectra: tuple[tuple[float, ...], ...] = ORGAN_SPECTRA
    textures: tuple[tuple[float, float], ...] = ORGAN_TEXTURES
    wavelengths: tuple[float, ...] = MI_WAVELENGTHS
    fwhm: tuple[float, ...] = MI_FWHM
    height: int = 512
    width: int = 512
    n_sites: int = 6  # Voronoi patches
    classes_present: tuple[int, ...] | None = None  # default: drawn at random
    max_classes: int = 4
    noise: float = 0.03  # raw-count noise std, as a fraction of the white level
    spectral_jitter: float = 0.08  # relative per-patch spectral perturbation
    subject_shift: tuple[float, ...] = ()  # relative per-channel offset shared by a subject
    illumination: float = 0.3  # depth of smooth brightness variation
    specular_discs: int = 2
    specular_radius: tuple[int, int] = (4, 10)
    dark_level: float = 0.02
    white_level: float = 0.9
    vignetting: float = 0.4
    seed: int = 0

    def __post_init__(self):
        j = len(self.class_names)
        if j < 2:
            raise DataError("a phantom needs at least two classes")
        if len(self.spectra) != j or len(self.textures) != j:
            raise DataError("one spectrum and one texture model per class required")
        n_c = len(self.wavelengths)
        if any(len(s) != n_c for s in self.spectra):
            raise DataError(f"every class spectrum must have {n_c} entries")
        if len(self.fwhm) != n_c:
            raise DataError("fwhm length differs from wavelength count")
        if self.subject_shift and len(self.subject_shift) != n_c:
            raise DataError("subject_shift must have one entry per channel")


def _voronoi(rng: np.random.Generator, h: int, w: int, n_sites: int) -> np.ndarray:
    sites = rng.uniform([0, 0], [h, w], size=(n_sites, 2))
    yy, xx = np.mgrid[0:h, 0:w]
    # wobble the cell borders so they are not straight lines
    wob_y = gaussian_filter(rng.normal(size=(h, w)), 12) * 400.0
    wob_x = gaussian_filter(rng.normal(size=(h, w)), 12) * 400.0
    py = yy + wob_y
    px = xx + wob_x
    d = (py[..., None] - sites[:, 0]) ** 2 + (px[..., None] - sites[:, 1]) ** 2
    return np.argmin(d, axis=-1)


def _texture(rng: np.random.Generator, h: int, w: int, corr: float) -> np.ndarray:
    t = gaussian_filter(rng.normal(size=(h, w)), corr)
    std = t.std()
    return t / std if std > 0 else t


def _smooth_field(rng: np.random.Generator, h: int, w: int, depth: float) -> np.ndarray:
    """Brightness field in [1 - depth, 1] varying linearly across the frame."""
    if depth == 0:
        return np.ones((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx / w + np.sin(angle) * yy / h
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    gain = rng.uniform(1 - depth / 2, 1.0)
    return gain * (1 - depth / 2 * ramp)


def generate_phantom(spec: PhantomSpec) -> tuple[ChannelStack, CalibrationPair, GroundTruth]:
    """Raw stack, dark/white references and per-pixel ground truth for one scene."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    n_c = len(spec.wavelengths)
    j = len(spec.class_names)
    spectra = np.asarray(spec.spectra, dtype=np.float64)

    cells = _voronoi(rng, h, w, spec.n_sites)
    if spec.classes_present is not None:
        present = np.asarray(spec.classes_present)
    else:
        k = int(rng.integers(2, max(2, spec.max_classes) + 1))
        present = rng.choice(j, size=min(k, j), replace=False)
    cell_class = np.concatenate([present, rng.choice(present, size=max(0, spec.n_sites - len(present)))])
    cell_class = cell_class[: spec.n_sites]
    labels = cell_class[cells]

    shift = np.ones(n_c) if not spec.subject_shift else 1.0 + np.asarray(spec.subject_shift)
    refl = np.empty((h, w, n_c))
    for cell in range(spec.n_sites):
        region = cells == cell
        cls = cell_class[cell]
        base = spectra[cls] * shift
        if spec.spectral_jitter > 0:
            base = base * (1.0 + spec.spectral_jitter * rng.normal(size=n_c))
        refl[region] = base

    for cls in np.unique(labels):
        corr, amp = spec.textures[cls]
        if amp == 0:
            continue
        tex = _texture(rng, h, w, corr)
        region = labels == cls
        refl[region] *= (1.0 + amp * tex[region])[:, None]

    refl *= _smooth_field(rng, h, w, spec.illumination)[..., None]

    yy, xx = np.mgrid[0:h, 0:w]
    dark = np.full((h, w, n_c), spec.dark_level) + 0.005 * np.arange(n_c) / max(n_c - 1, 1)
    r2 = ((yy - h / 2) / h) ** 2 + ((xx - w / 2) / w) ** 2
    flat = spec.white_level * (1.0 - spec.vignetting * r2 / 0.5)
    white = dark + flat[..., None] * np.linspace(0.9, 1.0, n_c)
    raw = dark + refl * (white - dark)
    # sensor noise lives in raw counts, so it is amplified where vignetting dims the frame
    if spec.noise > 0:
        raw += rng.normal(scale=spec.noise * spec.white_level, size=raw.shape)

    for _ in range(spec.specular_discs):
        cy, cx = rng.uniform([0, 0], [h, w])
        rad = rng.uniform(*spec.specular_radius)
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad
        raw[disc] = white[disc]

    wl, fw = tuple(spec.wavelengths), tuple(spec.fwhm)
    calib = CalibrationPair(ChannelStack(dark, wl, fw), ChannelStack(white, wl, fw))
    return ChannelStack(raw, wl, fw), calib, GroundTruth(labels, spec.class_names)


@dataclass(frozen=True)
class PhantomImage:
    image_id: str
    subject: int
    split: str
    raw: ChannelStack = field(repr=False)
    calib: CalibrationPair = field(repr=False)
    truth: GroundTruth = field(repr=False)


def subject_shifts(n_subjects: int, n_channels: int, scale: float, seed: int) -> list[tuple[float, ...]]:
    rng = np.random.default_rng([seed, 7919])
    return [tuple(float(v) for v in scale * rng.normal(size=n_channels)) for _ in range(n_subjects)]


def phantom_recipes(
    base: PhantomSpec = PhantomSpec(),
    train_subjects: int = 3,
    test_subjects: int = 4,
    n_train: int = 29,
    n_test: int = 28,
    subject_scale: float = 0.05,
    seed: int = 0,
):
    """Yield (image id, subject, split, recipe) for a subject-split dataset.

    Images are dealt round-robin over the subjects of their split; every
    subject carries its own small spectral offset.
    """
    n_c = len(base.wavelengths)
    shifts = subject_shifts(train_subjects + test_subjects, n_c, subject_scale, seed)
    seeds = np.random.SeedSequence(seed).generate_state(n_train + n_test)
    for k in range(n_train + n_test):
        if k < n_train:
            split, subject = "train", k % train_subjects
        else:
            split, subject = "test", train_subjects + (k - n_train) % test_subjects
        yield f"{split}_{k:03d}", subject, split, replace(base, seed=int(seeds[k]), subject_shift=shifts[subject])


@dataclass(frozen=True)
class PhantomLoader:
    """Deferred phantom image; calling it renders the scene (cheap to pickle)."""

    image_id: str
    subject: int
    split: str
    spec: PhantomSpec

    def __call__(self) -> PhantomImage:
        raw, calib, gt = generate_phantom(self.spec)
        return PhantomImage(self.image_id, self.subject, self.split, raw, calib, gt)


def phantom_dataset(*args, **kwargs):
    """Lazy loaders for every image of :func:`phantom_recipes` (same arguments)."""
    return [PhantomLoader(*item) for item in phantom_recipes(*args, **kwargs)]
