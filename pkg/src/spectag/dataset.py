"""On-disk datasets: a JSON manifest of image stacks, calibration and ground truth."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, DataError
from .imaging import (CalibrationPair, ChannelStack, GroundTruth, load_calibration, load_ground_truth,
                      load_stack, save_calibration, save_ground_truth, save_stack)
from .phantom import PhantomSpec, generate_phantom, phantom_recipes

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "spectag-manifest/1"
SPLITS = ("train", "test")


@dataclass(frozen=True)
class ManifestEntry:
    """One image of a manifest. Calling it loads the image (picklable, so workers can load)."""

    image_id: str
    stack: Path
    ground_truth: Path | None
    calibration: Path
    subject: int
    split: str

    def __call__(self) -> "LoadedImage":
        raw = load_stack(self.stack)
        calib = load_calibration(self.calibration)
        truth = load_ground_truth(self.ground_truth) if self.ground_truth is not None else None
        return LoadedImage(self.image_id, self.subject, self.split, raw, calib, truth)


@dataclass(frozen=True)
class LoadedImage:
    image_id: str
    subject: int
    split: str
    raw: ChannelStack
    calib: CalibrationPair
    truth: GroundTruth | None


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    class_names: tuple[str, ...]
    wavelengths: tuple[float, ...]
    fwhm: tuple[float, ...]
    entries: tuple[ManifestEntry, ...]

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def validate(self) -> None:
        """Check the subject-level split and that every referenced file exists."""
        by_subject: dict[int, set[str]] = {}
        seen = set()
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"{e.image_id}: split must be one of {SPLITS}, got {e.split!r}")
            if e.image_id in seen:
                raise DataError(f"duplicate image id {e.image_id}")
            seen.add(e.image_id)
            by_subject.setdefault(e.subject, set()).add(e.split)
            if not (e.stack / "stack.json").exists():
                raise DataError(f"{e.image_id}: missing stack {e.stack}")
            for ref in ("dark", "white"):
                if not (e.calibration / ref / "stack.json").exists():
                    raise DataError(f"{e.image_id}: missing {ref} reference under {e.calibration}")
            if e.ground_truth is not None:
                labels = e.ground_truth.parent / "labels.json"
                if not e.ground_truth.exists() or not labels.exists():
                    raise DataError(f"{e.image_id}: missing ground truth {e.ground_truth}")
                names = json.loads(labels.read_text())
                if tuple(names[str(i)] for i in range(len(names))) != self.class_names:
                    raise DataError(f"{e.image_id}: label file classes differ from the manifest class list")
            meta = json.loads((e.stack / "stack.json").read_text())
            if tuple(float(w) for w in meta["wavelengths"]) != self.wavelengths:
                raise DataError(f"{e.image_id}: band list differs from the manifest")
        leaky = sorted(s for s, splits in by_subject.items() if len(splits) > 1)
        if leaky:
            raise DataError(f"subjects {leaky} appear in both train and test splits")


def _resolve(root: Path, p: str | None) -> Path | None:
    if p is None:
        return None
    path = Path(p)
    return path if path.is_absolute() else root / path


def load_manifest(path: str | Path, validate: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if data.get("format") != MANIFEST_FORMAT:
        raise DataError(f"unsupported manifest format {data.get('format')!r}")
    root = _resolve(path.parent, data.get("root", "."))
    default_calib = data.get("calibration")
    entries = []
    for item in data["images"]:
        calib = item.get("calibration", default_calib)
        if calib is None:
            raise DataError(f"{item['id']}: no calibration given")
        entries.append(ManifestEntry(
            item["id"], _resolve(root, item["stack"]), _resolve(root, item.get("ground_truth")),
            _resolve(root, calib), int(item["subject"]), item["split"],
        ))
    manifest = DatasetManifest(root, tuple(data["class_names"]), tuple(float(w) for w in data["wavelengths"]),
                               tuple(float(w) for w in data.get("fwhm", ())), tuple(entries))
    if validate:
        manifest.validate()
    return manifest


# --- phantom datasets on disk ---------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    phantom: PhantomSpec = PhantomSpec()
    train_subjects: int = 3
    test_subjects: int = 4
    n_train: int = 29
    n_test: int = 28
    subject_scale: float = 0.05
    seed: int = 0


_PHANTOM_KEYS = {f.name for f in fields(PhantomSpec)} - {"seed", "subject_shift"}
_DATASET_KEYS = {"train_subjects", "test_subjects", "n_train", "n_test", "subject_scale", "seed"}


def synth_spec_from_mapping(data: dict) -> SynthSpec:
    phantom, dataset = {}, {}
    for section, content in data.items():
        if section == "phantom":
            for key, val in content.items():
                if key not in _PHANTOM_KEYS:
                    raise ConfigError(f"unknown phantom key {key!r}")
                if isinstance(val, list):
                    val = tuple(tuple(v) if isinstance(v, list) else v for v in val)
                phantom[key] = val
        elif section == "dataset":
            for key, val in content.items():
                if key not in _DATASET_KEYS:
                    raise ConfigError(f"unknown dataset key {key!r}")
                dataset[key] = val
        else:
            raise ConfigError(f"unknown synth section [{section}]")
    try:
        spec = SynthSpec(PhantomSpec(**phantom), **dataset)
    except (TypeError, ValueError, DataError) as exc:
        raise ConfigError(f"invalid synth spec: {exc}") from exc
    if spec.train_subjects < 1 or spec.test_subjects < 1 or spec.n_train < 1 or spec.n_test < 1:
        raise ConfigError("need at least one subject and one image per split")
    return spec


def load_synth_spec(path: str | Path | None) -> SynthSpec:
    if path is None:
        return SynthSpec()
    try:
        data = tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read synth spec {path}: {exc}") from exc
    return synth_spec_from_mapping(data)


def iter_phantoms(spec: SynthSpec):
    return phantom_recipes(spec.phantom, spec.train_subjects, spec.test_subjects,
                           spec.n_train, spec.n_test, spec.subject_scale, spec.seed)


def write_phantom_dataset(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Render every phantom image to disk and write ``manifest.json``; returns its path."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc
    images = []
    calib_written = False
    for image_id, subject, split, pspec in iter_phantoms(spec):
        raw, calib, gt = generate_phantom(pspec)
        if not calib_written:
            # references depend only on the recipe's optics, so one pair serves all images
            save_calibration(calib, out_dir / "calibration")
            calib_written = True
        save_stack(raw, out_dir / "images" / image_id)
        save_ground_truth(gt, out_dir / "ground_truth" / image_id / "labels.png")
        images.append({"id": image_id, "stack": f"images/{image_id}",
                       "ground_truth": f"ground_truth/{image_id}/labels.png",
                       "subject": subject, "split": split})
        log.info("wrote %s", image_id)
    manifest = {
        "format": MANIFEST_FORMAT,
        "root": ".",
        "class_names": list(spec.phantom.class_names),
        "wavelengths": list(spec.phantom.wavelengths),
        "fwhm": list(spec.phantom.fwhm),
        "calibration": "calibration",
        "images": images,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path
