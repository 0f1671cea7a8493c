"""Manifest loading, image decoding/resizing, z-score normalisation and SVI."""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import itertools
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    ImageDecodeError,
    ManifestIntegrityError,
    ManifestParseError,
    ValidationError,
)

MANIFEST_COLUMNS = ("sample_id", "day", "replicate", "svi_ml_per_g", "image_path")

DEFAULT_RESOLUTION = (512, 384)  # (width, height)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# relative tolerance on width/height ratio before we refuse to stretch
ASPECT_TOLERANCE = 0.01


@dataclass(frozen=True)
class ImageSample:
    sample_id: str
    day: dt.date
    replicate_index: int
    image_path: Path
    svi: float

    def __post_init__(self):
        if not (math.isfinite(self.svi) and self.svi > 0):
            raise ManifestIntegrityError(f"{self.sample_id}: SVI must be positive and finite, got {self.svi}")
        if self.replicate_index < 0:
            raise ManifestIntegrityError(f"{self.sample_id}: negative replicate index")


@dataclass(frozen=True)
class NormalizationStats:
    channel_means: tuple[float, float, float] = IMAGENET_MEAN
    channel_stds: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if len(self.channel_means) != 3 or len(self.channel_stds) != 3:
            raise ValidationError("normalization needs exactly 3 channel means and stds")
        if any(not 0.0 <= m <= 1.0 for m in self.channel_means):
            raise ValidationError("channel means must lie in [0, 1]")
        if any(not s > 0 for s in self.channel_stds):
            raise ValidationError("channel stds must be strictly positive")


@dataclass(frozen=True)
class SettlingRecord:
    """Result of a 30-minute settling test."""

    settled_volume: float  # mL/L
    mlss: float  # g/L

    def __post_init__(self):
        if not 0.0 <= self.settled_volume <= 1000.0:
            raise ValidationError(f"settled volume {self.settled_volume} mL/L outside [0, 1000]")
        if not self.mlss > 0:
            raise ValidationError(f"MLSS must be positive, got {self.mlss}")


@dataclass
class DatasetManifest:
    samples: list[ImageSample] = field(default_factory=list)
    resolution: tuple[int, int] = DEFAULT_RESOLUTION
    normalization: NormalizationStats = field(default_factory=NormalizationStats)
    source_hash: str = ""

    def __post_init__(self):
        w, h = self.resolution
        if w <= 0 or h <= 0:
            raise ValidationError(f"resolution must be positive, got {self.resolution}")
        validate_samples(self.samples)

    def __len__(self):
        return len(self.samples)

    @property
    def days(self) -> list[dt.date]:
        return sorted({s.day for s in self.samples})

    def subset(self, sample_ids) -> "DatasetManifest":
        wanted = set(sample_ids)
        return DatasetManifest(
            [s for s in self.samples if s.sample_id in wanted],
            self.resolution,
            self.normalization,
            self.source_hash,
        )

    def select_days(self, days) -> "DatasetManifest":
        wanted = set(days)
        return DatasetManifest(
            [s for s in self.samples if s.day in wanted],
            self.resolution,
            self.normalization,
            self.source_hash,
        )


def validate_samples(samples: Sequence[ImageSample], check_files: bool = False) -> None:
    seen = set()
    svi_of_day: dict[dt.date, float] = {}
    for s in samples:
        if s.sample_id in seen:
            raise ManifestIntegrityError(f"duplicate sample_id {s.sample_id!r}")
        seen.add(s.sample_id)
        prev = svi_of_day.setdefault(s.day, s.svi)
        if prev != s.svi:
            raise ManifestIntegrityError(
                f"conflicting SVI on {s.day.isoformat()}: {prev} vs {s.svi} (sample {s.sample_id})"
            )
        if check_files and not s.image_path.is_file():
            raise ManifestIntegrityError(f"{s.sample_id}: image file not found: {s.image_path}")


def load_manifest(
    path,
    resolution: tuple[int, int] = DEFAULT_RESOLUTION,
    normalization: NormalizationStats | None = None,
) -> DatasetManifest:
    """Parse and validate a manifest CSV.

    Relative ``image_path`` entries are resolved against the manifest's
    directory. Raises :class:`ManifestParseError` for malformed rows and
    :class:`ManifestIntegrityError` for duplicates, per-day SVI conflicts,
    non-positive SVI or missing image files.
    """
    path = Path(path)
    raw = path.read_bytes()
    text = raw.decode("utf-8-sig")
    reader = csv.DictReader(text.splitlines())
    if reader.fieldnames is None or tuple(f.strip() for f in reader.fieldnames) != MANIFEST_COLUMNS:
        raise ManifestParseError(f"{path}: expected header {','.join(MANIFEST_COLUMNS)}, got {reader.fieldnames}")

    samples = []
    for lineno, row in enumerate(reader, start=2):
        try:
            sample = ImageSample(
                sample_id=row["sample_id"].strip(),
                day=dt.date.fromisoformat(row["day"].strip()),
                replicate_index=int(row["replicate"]),
                image_path=_resolve(path.parent, row["image_path"].strip()),
                svi=float(row["svi_ml_per_g"]),
            )
        except ManifestIntegrityError as exc:
            raise ManifestIntegrityError(f"{path}:{lineno}: {exc}") from None
        except (TypeError, ValueError, AttributeError) as exc:
            raise ManifestParseError(f"{path}:{lineno}: malformed row ({exc})") from None
        if not sample.sample_id:
            raise ManifestParseError(f"{path}:{lineno}: empty sample_id")
        samples.append(sample)

    validate_samples(samples, check_files=True)
    return DatasetManifest(
        samples,
        tuple(resolution),
        normalization or NormalizationStats(),
        source_hash=hashlib.sha256(raw).hexdigest(),
    )


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def write_manifest(samples: Sequence[ImageSample], path) -> None:
    """Write samples in manifest CSV format, image paths relative to the CSV when possible."""
    path = Path(path)
    base = path.parent.resolve()
    rows = []
    for s in samples:
        img = Path(s.image_path)
        try:
            rel = img.resolve().relative_to(base).as_posix()
        except ValueError:
            rel = str(img)
        rows.append([s.sample_id, s.day.isoformat(), s.replicate_index, repr(float(s.svi)), rel])
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    os.replace(tmp, path)


def load_image(path, resolution: tuple[int, int] = DEFAULT_RESOLUTION) -> np.ndarray:
    """Decode an image to a float32 ``(height, width, 3)`` array in [0, 1].

    Grayscale inputs are replicated to three channels. Downsampling uses
    area averaging; a source whose aspect ratio differs from the target's
    is rejected rather than stretched.
    """
    width, height = resolution
    if width <= 0 or height <= 0:
        raise ValidationError(f"resolution must be positive, got {resolution}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I;16", "I", "F"):
                arr = _to_unit_gray(im)
                arr = np.repeat(arr[:, :, None], 3, axis=2)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from None
    return resize_image(arr, resolution)


def _to_unit_gray(im: Image.Image) -> np.ndarray:
    if im.mode == "L":
        return np.asarray(im, dtype=np.float32) / 255.0
    arr = np.asarray(im, dtype=np.float32)
    if im.mode == "F":
        return np.clip(arr, 0.0, 1.0)
    return arr / 65535.0


def resize_image(arr: np.ndarray, resolution: tuple[int, int]) -> np.ndarray:
    width, height = resolution
    h, w = arr.shape[:2]
    if (w, h) == (width, height):
        return arr.astype(np.float32, copy=False)
    if abs((w / h) / (width / height) - 1.0) > ASPECT_TOLERANCE:
        raise ValidationError(f"aspect ratio {w}x{h} does not match target {width}x{height}")
    resample = Image.Resampling.BOX if (width <= w and height <= h) else Image.Resampling.BILINEAR
    channels = [
        np.asarray(Image.fromarray(np.ascontiguousarray(arr[:, :, c], dtype=np.float32), mode="F").resize(
            (width, height), resample=resample
        ))
        for c in range(arr.shape[2])
    ]
    return np.clip(np.stack(channels, axis=2), 0.0, 1.0).astype(np.float32)


def normalize(img: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"expected an (H, W, 3) image, got shape {img.shape}")
    mean = np.asarray(stats.channel_means, dtype=np.float32)
    std = np.asarray(stats.channel_stds, dtype=np.float32)
    return (img - mean) / std


def denormalize(img: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    mean = np.asarray(stats.channel_means, dtype=np.float32)
    std = np.asarray(stats.channel_stds, dtype=np.float32)
    return img * std + mean


def compute_svi(record: SettlingRecord) -> float:
    """Sludge volume index in mL/g: settled volume (mL/L) over MLSS (g/L)."""
    if not record.mlss > 0:
        raise ValidationError(f"MLSS must be positive, got {record.mlss}")
    return record.settled_volume / record.mlss


def group_by_day(manifest: DatasetManifest) -> list[tuple[dt.date, list[ImageSample]]]:
    ordered = sorted(manifest.samples, key=lambda s: (s.day, s.replicate_index, s.sample_id))
    return [(day, list(group)) for day, group in itertools.groupby(ordered, key=lambda s: s.day)]


class ImageDataset:
    """Samples with their decoded images held in memory as ``(N, H, W, 3)`` float32."""

    def __init__(self, samples: Sequence[ImageSample], images: np.ndarray):
        if len(samples) != len(images):
            raise ValidationError("samples and images differ in length")
        self.samples = list(samples)
        self.images = images

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "ImageDataset":
        w, h = manifest.resolution
        images = np.empty((len(manifest.samples), h, w, 3), dtype=np.float32)
        for i, s in enumerate(manifest.samples):
            images[i] = load_image(s.image_path, manifest.resolution)
        return cls(manifest.samples, images)

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.svi for s in self.samples], dtype=np.float64)

    @property
    def days(self) -> set:
        return {s.day for s in self.samples}

    def take(self, indices) -> "ImageDataset":
        idx = np.asarray(list(indices), dtype=int)
        return ImageDataset([self.samples[i] for i in idx], self.images[idx])

    def select_days(self, days) -> "ImageDataset":
        wanted = set(days)
        return self.take(i for i, s in enumerate(self.samples) if s.day in wanted)
