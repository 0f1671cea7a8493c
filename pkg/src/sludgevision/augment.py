"""Label-preserving augmentations: flips, rotation, brightness, random erasing.

Images are float ``(H, W, C)`` arrays in [0, 1] (before normalisation).
Each ``random_*`` op draws its parameters from a :class:`numpy.random.Generator`
and delegates to a deterministic kernel, so the kernels can be tested with
forced parameters.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError

ERASE_FILL = 0.5
ASPECT_RANGE = (1.0 / 3.0, 3.0)


@dataclass(frozen=True)
class AugmentPolicy:
    flip_horizontal: float = 0.5
    flip_vertical: float = 0.5
    rotation_degrees: tuple[float, float] = (-180.0, 180.0)
    brightness_delta: tuple[float, float] = (-0.20, 0.20)
    erase_area_fraction: tuple[float, float] = (0.02, 0.20)
    erase_probability: float = 0.5

    def __post_init__(self):
        for name in ("flip_horizontal", "flip_vertical", "erase_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name} must be a probability, got {p}")
        lo, hi = self.rotation_degrees
        if not -180.0 <= lo <= hi <= 180.0:
            raise ValidationError(f"rotation interval {self.rotation_degrees} not within [-180, 180]")
        lo, hi = self.brightness_delta
        if not -1.0 < lo <= hi:
            raise ValidationError(f"invalid brightness interval {self.brightness_delta}")
        lo, hi = self.erase_area_fraction
        if not 0.0 < lo <= hi < 1.0:
            raise ValidationError(f"erase area fraction {self.erase_area_fraction} must lie in (0, 1)")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, (0.0, 0.0), (0.0, 0.0), (0.02, 0.20), 0.0)


@dataclass
class AugmentRecord:
    """Parameters drawn by one :func:`apply_policy` call."""

    flip_h: bool = False
    flip_v: bool = False
    angle: float = 0.0
    delta: float = 0.0
    erase_fraction: float | None = None
    erase_box: tuple[int, int, int, int] | None = None  # top, left, height, width


# -- deterministic kernels ---------------------------------------------------

def flip(img: np.ndarray, horizontal: bool, vertical: bool) -> np.ndarray:
    if horizontal:
        img = img[:, ::-1]
    if vertical:
        img = img[::-1]
    return np.ascontiguousarray(img)


def rotate(img: np.ndarray, angle: float) -> np.ndarray:
    """Rotate about the image centre with bilinear sampling and mirrored borders."""
    if angle == 0.0:
        return img.copy()
    out = ndimage.rotate(img, angle, axes=(1, 0), reshape=False, order=1, mode="mirror", prefilter=False)
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def adjust_brightness(img: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(img * (1.0 + delta), 0.0, 1.0).astype(img.dtype, copy=False)


def erase_box(shape: tuple[int, int], fraction: float, aspect: float, rng: np.random.Generator):
    """Place a rectangle of ``fraction`` of the image area fully inside the frame."""
    h, w = shape
    area = fraction * h * w
    # clamp the aspect ratio (height / width) so the rectangle fits
    aspect = min(max(aspect, area / (w * w)), (h * h) / area)
    eh = min(h, max(1, int(round(math.sqrt(area * aspect)))))
    ew = min(w, max(1, int(round(math.sqrt(area / aspect)))))
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    return top, left, eh, ew


def erase(img: np.ndarray, box: tuple[int, int, int, int], fill: float = ERASE_FILL) -> np.ndarray:
    top, left, eh, ew = box
    out = img.copy()
    out[top:top + eh, left:left + ew] = fill
    return out


# -- stochastic ops ----------------------------------------------------------

def random_flip(img, rng, policy: AugmentPolicy = AugmentPolicy(), record: AugmentRecord | None = None):
    fh = bool(rng.random() < policy.flip_horizontal)
    fv = bool(rng.random() < policy.flip_vertical)
    if record is not None:
        record.flip_h, record.flip_v = fh, fv
    return flip(img, fh, fv)


def random_rotate(img, rng, policy: AugmentPolicy = AugmentPolicy(), record: AugmentRecord | None = None):
    angle = float(rng.uniform(*policy.rotation_degrees))
    if record is not None:
        record.angle = angle
    return rotate(img, angle)


def random_brightness(img, rng, policy: AugmentPolicy = AugmentPolicy(), record: AugmentRecord | None = None):
    delta = float(rng.uniform(*policy.brightness_delta))
    if record is not None:
        record.delta = delta
    return adjust_brightness(img, delta)


def random_erase(img, rng, policy: AugmentPolicy = AugmentPolicy(), record: AugmentRecord | None = None):
    if not rng.random() < policy.erase_probability:
        return img
    fraction = float(rng.uniform(*policy.erase_area_fraction))
    log_aspect = rng.uniform(math.log(ASPECT_RANGE[0]), math.log(ASPECT_RANGE[1]))
    box = erase_box(img.shape[:2], fraction, math.exp(log_aspect), rng)
    if record is not None:
        record.erase_fraction, record.erase_box = fraction, box
    return erase(img, box)


def apply_policy(img, policy: AugmentPolicy, rng, record: AugmentRecord | None = None):
    """Flip, rotate, brightness, erase, in that order, all drawing from ``rng``."""
    img = random_flip(img, rng, policy, record)
    img = random_rotate(img, rng, policy, record)
    img = random_brightness(img, rng, policy, record)
    return random_erase(img, rng, policy, record)


def sample_rng(seed: int, sample_id: str, epoch: int) -> np.random.Generator:
    """Per-sample generator independent of worker identity and iteration order."""
    key = int.from_bytes(hashlib.sha256(sample_id.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, key, epoch])
