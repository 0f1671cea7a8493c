"""Procedural phase-contrast-like images of flocs and filaments.

Flocs are clusters of bright anisotropic Gaussian bumps, filaments are dark
correlated random walks with a Gaussian cross-section. The per-image SVI
label is a monotone function of the filament density, so a model that
measures strand coverage can recover it.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .data_ingest import (
    DatasetManifest,
    ImageSample,
    NormalizationStats,
    write_manifest,
)
from .errors import ValidationError

BACKGROUND = 0.5


@dataclass(frozen=True)
class SynthParams:
    resolution: tuple[int, int] = (128, 96)
    floc_count_range: tuple[int, int] = (3, 7)
    floc_radius_range: tuple[float, float] = (4.0, 10.0)
    filament_density: float = 0.5
    filament_length_range: tuple[float, float] = (25.0, 70.0)
    noise_sigma: float = 0.02
    svi_min: float = 60.0
    svi_max: float = 400.0
    max_filaments: int = 30
    filament_width: float = 0.8
    floc_amplitude: float = 0.3
    filament_amplitude: float = 0.3

    def __post_init__(self):
        w, h = self.resolution
        if w <= 0 or h <= 0:
            raise ValidationError(f"resolution must be positive: {self.resolution}")
        if not self.svi_min < self.svi_max:
            raise ValidationError("svi_min must be below svi_max")
        if not 0.0 <= self.filament_density <= 1.0:
            raise ValidationError(f"filament_density {self.filament_density} outside [0, 1]")
        for name in ("floc_count_range", "floc_radius_range", "filament_length_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValidationError(f"{name} must be a non-empty, non-negative interval: {(lo, hi)}")
        if self.floc_radius_range[0] <= 0 or self.filament_length_range[0] <= 0:
            raise ValidationError("radii and filament lengths must be positive")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if self.max_filaments < 0 or self.filament_width <= 0:
            raise ValidationError("max_filaments >= 0 and filament_width > 0 required")

    @classmethod
    def for_resolution(cls, width: int, height: int, **overrides) -> "SynthParams":
        """Defaults tuned at 128x96, with lengths and counts scaled to the new size."""
        s = width / 128.0
        base = dict(
            resolution=(width, height),
            floc_radius_range=(4.0 * s, 10.0 * s),
            filament_length_range=(25.0 * s, 70.0 * s),
            filament_width=max(0.8, 0.8 * s),
        )
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class SynthLabelMap:
    """Monotone map g: [0, 1] -> [0, 1] with g(0)=0, g(1)=1.

    ``sigmoidal`` uses a logistic curve with ``steepness`` and ``midpoint``,
    rescaled so the endpoints are exact.
    """

    kind: str = "linear"
    steepness: float = 8.0
    midpoint: float = 0.5

    def __post_init__(self):
        if self.kind not in ("linear", "sigmoidal"):
            raise ValidationError(f"unknown label map kind {self.kind!r}")
        if self.kind == "sigmoidal" and not self.steepness > 0:
            raise ValidationError("sigmoidal steepness must be positive")

    def __call__(self, u):
        u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
        if self.kind == "linear":
            out = u
        else:
            f = lambda t: 1.0 / (1.0 + np.exp(-self.steepness * (t - self.midpoint)))
            lo, hi = f(0.0), f(1.0)
            out = (f(u) - lo) / (hi - lo)
        return float(out) if out.ndim == 0 else out


def svi_for_density(params: SynthParams, label_map: SynthLabelMap, density: float) -> float:
    return params.svi_min + (params.svi_max - params.svi_min) * label_map(density)


def render(params: SynthParams, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw one image. Returns ``(gray image in [0,1], boolean strand mask)``."""
    w, h = params.resolution
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.full((h, w), BACKGROUND, dtype=np.float64)

    floc_field = np.zeros((h, w))
    n_flocs = int(rng.integers(params.floc_count_range[0], params.floc_count_range[1] + 1))
    for _ in range(n_flocs):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        radius = rng.uniform(*params.floc_radius_range)
        for _ in range(int(rng.integers(3, 7))):
            bx = cx + rng.normal(0, 0.5 * radius)
            by = cy + rng.normal(0, 0.5 * radius)
            sx = radius * rng.uniform(0.4, 0.9)
            sy = radius * rng.uniform(0.4, 0.9)
            theta = rng.uniform(0, math.pi)
            c, s = math.cos(theta), math.sin(theta)
            dx, dy = xx - bx, yy - by
            u = (c * dx + s * dy) / sx
            v = (-s * dx + c * dy) / sy
            floc_field += rng.uniform(0.6, 1.0) * np.exp(-0.5 * (u * u + v * v))
    img += params.floc_amplitude * np.minimum(floc_field, 1.5)

    mask = np.zeros((h, w), dtype=bool)
    budget = params.filament_density * params.max_filaments * 0.5 * sum(params.filament_length_range)
    while budget >= 1.0:
        length = min(rng.uniform(*params.filament_length_range), budget)
        budget -= length
        _walk(mask, rng, int(round(length)), w, h)
    if mask.any():
        sigma = params.filament_width
        profile = ndimage.gaussian_filter(mask.astype(np.float64), sigma) * math.sqrt(2 * math.pi) * sigma
        img -= params.filament_amplitude * np.minimum(profile, 1.0)

    if params.noise_sigma > 0:
        img += rng.normal(0.0, params.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0), mask


def _walk(mask: np.ndarray, rng: np.random.Generator, n_steps: int, w: int, h: int) -> None:
    x, y = rng.uniform(0, w), rng.uniform(0, h)
    heading = rng.uniform(0, 2 * math.pi)
    turn = 0.0
    for _ in range(n_steps):
        turn = 0.8 * turn + rng.normal(0.0, 0.12)
        heading += turn
        x += math.cos(heading)
        y += math.sin(heading)
        # reflect at the borders so strands stay inside the frame
        if x < 0 or x > w - 1:
            x = min(max(x, 0.0), w - 1.0)
            heading = math.pi - heading
        if y < 0 or y > h - 1:
            y = min(max(y, 0.0), h - 1.0)
            heading = -heading
        mask[int(round(y)), int(round(x))] = True


def generate_image(
    params: SynthParams,
    label_map: SynthLabelMap | None = None,
    seed: int = 0,
) -> tuple[np.ndarray, float]:
    """Return an ``(H, W, 3)`` float image and its SVI label; pure in (params, label_map, seed)."""
    label_map = label_map or SynthLabelMap()
    gray, _ = render(params, np.random.default_rng(seed))
    img = np.repeat(gray.astype(np.float32)[:, :, None], 3, axis=2)
    return img, svi_for_density(params, label_map, params.filament_density)


def strand_coverage(params: SynthParams, seed: int) -> float:
    """Fraction of pixels on filament strands for one rendered image."""
    _, mask = render(params, np.random.default_rng(seed))
    return float(mask.mean())


def stratified_densities(n: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform draw per stratum [i/n, (i+1)/n), in shuffled order."""
    return (rng.permutation(n) + rng.uniform(size=n)) / n


def generate_dataset(
    n_days: int,
    images_per_day: int,
    params_sampler_seed: int,
    out_dir,
    params: SynthParams | None = None,
    label_map: SynthLabelMap | None = None,
    start_day: dt.date = dt.date(2021, 1, 4),
    day_step: int = 7,
    manifest_name: str = "manifest.csv",
) -> DatasetManifest:
    """Write ``n_days * images_per_day`` PNGs plus a manifest CSV into ``out_dir``.

    Each day gets one filament density (hence one SVI); its replicates share
    the density and differ only in placement.
    """
    if n_days < 1 or images_per_day < 1:
        raise ValidationError("n_days and images_per_day must be >= 1")
    params = params or SynthParams()
    label_map = label_map or SynthLabelMap()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    sampler = np.random.default_rng(params_sampler_seed)
    densities = stratified_densities(n_days, sampler)
    samples = []
    for d, density in enumerate(densities):
        day = start_day + dt.timedelta(days=day_step * d)
        day_params = replace(params, filament_density=float(density))
        svi = round(svi_for_density(day_params, label_map, float(density)), 6)
        for r in range(images_per_day):
            seed = np.random.SeedSequence([params_sampler_seed, d, r]).generate_state(2, np.uint32)
            img, _ = generate_image(day_params, label_map, int(seed[0]) << 32 | int(seed[1]))
            sid = f"{day.isoformat()}_r{r}"
            path = out / "images" / f"{sid}.png"
            Image.fromarray(np.round(img[:, :, 0] * 255.0).astype(np.uint8), mode="L").save(path)
            samples.append(ImageSample(sid, day, r, path, svi))

    write_manifest(samples, out / manifest_name)
    return DatasetManifest(samples, params.resolution, NormalizationStats())
