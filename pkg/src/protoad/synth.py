"""Synthetic low-contrast textured images with localized anomalies.

Stands in for clinical data: normal images share one dataset-level base
structure (so there is something consistent to learn) overlaid with
per-image smooth value noise, squeezed into a narrow intensity band.
Anomalous test images additionally receive one elliptical lesion, either
a smooth intensity shift or a texture swap, with the exact binary mask
recorded. Training splits contain normal images only.

Generation is fully deterministic: the dataset seed keys a base-texture
stream plus one independent stream per image, so any image can be
regenerated in isolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rng import stream


@dataclass
class ImageSample:
    pixels: np.ndarray  # (H, W, 1) floats in [0, 1]
    label: str  # "normal" | "anomalous"
    id: str
    mask: np.ndarray | None = None  # (H, W) uint8 {0, 1}, present iff anomalous
    pre_anomaly: np.ndarray | None = None  # clean counterpart of an anomalous image


@dataclass
class DatasetSpec:
    seed: int = 0
    image_size: int = 64
    train_count: int = 200
    test_normal: int = 50
    test_anomalous: int = 50
    # texture
    base_cell: int = 16  # smoothness scale of the shared structure
    noise_cell: int = 8  # smoothness scale of per-image variation
    octaves: int = 3
    contrast: tuple[float, float] = (0.35, 0.65)
    base_weight: float = 0.65  # share of the dataset-level structure
    # anomalies
    radius_range: tuple[float, float] = (5.0, 11.0)
    intensity_delta: tuple[float, float] = (0.18, 0.35)
    swap_prob: float = 0.5
    swap_cell: int = 2  # texture scale inside swapped regions

    def validate(self) -> None:
        if self.train_count < 1:
            raise ConfigError(f"train split needs at least 1 image, got {self.train_count}")
        if self.test_normal < 0 or self.test_anomalous < 0:
            raise ConfigError("test counts must be >= 0")
        if self.image_size < 8:
            raise ConfigError(f"image size too small: {self.image_size}")
        lo, hi = self.contrast
        if not 0.0 <= lo < hi <= 1.0:
            raise ConfigError(f"contrast range must satisfy 0 <= lo < hi <= 1, got {self.contrast}")
        r_lo, r_hi = self.radius_range
        if not 1.0 <= r_lo <= r_hi or r_hi + 1.0 > self.image_size / 2:
            raise ConfigError(
                f"bad anomaly radius range {self.radius_range} for image size {self.image_size}"
            )
        d_lo, d_hi = self.intensity_delta
        if not 0.0 < d_lo <= d_hi:
            raise ConfigError(f"bad intensity delta range {self.intensity_delta}")
        if not 0.0 <= self.swap_prob <= 1.0:
            raise ConfigError(f"swap probability outside [0, 1]: {self.swap_prob}")


@dataclass
class Dataset:
    spec: DatasetSpec | None
    train: list[ImageSample] = field(default_factory=list)
    test: list[ImageSample] = field(default_factory=list)


def value_noise(rng: np.random.Generator, size: int, cell: int, octaves: int) -> np.ndarray:
    """Sum of bilinear-interpolated random lattices, normalized to [0, 1].

    Octave o uses cell size cell/2**o with amplitude 2**-o; total
    amplitude is normalized out, so the output range is data-independent.
    """
    out = np.zeros((size, size))
    total_amp = 0.0
    for o in range(octaves):
        c = max(1, cell >> o)
        amp = 0.5**o
        n = size // c + 2
        lattice = rng.uniform(size=(n, n))
        ys = np.arange(size) / c
        y0 = ys.astype(int)
        wy = (ys - y0)[:, None]
        x0 = y0  # square images: identical coordinate grid
        wx = (ys - y0)[None, :]
        tl = lattice[np.ix_(y0, x0)]
        tr = lattice[np.ix_(y0, x0 + 1)]
        bl = lattice[np.ix_(y0 + 1, x0)]
        br = lattice[np.ix_(y0 + 1, x0 + 1)]
        out += amp * ((tl * (1 - wx) + tr * wx) * (1 - wy) + (bl * (1 - wx) + br * wx) * wy)
        total_amp += amp
    return out / total_amp


def _radial_structure(size: int) -> np.ndarray:
    """Fixed smooth radial falloff giving every image a shared anatomy-like layout."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.sqrt((yy - c) ** 2 + (xx - c) ** 2) / (c * math.sqrt(2.0))
    return 1.0 - r**2


def _normal_field(spec: DatasetSpec, base: np.ndarray, img_rng: np.random.Generator) -> np.ndarray:
    noise = value_noise(img_rng, spec.image_size, spec.noise_cell, spec.octaves)
    field = spec.base_weight * base + (1.0 - spec.base_weight) * noise
    lo, hi = spec.contrast
    return lo + (hi - lo) * field


def _ellipse_mask(spec: DatasetSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random rotated ellipse; returns (binary mask, smooth interior falloff)."""
    size = spec.image_size
    r_lo, r_hi = spec.radius_range
    a = rng.uniform(r_lo, r_hi)
    b = rng.uniform(r_lo, r_hi)
    theta = rng.uniform(0.0, math.pi)
    margin = max(a, b) + 1.0
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - cy
    dx = xx - cx
    ct, st = math.cos(theta), math.sin(theta)
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    rho2 = u * u + v * v
    mask = rho2 <= 1.0
    falloff = np.where(mask, np.cos(0.5 * math.pi * np.sqrt(np.minimum(rho2, 1.0))) ** 2, 0.0)
    return mask.astype(np.uint8), falloff


def _apply_anomaly(spec: DatasetSpec, clean: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    mask, falloff = _ellipse_mask(spec, rng)
    swap = rng.uniform() < spec.swap_prob
    img = clean.copy()
    if swap:
        lo, hi = spec.contrast
        texture = lo + (hi - lo) * value_noise(rng, spec.image_size, spec.swap_cell, 2)
        img[mask == 1] = texture[mask == 1]
    else:
        d_lo, d_hi = spec.intensity_delta
        delta = rng.uniform(d_lo, d_hi) * (1.0 if rng.uniform() < 0.5 else -1.0)
        img = img + delta * falloff
    np.clip(img, 0.0, 1.0, out=img)
    img[mask == 0] = clean[mask == 0]  # changes stay strictly inside the mask
    return img, mask


def generate(spec: DatasetSpec) -> Dataset:
    """Deterministically generate the train and test splits."""
    spec.validate()
    base = 0.6 * value_noise(
        stream(spec.seed, "data-base"), spec.image_size, spec.base_cell, spec.octaves
    ) + 0.4 * _radial_structure(spec.image_size)

    def build(index: int, split: str, anomalous: bool) -> ImageSample:
        rng = stream(spec.seed, "data-image", index)
        clean = _normal_field(spec, base, rng)
        sid = f"{split}-{index:05d}"
        if not anomalous:
            return ImageSample(pixels=clean[..., None].copy(), label="normal", id=sid)
        img, mask = _apply_anomaly(spec, clean, rng)
        return ImageSample(
            pixels=img[..., None],
            label="anomalous",
            id=sid,
            mask=mask,
            pre_anomaly=clean[..., None].copy(),
        )

    ds = Dataset(spec=spec)
    idx = 0
    for _ in range(spec.train_count):
        ds.train.append(build(idx, "train", False))
        idx += 1
    for _ in range(spec.test_normal):
        ds.test.append(build(idx, "test", False))
        idx += 1
    for _ in range(spec.test_anomalous):
        ds.test.append(build(idx, "test", True))
        idx += 1
    return ds
