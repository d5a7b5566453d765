"""Weak (dihedral) and strong (geometric + spectral) views of unlabeled images.

Geometric transforms move the image, pseudo-heights, cut-probability maps
and the validity mask together; spectral transforms touch the image only.
All rasters are channel-first: image ``(C, S, S)``, heights ``(S, S)``,
probabilities ``(K, S, S)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

MIN_CROP = 8


@dataclass
class AugmentedView:
    image: np.ndarray
    heights: np.ndarray | None = None
    probs: np.ndarray | None = None
    valid: np.ndarray | None = None
    params: dict = field(default_factory=dict)


def dihedral(arr: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` of the dihedral group on the last two axes.

    ``k`` in 0..3 rotates by ``k * 90`` degrees; 4..7 transpose first.
    """
    if k >= 4:
        arr = np.swapaxes(arr, -1, -2)
    return np.rot90(arr, k % 4, axes=(-2, -1))


def augment_weak(image: np.ndarray, rng: np.random.Generator, k: int | None = None) -> AugmentedView:
    if image.shape[-1] != image.shape[-2]:
        raise ValueError(f"weak augmentation needs a square raster, got {image.shape}")
    if k is None:
        k = int(rng.integers(8))
    out = np.ascontiguousarray(dihedral(image, k))
    return AugmentedView(out, valid=np.ones(image.shape[-2:]), params={"dihedral": k})


@dataclass(frozen=True)
class StrongParams:
    angle_deg: float = 0.0
    crop_y: int = 0
    crop_x: int = 0
    gamma: float = 1.0
    brightness: float = 0.0
    contrast: float = 1.0
    blur_sigma: float = 0.0


@dataclass(frozen=True)
class StrongRanges:
    gamma: tuple[float, float] = (0.7, 1.5)
    brightness: float = 0.2
    contrast: tuple[float, float] = (0.8, 1.25)
    blur_sigma: tuple[float, float] = (0.0, 1.5)


def draw_strong_params(size: int, rng: np.random.Generator, ranges: StrongRanges = StrongRanges()) -> StrongParams:
    crop = size // 2
    return StrongParams(
        angle_deg=float(rng.uniform(0.0, 360.0)),
        crop_y=int(rng.integers(0, size - crop + 1)),
        crop_x=int(rng.integers(0, size - crop + 1)),
        gamma=float(rng.uniform(*ranges.gamma)),
        brightness=float(rng.uniform(-ranges.brightness, ranges.brightness)),
        contrast=float(rng.uniform(*ranges.contrast)),
        blur_sigma=float(rng.uniform(*ranges.blur_sigma)),
    )


def source_coords(size: int, p: StrongParams) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) for every pixel of the rotated-then-cropped window."""
    crop = size // 2
    c = (size - 1) / 2.0
    rows, cols = np.mgrid[:crop, :crop].astype(np.float64)
    ry, rx = rows + p.crop_y - c, cols + p.crop_x - c
    t = np.deg2rad(p.angle_deg)
    # output is the source rotated counter-clockwise by the angle
    sy = np.cos(t) * ry - np.sin(t) * rx + c
    sx = np.sin(t) * ry + np.cos(t) * rx + c
    return sy, sx


def _sample(arr: np.ndarray, sy: np.ndarray, sx: np.ndarray, order: int) -> np.ndarray:
    coords = np.stack([sy, sx])
    if arr.ndim == 2:
        return ndimage.map_coordinates(arr, coords, order=order, mode="nearest")
    return np.stack([ndimage.map_coordinates(a, coords, order=order, mode="nearest") for a in arr])


def spectral(image: np.ndarray, p: StrongParams) -> np.ndarray:
    out = np.clip(image, 0.0, 1.0)
    if p.gamma != 1.0:
        out = out**p.gamma
    if p.brightness != 0.0:
        out = out + p.brightness
    if p.contrast != 1.0:
        mean = out.mean(axis=(-2, -1), keepdims=True)
        out = (out - mean) * p.contrast + mean
    if p.blur_sigma > 0:
        out = np.stack([ndimage.gaussian_filter(ch, p.blur_sigma, mode="nearest") for ch in out])
    return out


def augment_strong(view: AugmentedView, rng: np.random.Generator | None = None,
                   params: StrongParams | None = None,
                   ranges: StrongRanges = StrongRanges()) -> AugmentedView:
    """Rotate by an arbitrary angle, crop to half size, then jitter the image spectrum.

    Pixels whose source falls outside the original square are marked invalid.
    """
    size = view.image.shape[-1]
    if size // 2 < MIN_CROP:
        raise ValueError(f"half-size crop of {size} px is below the {MIN_CROP} px minimum")
    if params is None:
        if rng is None:
            raise ValueError("augment_strong needs either rng or explicit params")
        params = draw_strong_params(size, rng, ranges)
    sy, sx = source_coords(size, params)
    inside = (sy >= 0) & (sy <= size - 1) & (sx >= 0) & (sx <= size - 1)
    valid = inside.astype(np.float64)
    if view.valid is not None:
        valid *= _sample(view.valid, sy, sx, order=0)
    image = spectral(_sample(view.image, sy, sx, order=1), params)
    heights = None if view.heights is None else _sample(view.heights, sy, sx, order=0)
    probs = None if view.probs is None else _sample(view.probs, sy, sx, order=0)
    return replace(view, image=image, heights=heights, probs=probs, valid=valid,
                   params={**view.params, "strong": params})
