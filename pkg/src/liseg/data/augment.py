"""Mirror/spatial augmentation and foreground-oversampled patch sampling.

Every transform is applied identically to image and mask.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .preprocess import pad_to_multiple
from .volume import Sample


@dataclass
class SpatialAugmentConfig:
    p_rotate: float = 0.3
    max_angle_deg: float = 15.0
    p_scale: float = 0.3
    scale_range: tuple = (0.9, 1.1)


def mirror_augment(sample: Sample, rng: np.random.Generator, p: float = 0.5) -> Sample:
    flips = rng.random(3) < p
    axes = tuple(int(a) for a in np.nonzero(flips)[0])
    if not axes:
        return sample
    image = np.flip(sample.image, axis=axes).copy()
    mask = None if sample.mask is None else np.flip(sample.mask, axis=axes).copy()
    return Sample(image, mask)


def _rotation(axis, angle):
    c, s = np.cos(angle), np.sin(angle)
    i, j = [a for a in range(3) if a != axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def apply_affine(sample: Sample, matrix: np.ndarray) -> Sample:
    """Resample about the volume center: output(x) = input(matrix @ (x - c) + c)."""
    if np.array_equal(matrix, np.eye(3)):
        return sample
    center = (np.asarray(sample.image.shape) - 1) / 2.0
    offset = center - matrix @ center
    image = ndimage.affine_transform(sample.image, matrix, offset=offset, order=1, mode="constant",
                                     cval=float(sample.image.min()))
    mask = None
    if sample.mask is not None:
        mask = ndimage.affine_transform(sample.mask, matrix, offset=offset, order=0, mode="constant", cval=0)
    return Sample(image, mask)


def spatial_augment(sample: Sample, rng: np.random.Generator, config: SpatialAugmentConfig | None = None) -> Sample:
    """Random rotation about a random principal axis and random isotropic scaling."""
    cfg = config or SpatialAugmentConfig()
    # draw every random number up front so the stream advances identically each call
    u_rot, u_scale = rng.random(2)
    axis = int(rng.integers(3))
    angle = np.deg2rad(rng.uniform(-cfg.max_angle_deg, cfg.max_angle_deg))
    zoom = rng.uniform(*cfg.scale_range)
    matrix = np.eye(3)
    if u_rot < cfg.p_rotate:
        matrix = _rotation(axis, angle) @ matrix
    if u_scale < cfg.p_scale:
        matrix = matrix / zoom
    return apply_affine(sample, matrix)


def sample_patch(sample: Sample, patch, rng: np.random.Generator, foreground_prob: float = 0.5, multiple: int = 32):
    """Crop a patch after padding to multiples of ``multiple`` with the image minimum.

    Returns ``(patch_sample, start)`` with ``start`` the crop corner in padded coordinates.
    """
    patch = tuple(int(p) for p in patch)
    image, crop = pad_to_multiple(sample.image, multiple, minimum=patch)
    mask = None
    if sample.mask is not None:
        mask = np.zeros(image.shape, dtype=sample.mask.dtype)
        mask[crop] = sample.mask
    u = rng.random()
    fg = np.argwhere(mask > 0) if mask is not None else np.empty((0, 3), dtype=np.intp)
    limits = [n - p for n, p in zip(image.shape, patch)]
    if len(fg) and u < foreground_prob:
        center = fg[int(rng.integers(len(fg)))]
        start = [int(np.clip(c - p // 2, 0, lim)) for c, p, lim in zip(center, patch, limits)]
    else:
        start = [int(rng.integers(lim + 1)) for lim in limits]
    sl = tuple(slice(s, s + p) for s, p in zip(start, patch))
    return Sample(image[sl].copy(), None if mask is None else mask[sl].copy()), tuple(start)
