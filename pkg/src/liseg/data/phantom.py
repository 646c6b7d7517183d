"""Synthetic liver phantoms with controllable contrast polarity.

A phantom is a randomly posed ellipsoid "liver" (optionally with hypointense lesions,
which stay foreground in the mask) embedded in a background that may contain bright
non-liver blobs. Bright polarity mimics a hepatobiliary-phase scan; dark polarity
mirrors intensities about the liver/background midpoint, mimicking T2 weighting.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .volume import SegMask, Volume

POLARITY_MODALITY = {"bright": "GED4-like", "dark": "T2-like"}


@dataclass
class PhantomSpec:
    grid: tuple = (32, 32, 32)
    spacing: tuple = (1.0, 1.0, 1.0)
    semi_axes_range: tuple = ((6.0, 11.0), (6.0, 11.0), (6.0, 11.0))  # mm, per axis
    center_jitter: float = 0.15  # fraction of the grid extent
    rotate: bool = True
    liver_intensity: tuple = (0.6, 1.0)  # sampled per phantom
    background_intensity: tuple = (0.0, 0.2)
    lesion_count: tuple = (0, 3)  # inclusive range
    lesion_radius: tuple = (1.5, 3.0)  # mm
    lesion_contrast: float = 0.6  # fraction of the liver/background gap removed inside lesions
    distractor_count: tuple = (0, 2)
    distractor_radius: tuple = (2.0, 4.0)  # mm
    distractor_intensity: float = 0.9  # relative position between background (0) and liver (1)
    noise_sigma: float = 0.1
    blur_sigma: float = 0.7  # voxels
    polarity: str = "bright"

    def __post_init__(self):
        if self.polarity not in POLARITY_MODALITY:
            raise ValueError(f"polarity must be 'bright' or 'dark', got {self.polarity!r}")
        if self.liver_intensity[0] <= self.background_intensity[1]:
            raise ValueError("liver intensity range must lie above the background range")
        self.grid = tuple(int(g) for g in self.grid)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def modality(self):
        return POLARITY_MODALITY[self.polarity]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("grid", "spacing", "liver_intensity", "background_intensity", "lesion_count",
                    "lesion_radius", "distractor_count", "distractor_radius"):
            if key in d:
                d[key] = tuple(d[key])
        if "semi_axes_range" in d:
            d["semi_axes_range"] = tuple(tuple(r) for r in d["semi_axes_range"])
        return cls(**d)


def _random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ])


def _coords(spec):
    axes = [np.arange(n) * s for n, s in zip(spec.grid, spec.spacing)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def ellipsoid_mask(coords, center, semi_axes, rotation):
    """Voxel centers inside the ellipsoid (rotation columns are the ellipsoid axes)."""
    local = (coords - center) @ rotation
    return ((local / semi_axes) ** 2).sum(axis=-1) <= 1.0


def _pose(spec, rng, max_tries=100):
    extent = np.array(spec.grid) * np.array(spec.spacing)
    last = (extent - np.array(spec.spacing)) / 2.0
    for _ in range(max_tries):
        semi = np.array([rng.uniform(*r) for r in spec.semi_axes_range])
        rot = _random_rotation(rng) if spec.rotate else np.eye(3)
        center = last + rng.uniform(-spec.center_jitter, spec.center_jitter, 3) * extent
        half = np.sqrt(((rot * semi) ** 2).sum(axis=1))  # bounding half-extent per axis
        lo, hi = center - half, center + half
        if np.all(lo >= np.array(spec.spacing)) and np.all(hi <= extent - 2 * np.array(spec.spacing)):
            return center, semi, rot
    raise ValueError(f"could not place an ellipsoid inside grid {spec.grid} after {max_tries} tries")


def generate_phantom(spec: PhantomSpec, seed: int, case_id: str | None = None):
    """Return (Volume, SegMask) for one phantom; identical for identical (spec, seed)."""
    rng = np.random.default_rng(seed)
    coords = _coords(spec)
    center, semi, rot = _pose(spec, rng)
    liver = ellipsoid_mask(coords, center, semi, rot)

    liver_val = rng.uniform(*spec.liver_intensity)
    bg_val = rng.uniform(*spec.background_intensity)
    gap = liver_val - bg_val
    tissue = np.where(liver, liver_val, bg_val)

    n_lesions = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    inside = np.argwhere(liver)
    for _ in range(n_lesions):
        c = inside[int(rng.integers(len(inside)))] * np.array(spec.spacing)
        r = rng.uniform(*spec.lesion_radius)
        blob = (((coords - c) ** 2).sum(axis=-1) <= r * r) & liver
        tissue[blob] = liver_val - spec.lesion_contrast * gap

    n_distractors = int(rng.integers(spec.distractor_count[0], spec.distractor_count[1] + 1))
    outside = np.argwhere(~ndimage.binary_dilation(liver, iterations=2))
    for _ in range(n_distractors):
        if not len(outside):
            break
        c = outside[int(rng.integers(len(outside)))] * np.array(spec.spacing)
        r = rng.uniform(*spec.distractor_radius)
        blob = (((coords - c) ** 2).sum(axis=-1) <= r * r) & ~liver
        tissue[blob] = bg_val + spec.distractor_intensity * gap

    if spec.polarity == "dark":
        tissue = (liver_val + bg_val) - tissue
    image = ndimage.gaussian_filter(tissue, spec.blur_sigma) if spec.blur_sigma > 0 else tissue
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, image.shape)

    cid = case_id or f"phantom_{seed}"
    volume = Volume(image, spec.spacing, spec.modality, cid)
    return volume, SegMask(liver.astype(np.uint8), 2, spec.spacing)
