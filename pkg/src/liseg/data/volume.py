from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

MODALITIES = ("GED4-like", "T1-like", "T2-like", "raw")


@dataclass
class Volume:
    """A 3D scalar image with voxel spacing in mm, axes ordered (D, H, W)."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    modality: str = "raw"
    case_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3:
            raise ValueError(f"Volume data must be 3D, got shape {self.data.shape}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"volume {self.case_id!r} contains non-finite values")

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data, **changes) -> "Volume":
        return replace(self, data=data, **changes)


@dataclass
class SegMask:
    labels: np.ndarray
    num_classes: int = 2
    spacing: tuple = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"SegMask labels must be 3D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        self.labels = labels.astype(np.uint8 if self.num_classes <= 256 else np.int32)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self):
        return self.labels.shape

    def foreground(self) -> np.ndarray:
        return self.labels > 0


class Sample(NamedTuple):
    """Image/mask pair moved through augmentation; ``mask`` is None for unlabeled data."""

    image: np.ndarray
    mask: Optional[np.ndarray] = None
