"""Intensity normalization, resampling and padding."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .volume import SegMask, Volume


def zscore_normalize(volume: Volume) -> Volume:
    data = volume.data
    if data.size < 2:
        raise ValueError(f"case {volume.case_id!r}: need at least 2 voxels for z-score normalization")
    mean = data.mean()
    std = data.std()
    if not std > 0:
        raise ValueError(f"case {volume.case_id!r}: zero intensity variance, cannot z-score normalize")
    return volume.with_data((data - mean) / std)


def resample_to_spacing(obj, target_spacing, order=None):
    """Resample a Volume (trilinear) or SegMask (nearest) to ``target_spacing`` mm.

    Output dims are ``round(dim * spacing / target)``. Voxel centers follow the
    half-voxel convention: output voxel j sits at input index (j + 0.5) * t / s - 0.5,
    so both grids cover the same physical extent.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise ValueError(f"target spacing must be three positive values, got {target_spacing}")
    is_mask = isinstance(obj, SegMask)
    arr = obj.labels if is_mask else obj.data
    spacing = obj.spacing
    out_shape = tuple(int(round(n * s / t)) for n, s, t in zip(arr.shape, spacing, target))
    if min(out_shape) < 1:
        raise ValueError(f"resampling {arr.shape} at {spacing} to {target} gives an empty grid {out_shape}")
    if order is None:
        order = 0 if is_mask else 1
    if out_shape == arr.shape and target == spacing:
        out = arr.copy()
    else:
        axes = [(np.arange(n_out) + 0.5) * (t / s) - 0.5 for n_out, s, t in zip(out_shape, spacing, target)]
        if order == 0:
            # round-half-up picks; avoids interpolation entirely so labels are never invented
            idx = [np.clip(np.floor(a + 0.5).astype(np.intp), 0, n - 1) for a, n in zip(axes, arr.shape)]
            out = arr[np.ix_(*idx)]
        else:
            coords = np.meshgrid(*axes, indexing="ij")
            out = ndimage.map_coordinates(arr.astype(np.float64), coords, order=order, mode="nearest")
    if is_mask:
        return SegMask(out, obj.num_classes, target)
    return obj.with_data(out, spacing=target)


def pad_to_multiple(image: np.ndarray, multiple=32, minimum=None, value=None):
    """Pad each axis up to a multiple of ``multiple`` (and at least ``minimum``).

    Returns the padded array and the slices that recover the original extent. The pad
    value defaults to the image minimum.
    """
    shape = image.shape[-3:]
    minimum = minimum or (0, 0, 0)
    target = [max(-(-n // multiple) * multiple, int(m)) for n, m in zip(shape, minimum)]
    if value is None:
        value = image.min() if image.size else 0
    pads = [(0, 0)] * (image.ndim - 3)
    crop = [slice(None)] * (image.ndim - 3)
    for n, t in zip(shape, target):
        before = (t - n) // 2
        pads.append((before, t - n - before))
        crop.append(slice(before, before + n))
    return np.pad(image, pads, constant_values=value), tuple(crop)
