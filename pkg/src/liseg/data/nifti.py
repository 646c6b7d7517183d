"""Single-file NIfTI-1 (.nii / .nii.gz) reader and writer.

Only what the pipeline needs: 3D images, uint8/int16/float32 payloads, voxel spacing
and intensity scaling. Array axes follow the file's dim[1..3] order (first axis
fastest on disk, i.e. Fortran order), spacing comes from pixdim[1..3].
"""
from __future__ import annotations

import gzip
import os

import numpy as np

from .volume import SegMask, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352

DT_UINT8, DT_INT16, DT_FLOAT32 = 2, 4, 16
_CODE_TO_DTYPE = {DT_UINT8: np.uint8, DT_INT16: np.int16, DT_FLOAT32: np.float32}
_DTYPE_TO_CODE = {np.dtype(v).name: k for k, v in _CODE_TO_DTYPE.items()}


class NiftiError(ValueError):
    pass


def _header_dtype(endian="<"):
    return np.dtype([
        ("sizeof_hdr", "i4"), ("data_type", "S10"), ("db_name", "S18"), ("extents", "i4"),
        ("session_error", "i2"), ("regular", "S1"), ("dim_info", "u1"), ("dim", "i2", (8,)),
        ("intent_p1", "f4"), ("intent_p2", "f4"), ("intent_p3", "f4"), ("intent_code", "i2"),
        ("datatype", "i2"), ("bitpix", "i2"), ("slice_start", "i2"), ("pixdim", "f4", (8,)),
        ("vox_offset", "f4"), ("scl_slope", "f4"), ("scl_inter", "f4"), ("slice_end", "i2"),
        ("slice_code", "u1"), ("xyzt_units", "u1"), ("cal_max", "f4"), ("cal_min", "f4"),
        ("slice_duration", "f4"), ("toffset", "f4"), ("glmax", "i4"), ("glmin", "i4"),
        ("descrip", "S80"), ("aux_file", "S24"), ("qform_code", "i2"), ("sform_code", "i2"),
        ("quatern_b", "f4"), ("quatern_c", "f4"), ("quatern_d", "f4"),
        ("qoffset_x", "f4"), ("qoffset_y", "f4"), ("qoffset_z", "f4"),
        ("srow_x", "f4", (4,)), ("srow_y", "f4", (4,)), ("srow_z", "f4", (4,)),
        ("intent_name", "S16"), ("magic", "S4"),
    ]).newbyteorder(endian)


assert _header_dtype().itemsize == HEADER_SIZE


def _open(path, mode):
    path = os.fspath(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _read_raw(path):
    try:
        with _open(path, "rb") as fh:
            blob = fh.read()
    except (OSError, EOFError) as exc:
        raise NiftiError(f"{path}: cannot read NIfTI file ({exc})") from exc
    if len(blob) < HEADER_SIZE:
        raise NiftiError(f"{path}: truncated header ({len(blob)} bytes)")
    endian = "<"
    hdr = np.frombuffer(blob[:HEADER_SIZE], dtype=_header_dtype(endian))[0]
    if hdr["sizeof_hdr"] != HEADER_SIZE:
        endian = ">"
        hdr = np.frombuffer(blob[:HEADER_SIZE], dtype=_header_dtype(endian))[0]
        if hdr["sizeof_hdr"] != HEADER_SIZE:
            raise NiftiError(f"{path}: sizeof_hdr is not 348; not a NIfTI-1 file")
    if hdr["magic"] != b"n+1":
        raise NiftiError(f"{path}: bad magic {hdr['magic']!r}; expected single-file 'n+1'")
    ndim = int(hdr["dim"][0])
    if ndim != 3:
        raise NiftiError(f"{path}: dim[0]={ndim}; only 3D images are supported")
    code = int(hdr["datatype"])
    if code not in _CODE_TO_DTYPE:
        raise NiftiError(f"{path}: unsupported datatype code {code} (supported: uint8, int16, float32)")
    shape = tuple(int(d) for d in hdr["dim"][1:4])
    if min(shape) < 1:
        raise NiftiError(f"{path}: invalid dimensions {shape}")
    dtype = np.dtype(_CODE_TO_DTYPE[code]).newbyteorder(endian)
    offset = int(hdr["vox_offset"])
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if offset < HEADER_SIZE or len(blob) < offset + nbytes:
        raise NiftiError(f"{path}: truncated data block (need {offset + nbytes} bytes, have {len(blob)})")
    data = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    return hdr, data.reshape(shape, order="F")


def _spacing(hdr, path):
    spacing = tuple(float(abs(p)) for p in hdr["pixdim"][1:4])
    if min(spacing) <= 0:
        raise NiftiError(f"{path}: non-positive voxel spacing {spacing}")
    return spacing


def read_nifti(path, modality="raw", case_id=None) -> Volume:
    """Load an image as float64, applying scl_slope/scl_inter when the slope is nonzero."""
    hdr, raw = _read_raw(path)
    data = raw.astype(np.float64)
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if slope != 0.0 and np.isfinite(slope):
        data = data * slope + (inter if np.isfinite(inter) else 0.0)
    cid = case_id if case_id is not None else os.path.basename(os.fspath(path)).split(".")[0]
    return Volume(data, _spacing(hdr, path), modality, cid)


def read_mask(path, num_classes=2) -> SegMask:
    hdr, raw = _read_raw(path)
    if raw.dtype.kind == "f" and not np.all(raw == np.round(raw)):
        raise NiftiError(f"{path}: mask contains non-integer values")
    return SegMask(raw.astype(np.int64), num_classes, _spacing(hdr, path))


def make_header(shape, spacing, dtype_name, descrip=b"liseg"):
    hdr = np.zeros((), dtype=_header_dtype("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *shape, 1, 1, 1, 1]
    hdr["datatype"] = _DTYPE_TO_CODE[dtype_name]
    hdr["bitpix"] = np.dtype(dtype_name).itemsize * 8
    hdr["pixdim"] = [1.0, *spacing, 0.0, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["xyzt_units"] = 2  # NIFTI_UNITS_MM
    hdr["descrip"] = descrip
    hdr["sform_code"] = 1
    hdr["srow_x"] = [spacing[0], 0, 0, 0]
    hdr["srow_y"] = [0, spacing[1], 0, 0]
    hdr["srow_z"] = [0, 0, spacing[2], 0]
    hdr["magic"] = b"n+1"
    return hdr


def write_nifti(obj, path, dtype=None):
    """Write a Volume (float32 by default) or SegMask (uint8) as single-file NIfTI-1."""
    if isinstance(obj, SegMask):
        arr, spacing, dtype = obj.labels, obj.spacing, dtype or "uint8"
    elif isinstance(obj, Volume):
        arr, spacing, dtype = obj.data, obj.spacing, dtype or "float32"
    else:
        raise TypeError(f"write_nifti expects a Volume or SegMask, got {type(obj).__name__}")
    dtype = np.dtype(dtype).name
    if dtype not in _DTYPE_TO_CODE:
        raise NiftiError(f"cannot write dtype {dtype}")
    payload = np.asarray(arr).astype(np.dtype(dtype).newbyteorder("<"))
    hdr = make_header(payload.shape, spacing, dtype)
    blob = hdr.tobytes() + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload.tobytes(order="F")
    if os.fspath(path).endswith(".gz"):
        # no stored name and a zero mtime: identical data gives identical bytes
        blob = gzip.compress(blob, mtime=0)
    with open(path, "wb") as fh:
        fh.write(blob)
