import gzip
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from liseg.data import (
    Manifest,
    PhantomSpec,
    Sample,
    SegMask,
    Volume,
    build_manifest,
    generate_phantom,
    load_case,
    read_mask,
    read_nifti,
    write_nifti,
)
from liseg.data.augment import SpatialAugmentConfig, apply_affine, mirror_augment, sample_patch, spatial_augment
from liseg.data.nifti import NiftiError
from liseg.data.phantom import ellipsoid_mask
from liseg.data.preprocess import pad_to_multiple, resample_to_spacing, zscore_normalize


# ---------------------------------------------------------------- volume types


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        Volume(np.array([[[np.nan]]]))
    with pytest.raises(ValueError):
        SegMask(np.full((2, 2, 2), 2), num_classes=2)


# ---------------------------------------------------------------- NIfTI


def test_nifti_header_layout(tmp_path):
    path = tmp_path / "a.nii"
    write_nifti(Volume(np.zeros((2, 3, 4)), (0.5, 1.0, 2.0)), path)
    blob = path.read_bytes()
    assert len(blob) == 352 + 2 * 3 * 4 * 4
    assert struct.unpack("<i", blob[0:4])[0] == 348
    assert struct.unpack("<8h", blob[40:56]) == (3, 2, 3, 4, 1, 1, 1, 1)
    assert struct.unpack("<h", blob[70:72])[0] == 16  # float32
    assert struct.unpack("<h", blob[72:74])[0] == 32  # bitpix
    assert struct.unpack("<4f", blob[76:92]) == (1.0, 0.5, 1.0, 2.0)
    assert struct.unpack("<f", blob[108:112])[0] == 352.0
    assert blob[344:348] == b"n+1\x00"


def test_nifti_first_axis_fastest_on_disk(tmp_path):
    data = np.arange(24, dtype=float).reshape(2, 3, 4)
    path = tmp_path / "b.nii"
    write_nifti(Volume(data), path)
    payload = np.frombuffer(path.read_bytes()[352:], "<f4")
    assert payload[1] == data[1, 0, 0] and payload[2] == data[0, 1, 0]


@pytest.mark.parametrize("dtype", ["float32", "int16", "uint8"])
@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_nifti_roundtrip_bit_exact(tmp_path, dtype, suffix):
    rng = np.random.default_rng(0)
    info = np.iinfo(dtype) if dtype != "float32" else None
    if info is None:
        data = rng.standard_normal((5, 4, 3)).astype(np.float32)
    else:
        data = rng.integers(info.min, info.max, (5, 4, 3), endpoint=True).astype(dtype)
    path = tmp_path / f"v{suffix}"
    write_nifti(Volume(data.astype(float), (0.8, 0.9, 2.5)), path, dtype=dtype)
    back = read_nifti(path)
    assert back.data.astype(dtype).tobytes() == data.tobytes()
    assert back.spacing == tuple(float(np.float32(s)) for s in (0.8, 0.9, 2.5))


def test_mask_roundtrip(tmp_path):
    labels = (np.random.default_rng(0).random((6, 5, 4)) < 0.3).astype(np.uint8)
    write_nifti(SegMask(labels), tmp_path / "m.nii.gz")
    assert np.array_equal(read_mask(tmp_path / "m.nii.gz").labels, labels)


def test_gzip_output_is_reproducible(tmp_path):
    v = Volume(np.random.default_rng(0).standard_normal((4, 4, 4)))
    write_nifti(v, tmp_path / "a.nii.gz")
    write_nifti(v, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def test_nifti_scl_scaling(tmp_path):
    path = tmp_path / "s.nii"
    write_nifti(Volume(np.array([[[0.0, 1.0, 2.0]]])), path, dtype="int16")
    blob = bytearray(path.read_bytes())
    blob[112:120] = struct.pack("<ff", 2.0, -1.0)
    path.write_bytes(bytes(blob))
    assert read_nifti(path).data.ravel().tolist() == [-1.0, 1.0, 3.0]


def test_nifti_errors(tmp_path):
    good = tmp_path / "g.nii"
    write_nifti(Volume(np.zeros((2, 2, 2))), good)
    blob = good.read_bytes()
    bad_magic = tmp_path / "m.nii"
    bad_magic.write_bytes(blob[:344] + b"xx1\x00" + blob[348:])
    with pytest.raises(NiftiError, match="magic"):
        read_nifti(bad_magic)
    trunc = tmp_path / "t.nii"
    trunc.write_bytes(blob[:-4])
    with pytest.raises(NiftiError, match="truncated"):
        read_nifti(trunc)
    bad_dtype = tmp_path / "d.nii"
    bad_dtype.write_bytes(blob[:70] + struct.pack("<h", 64) + blob[72:])
    with pytest.raises(NiftiError, match="datatype"):
        read_nifti(bad_dtype)
    four_d = tmp_path / "4.nii"
    four_d.write_bytes(blob[:40] + struct.pack("<h", 4) + blob[42:])
    with pytest.raises(NiftiError, match="3D"):
        read_nifti(four_d)
    with pytest.raises(NiftiError):
        read_nifti(tmp_path / "missing.nii")
    with pytest.raises(NiftiError):
        write_nifti(Volume(np.zeros((2, 2, 2))), tmp_path / "x.nii", dtype="float64")


def test_nifti_big_endian_is_read(tmp_path):
    path = tmp_path / "be.nii"
    write_nifti(Volume(np.arange(8.0).reshape(2, 2, 2)), path, dtype="int16")
    blob = path.read_bytes()
    from liseg.data.nifti import make_header

    hdr = make_header((2, 2, 2), (1.0, 1.0, 1.0), "int16").astype(make_header((2, 2, 2), (1, 1, 1), "int16").dtype.newbyteorder(">"))
    payload = np.frombuffer(blob[352:], "<i2").astype(">i2").tobytes()
    path.write_bytes(hdr.tobytes() + b"\x00" * 4 + payload)
    assert np.array_equal(read_nifti(path).data, np.arange(8.0).reshape(2, 2, 2))


# ---------------------------------------------------------------- preprocessing


def test_zscore():
    v = zscore_normalize(Volume(np.arange(27.0).reshape(3, 3, 3)))
    assert abs(v.data.mean()) < 1e-12 and abs(v.data.std() - 1) < 1e-12
    with pytest.raises(ValueError, match="variance"):
        zscore_normalize(Volume(np.ones((2, 2, 2))))


def test_resample_identity():
    v = Volume(np.random.default_rng(0).standard_normal((4, 5, 6)), (1.0, 1.0, 1.0))
    assert np.array_equal(resample_to_spacing(v, (1, 1, 1)).data, v.data)


def test_resample_linear_ramp_is_exact():
    # trilinear interpolation reproduces a linear function at interior sample points
    d = np.arange(8.0)
    v = Volume(np.broadcast_to(d[:, None, None] * 3.0 + 1.0, (8, 4, 4)).copy(), (1.0, 1.0, 1.0))
    out = resample_to_spacing(v, (0.5, 1.0, 1.0))
    assert out.shape == (16, 4, 4) and out.spacing == (0.5, 1.0, 1.0)
    pos = (np.arange(16) + 0.5) * 0.5 - 0.5  # half-voxel convention
    inside = (pos >= 0) & (pos <= 7)
    np.testing.assert_allclose(out.data[inside, 0, 0], pos[inside] * 3.0 + 1.0, rtol=0, atol=1e-12)


def test_resample_mask_never_invents_labels():
    labels = np.zeros((6, 6, 6), np.uint8)
    labels[2:4, 1:5, 0:3] = 1
    out = resample_to_spacing(SegMask(labels, 2, (1.0, 1.0, 1.0)), (0.5, 0.75, 2.0))
    assert out.shape == (12, 8, 3)
    assert set(np.unique(out.labels)) <= {0, 1}
    down = resample_to_spacing(SegMask(labels, 2, (1.0, 1.0, 1.0)), (1.0, 1.0, 1.0))
    assert np.array_equal(down.labels, labels)


def test_pad_to_multiple():
    img = np.random.default_rng(0).standard_normal((33, 20, 64))
    padded, crop = pad_to_multiple(img, 32)
    assert padded.shape == (64, 32, 64)
    assert np.array_equal(padded[crop], img)
    assert padded.min() == img.min()
    outside = np.ones(padded.shape, bool)
    outside[crop] = False
    assert np.all(padded[outside] == img.min())


# ---------------------------------------------------------------- augmentation


def _sample(seed=0, shape=(32, 32, 32)):
    rng = np.random.default_rng(seed)
    return Sample(rng.standard_normal(shape), (rng.random(shape) < 0.2).astype(np.int64))


def test_mirror_is_involution_and_consistent():
    s = _sample()
    out = mirror_augment(s, np.random.default_rng(3), p=1.0)
    assert np.array_equal(out.image[::-1, ::-1, ::-1], s.image)
    assert np.array_equal(out.mask[::-1, ::-1, ::-1], s.mask)
    assert np.array_equal(mirror_augment(s, np.random.default_rng(3), p=0.0).image, s.image)


def test_affine_identity_is_noop_and_keeps_labels_integral():
    s = _sample()
    out = apply_affine(s, np.eye(3))
    np.testing.assert_allclose(out.image, s.image, atol=1e-12)
    assert np.array_equal(out.mask, s.mask)
    rot = spatial_augment(s, np.random.default_rng(1), SpatialAugmentConfig(p_rotate=1.0, p_scale=1.0))
    assert rot.image.shape == s.image.shape
    assert set(np.unique(rot.mask)) <= {0, 1}


def test_patch_in_bounds_and_fg_bias():
    s = _sample(shape=(40, 36, 48))
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, start = sample_patch(s, (32, 32, 32), rng)
        assert p.image.shape == (32, 32, 32) and p.mask.shape == (32, 32, 32)
        assert all(0 <= st_ <= n - 32 for st_, n in zip(start, (64, 64, 64)))


def test_foreground_rate_matches_probability():
    # a single foreground voxel in a corner of a 64^3 padded grid: a random crop almost
    # never sees it, a foreground-centred crop always does. The hit rate therefore
    # tracks foreground_prob; chi-square against Binomial(n, p).
    mask = np.zeros((64, 64, 64), np.int64)
    mask[60, 60, 60] = 1
    s = Sample(np.zeros((64, 64, 64)), mask)
    rng = np.random.default_rng(0)
    n, p = 400, 0.5
    random_hit = (5 / 33) ** 3  # start in [28, 32] on each axis out of 33 positions
    expected = p + (1 - p) * random_hit
    hits = sum(sample_patch(s, (32, 32, 32), rng, foreground_prob=p)[0].mask.any() for _ in range(n))
    chi2 = (hits - n * expected) ** 2 / (n * expected) + (hits - n * expected) ** 2 / (n * (1 - expected))
    assert stats.chi2.sf(chi2, df=1) > 0.001


# ---------------------------------------------------------------- phantoms


def test_phantom_is_deterministic_and_seed_sensitive():
    spec = PhantomSpec()
    a, ma = generate_phantom(spec, 7)
    b, mb = generate_phantom(spec, 7)
    c, _ = generate_phantom(spec, 8)
    assert a.data.tobytes() == b.data.tobytes() and np.array_equal(ma.labels, mb.labels)
    assert not np.array_equal(a.data, c.data)


def test_phantom_polarity_and_modality():
    bright, mask = generate_phantom(PhantomSpec(noise_sigma=0, lesion_count=(0, 0), distractor_count=(0, 0)), 1)
    dark, mask_d = generate_phantom(PhantomSpec(noise_sigma=0, lesion_count=(0, 0), distractor_count=(0, 0), polarity="dark"), 1)
    fg = mask.labels > 0
    assert bright.data[fg].mean() > bright.data[~fg].mean()
    assert dark.data[fg].mean() < dark.data[~fg].mean()
    assert np.array_equal(mask.labels, mask_d.labels)
    assert (bright.modality, dark.modality) == ("GED4-like", "T2-like")


def test_ellipsoid_volume_within_five_percent():
    spec = PhantomSpec(grid=(48, 48, 48))
    coords = np.stack(np.meshgrid(*(np.arange(48.0),) * 3, indexing="ij"), axis=-1)
    rng = np.random.default_rng(0)
    for _ in range(5):
        semi = rng.uniform(7, 12, 3)
        q = np.linalg.qr(rng.standard_normal((3, 3)))[0]
        n = ellipsoid_mask(coords, np.array([23.5, 24.1, 23.8]), semi, q).sum()
        analytic = 4 / 3 * np.pi * np.prod(semi)
        assert abs(n - analytic) / analytic < 0.05
    assert spec.grid == (48, 48, 48)


def test_phantom_spec_validation_and_pose_failure():
    with pytest.raises(ValueError):
        PhantomSpec(polarity="grey")
    with pytest.raises(ValueError):
        PhantomSpec(liver_intensity=(0.1, 0.5), background_intensity=(0.0, 0.3))
    with pytest.raises(ValueError, match="could not place"):
        generate_phantom(PhantomSpec(grid=(8, 8, 8)), 0)
    spec = PhantomSpec(noise_sigma=0.2)
    assert PhantomSpec.from_dict(spec.to_dict()) == spec


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_phantom_invariants(seed):
    vol, mask = generate_phantom(PhantomSpec(), seed)
    assert vol.shape == mask.shape == (32, 32, 32)
    assert mask.labels.any() and np.isfinite(vol.data).all()
    # the liver never touches the grid border
    fg = np.argwhere(mask.labels)
    assert fg.min() >= 1 and fg.max() <= 30


# ---------------------------------------------------------------- manifest


def test_default_manifest_counts_and_files(tmp_path):
    m = build_manifest(tmp_path / "d", seed=0)
    assert len(m.labeled) == 3 and len(m.unlabeled) == 33
    assert len(m.split("val")) == 10 and len(m.split("test")) == 10
    assert len(os.listdir(tmp_path / "d" / "images")) == 56
    assert len(os.listdir(tmp_path / "d" / "masks")) == 23


def test_manifest_roundtrip_and_digest(tmp_path):
    counts = {"labeled": 1, "unlabeled_bright": 1, "unlabeled_dark": 1, "val": 1, "test": 1}
    a = build_manifest(tmp_path / "a", counts, seed=5)
    b = build_manifest(tmp_path / "b", counts, seed=5)
    c = build_manifest(tmp_path / "c", counts, seed=6)
    assert a.digest() == b.digest() != c.digest()
    loaded = Manifest.load(tmp_path / "a" / "manifest.json")
    assert loaded.digest() == a.digest()
    vol, mask = load_case(loaded, loaded.labeled[0])
    assert vol.modality == "GED4-like" and mask is not None
    assert {c["modality"] for c in loaded.unlabeled} == {"GED4-like", "T2-like"}
    assert load_case(loaded, loaded.unlabeled[0])[1] is None


def test_manifest_validation(tmp_path):
    m = build_manifest(tmp_path / "a", {"labeled": 1, "unlabeled_bright": 1, "unlabeled_dark": 0, "val": 0, "test": 0}, seed=0)
    os.remove(tmp_path / "a" / m.unlabeled[0]["volume"])
    with pytest.raises(FileNotFoundError):
        Manifest.load(tmp_path / "a" / "manifest.json")
    dup = Manifest(m.cases + [dict(m.cases[0])])
    with pytest.raises(ValueError, match="duplicate"):
        dup.validate(check_files=False)
    with pytest.raises(ValueError):
        build_manifest(tmp_path / "b", {"labeled": -1})


def test_empty_manifest(tmp_path):
    zero = {k: 0 for k in ("labeled", "unlabeled_bright", "unlabeled_dark", "val", "test", "val_dark", "test_dark")}
    m = build_manifest(tmp_path / "e", zero)
    assert m.cases == [] and Manifest.load(tmp_path / "e" / "manifest.json").cases == []
