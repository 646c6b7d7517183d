import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liseg.data import PhantomSpec, build_manifest
from liseg.metrics import (
    MetricReport,
    aggregate,
    dice,
    distance_transform,
    evaluate_case,
    evaluate_dataset,
    hausdorff,
    sliding_window_predict,
)
from liseg.stunet import preset, threshold_network
from liseg.verify import DYADIC_SPACINGS, dice_oracle, hausdorff_oracle, random_mask, random_shape

masks = st.integers(0, 2**31).map(lambda s: np.random.default_rng(s))


# ---------------------------------------------------------------- dice


def test_dice_hand_cases():
    a = np.zeros((4, 4, 4), bool)
    a[0, 0, :2] = True
    b = np.zeros_like(a)
    b[0, 0, 1:3] = True
    assert dice(a, b) == 0.5  # 2*1 / (2+2)
    assert dice(a, a) == 1.0
    assert dice(a, np.zeros_like(a)) == 0.0
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0
    with pytest.raises(ValueError):
        dice(a, np.zeros((3, 3, 3)))


@settings(max_examples=60, deadline=None)
@given(masks)
def test_dice_symmetric_and_matches_confusion_counts(rng):
    shape = random_shape(rng)
    a, b = random_mask(rng, shape, nonempty=False), random_mask(rng, shape, nonempty=False)
    assert dice(a, b) == dice(b, a) == dice_oracle(a, b)
    assert 0.0 <= dice(a, b) <= 1.0


# ---------------------------------------------------------------- hausdorff


def test_hausdorff_two_points():
    a = np.zeros((1, 1, 5), bool)
    b = np.zeros_like(a)
    a[0, 0, 0] = True
    b[0, 0, 4] = True
    assert hausdorff(a, b) == (4.0, "value")
    assert hausdorff(a, b, spacing=(1, 1, 0.5)).value == 2.0


def test_hausdorff_asymmetric_sets():
    # A = {0}, B = {0, 3}: d(A->B) = 0, d(B->A) = 3, HD = 3
    a = np.zeros((1, 1, 4), bool)
    a[0, 0, 0] = True
    b = a.copy()
    b[0, 0, 3] = True
    assert hausdorff(a, b).value == 3.0 == hausdorff(b, a).value


def test_hausdorff_diagonal_spacing():
    a = np.zeros((2, 2, 2), bool)
    b = np.zeros_like(a)
    a[0, 0, 0] = b[1, 1, 1] = True
    assert hausdorff(a, b, (1.0, 2.0, 2.0)).value == 3.0


def test_hausdorff_empty_statuses():
    a = np.zeros((3, 3, 3), bool)
    b = a.copy()
    b[1, 1, 1] = True
    assert hausdorff(a, b) == (None, "empty_prediction")
    assert hausdorff(b, a) == (None, "empty_reference")
    assert hausdorff(a, a).status == "empty_reference"
    with pytest.raises(ValueError):
        hausdorff(b, b, spacing=(1, 0, 1))


@settings(max_examples=60, deadline=None)
@given(masks)
def test_hausdorff_equals_brute_force_exactly(rng):
    shape = random_shape(rng)
    spacing = tuple(float(s) for s in rng.choice(DYADIC_SPACINGS, 3))
    a, b = random_mask(rng, shape), random_mask(rng, shape)
    assert hausdorff(a, b, spacing).value == hausdorff_oracle(a, b, spacing)
    assert hausdorff(a, b, spacing, 95).value == hausdorff_oracle(a, b, spacing, 95)
    assert hausdorff(a, b, spacing).value == hausdorff(b, a, spacing).value
    assert hausdorff(a, a, spacing).value == 0.0


@settings(max_examples=40, deadline=None)
@given(masks)
def test_hausdorff_triangle_inequality(rng):
    shape = random_shape(rng)
    a, b, c = (random_mask(rng, shape) for _ in range(3))
    assert hausdorff(a, c).value <= hausdorff(a, b).value + hausdorff(b, c).value + 1e-12


def test_hd95_not_above_hd():
    rng = np.random.default_rng(0)
    for _ in range(20):
        shape = random_shape(rng)
        a, b = random_mask(rng, shape), random_mask(rng, shape)
        assert hausdorff(a, b, percentile=95).value <= hausdorff(a, b).value


def test_distance_transform():
    m = np.zeros((1, 1, 5), bool)
    m[0, 0, 2] = True
    assert distance_transform(m).ravel().tolist() == [2.0, 1.0, 0.0, 1.0, 2.0]
    with pytest.raises(ValueError):
        distance_transform(np.zeros((2, 2, 2)))


# ---------------------------------------------------------------- case / aggregate / report


def test_evaluate_case_perfect_and_empty():
    ref = np.zeros((4, 4, 4), np.uint8)
    ref[1:3, 1:3, 1:3] = 1
    logits = np.stack([1 - ref, ref]).astype(float)
    r = evaluate_case(logits, ref)
    assert (r["dsc"], r["hd"], r["hd_status"]) == (1.0, 0.0, "value")
    r = evaluate_case(np.zeros_like(ref), ref)
    assert (r["dsc"], r["hd"], r["hd_status"]) == (0.0, None, "empty_prediction")
    with pytest.raises(ValueError, match="shape"):
        evaluate_case(np.zeros((3, 3, 3)), ref)


def test_evaluate_case_hand_composition():
    ref = np.zeros((1, 1, 6), np.uint8)
    ref[0, 0, 0:2] = 1
    pred = np.zeros_like(ref)
    pred[0, 0, 1:4] = 1
    r = evaluate_case(pred, ref, spacing=(1, 1, 2.0))
    assert r["dsc"] == 2 * 1 / (2 + 3)
    assert r["hd"] == 4.0  # voxel 3 is two voxels (4 mm) from voxel 1


def test_aggregate_excludes_empty_hd():
    per = [{"dsc": 1.0, "hd": 2.0, "hd_status": "value"}, {"dsc": 0.0, "hd": None, "hd_status": "empty_prediction"}]
    assert aggregate(per) == {"count": 2, "mean_dsc": 0.5, "mean_hd": 2.0, "hd_excluded": 1}


def test_report_roundtrip_and_recomputable(tmp_path):
    per = [{"case_id": f"c{i}", "modality": "GED4-like", "dsc": d, "hd": h, "hd_status": "value"}
           for i, (d, h) in enumerate([(0.9, 3.0), (0.7, 1.5), (0.8, 2.25)])]
    rep = MetricReport(per, metadata={"hd_units": "mm"})
    rep.save(tmp_path / "r.json")
    back = MetricReport.load(tmp_path / "r.json")
    assert back.aggregates == aggregate(back.per_case) == rep.aggregates
    rep.save_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "case_id,modality,dsc,hd,hd_status" and len(lines) == 4
    assert rep.table_row("CPS").startswith("| CPS | 0.8000 |")


# ---------------------------------------------------------------- inference


def test_sliding_window_constant_predictor_and_coverage():
    calls = []

    def predict(x):
        calls.append(x.shape)
        return np.stack([np.full(x.shape[2:], 0.25), np.full(x.shape[2:], 0.75)])[None]

    image = np.random.default_rng(0).standard_normal((40, 32, 50))
    out = sliding_window_predict(predict, image, (32, 32, 32))
    assert out.shape == (2, 40, 32, 50)
    assert np.allclose(out[1], 0.75) and np.allclose(out.sum(axis=0), 1.0)
    # padded to 64 x 32 x 64 -> starts {0, 16, 32} on two axes, {0} on one
    assert len(calls) == 9


def test_sliding_window_identity_predictor_reconstructs_image():
    def predict(x):
        return np.concatenate([x, -x], axis=1)

    image = np.random.default_rng(1).standard_normal((33, 32, 32))
    out = sliding_window_predict(predict, image)
    np.testing.assert_allclose(out[0], image, atol=1e-12)


def test_perfect_oracle_network_on_dataset(tmp_path):
    spec = PhantomSpec(noise_sigma=0.0, blur_sigma=0.0, lesion_count=(0, 0), distractor_count=(0, 0))
    m = build_manifest(tmp_path / "d", {"labeled": 0, "unlabeled_bright": 0, "unlabeled_dark": 0, "val": 0, "test": 1},
                       {"bright": spec}, seed=0)
    rep = evaluate_dataset(threshold_network(preset("toy")), m, "test")
    assert rep.aggregates["mean_dsc"] == 1.0 and rep.per_case[0]["hd"] == 0.0
    assert rep.metadata["hd_variant"] == "HD" and rep.metadata["hd_units"] == "mm"
    again = evaluate_dataset(threshold_network(preset("toy")), m, "test")
    strip = lambda r: {**r.to_json(), "metadata": {k: v for k, v in r.metadata.items() if k != "timestamp"}}
    assert json.dumps(strip(rep), sort_keys=True) == json.dumps(strip(again), sort_keys=True)
    with pytest.raises(ValueError, match="no cases"):
        evaluate_dataset(threshold_network(preset("toy")), m, "val")
