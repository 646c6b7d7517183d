"""Dice / Hausdorff evaluation, sliding-window inference and dataset reports."""
from __future__ import annotations

import csv
import datetime as _dt
import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import kernels
from .data.preprocess import pad_to_multiple, zscore_normalize

HD_STATUSES = ("value", "empty_prediction", "empty_reference")


def _binary_pair(pred, ref):
    a, b = np.asarray(pred) > 0, np.asarray(ref) > 0
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(pred, ref) -> float:
    """2|A & B| / (|A| + |B|); 1.0 when both masks are empty."""
    a, b = _binary_pair(pred, ref)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def distance_transform(mask, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Exact Euclidean distance (mm) from every voxel center to the nearest foreground voxel center."""
    m = np.asarray(mask) > 0
    if m.ndim != 3:
        raise ValueError("distance_transform expects a 3D mask")
    if not m.any():
        raise ValueError("distance_transform of an empty mask is undefined")
    return np.sqrt(kernels.edt_sq(m.astype(np.uint8), tuple(float(s) for s in spacing)))


class HausdorffResult(NamedTuple):
    value: Optional[float]
    status: str


def _directed_sq(src, dst, spacing):
    return kernels.edt_sq(dst.astype(np.uint8), spacing)[src]


def hausdorff(pred, ref, spacing=(1.0, 1.0, 1.0), percentile: Optional[float] = None) -> HausdorffResult:
    """Symmetric Hausdorff distance in mm between foreground voxel-center sets.

    ``percentile=95`` gives HD95 as the larger of the two directed 95th percentiles.
    """
    a, b = _binary_pair(pred, ref)
    spacing = tuple(float(s) for s in spacing)
    if min(spacing) <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    if not b.any():
        return HausdorffResult(None, "empty_reference")
    if not a.any():
        return HausdorffResult(None, "empty_prediction")
    ab = _directed_sq(a, b, spacing)
    ba = _directed_sq(b, a, spacing)
    if percentile is None:
        return HausdorffResult(float(np.sqrt(max(ab.max(), ba.max()))), "value")
    d = max(np.percentile(np.sqrt(ab), percentile), np.percentile(np.sqrt(ba), percentile))
    return HausdorffResult(float(d), "value")


# ---------------------------------------------------------------- inference


def _window_starts(n, p):
    step = max(p // 2, 1)
    starts = list(range(0, n - p + 1, step))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def sliding_window_predict(predict: Callable, image: np.ndarray, patch=(32, 32, 32), mirror: bool = False) -> np.ndarray:
    """Full-volume class probabilities from overlapping patches (50% overlap, mean softmax).

    ``predict`` maps an (N, 1, *patch) array to (N, C, *patch) probabilities. The
    image is padded with its minimum to multiples of 32 and cropped back afterwards.
    """
    patch = tuple(int(p) for p in patch)
    padded, crop = pad_to_multiple(image, 32, minimum=patch)
    acc = None
    counts = np.zeros(padded.shape)
    for start in itertools.product(*(_window_starts(n, p) for n, p in zip(padded.shape, patch))):
        sl = tuple(slice(s, s + p) for s, p in zip(start, patch))
        x = padded[sl][None, None]
        probs = predict(x)[0]
        if mirror:
            for axes in [(2,), (3,), (4,), (2, 3), (2, 4), (3, 4), (2, 3, 4)]:
                probs = probs + np.flip(predict(np.flip(x, axes).copy()), axes)[0]
            probs = probs / 8.0
        if acc is None:
            acc = np.zeros((probs.shape[0],) + padded.shape)
        acc[(slice(None),) + sl] += probs
        counts[sl] += 1.0
    return (acc / counts)[(slice(None),) + crop]


def network_predictor(nets) -> Callable:
    """Predictor over one network or the mean softmax of several (ensemble)."""
    from .autodiff.ops import _softmax
    from .stunet import forward

    nets = nets if isinstance(nets, (list, tuple)) else [nets]

    def predict(x):
        out = None
        for net in nets:
            s = _softmax(forward(net, x).data)
            out = s if out is None else out + s
        return out / len(nets)

    return predict


# ---------------------------------------------------------------- per-case / dataset


def evaluate_case(pred_or_logits, ref, spacing=(1.0, 1.0, 1.0), case_id="", modality="", hd_percentile=None) -> dict:
    """Metrics for one case. 4D input (C, D, H, W) is treated as scores and argmaxed."""
    pred = np.asarray(pred_or_logits)
    if pred.ndim == 4:
        pred = pred.argmax(axis=0)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"case {case_id!r}: prediction shape {pred.shape} != reference {ref.shape}")
    hd = hausdorff(pred, ref, spacing, hd_percentile)
    return {"case_id": case_id, "modality": modality, "dsc": dice(pred, ref), "hd": hd.value, "hd_status": hd.status}


def aggregate(per_case) -> dict:
    dscs = [c["dsc"] for c in per_case]
    hds = [c["hd"] for c in per_case if c["hd_status"] == "value"]
    return {
        "count": len(per_case),
        "mean_dsc": sum(dscs) / len(dscs) if dscs else None,
        "mean_hd": sum(hds) / len(hds) if hds else None,
        "hd_excluded": len(per_case) - len(hds),
    }


@dataclass
class MetricReport:
    per_case: list
    aggregates: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = aggregate(self.per_case)

    def to_json(self) -> dict:
        return {"per_case": self.per_case, "aggregates": self.aggregates, "metadata": self.metadata}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "modality", "dsc", "hd", "hd_status"])
            for c in self.per_case:
                w.writerow([c["case_id"], c["modality"], repr(c["dsc"]), "" if c["hd"] is None else repr(c["hd"]), c["hd_status"]])

    def table_row(self, method: str) -> str:
        """One comparison-table row: method, DSC, HD."""
        a = self.aggregates
        hd = "n/a" if a["mean_hd"] is None else f"{a['mean_hd']:.2f}"
        return f"| {method} | {a['mean_dsc']:.4f} | {hd} |"

    @classmethod
    def load(cls, path) -> "MetricReport":
        with open(path) as fh:
            d = json.load(fh)
        return cls(d["per_case"], d["aggregates"], d["metadata"])


def evaluate_dataset(predictor, manifest, split="test", modality=None, patch=(32, 32, 32),
                     hd_percentile=None, mirror=False, metadata=None) -> MetricReport:
    """Sliding-window inference over a manifest split and per-case metrics.

    ``predictor`` is a NetworkParams, a list of them (mean-softmax ensemble), or a
    callable mapping (N, 1, *patch) arrays to probabilities.
    """
    from .data.manifest import load_case

    cases = manifest.split(split, modality)
    if not cases:
        raise ValueError(f"split {split!r} (modality={modality}) has no cases")
    missing = [c["id"] for c in cases if c["mask"] is None]
    if missing:
        raise ValueError(f"cases without reference masks cannot be evaluated: {missing}")
    predict = predictor if callable(predictor) else network_predictor(predictor)
    per_case = []
    for case in cases:
        vol, mask = load_case(manifest, case)
        image = zscore_normalize(vol).data
        probs = sliding_window_predict(predict, image, patch, mirror)
        per_case.append(evaluate_case(probs, mask.labels, vol.spacing, case["id"], case["modality"], hd_percentile))
    meta = {
        "manifest": manifest.digest(),
        "split": split,
        "modality": modality,
        "hd_variant": "HD" if hd_percentile is None else f"HD{hd_percentile:g}",
        "hd_units": "mm",
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    meta.update(metadata or {})
    return MetricReport(per_case, metadata=meta)
