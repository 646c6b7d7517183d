"""Dataset manifests and on-disk phantom dataset generation.

Manifest JSON::

    {"version": 1, "seed": 0,
     "cases": [{"id": ..., "volume": "images/x.nii.gz", "mask": "masks/x.nii.gz" | null,
                "modality": "GED4-like", "split": "train" | "val" | "test"}, ...]}

Training cases with a mask form the labeled pool, training cases without one the
unlabeled pool. Paths are relative to the manifest's directory.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .nifti import read_mask, read_nifti, write_nifti
from .phantom import PhantomSpec, generate_phantom

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")

DEFAULT_COUNTS = {
    "labeled": 3,
    "unlabeled_bright": 22,
    "unlabeled_dark": 11,
    "val": 10,
    "test": 10,
    "val_dark": 0,
    "test_dark": 0,
}


@dataclass
class Manifest:
    cases: list
    seed: int = 0
    root: str = "."
    version: int = MANIFEST_VERSION
    extra: dict = field(default_factory=dict)

    @property
    def labeled(self):
        return [c for c in self.cases if c["split"] == "train" and c["mask"] is not None]

    @property
    def unlabeled(self):
        return [c for c in self.cases if c["split"] == "train" and c["mask"] is None]

    def split(self, name, modality=None):
        out = [c for c in self.cases if c["split"] == name]
        if name == "train":
            out = [c for c in out if c["mask"] is not None]
        if modality is not None:
            out = [c for c in out if c["modality"] == modality]
        return out

    def path(self, rel):
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def validate(self, check_files=True):
        labeled_paths = {c["volume"] for c in self.labeled}
        both = labeled_paths & {c["volume"] for c in self.unlabeled}
        if both:
            raise ValueError(f"paths appear in both labeled and unlabeled pools: {sorted(both)}")
        ids = [c["id"] for c in self.cases]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate case ids in manifest")
        for c in self.cases:
            if c["split"] not in SPLITS:
                raise ValueError(f"case {c['id']}: unknown split {c['split']!r}")
        if check_files:
            missing = [c["id"] for c in self.cases
                       if not os.path.exists(self.path(c["volume"]))
                       or (c["mask"] is not None and not os.path.exists(self.path(c["mask"])))]
            if missing:
                raise FileNotFoundError(f"manifest references missing files for cases: {missing}")
        return self

    def to_json(self) -> dict:
        d = {"version": self.version, "seed": self.seed, "cases": self.cases}
        d.update(self.extra)
        return d

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path, check_files=True) -> "Manifest":
        with open(path) as fh:
            d = json.load(fh)
        extra = {k: v for k, v in d.items() if k not in ("version", "seed", "cases")}
        m = cls(d["cases"], d.get("seed", 0), os.path.dirname(os.path.abspath(path)), d.get("version", 1), extra)
        return m.validate(check_files)

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def load_case(manifest: Manifest, case: dict):
    """Return (Volume, SegMask | None) for a manifest entry."""
    vol = read_nifti(manifest.path(case["volume"]), modality=case["modality"], case_id=case["id"])
    mask = read_mask(manifest.path(case["mask"])) if case["mask"] is not None else None
    return vol, mask


def _case_seed(seed, index):
    return int(np.random.SeedSequence([seed, 0x5EED, index]).generate_state(1)[0])


def build_manifest(out_dir, counts=None, specs=None, seed=0) -> Manifest:
    """Generate phantoms to ``out_dir`` and write ``out_dir/manifest.json``.

    ``specs`` maps polarity ("bright"/"dark") to a PhantomSpec; polarity is forced
    to match the key.
    """
    counts = {**DEFAULT_COUNTS, **(counts or {})}
    if any(int(v) < 0 for v in counts.values()):
        raise ValueError(f"case counts must be non-negative: {counts}")
    specs = dict(specs or {})
    base = specs.get("bright", PhantomSpec())
    bright = PhantomSpec.from_dict({**base.to_dict(), "polarity": "bright"})
    dark_base = specs.get("dark", base)
    dark = PhantomSpec.from_dict({**dark_base.to_dict(), "polarity": "dark"})

    plan = [
        ("train", "labeled", bright, True, counts["labeled"]),
        ("train", "unlabeled", bright, False, counts["unlabeled_bright"]),
        ("train", "unlabeled", dark, False, counts["unlabeled_dark"]),
        ("val", "val", bright, True, counts["val"]),
        ("val", "val", dark, True, counts["val_dark"]),
        ("test", "test", bright, True, counts["test"]),
        ("test", "test", dark, True, counts["test_dark"]),
    ]
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    cases, index = [], 0
    for split, group, spec, with_mask, n in plan:
        for i in range(int(n)):
            cid = f"{group}_{spec.polarity}_{i:03d}"
            vol, mask = generate_phantom(spec, _case_seed(seed, index), case_id=cid)
            index += 1
            vpath = f"images/{cid}.nii.gz"
            write_nifti(vol, os.path.join(out_dir, vpath))
            mpath = None
            if with_mask:
                mpath = f"masks/{cid}.nii.gz"
                write_nifti(mask, os.path.join(out_dir, mpath))
            cases.append({"id": cid, "volume": vpath, "mask": mpath, "modality": spec.modality, "split": split})
    manifest = Manifest(cases, seed, os.path.abspath(out_dir),
                        extra={"phantom_specs": {"bright": bright.to_dict(), "dark": dark.to_dict()},
                               "counts": {k: int(v) for k, v in counts.items()}})
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest
