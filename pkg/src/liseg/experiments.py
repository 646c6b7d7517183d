"""Bundled experiments on phantom data: label efficiency, polarity shift, overfitting.

Each function builds its own data under a working directory, trains toy-scale
models and returns plain dicts so results can be dumped as JSON.
"""
from __future__ import annotations

import os
import time

import numpy as np

from .autodiff import AdamState, Tensor, softmax_cross_entropy
from .autodiff.ops import _softmax
from .data import Manifest, PhantomSpec, build_manifest, generate_phantom
from .data.preprocess import zscore_normalize
from .metrics import dice, evaluate_dataset
from .stunet import build_stunet, forward, preset
from .training import TrainConfig, supervised_single_step, train_loop

# Phantom used by the label-efficiency study: noisier than the default, with
# liver-bright distractors so that three labeled volumes under-cover the variation.
STUDY_SPEC = dict(noise_sigma=0.25, distractor_count=(1, 3), distractor_intensity=0.8,
                  liver_intensity=(0.45, 1.0), background_intensity=(0.0, 0.3))
STUDY_COUNTS = {"labeled": 3, "unlabeled_bright": 30, "unlabeled_dark": 0, "val": 0, "val_dark": 0,
                "test": 10, "test_dark": 5}
STUDY_STEPS = 120
STUDY_BATCH = 2


def study_manifest(work_dir, seed, spec=None, counts=None) -> Manifest:
    path = os.path.join(work_dir, f"data_seed{seed}")
    if os.path.exists(os.path.join(path, "manifest.json")):
        return Manifest.load(os.path.join(path, "manifest.json"))
    spec = PhantomSpec(**(STUDY_SPEC if spec is None else spec))
    return build_manifest(path, counts or STUDY_COUNTS, {"bright": spec}, seed=seed)


def _heldout(net, manifest):
    out = {}
    for name, modality in (("bright", "GED4-like"), ("dark", "T2-like")):
        if manifest.split("test", modality):
            r = evaluate_dataset(net, manifest, "test", modality)
            out[name] = {"mean_dsc": r.aggregates["mean_dsc"], "mean_hd": r.aggregates["mean_hd"],
                         "per_case": [c["dsc"] for c in r.per_case]}
    return out


def label_efficiency(work_dir, seeds=(0, 1, 2), steps=STUDY_STEPS, batch_size=STUDY_BATCH, lr=1e-3,
                     spec=None, counts=None, modes=("supervised", "cps")) -> dict:
    """Supervised-only vs CPS at equal step count on 3 labeled + 30 unlabeled bright phantoms.

    Both arms see the same labeled patches (shared seed streams); the CPS arm adds
    unlabeled patches and the cross term. Evaluation uses network 1 on held-out
    bright and dark phantoms, so the same runs also measure the polarity gap.
    """
    t0 = time.perf_counter()
    runs = {}
    for seed in seeds:
        manifest = study_manifest(work_dir, seed, spec, counts)
        for mode in modes:
            cfg = TrainConfig(mode=mode, seed=seed, max_epochs=1, steps_per_epoch=steps,
                              batch_size=batch_size, lr=lr, validate=False)
            t = time.perf_counter()
            res = train_loop(cfg, os.path.join(work_dir, f"{mode}_seed{seed}"), manifest)
            runs.setdefault(str(seed), {})[mode] = {
                "seconds": time.perf_counter() - t,
                "final_l_sup": float(np.mean([b.l_sup for b in res.history[-10:]])),
                **_heldout(res.state.net1, manifest),
            }
    out = {"seeds": list(seeds), "steps": steps, "batch_size": batch_size, "lr": lr, "runs": runs}
    for mode in modes:
        out[f"{mode}_mean_dsc"] = float(np.mean([runs[str(s)][mode]["bright"]["mean_dsc"] for s in seeds]))
    if set(modes) >= {"supervised", "cps"}:
        out["cps_gain"] = out["cps_mean_dsc"] - out["supervised_mean_dsc"]
    out["seconds"] = time.perf_counter() - t0
    return out


def overfit(seed=0, steps=200, lr=1e-3, spec=None, ce_target=0.05, dice_target=0.95) -> dict:
    """Fit one network to one phantom (whole 32^3 volume per step, no augmentation)."""
    vol, mask = generate_phantom(PhantomSpec(**(spec or {})), seed, case_id="overfit")
    x = zscore_normalize(vol).data[None, None]
    y = mask.labels.astype(np.int64)[None]
    net = build_stunet(preset("toy"), seed)
    opt = AdamState.for_params(net.params, lr=lr)
    trace, reached = [], None
    for step in range(1, steps + 1):
        supervised_single_step(net, opt, (x, y))
        logits = forward(net, x)
        ce = softmax_cross_entropy(Tensor(logits.data), y)[0].item()
        d = dice(_softmax(logits.data).argmax(axis=1)[0], y[0])
        trace.append((step, ce, d))
        if ce < ce_target and d > dice_target:
            reached = step
            break
    step, ce, d = trace[-1]
    return {"seed": seed, "steps_run": step, "reached_at": reached, "ce": ce, "dice": d,
            "trace": trace, "ce_target": ce_target, "dice_target": dice_target}


def summarize(name, res) -> str:
    if name == "overfit":
        status = f"reached at step {res['reached_at']}" if res["reached_at"] else "targets not reached"
        return f"overfit: CE {res['ce']:.4f} Dice {res['dice']:.4f} after {res['steps_run']} steps ({status})"
    lines = [f"{'seed':>4} {'mode':>10} {'bright DSC':>10} {'dark DSC':>9}"]
    for seed, modes in res["runs"].items():
        for mode, r in modes.items():
            dark = r.get("dark", {}).get("mean_dsc")
            lines.append(f"{seed:>4} {mode:>10} {r['bright']['mean_dsc']:>10.4f} {'n/a' if dark is None else f'{dark:.4f}':>9}")
    if "cps_gain" in res:
        lines.append(f"mean bright DSC: supervised {res['supervised_mean_dsc']:.4f}, cps {res['cps_mean_dsc']:.4f}, "
                     f"gain {res['cps_gain']:+.4f} ({res['seconds']:.0f}s)")
    return "\n".join(lines)
