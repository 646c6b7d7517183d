"""Dual-network cross pseudo supervision training.

Per step both networks see the same augmented labeled and unlabeled patches. The
objective is

    total = l_sup + lambda * (l_cps_labeled + l_cps_unlabeled)

where l_sup sums each network's cross-entropy against the ground truth and each CPS
term sums the cross-entropy of one network against the other's argmax pseudo labels.
Pseudo labels are plain integer arrays, so no gradient reaches the network that
produced them.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import (
    AdamState,
    Tensor,
    adam_step,
    add,
    backward,
    cross_entropy_voxelwise,
    scale,
    softmax_cross_entropy,
)
from .autodiff.ops import _softmax
from .checkpoint import load_checkpoint, load_optimizer, save_checkpoint, save_optimizer
from .data.augment import SpatialAugmentConfig, mirror_augment, sample_patch, spatial_augment
from .data.manifest import Manifest, load_case
from .data.preprocess import zscore_normalize
from .data.volume import Sample
from .metrics import evaluate_dataset
from .stunet import NetworkParams, build_stunet, forward, preset

log = logging.getLogger(__name__)

STREAMS = ("init-net1", "init-net2", "sampler-labeled", "sampler-unlabeled", "augment-labeled", "augment-unlabeled")
LOSS_COLUMNS = ("step", "epoch", "lambda", "l_sup", "l_cps_labeled", "l_cps_unlabeled", "total")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, breakdown=None, checkpoint=None):
        super().__init__(message)
        self.breakdown = breakdown
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 4
    max_epochs: int = 36
    steps_per_epoch: int = 250
    lambda_max: float = 1.0
    lambda_rampup_epochs: float | None = None  # None: 20% of max_epochs
    patch: tuple = (32, 32, 32)
    seed: int = 0
    mode: str = "cps"  # or "supervised"
    scale: str = "toy"
    num_classes: int = 2
    labeled_cps: bool = True
    foreground_prob: float = 0.5
    mirror: bool = True
    spatial: bool = True
    unlabeled_modalities: tuple | None = None  # restrict the unlabeled pool, e.g. ("GED4-like",)
    validate: bool = True
    ensemble: bool = False
    manifest: str | None = None
    unlabeled_manifest: str | None = None
    stop_after_epochs: int | None = None  # simulate an interruption

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        if self.mode not in ("cps", "supervised"):
            raise ValueError(f"mode must be 'cps' or 'supervised', got {self.mode!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (half labeled, half unlabeled)")
        if self.unlabeled_modalities is not None and not isinstance(self.unlabeled_modalities, tuple):
            self.unlabeled_modalities = tuple(self.unlabeled_modalities)

    @property
    def labeled_per_step(self):
        return self.batch_size // 2

    @property
    def unlabeled_per_step(self):
        return self.batch_size - self.batch_size // 2

    @property
    def rampup_epochs(self):
        if self.lambda_rampup_epochs is None:
            return 0.2 * self.max_epochs
        return float(self.lambda_rampup_epochs)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class LossBreakdown:
    l_sup: float
    l_cps_labeled: float
    l_cps_unlabeled: float
    lam: float
    total: float

    def is_finite(self):
        return all(math.isfinite(v) for v in (self.l_sup, self.l_cps_labeled, self.l_cps_unlabeled, self.total))


@dataclass
class DualModelState:
    net1: NetworkParams
    net2: NetworkParams
    opt1: AdamState
    opt2: AdamState
    streams: dict
    epoch: int = 0
    step: int = 0
    best_dsc: float = -1.0
    best_epoch: int = -1


def make_streams(seed: int) -> dict:
    """Independent named generators derived from one seed."""
    return {
        name: np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])))
        for name in STREAMS
    }


def _sub_seed(rng):
    return int(rng.integers(2**62))


def init_state(config: TrainConfig) -> DualModelState:
    streams = make_streams(config.seed)
    cfg = preset(config.scale, num_classes=config.num_classes)
    net1 = build_stunet(cfg, _sub_seed(streams["init-net1"]))
    net2 = build_stunet(cfg, _sub_seed(streams["init-net2"]))
    return DualModelState(net1, net2, AdamState.for_params(net1.params, lr=config.lr),
                          AdamState.for_params(net2.params, lr=config.lr), streams)


# ---------------------------------------------------------------- losses


def pseudo_labels(probs) -> np.ndarray:
    """Per-voxel argmax over channels (lowest index wins ties); returns integer labels, no gradient."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return p.argmax(axis=1)


def supervised_loss(p1: Tensor, p2: Tensor, gt) -> Tensor:
    if p1.shape != p2.shape:
        raise ValueError(f"prediction shapes differ: {p1.shape} vs {p2.shape}")
    return add(cross_entropy_voxelwise(p1, gt), cross_entropy_voxelwise(p2, gt))


def cps_loss(p1: Tensor, p2: Tensor) -> Tensor:
    """CE(p1, argmax p2) + CE(p2, argmax p1)."""
    if p1.shape != p2.shape:
        raise ValueError(f"prediction shapes differ: {p1.shape} vs {p2.shape}")
    return add(cross_entropy_voxelwise(p1, pseudo_labels(p2)), cross_entropy_voxelwise(p2, pseudo_labels(p1)))


def total_loss(l_sup: Tensor, l_cps_labeled: Tensor, l_cps_unlabeled: Tensor, lam: float):
    total = add(l_sup, scale(add(l_cps_labeled, l_cps_unlabeled), lam))
    breakdown = LossBreakdown(l_sup.item(), l_cps_labeled.item(), l_cps_unlabeled.item(), float(lam), total.item())
    return total, breakdown


def lambda_schedule(epoch: float, config: TrainConfig) -> float:
    """Linear ramp from 0 to lambda_max over the ramp-up epochs, constant afterwards."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    ramp = config.rampup_epochs
    if ramp <= 0 or epoch >= ramp:
        return float(config.lambda_max)
    return float(config.lambda_max) * (epoch / ramp)


# ---------------------------------------------------------------- data


def load_pools(config: TrainConfig, manifest: Manifest):
    def prep(case):
        vol, mask = load_case(manifest, case)
        return Sample(zscore_normalize(vol).data, None if mask is None else mask.labels.astype(np.int64))

    labeled = [prep(c) for c in manifest.labeled]
    src = Manifest.load(config.unlabeled_manifest) if config.unlabeled_manifest else manifest
    ucases = src.unlabeled
    if config.unlabeled_modalities is not None:
        ucases = [c for c in ucases if c["modality"] in config.unlabeled_modalities]
    unlabeled = [Sample(zscore_normalize(load_case(src, c)[0]).data, None) for c in ucases]
    return labeled, unlabeled


def draw_batch(pool, n, sampler, augmenter, config: TrainConfig):
    """Draw ``n`` augmented patches; returns (images (n,1,*patch), labels (n,*patch) or None)."""
    images, labels = [], []
    aug_cfg = SpatialAugmentConfig()
    for _ in range(n):
        sample = pool[int(sampler.integers(len(pool)))]
        if config.mirror:
            sample = mirror_augment(sample, augmenter)
        if config.spatial:
            sample = spatial_augment(sample, augmenter, aug_cfg)
        patch, _ = sample_patch(sample, config.patch, sampler, config.foreground_prob)
        images.append(patch.image)
        labels.append(patch.mask)
    x = np.stack(images)[:, None]
    y = None if labels[0] is None else np.stack(labels)
    return x, y


def next_batches(state: DualModelState, labeled, unlabeled, config: TrainConfig):
    s = state.streams
    lab = draw_batch(labeled, config.labeled_per_step, s["sampler-labeled"], s["augment-labeled"], config)
    unl = None
    if config.mode == "cps" and unlabeled:
        unl = draw_batch(unlabeled, config.unlabeled_per_step, s["sampler-unlabeled"], s["augment-unlabeled"], config)[0]
    return lab, unl


# ---------------------------------------------------------------- steps


def _cross_terms(z1, z2, s1, s2):
    """CPS term from logits via the fused CE; pseudo labels come from the detached softmax."""
    a, _ = softmax_cross_entropy(z1, pseudo_labels(s2))
    b, _ = softmax_cross_entropy(z2, pseudo_labels(s1))
    return add(a, b)


def compute_losses(state: DualModelState, labeled_batch, unlabeled_batch, config: TrainConfig, lam: float):
    x_l, y_l = labeled_batch
    z1, z2 = forward(state.net1, x_l), forward(state.net2, x_l)
    ce1, s1 = softmax_cross_entropy(z1, y_l)
    ce2, s2 = softmax_cross_entropy(z2, y_l)
    l_sup = add(ce1, ce2)
    zero = Tensor(0.0)
    if config.mode == "supervised":
        return total_loss(l_sup, zero, zero, 0.0)
    l_cps_l = _cross_terms(z1, z2, s1, s2) if config.labeled_cps else zero
    l_cps_u = zero
    if unlabeled_batch is not None and len(unlabeled_batch):
        u1, u2 = forward(state.net1, unlabeled_batch), forward(state.net2, unlabeled_batch)
        l_cps_u = _cross_terms(u1, u2, _softmax(u1.data), _softmax(u2.data))
    return total_loss(l_sup, l_cps_l, l_cps_u, lam)


def train_step(state: DualModelState, labeled_batch, unlabeled_batch, config: TrainConfig, lam: float) -> LossBreakdown:
    """One joint forward/backward and one Adam step per network (in place on ``state``)."""
    state.net1.zero_grad()
    state.net2.zero_grad()
    total, breakdown = compute_losses(state, labeled_batch, unlabeled_batch, config, lam)
    if not breakdown.is_finite():
        raise TrainingDiverged(f"non-finite loss at step {state.step}: {breakdown}", breakdown)
    backward(total)
    adam_step(state.net1.params, state.net1.grads(), state.opt1)
    adam_step(state.net2.params, state.net2.grads(), state.opt2)
    state.step += 1
    return breakdown


def supervised_single_step(net: NetworkParams, opt: AdamState, labeled_batch) -> float:
    """Plain one-network supervised step; the reference for the lambda=0 decomposition."""
    x, y = labeled_batch
    net.zero_grad()
    loss, _ = softmax_cross_entropy(forward(net, x), y)
    backward(loss)
    adam_step(net.params, net.grads(), opt)
    return loss.item()


# ---------------------------------------------------------------- persistence


def _stream_states(streams):
    return {k: g.bit_generator.state for k, g in streams.items()}


def _restore_streams(states):
    out = {}
    for k, st in states.items():
        g = np.random.Generator(np.random.PCG64())
        g.bit_generator.state = st
        out[k] = g
    return out


def save_state(state: DualModelState, ckpt_dir, tag="last"):
    os.makedirs(ckpt_dir, exist_ok=True)
    save_checkpoint(state.net1, os.path.join(ckpt_dir, f"{tag}_net1.ckpt"))
    save_checkpoint(state.net2, os.path.join(ckpt_dir, f"{tag}_net2.ckpt"))
    save_optimizer(state.opt1, os.path.join(ckpt_dir, f"{tag}_net1.opt"))
    save_optimizer(state.opt2, os.path.join(ckpt_dir, f"{tag}_net2.opt"))
    meta = {"epoch": state.epoch, "step": state.step, "best_dsc": state.best_dsc,
            "best_epoch": state.best_epoch, "streams": _stream_states(state.streams)}
    with open(os.path.join(ckpt_dir, f"{tag}_state.json"), "w") as fh:
        json.dump(meta, fh)


def load_state(ckpt_dir, tag="last") -> DualModelState:
    with open(os.path.join(ckpt_dir, f"{tag}_state.json")) as fh:
        meta = json.load(fh)
    return DualModelState(
        load_checkpoint(os.path.join(ckpt_dir, f"{tag}_net1.ckpt")),
        load_checkpoint(os.path.join(ckpt_dir, f"{tag}_net2.ckpt")),
        load_optimizer(os.path.join(ckpt_dir, f"{tag}_net1.opt")),
        load_optimizer(os.path.join(ckpt_dir, f"{tag}_net2.opt")),
        _restore_streams(meta["streams"]),
        meta["epoch"], meta["step"], meta["best_dsc"], meta["best_epoch"],
    )


class LossLog:
    def __init__(self, path, keep_steps=None):
        self.path = path
        rows = []
        if keep_steps is not None and os.path.exists(path):
            rows = [r for r in read_loss_log(path) if int(r["step"]) < keep_steps]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOSS_COLUMNS)
            for r in rows:
                w.writerow([r[c] for c in LOSS_COLUMNS])

    def append(self, step, epoch, b: LossBreakdown):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([step, epoch, repr(b.lam), repr(b.l_sup), repr(b.l_cps_labeled),
                                     repr(b.l_cps_unlabeled), repr(b.total)])


def read_loss_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class TrainResult:
    state: DualModelState
    run_dir: str
    history: list = field(default_factory=list)  # LossBreakdown per step (this invocation)
    val_reports: list = field(default_factory=list)

    @property
    def loss_log(self):
        return os.path.join(self.run_dir, "logs", "loss.csv")


def train_loop(config: TrainConfig, run_dir, manifest: Manifest | None = None, resume=False, pools=None) -> TrainResult:
    """Run training epochs, logging every step and checkpointing at every epoch boundary.

    ``pools`` may carry preloaded (labeled, unlabeled) sample lists to skip disk reads.
    """
    if manifest is None:
        if not config.manifest:
            raise ValueError("no manifest given")
        manifest = Manifest.load(config.manifest)
    labeled, unlabeled = pools if pools is not None else load_pools(config, manifest)
    if not labeled:
        raise ValueError("training needs at least one labeled case; the labeled pool is empty")
    ckpt_dir = os.path.join(run_dir, "checkpoints")
    log_dir = os.path.join(run_dir, "logs")
    report_dir = os.path.join(run_dir, "reports")
    for d in (ckpt_dir, log_dir, report_dir):
        os.makedirs(d, exist_ok=True)

    if resume and os.path.exists(os.path.join(ckpt_dir, "last_state.json")):
        state = load_state(ckpt_dir)
        loss_log = LossLog(os.path.join(log_dir, "loss.csv"), keep_steps=state.step)
    else:
        state = init_state(config)
        loss_log = LossLog(os.path.join(log_dir, "loss.csv"), keep_steps=0)
    result = TrainResult(state, run_dir)
    has_val = config.validate and bool(manifest.split("val"))
    epochs_run = 0
    while state.epoch < config.max_epochs:
        if config.stop_after_epochs is not None and epochs_run >= config.stop_after_epochs:
            break
        for _ in range(config.steps_per_epoch):
            lam = lambda_schedule(state.step / config.steps_per_epoch, config) if config.mode == "cps" else 0.0
            lab, unl = next_batches(state, labeled, unlabeled, config)
            try:
                b = train_step(state, lab, unl, config, lam)
            except (TrainingDiverged, FloatingPointError) as exc:
                last = os.path.join(ckpt_dir, "last_net1.ckpt")
                raise TrainingDiverged(f"{exc}; last good checkpoint: {last if os.path.exists(last) else 'none'}",
                                       getattr(exc, "breakdown", None), last) from exc
            loss_log.append(state.step - 1, state.epoch, b)
            result.history.append(b)
        state.epoch += 1
        epochs_run += 1
        if has_val:
            nets = [state.net1, state.net2] if config.ensemble else state.net1
            report = evaluate_dataset(nets, manifest, "val", patch=config.patch)
            a = report.aggregates
            epoch_json = {"epoch": state.epoch, "mean_dsc": a["mean_dsc"], "mean_hd": a["mean_hd"],
                          "hd_excluded": a["hd_excluded"], "per_case": report.per_case}
            with open(os.path.join(report_dir, f"val_epoch_{state.epoch:03d}.json"), "w") as fh:
                json.dump(epoch_json, fh, indent=2)
            result.val_reports.append(epoch_json)
            log.info("epoch %d: val DSC %.4f HD %s", state.epoch, a["mean_dsc"], a["mean_hd"])
            if a["mean_dsc"] > state.best_dsc:
                state.best_dsc, state.best_epoch = a["mean_dsc"], state.epoch
                save_checkpoint(state.net1, os.path.join(ckpt_dir, "best_net1.ckpt"))
                save_checkpoint(state.net2, os.path.join(ckpt_dir, "best_net2.ckpt"))
        save_state(state, ckpt_dir)
    for net_id in ("net1", "net2"):
        src = os.path.join(ckpt_dir, f"last_{net_id}.ckpt")
        if os.path.exists(src) and state.epoch >= config.max_epochs:
            shutil.copyfile(src, os.path.join(ckpt_dir, f"final_{net_id}.ckpt"))
            shutil.copyfile(f"{src}.json", os.path.join(ckpt_dir, f"final_{net_id}.ckpt.json"))
    return result
