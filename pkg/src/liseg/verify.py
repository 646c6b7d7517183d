"""Self-checks runnable from the command line: gradients, parameter counts, metric oracles."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import stunet
from .autodiff import (
    Tensor,
    add,
    concat_channels,
    conv3d,
    cross_entropy_voxelwise,
    grad_check,
    instance_norm,
    leaky_relu,
    mul,
    nearest_upsample2x,
    softmax_channels,
    softmax_cross_entropy,
)
from .metrics import dice, hausdorff

GRAD_SEEDS = (0, 1, 2, 3, 4)
PARAM_TOLERANCE = 0.10
DYADIC_SPACINGS = (0.5, 0.75, 1.0, 1.25, 2.0)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SuiteResult:
    suite: str
    checks: list = field(default_factory=list)
    seconds: float = 0.0
    text: str = ""

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def failures(self):
        return [c for c in self.checks if not c.passed]


# ---------------------------------------------------------------- gradients


def _away_from_zero(rng, shape, low=0.05):
    return rng.uniform(low, 1.5, shape) * rng.choice([-1.0, 1.0], shape)


def _block_params(rng, shapes):
    out = []
    for name, shape in shapes:
        if name.endswith(".gamma"):
            out.append(1.0 + 0.1 * rng.standard_normal(shape))
        elif name.endswith(".w"):
            out.append(rng.standard_normal(shape) * np.sqrt(2.0 / np.prod(shape[1:])))
        else:
            out.append(0.1 * rng.standard_normal(shape))
    return out


def _as_dict(shapes, tensors):
    return {name: t for (name, _), t in zip(shapes, tensors)}


def gradient_cases(seed: int):
    """(name, fn, inputs) triples covering every differentiable op and block."""
    rng = np.random.default_rng(seed)
    labels3 = rng.integers(0, 3, (2, 3, 3, 3))
    cases = [
        ("conv3d k3 s1", lambda t: conv3d(t[0], t[1], t[2], 1, 1),
         [rng.standard_normal((2, 2, 5, 4, 4)), rng.standard_normal((3, 2, 3, 3, 3)), rng.standard_normal(3)]),
        ("conv3d k3 s2", lambda t: conv3d(t[0], t[1], t[2], 2, 1),
         [rng.standard_normal((1, 2, 6, 6, 6)), rng.standard_normal((3, 2, 3, 3, 3)), rng.standard_normal(3)]),
        ("conv3d k1 s2", lambda t: conv3d(t[0], t[1], t[2], 2, 0),
         [rng.standard_normal((2, 3, 4, 4, 4)), rng.standard_normal((2, 3, 1, 1, 1)), rng.standard_normal(2)]),
        ("instance_norm", lambda t: instance_norm(t[0], t[1], t[2]),
         [rng.standard_normal((2, 3, 3, 4, 3)) * 2 + 1, rng.standard_normal(3), rng.standard_normal(3)]),
        ("leaky_relu", lambda t: leaky_relu(t[0], 0.01), [_away_from_zero(rng, (2, 3, 4, 4, 4))]),
        ("nearest_upsample2x", lambda t: nearest_upsample2x(t[0]), [rng.standard_normal((2, 3, 2, 3, 2))]),
        ("softmax", lambda t: softmax_channels(t[0]), [rng.standard_normal((2, 3, 3, 3, 3)) * 2]),
        ("cross_entropy", lambda t: cross_entropy_voxelwise(t[0], labels3),
         [rng.uniform(0.05, 1.0, (2, 3, 3, 3, 3))]),
        ("softmax+cross_entropy", lambda t: cross_entropy_voxelwise(softmax_channels(t[0]), labels3),
         [rng.standard_normal((2, 3, 3, 3, 3)) * 2]),
        ("fused softmax_cross_entropy", lambda t: softmax_cross_entropy(t[0], labels3)[0],
         [rng.standard_normal((2, 3, 3, 3, 3)) * 2]),
        ("add/mul/concat", lambda t: concat_channels([add(t[0], t[1]), mul(t[0], t[1])]),
         [rng.standard_normal((1, 2, 2, 2, 2)), rng.standard_normal((1, 2, 2, 2, 2))]),
    ]

    res_shapes = stunet._residual_shapes("r", 2, 3)
    cases.append(("residual_block (projection)",
                  lambda t: stunet.residual_block(t[0], _as_dict(res_shapes, t[1:]), "r", 2, 3),
                  [rng.standard_normal((1, 2, 4, 4, 4))] + _block_params(rng, res_shapes)))
    id_shapes = stunet._residual_shapes("i", 3, 3)
    cases.append(("residual_block (identity)",
                  lambda t: stunet.residual_block(t[0], _as_dict(id_shapes, t[1:]), "i", 3, 3),
                  [rng.standard_normal((1, 3, 4, 4, 4))] + _block_params(rng, id_shapes)))
    down_shapes = stunet._down_shapes("d", 2, 3)
    cases.append(("downsample_block",
                  lambda t: stunet.downsample_block(t[0], _as_dict(down_shapes, t[1:]), "d", 3),
                  [rng.standard_normal((1, 2, 4, 4, 4))] + _block_params(rng, down_shapes)))
    up_shapes = stunet._conv_shapes("u.up", 3, 2, 1) + stunet._residual_shapes("u.block0", 4, 2)
    cases.append(("upsample_block",
                  lambda t: stunet.upsample_block(t[0], t[1], _as_dict(up_shapes, t[2:]), "u.up", 2, 1),
                  [rng.standard_normal((1, 3, 2, 2, 2)), rng.standard_normal((1, 2, 4, 4, 4))]
                  + _block_params(rng, up_shapes)))
    return cases


def run_gradcheck(seeds=GRAD_SEEDS, tolerance=1e-4) -> SuiteResult:
    t0 = time.perf_counter()
    result = SuiteResult("gradcheck")
    worst = {}
    for seed in seeds:
        for name, fn, inputs in gradient_cases(seed):
            rep = grad_check(fn, inputs, seed=seed, tolerance=tolerance, name=name)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
            if not rep.passed:
                result.checks.append(Check(f"{name} seed={seed}", False, str(rep)))
    failed = {c.name.rsplit(" seed=", 1)[0] for c in result.checks}
    for name, err in worst.items():
        if name not in failed:
            result.checks.append(Check(name, True, f"max rel err {err:.2e} over {len(seeds)} seeds"))
    result.text = "\n".join(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}" for c in result.checks)
    result.seconds = time.perf_counter() - t0
    return result


# ---------------------------------------------------------------- parameter counts


def run_params(tolerance=PARAM_TOLERANCE) -> SuiteResult:
    t0 = time.perf_counter()
    rows = stunet.reconciliation_report()
    result = SuiteResult("params")
    for r in rows:
        ok = abs(r["relative_residual"]) <= tolerance
        result.checks.append(Check(f"scale {r['scale']}", ok,
                                   f"{r['total']:,} vs {r['reference'] / 1e6:.2f}M ({r['relative_residual']:+.2%})"))
    result.text = stunet.format_reconciliation(rows)
    result.seconds = time.perf_counter() - t0
    return result


# ---------------------------------------------------------------- metric oracles


def dice_oracle(a, b) -> float:
    """Dice from an explicit confusion count: code 0 TN, 1 FN, 2 FP, 3 TP."""
    counts = np.bincount((2 * (np.asarray(a) > 0) + (np.asarray(b) > 0)).astype(np.int64).ravel(), minlength=4)
    tn, fn, fp, tp = (int(c) for c in counts)
    if 2 * tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2 * tp + fp + fn)


def directed_sq_oracle(a, b, spacing) -> np.ndarray:
    """Squared distance from every foreground voxel of ``a`` to its nearest one in ``b`` (all pairs)."""
    pa = np.argwhere(np.asarray(a) > 0)
    pb = np.argwhere(np.asarray(b) > 0)
    d2 = np.zeros((len(pa), len(pb)))
    for axis in range(pa.shape[1]):
        diff = (pa[:, None, axis] - pb[None, :, axis]) * float(spacing[axis])
        d2 = d2 + diff * diff
    return d2.min(axis=1)


def hausdorff_oracle(a, b, spacing, percentile=None) -> float:
    ab, ba = directed_sq_oracle(a, b, spacing), directed_sq_oracle(b, a, spacing)
    if percentile is None:
        return float(np.sqrt(max(ab.max(), ba.max())))
    return float(max(np.percentile(np.sqrt(ab), percentile), np.percentile(np.sqrt(ba), percentile)))


def random_mask(rng, shape, nonempty=True):
    mask = rng.random(shape) < rng.uniform(0.02, 0.5)
    if nonempty and not mask.any():
        mask[tuple(int(rng.integers(s)) for s in shape)] = True
    return mask


def random_shape(rng, max_side=12):
    return tuple(int(s) for s in rng.integers(1, max_side + 1, 3))


def run_metrics(pairs=100, triples=50, seed=0) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    result = SuiteResult("metrics")
    dice_ok = hd_ok = hd95_ok = 0
    mismatches = []
    for i in range(pairs):
        shape = random_shape(rng)
        spacing = tuple(float(s) for s in rng.choice(DYADIC_SPACINGS, 3))
        a, b = random_mask(rng, shape), random_mask(rng, shape)
        dice_ok += dice(a, b) == dice_oracle(a, b)
        hd = hausdorff(a, b, spacing)
        if hd.status == "value" and hd.value == hausdorff_oracle(a, b, spacing):
            hd_ok += 1
        else:
            mismatches.append(f"pair {i}: HD {hd} vs {hausdorff_oracle(a, b, spacing)}")
        hd95_ok += hausdorff(a, b, spacing, 95).value == hausdorff_oracle(a, b, spacing, 95)
    result.checks.append(Check("dice vs confusion-count oracle", dice_ok == pairs, f"{dice_ok}/{pairs} exact"))
    result.checks.append(Check("hausdorff vs brute force", hd_ok == pairs, f"{hd_ok}/{pairs} exact" +
                               (f"; first mismatch {mismatches[0]}" if mismatches else "")))
    result.checks.append(Check("hd95 vs brute force", hd95_ok == pairs, f"{hd95_ok}/{pairs} exact"))

    tri_ok = 0
    for _ in range(triples):
        shape = random_shape(rng)
        spacing = tuple(float(s) for s in rng.choice(DYADIC_SPACINGS, 3))
        a, b, c = (random_mask(rng, shape) for _ in range(3))
        ac = hausdorff(a, c, spacing).value
        bound = hausdorff(a, b, spacing).value + hausdorff(b, c, spacing).value
        tri_ok += ac <= bound * (1 + 1e-12)
    result.checks.append(Check("hausdorff triangle inequality", tri_ok == triples, f"{tri_ok}/{triples} triples"))
    result.text = "\n".join(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}" for c in result.checks)
    result.seconds = time.perf_counter() - t0
    return result


SUITES = {"gradcheck": run_gradcheck, "params": run_params, "metrics": run_metrics}
