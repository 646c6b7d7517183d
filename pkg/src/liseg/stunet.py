"""STU-Net style 3D encoder-decoder built from the autodiff primitives.

Topology (six stages, 3x3x3 kernels everywhere except 1x1x1 projections):

* encoder stage 0: a residual block mapping ``in_channels -> widths[0]`` (1x1x1
  projection on the skip path), then ``depths[0] - 1`` plain residual blocks;
* encoder stages 1-5: a dual-branch downsampling block (itself residual), then
  ``depths[i] - 1`` residual blocks;
* decoder stages 4..0: nearest 2x upsampling + 1x1x1 conv, channel concatenation with
  the encoder skip, a residual block ``2*w -> w`` with projection, then
  ``depths[i] - 1`` residual blocks;
* a 1x1x1 segmentation head at full resolution.

Each stage therefore holds exactly ``depths[i]`` residual-type blocks, which is the
block counting under which the presets land on the published parameter totals.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    concat_channels,
    conv3d,
    instance_norm,
    leaky_relu,
    nearest_upsample2x,
)
from .autodiff.ops import add

NUM_STAGES = 6
SLOPE = 0.01
IN_EPS = 1e-5


@dataclass(frozen=True)
class ModelScaleConfig:
    name: str
    depths: tuple
    widths: tuple
    num_classes: int = 2
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.depths) != NUM_STAGES or len(self.widths) != NUM_STAGES:
            raise ValueError(f"STU-Net configs have exactly {NUM_STAGES} stages")
        if min(self.depths) < 1 or min(self.widths) < 1:
            raise ValueError("depths and widths must be strictly positive")
        if self.num_classes < 2 or self.in_channels < 1:
            raise ValueError("need num_classes >= 2 and in_channels >= 1")

    def with_classes(self, num_classes: int) -> "ModelScaleConfig":
        return ModelScaleConfig(self.name, self.depths, self.widths, num_classes, self.in_channels)


PRESETS = {
    "S": ModelScaleConfig("S", (1,) * 6, (16, 32, 64, 128, 256, 256)),
    "B": ModelScaleConfig("B", (1,) * 6, (32, 64, 128, 256, 512, 512)),
    "L": ModelScaleConfig("L", (2,) * 6, (64, 128, 256, 512, 1024, 1024)),
    # not a published scale: CPU-sized for tests and demos
    "toy": ModelScaleConfig("toy", (1,) * 6, (8, 16, 32, 64, 128, 128)),
}

# published totals (millions of parameters / teraFLOPs)
TABLE1_PARAMS_M = {"S": 14.60, "B": 58.26, "L": 440.30}
TABLE1_FLOPS_T = {"S": 0.13, "B": 0.51, "L": 3.81}


def preset(name: str, num_classes: int = 2, in_channels: int = 1) -> ModelScaleConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown scale {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelScaleConfig(base.name, base.depths, base.widths, num_classes, in_channels)


@dataclass
class NetworkParams:
    config: ModelScaleConfig
    params: dict  # name -> Tensor, in build order
    seed: int | None = None
    descriptor: list = field(default_factory=list)  # (block kind, prefix, cin, cout) in execution order

    def __getitem__(self, name):
        return self.params[name]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def grads(self) -> dict:
        return {k: p.grad for k, p in self.params.items()}

    def state_arrays(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}


# ---------------------------------------------------------------- layer plan


def _conv_shapes(prefix, cin, cout, k):
    return [(f"{prefix}.w", (cout, cin, k, k, k)), (f"{prefix}.b", (cout,))]


def _norm_shapes(prefix, c):
    return [(f"{prefix}.gamma", (c,)), (f"{prefix}.beta", (c,))]


def _residual_shapes(prefix, cin, cout):
    shapes = _conv_shapes(f"{prefix}.conv1", cin, cout, 3) + _norm_shapes(f"{prefix}.norm1", cout)
    shapes += _conv_shapes(f"{prefix}.conv2", cout, cout, 3) + _norm_shapes(f"{prefix}.norm2", cout)
    if cin != cout:
        shapes += _conv_shapes(f"{prefix}.proj", cin, cout, 1)
    return shapes


def _down_shapes(prefix, cin, cout):
    shapes = _conv_shapes(f"{prefix}.conv1", cin, cout, 3) + _norm_shapes(f"{prefix}.norm1", cout)
    shapes += _conv_shapes(f"{prefix}.conv2", cout, cout, 3) + _norm_shapes(f"{prefix}.norm2", cout)
    shapes += _conv_shapes(f"{prefix}.skip", cin, cout, 1) + _norm_shapes(f"{prefix}.skip_norm", cout)
    return shapes


def layer_plan(config: ModelScaleConfig):
    """Yield (kind, prefix, cin, cout, param shapes) for every block in execution order."""
    w, d = config.widths, config.depths
    plan = []
    for s in range(NUM_STAGES):
        if s == 0:
            plan.append(("res", "enc0.block0", config.in_channels, w[0]))
        else:
            plan.append(("down", f"enc{s}.down", w[s - 1], w[s]))
        for b in range(1, d[s]):
            plan.append(("res", f"enc{s}.block{b}", w[s], w[s]))
    for s in range(NUM_STAGES - 2, -1, -1):
        plan.append(("up", f"dec{s}.up", w[s + 1], w[s]))
        plan.append(("res", f"dec{s}.block0", 2 * w[s], w[s]))
        for b in range(1, d[s]):
            plan.append(("res", f"dec{s}.block{b}", w[s], w[s]))
    plan.append(("head", "head", w[0], config.num_classes))
    out = []
    for kind, prefix, cin, cout in plan:
        if kind == "res":
            shapes = _residual_shapes(prefix, cin, cout)
        elif kind == "down":
            shapes = _down_shapes(prefix, cin, cout)
        else:
            shapes = _conv_shapes(prefix, cin, cout, 1)
        out.append((kind, prefix, cin, cout, shapes))
    return out


def build_stunet(config: ModelScaleConfig, seed: int = 0) -> NetworkParams:
    """Allocate and initialize parameters: He-normal conv weights, zero biases, IN gamma=1, beta=0."""
    rng = np.random.default_rng(seed)
    params, descriptor = {}, []
    for kind, prefix, cin, cout, shapes in layer_plan(config):
        descriptor.append((kind, prefix, cin, cout))
        for name, shape in shapes:
            if name.endswith(".w"):
                fan_in = int(np.prod(shape[1:]))
                data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            elif name.endswith(".gamma"):
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            params[name] = Tensor(data, requires_grad=True, name=name)
    return NetworkParams(config, params, seed, descriptor)


# ---------------------------------------------------------------- blocks


def _conv(x, p, prefix, stride=1, padding=0):
    return conv3d(x, p[f"{prefix}.w"], p[f"{prefix}.b"], stride=stride, padding=padding)


def _norm(x, p, prefix):
    return instance_norm(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"], IN_EPS, allow_singleton=True)


def residual_block(x: Tensor, p: dict, prefix: str, in_channels: int, channels: int) -> Tensor:
    """lrelu(skip(x) + IN(conv(lrelu(IN(conv(x)))))); skip is identity or a 1x1x1 projection."""
    if x.shape[1] != in_channels:
        raise ValueError(f"{prefix}: expected {in_channels} input channels, got {x.shape[1]}")
    h = leaky_relu(_norm(_conv(x, p, f"{prefix}.conv1", padding=1), p, f"{prefix}.norm1"), SLOPE)
    h = _norm(_conv(h, p, f"{prefix}.conv2", padding=1), p, f"{prefix}.norm2")
    skip = x if in_channels == channels else _conv(x, p, f"{prefix}.proj")
    return leaky_relu(add(skip, h), SLOPE)


def downsample_block(x: Tensor, p: dict, prefix: str, out_channels: int) -> Tensor:
    if any(s % 2 for s in x.shape[2:]):
        raise ValueError(f"{prefix}: spatial dims must be even, got {x.shape[2:]}")
    h = leaky_relu(_norm(_conv(x, p, f"{prefix}.conv1", padding=1), p, f"{prefix}.norm1"), SLOPE)
    h = _norm(_conv(h, p, f"{prefix}.conv2", stride=2, padding=1), p, f"{prefix}.norm2")
    s = _norm(_conv(x, p, f"{prefix}.skip", stride=2), p, f"{prefix}.skip_norm")
    return leaky_relu(add(h, s), SLOPE)


def upsample_block(x: Tensor, skip: Tensor, p: dict, prefix: str, out_channels: int, depth: int) -> Tensor:
    """Nearest 2x + 1x1x1 conv, concat with the encoder skip, then ``depth`` residual blocks."""
    if tuple(skip.shape[2:]) != tuple(2 * s for s in x.shape[2:]) or skip.shape[0] != x.shape[0]:
        raise ValueError(f"{prefix}: skip shape {skip.shape} is not 2x of {x.shape}")
    stage = prefix.split(".")[0]
    u = _conv(nearest_upsample2x(x), p, f"{stage}.up")
    h = concat_channels([u, skip])
    h = residual_block(h, p, f"{stage}.block0", u.shape[1] + skip.shape[1], out_channels)
    for b in range(1, depth):
        h = residual_block(h, p, f"{stage}.block{b}", out_channels, out_channels)
    return h


def forward(net: NetworkParams, volume) -> Tensor:
    """(N, in_channels, D, H, W) -> logits (N, num_classes, D, H, W)."""
    x = volume if isinstance(volume, Tensor) else Tensor(volume)
    cfg = net.config
    spatial = x.shape[2:]
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected (N, {cfg.in_channels}, D, H, W) input, got {x.shape}")
    if any(s % 32 for s in spatial):
        raise ValueError(f"spatial dims {spatial} must be divisible by 32; pad the volume first")
    p = net.params
    w, d = cfg.widths, cfg.depths
    skips = []
    for s in range(NUM_STAGES):
        if s == 0:
            x = residual_block(x, p, "enc0.block0", cfg.in_channels, w[0])
        else:
            x = downsample_block(x, p, f"enc{s}.down", w[s])
        for b in range(1, d[s]):
            x = residual_block(x, p, f"enc{s}.block{b}", w[s], w[s])
        skips.append(x)
    for s in range(NUM_STAGES - 2, -1, -1):
        x = upsample_block(x, skips[s], p, f"dec{s}.up", w[s], d[s])
    return _conv(x, p, "head")


# ---------------------------------------------------------------- counting


def _conv_count(cin, cout, k):
    return cin * cout * k**3 + cout


def count_breakdown(config: ModelScaleConfig) -> dict:
    """Closed-form parameter counts itemized as encoder / decoder / head."""
    w, d = config.widths, config.depths

    def res(cin, cout):
        n = _conv_count(cin, cout, 3) + _conv_count(cout, cout, 3) + 4 * cout
        return n + (_conv_count(cin, cout, 1) if cin != cout else 0)

    def down(cin, cout):
        return _conv_count(cin, cout, 3) + _conv_count(cout, cout, 3) + _conv_count(cin, cout, 1) + 6 * cout

    encoder = res(config.in_channels, w[0]) + (d[0] - 1) * res(w[0], w[0])
    encoder += sum(down(w[s - 1], w[s]) + (d[s] - 1) * res(w[s], w[s]) for s in range(1, NUM_STAGES))
    upsampling = sum(_conv_count(w[s + 1], w[s], 1) for s in range(NUM_STAGES - 1))
    decoder_blocks = sum(res(2 * w[s], w[s]) + (d[s] - 1) * res(w[s], w[s]) for s in range(NUM_STAGES - 1))
    head = _conv_count(w[0], config.num_classes, 1)
    return {
        "encoder": encoder,
        "decoder_upsampling": upsampling,
        "decoder_blocks": decoder_blocks,
        "head": head,
        "total": encoder + upsampling + decoder_blocks + head,
    }


def count_parameters(config: ModelScaleConfig) -> int:
    return count_breakdown(config)["total"]


def count_flops(config: ModelScaleConfig, patch=(128, 128, 128)) -> int:
    """2 * multiply-accumulates of every convolution for one forward pass of one sample."""
    patch = tuple(int(p) for p in patch)
    if any(p % 32 for p in patch):
        raise ValueError(f"patch {patch} must be divisible by 32")
    vox = [int(np.prod([p >> s for p in patch])) for s in range(NUM_STAGES)]
    w, d = config.widths, config.depths

    def conv(cin, cout, k, nvox):
        return 2 * cin * cout * k**3 * nvox

    def res(cin, cout, nvox):
        return conv(cin, cout, 3, nvox) + conv(cout, cout, 3, nvox) + (conv(cin, cout, 1, nvox) if cin != cout else 0)

    total = res(config.in_channels, w[0], vox[0]) + (d[0] - 1) * res(w[0], w[0], vox[0])
    for s in range(1, NUM_STAGES):
        # stride-1 conv runs at the input resolution, stride-2 conv and skip at the output one
        total += conv(w[s - 1], w[s], 3, vox[s - 1]) + conv(w[s], w[s], 3, vox[s]) + conv(w[s - 1], w[s], 1, vox[s])
        total += (d[s] - 1) * res(w[s], w[s], vox[s])
    for s in range(NUM_STAGES - 1):
        total += conv(w[s + 1], w[s], 1, vox[s])
        total += res(2 * w[s], w[s], vox[s]) + (d[s] - 1) * res(w[s], w[s], vox[s])
    total += conv(w[0], config.num_classes, 1, vox[0])
    return total


def reconciliation_report(num_classes: int = 105) -> list:
    """Itemized comparison of the closed-form counts against the published presets."""
    rows = []
    for name in ("S", "B", "L"):
        cfg = preset(name, num_classes=num_classes)
        b = count_breakdown(cfg)
        ref = TABLE1_PARAMS_M[name] * 1e6
        rows.append({
            "scale": name,
            **b,
            "reference": ref,
            "relative_residual": (b["total"] - ref) / ref,
            "flops_128": count_flops(cfg, (128, 128, 128)),
            "reference_flops": TABLE1_FLOPS_T[name] * 1e12,
        })
    return rows


def format_reconciliation(rows) -> str:
    lines = [f"{'scale':<5} {'encoder':>12} {'dec.upsample':>12} {'dec.blocks':>12} {'head':>8} {'total':>12} {'table':>10} {'resid':>8} {'GFLOPs@128^3':>12} {'table TFLOPs':>12}"]
    for r in rows:
        lines.append(
            f"{r['scale']:<5} {r['encoder']:>12,} {r['decoder_upsampling']:>12,} {r['decoder_blocks']:>12,} {r['head']:>8,} "
            f"{r['total']:>12,} {r['reference'] / 1e6:>9.2f}M {r['relative_residual']:>+8.2%} {r['flops_128'] / 1e9:>12.1f} {r['reference_flops'] / 1e12:>12.2f}"
        )
    return "\n".join(lines)


def threshold_network(config: ModelScaleConfig, threshold: float = 0.0, sharpness: float = 50.0,
                      offset: float = 100.0) -> NetworkParams:
    """Network whose class-1 logit is ``sharpness * (x - threshold)`` and class-0 logit is 0.

    The input is carried by channel 0 of the stem projection and the first decoder
    block's projection; every residual branch there is silenced through a zero IN
    gain, and the deeper path is cut at the last upsampling conv. ``offset`` keeps
    the carried signal positive so the leaky ReLUs act as the identity. Useful as a
    known-answer model for evaluation plumbing (a two-level z-scored image is split
    exactly at threshold 0).
    """
    if config.in_channels != 1 or config.num_classes != 2:
        raise ValueError("threshold_network needs one input channel and two classes")
    net = build_stunet(config, seed=0)
    p = {k: t.data for k, t in net.params.items()}
    w0 = config.widths[0]
    for prefix, src in (("enc0.block0", 0), ("dec0.block0", w0)):
        p[f"{prefix}.norm2.gamma"][:] = 0.0
        p[f"{prefix}.norm2.beta"][:] = 0.0
        p[f"{prefix}.proj.w"][:] = 0.0
        p[f"{prefix}.proj.b"][:] = 0.0
        p[f"{prefix}.proj.w"][0, src] = 1.0
    p["enc0.block0.proj.b"][0] = offset
    p["dec0.up.w"][:] = 0.0
    p["dec0.up.b"][:] = 0.0
    p["head.w"][:] = 0.0
    p["head.b"][:] = 0.0
    p["head.w"][1, 0] = sharpness
    p["head.b"][1] = -sharpness * (offset + threshold)
    return net
