"""Differentiable operations used by the segmentation networks and losses.

All activations are laid out (N, C, D, H, W), row-major, float64.
"""
from __future__ import annotations

import numpy as np

from .. import kernels
from .tensor import Tensor

CE_FLOOR = 1e-12


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ValueError(f"expected an int triple, got {v}")
    return v


# ---------------------------------------------------------------- elementwise / structural


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._from_op(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def concat_channels(tensors) -> Tensor:
    """Concatenate along axis 1."""
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=1), tensors, _backward, "concat")


# ---------------------------------------------------------------- convolution


def conv_output_shape(spatial, kernel, stride, padding):
    out = tuple((s + 2 * p - k) // st + 1 for s, k, st, p in zip(spatial, kernel, stride, padding))
    return out


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation via im2col + GEMM, one sample at a time."""
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d expects 5-d input and weight, got {x.shape} and {weight.shape}")
    N, cin, D, H, W = x.shape
    cout, wcin, kd, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv3d: input has {cin} channels but weight expects {wcin}")
    if any(k % 2 == 0 and k != 1 for k in (kd, kh, kw)):
        raise ValueError(f"conv3d: kernel dims must be odd, got {(kd, kh, kw)}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv3d: bias shape {bias.shape} does not match {cout} output channels")
    od, oh, ow = conv_output_shape((D, H, W), (kd, kh, kw), stride, padding)
    if min(od, oh, ow) <= 0:
        raise ValueError(f"conv3d: non-positive output size {(od, oh, ow)} for input {(D, H, W)}")

    pd, ph, pw = padding
    sd, sh, sw = stride
    pointwise = (kd, kh, kw) == (1, 1, 1) and padding == (0, 0, 0)
    xd = x.data
    if pd or ph or pw:
        xp = np.pad(xd, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    else:
        xp = xd
    Dp, Hp, Wp = xp.shape[2:]
    L = od * oh * ow
    wmat = weight.data.reshape(cout, -1)

    def cols_of(n):
        if pointwise:
            return np.ascontiguousarray(xp[n, :, ::sd, ::sh, ::sw]).reshape(cin, L)
        return kernels.im2col3d(xp[n], kd, kh, kw, sd, sh, sw, od, oh, ow)

    out = np.empty((N, cout, L))
    for n in range(N):
        np.matmul(wmat, cols_of(n), out=out[n])
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(N, cout, od, oh, ow)

    def _backward(g):
        g = g.reshape(N, cout, L)
        gw = np.zeros_like(wmat) if weight.requires_grad else None
        gx = np.empty_like(xd) if x.requires_grad else None
        for n in range(N):
            if gw is not None:
                gw += g[n] @ cols_of(n).T
            if gx is not None:
                dcols = wmat.T @ g[n]
                if pointwise:
                    full = np.zeros((cin, Dp, Hp, Wp))
                    full[:, ::sd, ::sh, ::sw] = dcols.reshape(cin, od, oh, ow)
                else:
                    full = kernels.col2im3d(dcols, cin, Dp, Hp, Wp, kd, kh, kw, sd, sh, sw, od, oh, ow)
                gx[n] = full[:, pd : pd + D, ph : ph + H, pw : pw + W]
        gb = g.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, (gw.reshape(weight.shape) if gw is not None else None), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, _backward, "conv3d")


def conv3d_reference(x: np.ndarray, w: np.ndarray, b, stride=1, padding=0) -> np.ndarray:
    """Nested-loop cross-correlation; slow, used only as an oracle."""
    stride, padding = _triple(stride), _triple(padding)
    N, cin, D, H, W = x.shape
    cout, _, kd, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))
    od, oh, ow = conv_output_shape((D, H, W), (kd, kh, kw), stride, padding)
    out = np.zeros((N, cout, od, oh, ow))
    for n in range(N):
        for o in range(cout):
            for d in range(od):
                for h in range(oh):
                    for q in range(ow):
                        acc = 0.0
                        for c in range(cin):
                            for a in range(kd):
                                for e in range(kh):
                                    for f in range(kw):
                                        acc += w[o, c, a, e, f] * xp[n, c, d * stride[0] + a, h * stride[1] + e, q * stride[2] + f]
                        out[n, o, d, h, q] = acc + (b[o] if b is not None else 0.0)
    return out


# ---------------------------------------------------------------- normalization / activation


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, allow_singleton: bool = False) -> Tensor:
    """Per-(n, c) normalization over the spatial axes with biased variance.

    ``allow_singleton`` lets 1-voxel slices through (output is ``beta``); the network's
    deepest stage hits this on 32^3 patches.
    """
    N, C = x.shape[:2]
    M = int(np.prod(x.shape[2:]))
    if M < 2 and not allow_singleton:
        raise ValueError(f"instance_norm needs at least 2 spatial voxels per slice, got {M}")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"instance_norm: gamma/beta must have shape ({C},)")
    xd = x.data.reshape(N, C, M)
    mean = xd.mean(axis=2, keepdims=True)
    xc = xd - mean
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]

    def _backward(g):
        g = g.reshape(N, C, M)
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None]
            gx = inv_std * (dxhat - dxhat.mean(axis=2, keepdims=True) - xhat * (dxhat * xhat).mean(axis=2, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, gg, gb

    return Tensor._from_op(out.reshape(x.shape), (x, gamma, beta), _backward, "instance_norm")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    pos = x.data >= 0
    out = np.where(pos, x.data, slope * x.data)
    return Tensor._from_op(out, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def nearest_upsample2x(x: Tensor) -> Tensor:
    N, C, D, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None, :, None], (N, C, D, 2, H, 2, W, 2)).reshape(N, C, 2 * D, 2 * H, 2 * W)

    def _backward(g):
        return (g.reshape(N, C, D, 2, H, 2, W, 2).sum(axis=(3, 5, 7)),)

    return Tensor._from_op(out, (x,), _backward, "upsample2x")


# ---------------------------------------------------------------- softmax / losses


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels(logits: Tensor) -> Tensor:
    if logits.shape[1] < 2:
        raise ValueError("softmax_channels needs at least 2 channels")
    s = _softmax(logits.data)

    def _backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(s, (logits,), _backward, "softmax")


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(N, D, H, W) integer labels -> (N, C, D, H, W) float one-hot."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:])
    np.put_along_axis(out, labels[:, None].astype(np.intp), 1.0, axis=1)
    return out


def _target_onehot(targets, shape) -> np.ndarray:
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    if t.shape == shape:
        return t.astype(np.float64, copy=False)
    if t.shape == shape[:1] + shape[2:]:
        return one_hot(t, shape[1])
    raise ValueError(f"cross-entropy: target shape {t.shape} does not fit probabilities {shape}")


def _ce_value(probs: np.ndarray, onehot: np.ndarray) -> float:
    nvox = probs.shape[0] * int(np.prod(probs.shape[2:]))
    p_t = (probs * onehot).sum(axis=1)
    return -np.log(np.maximum(p_t, CE_FLOOR)).sum() / nvox


def cross_entropy_voxelwise(probs: Tensor, targets) -> Tensor:
    """Mean over voxels of -log p[target]; targets are one-hot or integer labels and carry no gradient."""
    onehot = _target_onehot(targets, probs.shape)
    nvox = probs.shape[0] * int(np.prod(probs.shape[2:]))
    value = _ce_value(probs.data, onehot)

    def _backward(g):
        p = probs.data
        live = p >= CE_FLOOR
        return (float(g) * np.where(live & (onehot > 0), -onehot / np.maximum(p, CE_FLOOR), 0.0) / nvox,)

    return Tensor._from_op(np.asarray(value), (probs,), _backward, "cross_entropy")


def softmax_cross_entropy(logits: Tensor, targets) -> tuple[Tensor, np.ndarray]:
    """Fused softmax + voxelwise CE used in training.

    The value is computed exactly as ``cross_entropy_voxelwise(softmax_channels(logits))``;
    the gradient is the unclamped (softmax - one-hot) / n_voxels, so confidently wrong
    voxels keep receiving signal. Returns the loss and the detached probabilities.
    """
    s = _softmax(logits.data)
    onehot = _target_onehot(targets, s.shape)
    nvox = s.shape[0] * int(np.prod(s.shape[2:]))
    value = _ce_value(s, onehot)

    def _backward(g):
        return (float(g) * (s - onehot) / nvox,)

    return Tensor._from_op(np.asarray(value), (logits,), _backward, "softmax_cross_entropy"), s
