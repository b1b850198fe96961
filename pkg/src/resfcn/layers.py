"""Primitive layers: forward and analytic backward.

Public functions take (B,C,H,W) arrays.  Convolutions lower to a single
GEMM over an im2col buffer; the transposed convolution is the exact adjoint
of the strided convolution with the same geometry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple, Union

import numpy as np

from .tensor import TensorError, check_finite

Padding = Union[str, int, Tuple[int, int, int, int]]

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


class LayerError(TensorError):
    pass


# ---------------------------------------------------------------------------
# geometry


@dataclass
class ConvParams:
    """Kernels ``weight`` (out, in, kh, kw) and ``bias`` (out,).

    For transposed convolutions the weight is stored as (in, out, kh, kw),
    i.e. exactly the kernel of the forward convolution it is the adjoint of.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    dilation: int = 1
    padding: Padding = "same"

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise LayerError(f"kernel must be 4-D, got shape {self.weight.shape}")
        kh, kw = self.weight.shape[2:]
        if kh < 1 or kw < 1 or self.stride < 1 or self.dilation < 1:
            raise LayerError("kernel extents, stride and dilation must be >= 1")

    @property
    def kernel_size(self) -> Tuple[int, int]:
        return tuple(self.weight.shape[2:])

    @property
    def effective_extent(self) -> Tuple[int, int]:
        kh, kw = self.kernel_size
        d = self.dilation
        return (kh - 1) * d + 1, (kw - 1) * d + 1


def _axis_geometry(n: int, k_eff: int, stride: int, pad) -> Tuple[int, int, int]:
    """Return (out, pad_before, pad_after) along one spatial axis."""
    if pad == "same":
        out = -(-n // stride)
        total = max((out - 1) * stride + k_eff - n, 0)
        before = total // 2
        return out, before, total - before
    before, after = pad
    out = (n + before + after - k_eff) // stride + 1
    return out, before, after


def conv_geometry(h: int, w: int, p: ConvParams):
    """Output size and (top, bottom, left, right) zero padding for ``p`` on h x w."""
    ekh, ekw = p.effective_extent
    if p.padding == "same":
        ph = pw = "same"
    elif isinstance(p.padding, (int, np.integer)):
        ph = pw = (int(p.padding), int(p.padding))
    else:
        t, b, l, r = p.padding
        ph, pw = (t, b), (l, r)
    ho, pt, pb = _axis_geometry(h, ekh, p.stride, ph)
    wo, pl, pr = _axis_geometry(w, ekw, p.stride, pw)
    if ho < 1 or wo < 1:
        raise LayerError(f"zero-size output for input {h}x{w}")
    return (ho, wo), (pt, pb, pl, pr)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, d: int, pads, out_hw) -> np.ndarray:
    """(R,B,H,W) -> (R*kh*kw, B*Ho*Wo) patch matrix; a view for unpadded 1x1 kernels."""
    r, b = x.shape[:2]
    ho, wo = out_hw
    pt, pb, pl, pr = pads
    if kh == kw == 1 and not (pt or pb or pl or pr):
        if stride > 1:
            x = x[:, :, ::stride, ::stride][:, :, :ho, :wo]
        return np.ascontiguousarray(x).reshape(r, b * ho * wo)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = np.empty((r, kh, kw, b, ho, wo), dtype=x.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for u in range(kh):
        for v in range(kw):
            cols[:, u, v] = x[:, :, u * d:u * d + hspan:stride, v * d:v * d + wspan:stride]
    return cols.reshape(r * kh * kw, b * ho * wo)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, d: int, pads, out_hw) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back to (R,B,H,W)."""
    r, b, h, w = x_shape
    ho, wo = out_hw
    pt, pb, pl, pr = pads
    if kh == kw == 1 and not (pt or pb or pl or pr):
        if stride == 1:
            return cols.reshape(r, b, h, w)
        acc = np.zeros(x_shape, dtype=cols.dtype)
        acc[:, :, ::stride, ::stride][:, :, :ho, :wo] = cols.reshape(r, b, ho, wo)
        return acc
    hp, wp = h + pt + pb, w + pl + pr
    # the strided window may reach past the padded extent on the far side
    hp = max(hp, (kh - 1) * d + stride * (ho - 1) + 1)
    wp = max(wp, (kw - 1) * d + stride * (wo - 1) + 1)
    acc = np.zeros((r, b, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(r, kh, kw, b, ho, wo)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for u in range(kh):
        for v in range(kw):
            acc[:, :, u * d:u * d + hspan:stride, v * d:v * d + wspan:stride] += cols[:, u, v]
    if (pt, pl) == (0, 0) and (hp, wp) == (h, w):
        return acc
    return np.ascontiguousarray(acc[:, :, pt:pt + h, pl:pl + w])


def swap_bc(t: np.ndarray) -> np.ndarray:
    """Swap the two leading axes, (B,C,H,W) <-> (C,B,H,W), as a contiguous copy."""
    return np.ascontiguousarray(t.transpose(1, 0, 2, 3))


# ---------------------------------------------------------------------------
# convolution
#
# The ``*_cm`` kernels operate on channel-major (C,B,H,W) arrays, which turns
# every 1x1 convolution into a copy-free GEMM.  The public functions take and
# return (B,C,H,W) and are thin wrappers.


def _conv_forward_cm(x: np.ndarray, p: ConvParams) -> np.ndarray:
    s, r, kh, kw = p.weight.shape
    if x.shape[0] != r:
        raise LayerError(f"input has {x.shape[0]} channels, kernel expects {r}")
    _, b, h, w = x.shape
    (ho, wo), pads = conv_geometry(h, w, p)
    cols = _im2col(x, kh, kw, p.stride, p.dilation, pads, (ho, wo))
    out = p.weight.reshape(s, -1) @ cols
    out += p.bias.reshape(s, 1)
    return out.reshape(s, b, ho, wo)


def _conv_backward_cm(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    s, r, kh, kw = p.weight.shape
    _, b, h, w = x.shape
    (ho, wo), pads = conv_geometry(h, w, p)
    if grad_out.shape != (s, b, ho, wo):
        raise LayerError(f"grad_out shape {grad_out.shape} inconsistent with forward geometry")
    cols = _im2col(x, kh, kw, p.stride, p.dilation, pads, (ho, wo))
    g = np.ascontiguousarray(grad_out).reshape(s, -1)
    grad_w = (g @ cols.T).reshape(p.weight.shape)
    grad_b = g.sum(axis=1)
    dcols = p.weight.reshape(s, -1).T @ g
    grad_x = _col2im(dcols, x.shape, kh, kw, p.stride, p.dilation, pads, (ho, wo))
    return grad_x, grad_w, grad_b


def _check_input(x):
    if x.ndim != 4:
        raise LayerError(f"expected (B,R,H,W) input, got {x.shape}")


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """O[b,s] = sum_r W[s,r] (*) X[b,r] + bias[s], with stride, dilation and zero padding."""
    _check_input(x)
    return check_finite(swap_bc(_conv_forward_cm(swap_bc(x), p)), "conv2d_forward")


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Return (grad_x, grad_weight, grad_bias) for :func:`conv2d_forward`."""
    _check_input(x)
    gx, gw, gb = _conv_backward_cm(swap_bc(x), p, swap_bc(grad_out))
    return swap_bc(gx), gw, gb


def _check_deconv(p: ConvParams):
    if p.stride != 2 or p.dilation != 1:
        raise LayerError("transposed convolution supports stride 2, dilation 1 only")


def _deconv_forward_cm(x: np.ndarray, p: ConvParams) -> np.ndarray:
    _check_deconv(p)
    r, s, kh, kw = p.weight.shape
    if x.shape[0] != r:
        raise LayerError(f"input has {x.shape[0]} channels, kernel expects {r}")
    _, b, h, w = x.shape
    (ho, wo), pads = conv_geometry(2 * h, 2 * w, p)
    dcols = p.weight.reshape(r, -1).T @ np.ascontiguousarray(x).reshape(r, -1)
    out = _col2im(dcols, (s, b, 2 * h, 2 * w), kh, kw, p.stride, 1, pads, (h, w))
    out += p.bias.reshape(s, 1, 1, 1)
    return out


def _deconv_backward_cm(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    _check_deconv(p)
    r, s, kh, kw = p.weight.shape
    _, b, h, w = x.shape
    if grad_out.shape != (s, b, 2 * h, 2 * w):
        raise LayerError(f"grad_out shape {grad_out.shape} inconsistent with forward geometry")
    _, pads = conv_geometry(2 * h, 2 * w, p)
    cols = _im2col(grad_out, kh, kw, p.stride, 1, pads, (h, w))
    grad_x = (p.weight.reshape(r, -1) @ cols).reshape(r, b, h, w)
    grad_w = (np.ascontiguousarray(x).reshape(r, -1) @ cols.T).reshape(p.weight.shape)
    grad_b = grad_out.sum(axis=(1, 2, 3))
    return grad_x, grad_w, grad_b


def deconv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Stride-2 transposed convolution (B,R,H,W) -> (B,S,2H,2W); weight is (R,S,kh,kw)."""
    _check_input(x)
    return check_finite(swap_bc(_deconv_forward_cm(swap_bc(x), p)), "deconv2d_forward")


def deconv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Return (grad_x, grad_weight, grad_bias) for :func:`deconv2d_forward`."""
    _check_input(x)
    gx, gw, gb = _deconv_backward_cm(swap_bc(x), p, swap_bc(grad_out))
    return swap_bc(gx), gw, gb


# ---------------------------------------------------------------------------
# pooling


def maxpool2x2_forward(x: np.ndarray):
    """2x2 / stride-2 max pool; returns (out, argmax index map in 0..3)."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise LayerError(f"max-pool needs even spatial extents, got {h}x{w}")
    win = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    # np.argmax returns the first maximum, i.e. row-major tie-breaking
    idx = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(index_map: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    b, c, h2, w2 = grad_out.shape
    win = np.zeros((b, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, index_map[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    return np.ascontiguousarray(
        win.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
    )


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPSILON

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )


def _bn_stats_cm(x):
    flat = x.reshape(x.shape[0], -1)
    mean = flat.mean(axis=1)
    var = np.square(flat - mean[:, None]).mean(axis=1)
    return mean, var


def _bn_apply_cm(x, mean, var, p):
    inv = 1.0 / np.sqrt(var + p.eps)
    scale_ = (p.gamma * inv).astype(x.dtype)
    shift = (p.beta - mean * scale_).astype(x.dtype)
    return x * scale_.reshape(-1, 1, 1, 1) + shift.reshape(-1, 1, 1, 1), inv


def _bn_forward_cm(x, p: BatchNormParams, train: bool, update_stats: bool = True):
    if x.shape[0] != p.gamma.shape[0]:
        raise LayerError(f"input has {x.shape[0]} channels, batch norm expects {p.gamma.shape[0]}")
    if train:
        mean, var = _bn_stats_cm(x)
        if update_stats:
            m = p.momentum
            p.running_mean[...] = m * p.running_mean + (1 - m) * mean
            p.running_var[...] = m * p.running_var + (1 - m) * var
    else:
        mean, var = p.running_mean, p.running_var
    out, inv = _bn_apply_cm(x, mean, var, p)
    return out, mean, inv


def _bn_backward_cm(x, mean, inv, gamma, grad_out):
    c = x.shape[0]
    n = x.size // c
    xhat = (x - mean.reshape(-1, 1, 1, 1)) * inv.reshape(-1, 1, 1, 1).astype(x.dtype)
    g = grad_out.reshape(c, -1)
    grad_beta = g.sum(axis=1)
    grad_gamma = (g * xhat.reshape(c, -1)).sum(axis=1)
    k = (gamma * inv / n).astype(x.dtype).reshape(-1, 1, 1, 1)
    grad_x = k * (n * grad_out - grad_beta.reshape(-1, 1, 1, 1) - xhat * grad_gamma.reshape(-1, 1, 1, 1))
    return grad_x, grad_gamma, grad_beta


def _bn_check(x, p):
    if x.ndim != 4 or x.shape[1] != p.gamma.shape[0]:
        raise LayerError(f"input {x.shape} does not match {p.gamma.shape[0]} channels")


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, mode: str = "train", *, update_stats: bool = True):
    """Per-channel normalization over (batch, height, width), then scale and shift.

    Train mode uses batch statistics and folds them into the running
    statistics with ``p.momentum``; infer mode uses the running statistics.
    """
    _bn_check(x, p)
    if mode not in ("train", "infer"):
        raise LayerError(f"unknown mode {mode!r}")
    out, _, _ = _bn_forward_cm(swap_bc(x), p, mode == "train", update_stats)
    return check_finite(swap_bc(out), "batchnorm_forward")


def batchnorm_backward(x: np.ndarray, p: BatchNormParams, grad_out: np.ndarray):
    """Gradients (grad_x, grad_gamma, grad_beta) of the train-mode forward."""
    _bn_check(x, p)
    if grad_out.shape != x.shape:
        raise LayerError("grad_out shape mismatch")
    xc = swap_bc(x)
    mean, var = _bn_stats_cm(xc)
    inv = 1.0 / np.sqrt(var + p.eps)
    gx, gg, gb = _bn_backward_cm(xc, mean, inv, p.gamma, swap_bc(grad_out))
    return swap_bc(gx), gg, gb


# ---------------------------------------------------------------------------
# activations


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pass the gradient where x > 0; the subgradient at 0 is 0."""
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function 1 / (1 + exp(-x)), evaluated without overflow.

    The result is kept strictly inside (0, 1): for large |x| the exact value
    rounds to 0 or 1 in floating point, so it is clamped to the nearest
    representable neighbours instead.
    """
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    dt = out.dtype
    return np.clip(out, np.nextafter(dt.type(0), dt.type(1)), np.nextafter(dt.type(1), dt.type(0)), out=out)


def sigmoid_backward(out: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * out * (1 - out)


# ---------------------------------------------------------------------------
# modules
#
# Stateful wrappers used to assemble networks.  They cache what backward
# needs and work on channel-major (C,B,H,W) arrays throughout.


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Module:
    """Named parameters, gradients and child modules."""

    def __init__(self):
        self._params: Dict[str, np.ndarray] = {}
        self._decay: set = set()
        self._buffers: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self._children: Dict[str, "Module"] = {}

    def add(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, arr in self._params.items():
            yield prefix + name, arr
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, arr in self._buffers.items():
            yield prefix + name, arr
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def named_grads(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, arr in self._params.items():
            g = self.grads.get(name)
            yield prefix + name, np.zeros_like(arr) if g is None else g
        for cname, child in self._children.items():
            yield from child.named_grads(f"{prefix}{cname}.")

    def decayed_names(self, prefix: str = "") -> List[str]:
        names = [prefix + n for n in sorted(self._decay)]
        for cname, child in self._children.items():
            names.extend(child.decayed_names(f"{prefix}{cname}."))
        return names

    def zero_grad(self):
        self.grads = {}
        for child in self._children.values():
            child.zero_grad()

    def clear_cache(self):
        for k in [k for k in vars(self) if k.startswith("_cache")]:
            setattr(self, k, None)
        for child in self._children.values():
            child.clear_cache()

    def _accumulate(self, name: str, g: np.ndarray):
        self.grads[name] = self.grads[name] + g if name in self.grads else g


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel=(3, 3), *, stride=1, dilation=1, rng=None, dtype=np.float32):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        rng = rng if rng is not None else np.random.default_rng(0)
        self.p = ConvParams(
            weight=he_normal(rng, (out_ch, in_ch, kh, kw), in_ch * kh * kw, dtype),
            bias=np.zeros(out_ch, dtype),
            stride=stride,
            dilation=dilation,
        )
        self._params = {"weight": self.p.weight, "bias": self.p.bias}
        self._decay = {"weight"}
        self._cache_x = None

    def forward(self, x, train=True):
        self._cache_x = x
        return _conv_forward_cm(x, self.p)

    def backward(self, g):
        gx, gw, gb = _conv_backward_cm(self._cache_x, self.p, g)
        self._accumulate("weight", gw)
        self._accumulate("bias", gb)
        return gx


class Deconv2d(Module):
    def __init__(self, in_ch, out_ch, kernel=3, *, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.p = ConvParams(
            weight=he_normal(rng, (in_ch, out_ch, kernel, kernel), in_ch * kernel * kernel, dtype),
            bias=np.zeros(out_ch, dtype),
            stride=2,
        )
        self._params = {"weight": self.p.weight, "bias": self.p.bias}
        self._decay = {"weight"}
        self._cache_x = None

    def forward(self, x, train=True):
        self._cache_x = x
        return _deconv_forward_cm(x, self.p)

    def backward(self, g):
        gx, gw, gb = _deconv_backward_cm(self._cache_x, self.p, g)
        self._accumulate("weight", gw)
        self._accumulate("bias", gb)
        return gx


class BatchNorm2d(Module):
    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.p = BatchNormParams.create(channels, dtype)
        self._params = {"gamma": self.p.gamma, "beta": self.p.beta}
        self._buffers = {"running_mean": self.p.running_mean, "running_var": self.p.running_var}
        self._cache = None

    def forward(self, x, train=True):
        out, mean, inv = _bn_forward_cm(x, self.p, train)
        self._cache = (x, mean, inv) if train else None
        return out

    def backward(self, g):
        if self._cache is None:
            raise LayerError("batch-norm backward requires a train-mode forward")
        gx, gg, gb = _bn_backward_cm(*self._cache, self.p.gamma, g)
        self._accumulate("gamma", gg)
        self._accumulate("beta", gb)
        return gx

    def clear_cache(self):
        self._cache = None


class ReLU(Module):
    def forward(self, x, train=True):
        out = relu(x)
        self._cache_out = out
        return out

    def backward(self, g):
        # out > 0 exactly where x > 0
        return relu_backward(self._cache_out, g)


class MaxPool2x2(Module):
    def forward(self, x, train=True):
        out, idx = maxpool2x2_forward(x)
        self._cache_idx = idx
        return out

    def backward(self, g):
        return maxpool2x2_backward(self._cache_idx, g)


class Sigmoid(Module):
    def forward(self, x, train=True):
        out = sigmoid(x)
        self._cache_out = out
        return out

    def backward(self, g):
        return sigmoid_backward(self._cache_out, g)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add(str(i), layer)

    def forward(self, x, train=True):
        for layer in self._children.values():
            x = layer.forward(x, train)
        return x

    def backward(self, g):
        for layer in reversed(list(self._children.values())):
            g = layer.backward(g)
        return g
