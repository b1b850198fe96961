"""Composite blocks: atrous entry stack, bottleneck, GCN and boundary refinement.

Like the layer modules they consume and produce channel-major (C,B,H,W)
arrays; :func:`resfcn.layers.swap_bc` converts from and to (B,C,H,W).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layers import BatchNorm2d, Conv2d, LayerError, Module, ReLU, Sequential, relu, relu_backward

# (number of bottlenecks, base filters n, first block downsamples)
RES_STAGES = ((3, 64, True), (4, 128, True), (6, 256, True), (3, 512, False))
ATROUS_RATES = (1, 2, 4)


@dataclass(frozen=True)
class BottleneckSpec:
    n: int
    downsample: bool
    in_channels: int

    @property
    def out_channels(self) -> int:
        return 4 * self.n

    @property
    def identity_skip(self) -> bool:
        return self.in_channels == self.out_channels and not self.downsample


@dataclass(frozen=True)
class GcnSpec:
    k: int
    out_channels: int

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise LayerError(f"GCN kernel size must be odd, got {self.k}")

    def parameter_count(self, in_channels: int) -> int:
        k, c = self.k, self.out_channels
        return 2 * (in_channels * c * k + c * c * k) + 4 * c


def conv_bn_relu(in_ch, out_ch, kernel, *, stride=1, dilation=1, rng=None, dtype=np.float32):
    return Sequential(
        Conv2d(in_ch, out_ch, kernel, stride=stride, dilation=dilation, rng=rng, dtype=dtype),
        BatchNorm2d(out_ch, dtype),
        ReLU(),
    )


class AtrousStack(Module):
    """Three 3x3 conv -> BN -> ReLU stages with increasing dilation."""

    def __init__(self, in_ch=3, filters=32, rates: Sequence[int] = ATROUS_RATES, rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels = in_ch
        self.rates = tuple(rates)
        ch = in_ch
        for i, d in enumerate(self.rates):
            self.add(f"conv{i + 1}", conv_bn_relu(ch, filters, 3, dilation=d, rng=rng, dtype=dtype))
            ch = filters

    def forward(self, x, train=True):
        if x.shape[0] != self.in_channels:
            raise LayerError(f"atrous stack expects {self.in_channels} channels, got {x.shape[0]}")
        for layer in self._children.values():
            x = layer.forward(x, train)
        return x

    def backward(self, g):
        for layer in reversed(list(self._children.values())):
            g = layer.backward(g)
        return g


class Bottleneck(Module):
    """1x1(n) -> 3x3(n) -> 1x1(4n) residual unit; stride 2 sits on the 3x3 conv."""

    def __init__(self, spec: BottleneckSpec, rng=None, dtype=np.float32):
        super().__init__()
        self.spec = spec
        n, stride = spec.n, 2 if spec.downsample else 1
        self.add("conv1", conv_bn_relu(spec.in_channels, n, 1, rng=rng, dtype=dtype))
        self.add("conv2", conv_bn_relu(n, n, 3, stride=stride, rng=rng, dtype=dtype))
        self.add("conv3", Conv2d(n, 4 * n, 1, rng=rng, dtype=dtype))
        self.bn3 = self.add("bn3", BatchNorm2d(4 * n, dtype))
        self.skip = None
        if not spec.identity_skip:
            self.skip = self.add(
                "skip",
                Sequential(
                    Conv2d(spec.in_channels, 4 * n, 1, stride=stride, rng=rng, dtype=dtype),
                    BatchNorm2d(4 * n, dtype),
                ),
            )
        self._cache_out = None

    def forward(self, x, train=True):
        if x.shape[0] != self.spec.in_channels:
            raise LayerError(f"bottleneck expects {self.spec.in_channels} channels, got {x.shape[0]}")
        c = self._children
        h = c["conv1"].forward(x, train)
        h = c["conv2"].forward(h, train)
        h = c["conv3"].forward(h, train)
        h = self.bn3.forward(h, train)
        s = self.skip.forward(x, train) if self.skip is not None else x
        out = relu(h + s)
        self._cache_out = out
        return out

    def backward(self, g):
        g = relu_backward(self._cache_out, g)
        c = self._children
        gm = self.bn3.backward(g)
        gm = c["conv3"].backward(gm)
        gm = c["conv2"].backward(gm)
        gx = c["conv1"].backward(gm)
        if self.skip is not None:
            gx = gx + self.skip.backward(g)
        else:
            gx = gx + g
        return gx


class ResStage(Sequential):
    """One Res-block: a run of bottlenecks, the first optionally downsampling."""

    def __init__(self, stage_index: int, in_channels: int, width: float = 1.0, rng=None, dtype=np.float32):
        if stage_index not in (1, 2, 3, 4):
            raise LayerError(f"stage index must be 1..4, got {stage_index}")
        count, n, down = RES_STAGES[stage_index - 1]
        n = max(1, int(round(n * width)))
        blocks = []
        ch = in_channels
        for i in range(count):
            spec = BottleneckSpec(n=n, downsample=down and i == 0, in_channels=ch)
            blocks.append(Bottleneck(spec, rng=rng, dtype=dtype))
            ch = spec.out_channels
        super().__init__(*blocks)
        self.out_channels = ch


class GCN(Module):
    """Global convolution: (1xk then kx1) + (kx1 then 1xk), no activation."""

    def __init__(self, in_ch: int, spec: GcnSpec, rng=None, dtype=np.float32):
        super().__init__()
        self.spec = spec
        k, c = spec.k, spec.out_channels
        self.a = self.add("a", Sequential(
            Conv2d(in_ch, c, (1, k), rng=rng, dtype=dtype), Conv2d(c, c, (k, 1), rng=rng, dtype=dtype)))
        self.b = self.add("b", Sequential(
            Conv2d(in_ch, c, (k, 1), rng=rng, dtype=dtype), Conv2d(c, c, (1, k), rng=rng, dtype=dtype)))

    def forward(self, x, train=True):
        return self.a.forward(x, train) + self.b.forward(x, train)

    def backward(self, g):
        return self.a.backward(g) + self.b.backward(g)


class BoundaryRefinement(Module):
    """x + conv3x3(relu(conv3x3(x)))."""

    def __init__(self, channels: int, rng=None, dtype=np.float32):
        super().__init__()
        self.body = self.add("body", Sequential(
            Conv2d(channels, channels, 3, rng=rng, dtype=dtype),
            ReLU(),
            Conv2d(channels, channels, 3, rng=rng, dtype=dtype),
        ))

    def forward(self, x, train=True):
        return x + self.body.forward(x, train)

    def backward(self, g):
        return g + self.body.backward(g)


class GcnBr(Sequential):
    """GCN projection to score-map channels followed by a BR block (one shortcut tap)."""

    def __init__(self, in_ch: int, spec: GcnSpec, rng=None, dtype=np.float32):
        super().__init__(GCN(in_ch, spec, rng=rng, dtype=dtype),
                         BoundaryRefinement(spec.out_channels, rng=rng, dtype=dtype))
