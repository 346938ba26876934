"""Forward layer primitives and static analyzers for layer stacks.

Convolution is cross-correlation (no kernel flip) with zero padding. Dense
convolutions go through im2col + a single matmul; ``conv2d_direct`` is the
slow reference loop kept for testing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence, Union

import numpy as np

from .tensor import Shape


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int = 3
    kernel_w: int = 3
    stride: int = 1
    padding: tuple[int, int] = (0, 0)
    dilation: int = 1
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if isinstance(self.padding, int):
            object.__setattr__(self, "padding", (self.padding, self.padding))
        else:
            object.__setattr__(self, "padding", tuple(int(p) for p in self.padding))
        if min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w) < 1:
            raise ValueError(f"channels and kernel sizes must be positive: {self}")
        if self.stride < 1 or self.dilation < 1 or self.groups < 1:
            raise ValueError(f"stride, dilation and groups must be >= 1: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"in_channels={self.in_channels} and out_channels={self.out_channels} "
                f"must be divisible by groups={self.groups}"
            )

    @classmethod
    def same(cls, in_channels, out_channels, kernel_h=3, kernel_w=None, dilation=1, groups=1,
             has_bias=True) -> "ConvSpec":
        """Stride-1 conv padded so the spatial size is preserved (odd kernels only)."""
        kernel_w = kernel_h if kernel_w is None else kernel_w
        if kernel_h % 2 == 0 or kernel_w % 2 == 0:
            raise ValueError("same padding needs odd kernel sizes")
        pad = ((kernel_h - 1) * dilation // 2, (kernel_w - 1) * dilation // 2)
        return cls(in_channels, out_channels, kernel_h, kernel_w, 1, pad, dilation, groups, has_bias)

    @classmethod
    def depthwise(cls, channels, kernel=3, dilation=1, has_bias=True) -> "ConvSpec":
        return cls.same(channels, channels, kernel, kernel, dilation, groups=channels,
                        has_bias=has_bias)

    @classmethod
    def pointwise(cls, in_channels, out_channels, has_bias=True) -> "ConvSpec":
        return cls(in_channels, out_channels, 1, 1, has_bias=has_bias)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    @property
    def extent(self) -> tuple[int, int]:
        d = self.dilation
        return ((self.kernel_h - 1) * d + 1, (self.kernel_w - 1) * d + 1)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        eh, ew = self.extent
        ph, pw = self.padding
        if eh > h + 2 * ph or ew > w + 2 * pw:
            raise ValueError(
                f"effective kernel {eh}x{ew} is larger than the padded input "
                f"{h + 2 * ph}x{w + 2 * pw}"
            )
        return ((h + 2 * ph - eh) // self.stride + 1, (w + 2 * pw - ew) // self.stride + 1)


@dataclass(frozen=True)
class Pool2x2:
    """2x2 max pooling with stride 2."""


@dataclass(frozen=True)
class Upsample2x:
    """Nearest-neighbour x2 upsampling."""


@dataclass(frozen=True)
class ChannelAffine:
    """Per-channel scale and shift (the optional normalization layer)."""
    channels: int


Layer = Union[ConvSpec, Pool2x2, Upsample2x, ChannelAffine]
LayerStack = Sequence[Layer]


def _check_conv_inputs(x, spec: ConvSpec, weights, bias):
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ValueError(f"input shape {x.shape} does not match in_channels={spec.in_channels}")
    if tuple(weights.shape) != spec.weight_shape:
        raise ValueError(f"weight shape {weights.shape} != expected {spec.weight_shape}")
    if spec.has_bias:
        if bias is None or tuple(np.shape(bias)) != (spec.out_channels,):
            raise ValueError(f"expected a bias vector of length {spec.out_channels}")
    elif bias is not None:
        raise ValueError("spec has no bias but a bias vector was given")
    return spec.output_hw(x.shape[2], x.shape[3])


def pad_input(x: np.ndarray, padding: tuple[int, int]) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Patch matrix of shape (n, c, kh, kw, oh, ow) built one kernel tap at a time."""
    n, c = x.shape[:2]
    oh, ow = spec.output_hw(x.shape[2], x.shape[3])
    xp = pad_input(x, spec.padding)
    s, d = spec.stride, spec.dilation
    cols = np.empty((n, c, spec.kernel_h, spec.kernel_w, oh, ow), dtype=x.dtype)
    for i in range(spec.kernel_h):
        r0 = i * d
        for j in range(spec.kernel_w):
            c0 = j * d
            cols[:, :, i, j] = xp[:, :, r0:r0 + s * (oh - 1) + 1:s, c0:c0 + s * (ow - 1) + 1:s]
    return cols


def _depthwise_taps(x, spec: ConvSpec, weights, oh, ow):
    # one input channel per group: accumulate shifted slices instead of building cols
    xp = pad_input(x, spec.padding)
    s, d = spec.stride, spec.dilation
    mult = spec.out_channels // spec.in_channels
    if mult > 1:
        xp = np.repeat(xp, mult, axis=1)
    out = np.zeros((x.shape[0], spec.out_channels, oh, ow), dtype=np.result_type(x, weights))
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            tap = weights[:, 0, i, j][None, :, None, None]
            out += tap * xp[:, :, i * d:i * d + s * (oh - 1) + 1:s, j * d:j * d + s * (ow - 1) + 1:s]
    return out


def conv2d(x: np.ndarray, spec: ConvSpec, weights: np.ndarray, bias=None) -> np.ndarray:
    oh, ow = _check_conv_inputs(x, spec, weights, bias)
    n = x.shape[0]
    g = spec.groups
    if g == spec.in_channels:
        out = _depthwise_taps(x, spec, weights, oh, ow)
    elif spec.kernel_h == spec.kernel_w == 1 and spec.stride == 1 and spec.padding == (0, 0) and g == 1:
        out = np.matmul(weights.reshape(spec.out_channels, -1), x.reshape(n, spec.in_channels, -1))
        out = out.reshape(n, spec.out_channels, oh, ow)
    else:
        cols = im2col(x, spec)
        if g == 1:
            out = np.matmul(weights.reshape(spec.out_channels, -1), cols.reshape(n, -1, oh * ow))
        else:
            cg, og = spec.in_channels // g, spec.out_channels // g
            cols = cols.reshape(n, g, cg * spec.kernel_h * spec.kernel_w, oh * ow)
            wg = weights.reshape(g, og, -1)
            out = np.matmul(wg[None], cols)
        out = out.reshape(n, spec.out_channels, oh, ow)
    if bias is not None:
        out += np.asarray(bias, dtype=out.dtype)[None, :, None, None]
    return out


def conv2d_direct(x: np.ndarray, spec: ConvSpec, weights: np.ndarray, bias=None) -> np.ndarray:
    """Naive nested-loop reference. Slow; for tests only."""
    oh, ow = _check_conv_inputs(x, spec, weights, bias)
    n = x.shape[0]
    xp = pad_input(x, spec.padding)
    cg, og = spec.in_channels // spec.groups, spec.out_channels // spec.groups
    out = np.zeros((n, spec.out_channels, oh, ow), dtype=np.result_type(x, weights))
    for b in range(n):
        for o in range(spec.out_channels):
            g = o // og
            for r in range(oh):
                for q in range(ow):
                    acc = 0.0 if bias is None else float(bias[o])
                    for ci in range(cg):
                        for i in range(spec.kernel_h):
                            for j in range(spec.kernel_w):
                                acc += weights[o, ci, i, j] * xp[
                                    b, g * cg + ci,
                                    r * spec.stride + i * spec.dilation,
                                    q * spec.stride + j * spec.dilation,
                                ]
                    out[b, o, r, q] = acc
    return out


def depthwise_separable_conv(x, dw_spec: ConvSpec, pw_spec: ConvSpec, dw_weights, dw_bias,
                             pw_weights, pw_bias) -> np.ndarray:
    if dw_spec.groups != x.shape[1] or dw_spec.groups != dw_spec.in_channels:
        raise ValueError("depthwise stage needs groups == channels")
    if (pw_spec.kernel_h, pw_spec.kernel_w) != (1, 1):
        raise ValueError("pointwise stage needs a 1x1 kernel")
    return conv2d(conv2d(x, dw_spec, dw_weights, dw_bias), pw_spec, pw_weights, pw_bias)


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/2 max pooling.

    Odd heights or widths are padded with -inf on the bottom/right. Returns the
    pooled array and the flat in-window argmax (0..3, row-major, first
    occurrence on ties) used by the backward pass.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        x = np.pad(x, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)), constant_values=-np.inf)
    oh, ow = x.shape[2] // 2, x.shape[3] // 2
    win = x.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int8)


def upsample_nearest_x2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def channel_affine(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    return x * scale[None, :, None, None] + shift[None, :, None, None]


# ---------------------------------------------------------------------------
# static analyzers

def param_count(layers: Union[Layer, Iterable[Layer]]) -> int:
    if isinstance(layers, (ConvSpec, Pool2x2, Upsample2x, ChannelAffine)):
        layers = [layers]
    total = 0
    for layer in layers:
        if isinstance(layer, ConvSpec):
            oc, icg, kh, kw = layer.weight_shape
            total += oc * icg * kh * kw + (oc if layer.has_bias else 0)
        elif isinstance(layer, ChannelAffine):
            total += 2 * layer.channels
    return total


def output_shape(stack: LayerStack, input_shape) -> Shape:
    shape = Shape(*input_shape).validated()
    for k, layer in enumerate(stack):
        n, c, h, w = shape
        if isinstance(layer, ConvSpec):
            if c != layer.in_channels:
                raise ValueError(f"layer {k}: expects {layer.in_channels} channels, got {c}")
            h, w = layer.output_hw(h, w)
            c = layer.out_channels
        elif isinstance(layer, Pool2x2):
            h, w = (h + 1) // 2, (w + 1) // 2
        elif isinstance(layer, Upsample2x):
            h, w = 2 * h, 2 * w
        elif isinstance(layer, ChannelAffine):
            if c != layer.channels:
                raise ValueError(f"layer {k}: normalization for {layer.channels} channels, got {c}")
        else:
            raise TypeError(f"layer {k}: unknown layer {layer!r}")
        if min(h, w) < 1:
            raise ValueError(f"layer {k}: spatial size collapsed to {h}x{w}")
        shape = Shape(n, c, h, w)
    return shape


@dataclass(frozen=True)
class AxisField:
    """Receptive field along one axis, in input-pixel units.

    Output index ``i`` of the stack sees input pixels
    ``[start + i * jump, start + i * jump + size - 1]``.
    """
    size: Fraction = Fraction(1)
    jump: Fraction = Fraction(1)
    start: Fraction = Fraction(0)

    def step(self, kernel: int, stride: int, pad: int, dilation: int) -> "AxisField":
        return AxisField(
            size=self.size + (kernel - 1) * dilation * self.jump,
            jump=self.jump * stride,
            start=self.start - pad * self.jump,
        )

    def window(self, index: int) -> tuple[Fraction, Fraction]:
        lo = self.start + index * self.jump
        return lo, lo + self.size - 1


def receptive_field_trace(stack: LayerStack) -> list[tuple[AxisField, AxisField]]:
    """Cumulative (rows, cols) receptive field after every layer of the stack."""
    fh, fw = AxisField(), AxisField()
    trace = []
    for layer in stack:
        if isinstance(layer, ConvSpec):
            ph, pw = layer.padding
            fh = fh.step(layer.kernel_h, layer.stride, ph, layer.dilation)
            fw = fw.step(layer.kernel_w, layer.stride, pw, layer.dilation)
        elif isinstance(layer, Pool2x2):
            fh, fw = fh.step(2, 2, 0, 1), fw.step(2, 2, 0, 1)
        elif isinstance(layer, Upsample2x):
            # output pixel i sits at input position i/2 - 1/4 of the coarse grid
            fh = AxisField(fh.size, fh.jump / 2, fh.start - fh.jump / 4)
            fw = AxisField(fw.size, fw.jump / 2, fw.start - fw.jump / 4)
        trace.append((fh, fw))
    return trace


def receptive_field(stack: LayerStack) -> tuple[int, int]:
    """(rf_h, rf_w) of the whole stack; fractional sizes after upsampling round up."""
    trace = receptive_field_trace(stack)
    if not trace:
        return (1, 1)
    fh, fw = trace[-1]
    return (math.ceil(fh.size), math.ceil(fw.size))


def dilation_saturation_bound(size: int) -> int:
    """Smallest K with 2**K >= size: stacking more rate-2 dilations than this adds nothing."""
    if size < 1:
        raise ValueError("size must be positive")
    return (size - 1).bit_length()
