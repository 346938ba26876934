"""MAVNet blocks, configuration and assembly.

Default layout::

    ConvConvPool(3->c1) ConvConvPool(c1->c2)
    DWFab(c2, D=2) DWFab(c2, D=4) DWFab(c2, D=8) DWFab(c2, D=16)
    Upsampler(c2->c3) NonBottleneck1D(c3) Upsampler(c3->c3) Classifier1x1(c3->N)

The activation is ReLU throughout. Widths default to (6, 10, 4), which puts
the two-class model at 4368 parameters; ``ModelConfig.default(widths=...)``
takes any other split.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import ClassVar, Optional, Union

import numpy as np

from . import ops
from .autodiff import Parameter, Tape, Var
from .ops import ChannelAffine, ConvSpec, Pool2x2, Upsample2x

DEFAULT_WIDTHS = (6, 10, 4)
DEFAULT_DILATIONS = (2, 4, 8, 16)
ALLOWED_DILATIONS = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class ConvConvPool:
    in_channels: int
    out_channels: int
    kind: ClassVar[str] = "conv_conv_pool"

    def convs(self):
        return [("conv1", ConvSpec.same(self.in_channels, self.out_channels)),
                ("conv2", ConvSpec.same(self.out_channels, self.out_channels))]

    @property
    def out_c(self):
        return self.out_channels


@dataclass(frozen=True)
class DWFab:
    """Depth-wise feature aggregation: dw3x3 -> pw -> ReLU -> dw3x3(D) -> pw, residual, ReLU."""
    channels: int
    dilation: int = 1
    kind: ClassVar[str] = "dwfab"

    def __post_init__(self):
        if self.dilation not in ALLOWED_DILATIONS:
            raise ValueError(f"DWFab dilation must be one of {ALLOWED_DILATIONS}, got {self.dilation}")

    def convs(self):
        c = self.channels
        return [("dw1", ConvSpec.depthwise(c)),
                ("pw1", ConvSpec.pointwise(c, c)),
                ("dw2", ConvSpec.depthwise(c, dilation=self.dilation)),
                ("pw2", ConvSpec.pointwise(c, c))]

    @property
    def in_channels(self):
        return self.channels

    @property
    def out_c(self):
        return self.channels


@dataclass(frozen=True)
class NonBottleneck1D:
    channels: int
    kind: ClassVar[str] = "non_bottleneck_1d"

    def convs(self):
        c = self.channels
        return [("conv3x1_1", ConvSpec.same(c, c, 3, 1)),
                ("conv1x3_1", ConvSpec.same(c, c, 1, 3)),
                ("conv3x1_2", ConvSpec.same(c, c, 3, 1)),
                ("conv1x3_2", ConvSpec.same(c, c, 1, 3))]

    @property
    def in_channels(self):
        return self.channels

    @property
    def out_c(self):
        return self.channels


@dataclass(frozen=True)
class UpsamplerBlock:
    in_channels: int
    out_channels: int
    kind: ClassVar[str] = "upsampler"

    def convs(self):
        return [("conv", ConvSpec.same(self.in_channels, self.out_channels))]

    @property
    def out_c(self):
        return self.out_channels


@dataclass(frozen=True)
class Classifier1x1:
    in_channels: int
    num_classes: int
    kind: ClassVar[str] = "classifier"

    def convs(self):
        return [("conv", ConvSpec.pointwise(self.in_channels, self.num_classes))]

    @property
    def out_c(self):
        return self.num_classes


BlockSpec = Union[ConvConvPool, DWFab, NonBottleneck1D, UpsamplerBlock, Classifier1x1]
BLOCK_KINDS = {cls.kind: cls for cls in (ConvConvPool, DWFab, NonBottleneck1D, UpsamplerBlock, Classifier1x1)}


def block_layers(block: BlockSpec, normalization=False) -> list:
    """Main-path layer stack of a block (residual branches never widen the receptive field)."""
    layers = []
    if isinstance(block, UpsamplerBlock):
        layers.append(Upsample2x())
    for _, spec in block.convs():
        layers.append(spec)
        if normalization and not isinstance(block, Classifier1x1):
            layers.append(ChannelAffine(spec.out_channels))
    if isinstance(block, ConvConvPool):
        layers.append(Pool2x2())
    return layers


@dataclass
class ModelConfig:
    blocks: list
    num_classes: int
    input_channels: int = 3
    normalization: bool = False

    @classmethod
    def default(cls, num_classes=2, input_channels=3, widths=DEFAULT_WIDTHS,
                dilations=DEFAULT_DILATIONS, normalization=False) -> "ModelConfig":
        c1, c2, c3 = widths
        blocks = [ConvConvPool(input_channels, c1), ConvConvPool(c1, c2)]
        blocks += [DWFab(c2, d) for d in dilations]
        blocks += [UpsamplerBlock(c2, c3), NonBottleneck1D(c3), UpsamplerBlock(c3, c3),
                   Classifier1x1(c3, num_classes)]
        return cls(blocks, num_classes, input_channels, normalization)

    def validate(self) -> "ModelConfig":
        if not self.blocks or not isinstance(self.blocks[-1], Classifier1x1):
            raise ValueError("the last block must be a Classifier1x1")
        if self.blocks[-1].num_classes != self.num_classes:
            raise ValueError(f"classifier outputs {self.blocks[-1].num_classes} classes, "
                             f"config says {self.num_classes}")
        c = self.input_channels
        for k, b in enumerate(self.blocks):
            if b.in_channels != c:
                raise ValueError(f"block {k} ({b.kind}) expects {b.in_channels} channels, gets {c}")
            c = b.out_c
        pools = sum(isinstance(b, ConvConvPool) for b in self.blocks)
        ups = sum(isinstance(b, UpsamplerBlock) for b in self.blocks)
        if pools != ups:
            raise ValueError(f"{pools} downsampling blocks but {ups} upsampling blocks; "
                             "output resolution would differ from the input")
        return self

    @property
    def divisor(self) -> int:
        return 2 ** sum(isinstance(b, ConvConvPool) for b in self.blocks)

    def layer_stack(self, blocks=None) -> list:
        blocks = self.blocks if blocks is None else blocks
        return [layer for b in blocks for layer in block_layers(b, self.normalization)]

    def encoder_blocks(self) -> list:
        return [b for b in self.blocks if isinstance(b, (ConvConvPool, DWFab))]

    def param_count(self) -> int:
        return ops.param_count(self.layer_stack())

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "input_channels": self.input_channels,
            "normalization": self.normalization,
            "blocks": [{"kind": b.kind, **asdict(b)} for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        blocks = []
        for entry in doc["blocks"]:
            entry = dict(entry)
            kind = entry.pop("kind")
            if kind not in BLOCK_KINDS:
                raise ValueError(f"unknown block kind {kind!r}")
            blocks.append(BLOCK_KINDS[kind](**entry))
        return cls(blocks, int(doc["num_classes"]), int(doc.get("input_channels", 3)),
                   bool(doc.get("normalization", False))).validate()


def he_normal(rng: np.random.Generator, spec: ConvSpec, dtype=np.float32) -> np.ndarray:
    fan_in = (spec.in_channels // spec.groups) * spec.kernel_h * spec.kernel_w
    return (rng.standard_normal(spec.weight_shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class _BlockParams:
    block: BlockSpec
    convs: list  # (name, spec, weight Parameter, bias Parameter)
    norms: dict = field(default_factory=dict)  # conv name -> (scale, shift)


RESIDUAL_BLOCKS = (DWFab, NonBottleneck1D)


class Model:
    """A built network: parameters plus the forward pass over a Tape.

    Weights are He-normal and biases zero. With ``zero_residual`` (the
    default) the last conv of every residual branch starts at zero, so each
    DWFab / non-bottleneck block is ReLU(identity) at initialization. These
    layers are only a handful of channels wide; without it the activation scale
    at the classifier varies by an order of magnitude from seed to seed and
    training often sits on the all-background solution for hundreds of steps.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32, zero_residual: bool = True):
        self.config = config.validate()
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.blocks: list[_BlockParams] = []
        for k, block in enumerate(config.blocks):
            prefix = f"{k:02d}.{block.kind}"
            convs = []
            norms = {}
            specs = block.convs()
            for j, (name, spec) in enumerate(specs):
                weight = he_normal(rng, spec, dtype)
                if zero_residual and isinstance(block, RESIDUAL_BLOCKS) and j == len(specs) - 1:
                    weight[...] = 0
                w = Parameter(weight, f"{prefix}.{name}.weight")
                b = Parameter(np.zeros(spec.out_channels, dtype), f"{prefix}.{name}.bias")
                convs.append((name, spec, w, b))
                if config.normalization and not isinstance(block, Classifier1x1):
                    norms[name] = (Parameter(np.ones(spec.out_channels, dtype), f"{prefix}.{name}.norm_scale"),
                                   Parameter(np.zeros(spec.out_channels, dtype), f"{prefix}.{name}.norm_shift"))
            self.blocks.append(_BlockParams(block, convs, norms))

    def parameters(self) -> list[Parameter]:
        out = []
        for bp in self.blocks:
            for name, _, w, b in bp.convs:
                out += [w, b]
                if name in bp.norms:
                    out += list(bp.norms[name])
        return out

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def astype(self, dtype) -> "Model":
        """Cast every parameter in place (float64 is used for gradient checks)."""
        for p in self.parameters():
            for attr in ("value", "grad", "adam_m", "adam_v"):
                setattr(p, attr, getattr(p, attr).astype(dtype))
        self.dtype = dtype
        return self

    # -- forward ------------------------------------------------------------

    def _conv(self, tape: Tape, bp: _BlockParams, k: int, x: Var) -> Var:
        name, spec, w, b = bp.convs[k]
        y = tape.conv2d(x, spec, w, b)
        if name in bp.norms:
            y = tape.channel_affine(y, *bp.norms[name])
        return y

    def forward_block(self, tape: Tape, bp: _BlockParams, x: Var) -> Var:
        block = bp.block
        conv = lambda k, v: self._conv(tape, bp, k, v)  # noqa: E731
        if x.shape[1] != block.in_channels:
            raise ValueError(f"{block.kind} expects {block.in_channels} channels, got {x.shape[1]}")
        if isinstance(block, ConvConvPool):
            y = tape.relu(conv(0, x))
            y = tape.relu(conv(1, y))
            return tape.maxpool2x2(y)
        if isinstance(block, DWFab):
            t = tape.relu(conv(1, conv(0, x)))
            t = conv(3, conv(2, t))
            return tape.relu(tape.add(x, t))
        if isinstance(block, NonBottleneck1D):
            t = tape.relu(conv(0, x))
            t = conv(2, conv(1, t))
            t = conv(3, tape.relu(t))
            return tape.relu(tape.add(x, t))
        if isinstance(block, UpsamplerBlock):
            return tape.relu(conv(0, tape.upsample2x(x)))
        if isinstance(block, Classifier1x1):
            return conv(0, x)
        raise TypeError(f"unknown block {block!r}")

    def check_input(self, shape):
        n, c, h, w = shape
        if c != self.config.input_channels:
            raise ValueError(f"model expects {self.config.input_channels} input channels, got {c}")
        d = self.config.divisor
        if h % d or w % d:
            raise ValueError(f"input height and width must be divisible by {d}, got {h}x{w}")

    def forward_var(self, tape: Tape, x: Var, timings: Optional[list] = None) -> Var:
        self.check_input(x.shape)
        for bp in self.blocks:
            t0 = time.perf_counter() if timings is not None else 0.0
            x = self.forward_block(tape, bp, x)
            if timings is not None:
                timings.append((bp.block.kind, time.perf_counter() - t0))
        return x

    def forward(self, x: np.ndarray, timings: Optional[list] = None) -> np.ndarray:
        """Inference: logits of shape (n, num_classes, h, w)."""
        x = np.ascontiguousarray(x, dtype=self.dtype)
        return self.forward_var(Tape(record=False), Var(x), timings).value

    __call__ = forward


def build(config: ModelConfig, seed: int = 0, dtype=np.float32, zero_residual: bool = True) -> Model:
    return Model(config, seed, dtype, zero_residual)
