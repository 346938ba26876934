"""Tape-based reverse-mode differentiation, Adam, and gradient checking.

Every differentiable primitive is a ``Tape`` method that computes its forward
value with the plain kernels in :mod:`mavnet.ops` and, when any input needs a
gradient, records a closure mapping the output gradient to input gradients.
``Tape.backward`` replays those closures in exact reverse order. Gradients are
accumulated with ``+=`` into leaf ``.grad`` arrays and are only cleared by
:func:`adam_step` (or ``zero_grad``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import ops
from .ops import ConvSpec


class Var:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"{type(self).__name__}({self.name or ''}{list(self.value.shape)})"


class Parameter(Var):
    """A learnable tensor with its gradient and Adam moment state."""
    __slots__ = ("adam_m", "adam_v", "t", "has_grad")

    def __init__(self, value, name=None):
        super().__init__(np.ascontiguousarray(value), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)
        self.t = 0
        self.has_grad = False

    def zero_grad(self):
        self.grad[...] = 0
        self.has_grad = False


class TapeError(RuntimeError):
    pass


@dataclass
class _Node:
    out: Var
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of executed primitives.

    With ``record=False`` the methods only compute forward values, which is the
    inference path.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[_Node] = []
        self.consumed = False

    def _emit(self, value, inputs: Sequence[Var], backward_fn) -> Var:
        needs = self.record and any(v.requires_grad for v in inputs)
        out = Var(value, requires_grad=needs)
        if needs:
            if self.consumed:
                raise TapeError("tape was already consumed by backward()")
            self.nodes.append(_Node(out, tuple(inputs), backward_fn))
        return out

    # -- primitives ---------------------------------------------------------

    def conv2d(self, x: Var, spec: ConvSpec, w: Var, b: Var | None = None) -> Var:
        value = ops.conv2d(x.value, spec, w.value, None if b is None else b.value)
        inputs = (x, w) if b is None else (x, w, b)
        need_x = x.requires_grad
        return self._emit(value, inputs,
                          lambda g: conv2d_backward(g, x.value, spec, w.value, need_x)[: len(inputs)])

    def relu(self, x: Var) -> Var:
        mask = x.value > 0
        # np.maximum keeps NaN visible, so a diverged run is caught by the loss check
        return self._emit(np.maximum(x.value, 0).astype(x.value.dtype), (x,), lambda g: (g * mask,))

    def add(self, a: Var, b: Var) -> Var:
        if a.shape != b.shape:
            raise ValueError(f"add needs equal shapes, got {a.shape} and {b.shape}")
        return self._emit(a.value + b.value, (a, b), lambda g: (g, g))

    def scale(self, x: Var, factor: float) -> Var:
        return self._emit(x.value * factor, (x,), lambda g: (g * factor,))

    def sum(self, x: Var) -> Var:
        shape = x.shape
        return self._emit(np.asarray(x.value.sum()), (x,),
                          lambda g: (np.broadcast_to(g, shape).astype(x.value.dtype),))

    def weighted_sum(self, x: Var, weights: np.ndarray) -> Var:
        """Scalar sum(x * weights) for a constant weight array of x's shape."""
        weights = np.asarray(weights, dtype=x.value.dtype)
        if weights.shape != x.shape:
            raise ValueError(f"weights shape {weights.shape} != input shape {x.shape}")
        return self._emit(np.asarray((x.value * weights).sum()), (x,), lambda g: (g * weights,))

    def maxpool2x2(self, x: Var) -> Var:
        out, idx = ops.maxpool2x2(x.value)
        shape = x.shape
        return self._emit(out, (x,), lambda g: (maxpool2x2_backward(g, idx, shape),))

    def avgpool2x2(self, x: Var) -> Var:
        """Mean over 2x2 windows (even sizes). Used as the connectivity surrogate of max pooling."""
        n, c, h, w = x.shape
        value = x.value.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        return self._emit(value, (x,), lambda g: (ops.upsample_nearest_x2(g) / 4,))

    def upsample2x(self, x: Var) -> Var:
        return self._emit(ops.upsample_nearest_x2(x.value), (x,), lambda g: (upsample_backward(g),))

    def channel_affine(self, x: Var, scale: Var, shift: Var) -> Var:
        value = ops.channel_affine(x.value, scale.value, shift.value)

        def back(g):
            return (g * scale.value[None, :, None, None],
                    (g * x.value).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))
        return self._emit(value, (x, scale, shift), back)

    def softmax_loss(self, logits: Var, labels: np.ndarray, cfg) -> Var:
        """Focal (or, with gamma=0, cross-entropy) loss applied to softmax(logits)."""
        from .losses import focal_loss_from_logits
        loss, grad = focal_loss_from_logits(logits.value, labels, cfg)
        return self._emit(np.asarray(loss, dtype=logits.value.dtype), (logits,),
                          lambda g: ((g * grad).astype(logits.value.dtype),))

    # -- reverse pass -------------------------------------------------------

    def backward(self, out: Var, seed=None) -> None:
        """Propagate ``seed`` (default 1 for a scalar ``out``) back to every leaf needing a gradient."""
        if self.consumed:
            raise TapeError("backward() called twice on the same tape")
        if not self.nodes:
            raise TapeError("backward() on an empty tape")
        if seed is None:
            if out.value.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {out.shape}")
            seed = np.ones_like(out.value)
        else:
            seed = np.broadcast_to(np.asarray(seed, dtype=out.value.dtype), out.shape)
        self.consumed = True
        grads = {id(out): seed}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for var, gi in zip(node.inputs, node.backward(g)):
                if not var.requires_grad:
                    continue
                key = id(var)
                grads[key] = grads[key] + gi if key in grads else np.asarray(gi)
                leaves[key] = var
        # every recorded output has been popped, so what remains belongs to leaves
        for key, g in grads.items():
            var = leaves.get(key)
            if var is None:
                continue
            g = np.asarray(g, dtype=var.value.dtype).reshape(var.shape)
            if var.grad is None:
                var.grad = g.copy()
            else:
                var.grad += g
            if isinstance(var, Parameter):
                var.has_grad = True
        self.nodes.clear()


# ---------------------------------------------------------------------------
# backward kernels

def _col2im(gcols, spec: ConvSpec, x_shape):
    n, c, h, w = x_shape
    ph, pw = spec.padding
    s, d = spec.stride, spec.dilation
    oh, ow = gcols.shape[-2:]
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=gcols.dtype)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            gxp[:, :, i * d:i * d + s * (oh - 1) + 1:s, j * d:j * d + s * (ow - 1) + 1:s] += gcols[:, :, i, j]
    return gxp[:, :, ph:ph + h, pw:pw + w]


def conv2d_backward(g, x, spec: ConvSpec, w, need_x=True):
    """Gradients (input, weights, bias) of conv2d given the output gradient ``g``."""
    n, oc, oh, ow = g.shape
    gb = g.sum(axis=(0, 2, 3))
    kh, kw = spec.kernel_h, spec.kernel_w
    groups = spec.groups
    if groups == spec.in_channels and spec.out_channels == spec.in_channels:
        xp = ops.pad_input(x, spec.padding)
        s, d = spec.stride, spec.dilation
        gw = np.empty_like(w)
        gcols = np.empty((n, oc, kh, kw, oh, ow), dtype=g.dtype) if need_x else None
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i * d:i * d + s * (oh - 1) + 1:s, j * d:j * d + s * (ow - 1) + 1:s]
                gw[:, 0, i, j] = (g * patch).sum(axis=(0, 2, 3))
                if need_x:
                    gcols[:, :, i, j] = g * w[:, 0, i, j][None, :, None, None]
        gx = _col2im(gcols, spec, x.shape) if need_x else None
        return gx, gw, gb
    L = oh * ow
    g2 = g.reshape(n, groups, oc // groups, L)
    cols = ops.im2col(x, spec).reshape(n, groups, -1, L)
    # sum over batch and positions: (g, og, L*n) @ (g, L*n, K)
    gw = np.matmul(g2.transpose(1, 2, 0, 3).reshape(groups, oc // groups, n * L),
                   cols.transpose(1, 0, 3, 2).reshape(groups, n * L, -1))
    gw = gw.reshape(w.shape)
    gx = None
    if need_x:
        wg = w.reshape(groups, oc // groups, -1)
        gcols = np.matmul(wg.transpose(0, 2, 1)[None], g2)
        gcols = gcols.reshape(n, spec.in_channels, kh, kw, oh, ow)
        gx = _col2im(gcols, spec, x.shape)
    return gx, gw, gb


def maxpool2x2_backward(g, idx, x_shape):
    n, c, h, w = x_shape
    oh, ow = g.shape[2:]
    win = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), g[..., None], axis=-1)
    gx = win.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow)
    return np.ascontiguousarray(gx[:, :, :h, :w])


def upsample_backward(g):
    n, c, h, w = g.shape
    return g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# optimizer

@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be positive")


def adam_step(params: Iterable[Parameter], cfg: OptimizerConfig = OptimizerConfig()) -> None:
    """One bias-corrected Adam update per parameter, then zero the gradients."""
    params = list(params)
    missing = [p.name or repr(p) for p in params if not p.has_grad]
    if missing:
        raise TapeError(f"no gradient computed for: {', '.join(missing[:5])}")
    b1, b2 = cfg.beta1, cfg.beta2
    for p in params:
        p.t += 1
        g = p.grad
        p.adam_m *= b1
        p.adam_m += (1 - b1) * g
        p.adam_v *= b2
        p.adam_v += (1 - b2) * (g * g)
        m_hat = p.adam_m / (1 - b1 ** p.t)
        v_hat = p.adam_v / (1 - b2 ** p.t)
        p.value -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        p.zero_grad()


# ---------------------------------------------------------------------------
# checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_input: dict = field(default_factory=dict)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def gradient_check(fn: Callable[..., Var], inputs: Sequence[Var], tolerance=1e-5, h=1e-5,
                   max_coords=None, floor=1e-4, rng=None) -> GradCheckReport:
    """Compare backward() against central differences.

    ``fn(tape, *inputs)`` must return a scalar Var. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, floor)``, so gradients smaller than
    ``floor`` are effectively compared in absolute terms. ``max_coords`` limits
    the number of coordinates sampled per input.
    """
    for v in inputs:
        if v.value.dtype != np.float64:
            raise TypeError("gradient_check needs float64 inputs")
    rng = np.random.default_rng(0) if rng is None else rng
    for v in inputs:
        v.requires_grad = True
        v.grad = None if not isinstance(v, Parameter) else np.zeros_like(v.value)
    tape = Tape()
    loss = fn(tape, *inputs)
    if loss.value.size != 1:
        raise ValueError(f"gradient_check needs a scalar loss, got shape {loss.shape}")
    tape.backward(loss)

    def evaluate():
        return float(fn(Tape(record=False), *inputs).value)

    report = GradCheckReport(0.0, tolerance)
    for k, v in enumerate(inputs):
        analytic = np.zeros_like(v.value) if v.grad is None else v.grad
        flat = v.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report.per_input[v.name or f"input{k}"] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
        report.checked += len(coords)
    return report


def gradient_footprint(stack: Sequence, input_shape, out_index=None):
    """Input region reachable from one output pixel, measured by backprop.

    The stack is evaluated as a linear surrogate with all-ones weights so
    that no connection cancels: convolutions keep their geometry, max pooling
    becomes 2x2 averaging (same windows), and normalization is the identity.
    Returns ``((row_lo, row_hi), (col_lo, col_hi))`` of the nonzero input
    gradient, inclusive. ``out_index`` defaults to the centre output pixel.
    """
    n, c, h, w = input_shape
    x = Var(np.ones((1, c, h, w)), requires_grad=True)
    tape = Tape()
    y = x
    for layer in stack:
        if isinstance(layer, ConvSpec):
            bias = Var(np.zeros(layer.out_channels)) if layer.has_bias else None
            y = tape.conv2d(y, layer, Var(np.ones(layer.weight_shape)), bias)
        elif isinstance(layer, ops.Pool2x2):
            y = tape.avgpool2x2(y)
        elif isinstance(layer, ops.Upsample2x):
            y = tape.upsample2x(y)
        elif isinstance(layer, ops.ChannelAffine):
            continue
        else:
            raise TypeError(f"unsupported layer {layer!r}")
    oh, ow = y.shape[2:]
    if out_index is None:
        out_index = (oh // 2, ow // 2)
    if y is x:
        return (out_index[0], out_index[0]), (out_index[1], out_index[1])
    seed = np.zeros(y.shape)
    seed[0, 0, out_index[0], out_index[1]] = 1.0
    tape.backward(y, seed)
    reach = np.abs(x.grad[0]).sum(axis=0) > 0
    rows = np.flatnonzero(reach.any(axis=1))
    cols = np.flatnonzero(reach.any(axis=0))
    return (int(rows[0]), int(rows[-1])), (int(cols[0]), int(cols[-1]))
