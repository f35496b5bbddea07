"""Dense-tensor numerics with hand-written differentiable layers.

Tensors are plain float64 numpy arrays. Image batches are ``(N, C, H, W)``;
a single ``(C, H, W)`` image is accepted wherever a batch is and is treated
as a batch of one. Convolutions are valid-only (no padding).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Raised when a tensor's extent does not fit the operation."""

    def __init__(self, op: str, axis: str, expected, got):
        self.op, self.axis, self.expected, self.got = op, axis, expected, got
        super().__init__(f"{op}: axis '{axis}' expected {expected}, got {got}")


class NumericalError(FloatingPointError):
    """Raised on NaN/Inf where finite values are required."""


def make_rng(seed: int) -> np.random.Generator:
    """Explicit-state generator; PCG64 streams are platform independent."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class LayerParams:
    weight: np.ndarray
    bias: np.ndarray
    name: str = ""
    frozen: bool = False
    grad_weight: np.ndarray = field(init=False, repr=False)
    grad_bias: np.ndarray = field(init=False, repr=False)
    mom_weight: np.ndarray = field(init=False, repr=False)
    mom_bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self.mom_weight = np.zeros_like(self.weight)
        self.mom_bias = np.zeros_like(self.bias)

    @classmethod
    def uniform(cls, shape, rng: np.random.Generator, name: str = "") -> "LayerParams":
        """Fan-in scaled uniform init in +-sqrt(6 / fan_in), zero bias."""
        fan_in = int(np.prod(shape[1:]))
        limit = np.sqrt(6.0 / fan_in)
        return cls(rng.uniform(-limit, limit, size=shape), np.zeros(shape[0]), name=name)

    @classmethod
    def zeros(cls, shape, name: str = "") -> "LayerParams":
        return cls(np.zeros(shape), np.zeros(shape[0]), name=name)

    def zero_grad(self):
        self.grad_weight.fill(0.0)
        self.grad_bias.fill(0.0)

    def tensors(self):
        """(suffix, array) pairs for the learnable tensors."""
        return [("weight", self.weight), ("bias", self.bias)]

    def snap(self):
        """Round weights and bias to float32 (checkpoint) precision in place."""
        self.weight[...] = self.weight.astype(np.float32)
        self.bias[...] = self.bias.astype(np.float32)


def _as_batch(x, op):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise DimensionError(op, "rank", "3 or 4", x.ndim)
    return x, False


def conv2d_forward(input, params: LayerParams, stride: int = 1):
    x, single = _as_batch(input, "conv2d")
    w = params.weight
    if x.shape[1] != w.shape[1]:
        raise DimensionError("conv2d", "channels", w.shape[1], x.shape[1])
    if x.shape[2] < w.shape[2]:
        raise DimensionError("conv2d", "height", f">= {w.shape[2]}", x.shape[2])
    if x.shape[3] < w.shape[3]:
        raise DimensionError("conv2d", "width", f">= {w.shape[3]}", x.shape[3])
    out = kernels.conv2d_forward(np.ascontiguousarray(x), w, params.bias, int(stride))
    return out[0] if single else out


def conv2d_backward(input, params: LayerParams, upstream_grad, stride: int = 1,
                    need_input_grad: bool = True):
    """Returns ``(input_grad, (grad_weight, grad_bias))``; accumulates into ``params``."""
    x, single = _as_batch(input, "conv2d_backward")
    g, _ = _as_batch(upstream_grad, "conv2d_backward")
    kh, kw = params.weight.shape[2:]
    expected = (x.shape[0], params.weight.shape[0],
                (x.shape[2] - kh) // stride + 1, (x.shape[3] - kw) // stride + 1)
    if g.shape != expected:
        raise DimensionError("conv2d_backward", "upstream", expected, g.shape)
    dx, dw, db = kernels.conv2d_backward(np.ascontiguousarray(x), params.weight,
                                         np.ascontiguousarray(g), int(stride), need_input_grad)
    if not params.frozen:
        params.grad_weight += dw
        params.grad_bias += db
    if dx is not None and single:
        dx = dx[0]
    return dx, (dw, db)


def fc_forward(input, params: LayerParams):
    x = np.asarray(input, dtype=np.float64)
    if x.shape[-1] != params.weight.shape[1]:
        raise DimensionError("fc", "features", params.weight.shape[1], x.shape[-1])
    return x @ params.weight.T + params.bias


def fc_backward(input, params: LayerParams, upstream_grad, need_input_grad: bool = True):
    x = np.atleast_2d(np.asarray(input, dtype=np.float64))
    g = np.atleast_2d(np.asarray(upstream_grad, dtype=np.float64))
    if g.shape != (x.shape[0], params.weight.shape[0]):
        raise DimensionError("fc_backward", "upstream", (x.shape[0], params.weight.shape[0]), g.shape)
    dw = g.T @ x
    db = g.sum(axis=0)
    if not params.frozen:
        params.grad_weight += dw
        params.grad_bias += db
    dx = None
    if need_input_grad:
        dx = g @ params.weight
        if np.ndim(input) == 1:
            dx = dx[0]
    return dx, (dw, db)


def relu(input):
    return np.maximum(input, 0.0)


def relu_backward(input, upstream_grad):
    return np.where(np.asarray(input) > 0, upstream_grad, 0.0)


def avgpool2(input):
    x = np.asarray(input, dtype=np.float64)
    H, W = x.shape[-2:]
    if H % 2:
        raise DimensionError("avgpool2", "height", "even", H)
    if W % 2:
        raise DimensionError("avgpool2", "width", "even", W)
    return x.reshape(*x.shape[:-2], H // 2, 2, W // 2, 2).mean(axis=(-3, -1))


def avgpool2_backward(upstream_grad):
    g = np.asarray(upstream_grad) * 0.25
    return np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)


def sgd_step(params, learning_rate: float, momentum: float = 0.9):
    """Momentum SGD on one LayerParams or an iterable of them; zeroes gradients after."""
    if learning_rate < 0:
        raise ValueError("learning_rate must be non-negative")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must be in [0, 1)")
    group = [params] if isinstance(params, LayerParams) else list(params)
    for p in group:
        if p.frozen:
            continue
        for tag, grad in (("weight", p.grad_weight), ("bias", p.grad_bias)):
            if not np.all(np.isfinite(grad)):
                raise NumericalError(f"non-finite gradient in {p.name or '<unnamed>'}.{tag}")
    for p in group:
        if p.frozen:
            continue
        p.mom_weight *= momentum
        p.mom_weight += p.grad_weight
        p.mom_bias *= momentum
        p.mom_bias += p.grad_bias
        p.weight -= learning_rate * p.mom_weight
        p.bias -= learning_rate * p.mom_bias
        p.zero_grad()
    return params


class Stack:
    """A feed-forward chain of conv / relu / pool / flatten / fc layers.

    ``spec`` items are ``("conv", LayerParams)``, ``("fc", LayerParams)``,
    ``("relu",)``, ``("pool",)`` or ``("flatten",)``.
    """

    def __init__(self, spec):
        self.spec = list(spec)

    @property
    def params(self):
        return [item[1] for item in self.spec if item[0] in ("conv", "fc")]

    def forward(self, x):
        cache = []
        for item in self.spec:
            kind = item[0]
            cache.append(x)
            if kind == "conv":
                x = conv2d_forward(x, item[1])
            elif kind == "fc":
                x = fc_forward(x, item[1])
            elif kind == "relu":
                x = relu(x)
            elif kind == "pool":
                x = avgpool2(x)
            elif kind == "flatten":
                x = x.reshape(x.shape[0], -1)
        return x, cache

    def backward(self, cache, grad, need_input_grad=True):
        for idx in range(len(self.spec) - 1, -1, -1):
            item, x = self.spec[idx], cache[idx]
            kind = item[0]
            want = need_input_grad or idx > 0
            if kind == "conv":
                grad, _ = conv2d_backward(x, item[1], grad, need_input_grad=want)
            elif kind == "fc":
                grad, _ = fc_backward(x, item[1], grad, need_input_grad=want)
            elif kind == "relu":
                grad = relu_backward(x, grad)
            elif kind == "pool":
                grad = avgpool2_backward(grad)
            elif kind == "flatten":
                grad = grad.reshape(x.shape)
            if grad is None:
                break
        return grad

    def relu_masks(self, cache):
        """Sign patterns at every relu input; used to detect kink crossings."""
        return [cache[i] > 0 for i, item in enumerate(self.spec) if item[0] == "relu"]


def conv_stack(in_ch, in_size, plan, fc_sizes, rng, prefix, final_relu=False):
    """Build conv(k)->relu->pool blocks then fc layers with relu between them.

    ``plan`` is a list of (out_channels, kernel). Returns (Stack, flat_dim).
    """
    spec, ch, size = [], in_ch, in_size
    for i, (out_ch, k) in enumerate(plan):
        if size < k:
            raise DimensionError(prefix, "spatial", f">= {k}", size)
        spec.append(("conv", LayerParams.uniform((out_ch, ch, k, k), rng, f"{prefix}.conv{i}")))
        spec.append(("relu",))
        size = size - k + 1
        if size % 2:
            raise DimensionError(prefix, "spatial", "even after conv", size)
        spec.append(("pool",))
        size //= 2
        ch = out_ch
    spec.append(("flatten",))
    flat = ch * size * size
    width = flat
    for i, out in enumerate(fc_sizes):
        if i:
            spec.append(("relu",))
        spec.append(("fc", LayerParams.uniform((out, width), rng, f"{prefix}.fc{i}")))
        width = out
    if final_relu:
        spec.append(("relu",))
    return Stack(spec), flat
