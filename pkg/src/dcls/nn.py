"""Minimal layer stack with manual backward passes.

Layers expose ``forward(x)`` / ``backward(grad)`` and a ``params()`` list of
:class:`Param`. Parameters are float64; activations run in the network's
dtype (float32 for training speed, float64 for gradient checks).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conv import ConvSpec, conv_backward, conv_forward, same_padding
from .exceptions import ShapeMismatchError
from .interp import InterpolationKind
from .kernelgen import (
    ConstructedKernel,
    DclsGeometry,
    DclsParams,
    clamp_positions,
    construct_kernel,
    construct_kernel_backward,
)

PARAM_KINDS = ("weight", "position", "sigma", "other")


@dataclass(eq=False)
class Param:
    name: str
    value: np.ndarray
    kind: str = "weight"
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in PARAM_KINDS:
            raise ValueError(f"unknown parameter kind {self.kind!r}")
        self.value = np.array(self.value, dtype=np.float64, order="C")
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


class Layer:
    def params(self) -> list[Param]:
        return []

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class SyncGroup:
    """Positions and widths shared by several DCLS layers.

    Members keep private weights; every member's backward adds into the
    shared gradients, so the shared gradient is the sum over members.
    """

    def __init__(self, name: str, shape: tuple[int, int, int], rank: int):
        self.name = name
        self.shape = tuple(shape)
        zeros = np.zeros(self.shape)
        self.positions = tuple(Param(f"{name}.p{a}", zeros, "position") for a in range(rank))
        self.sigmas = tuple(Param(f"{name}.sig{a}", zeros, "sigma") for a in range(rank))
        self.members: list[DclsConv] = []

    def attach(self, layer: DclsConv) -> None:
        if layer.weight.value.shape != self.shape:
            raise ShapeMismatchError(
                f"layer {layer.name} has parameter shape {layer.weight.value.shape}, "
                f"sync group {self.name} expects {self.shape}"
            )
        self.members.append(layer)


class DclsConv(Layer):
    """Convolution whose kernel is built from learnable element positions."""

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel_count: int,
        dilated_kernel_size,
        kind="gauss",
        groups: int | None = None,
        stride=1,
        padding=None,
        bias: bool = True,
        sync: SyncGroup | None = None,
    ):
        self.name = name
        self.kind = InterpolationKind.from_name(kind)
        self.groups = in_channels if groups is None else groups
        self.geom = DclsGeometry(tuple(np.atleast_1d(dilated_kernel_size)), kernel_count)
        pad = same_padding(self.geom.dilated_kernel_size) if padding is None else padding
        self.spec = ConvSpec(stride, pad, self.groups)
        shape = (out_channels, in_channels // self.groups, kernel_count)
        rank = self.geom.rank
        self.weight = Param(f"{name}.w", np.zeros(shape), "weight")
        if sync is None:
            self.positions = tuple(Param(f"{name}.p{a}", np.zeros(shape), "position") for a in range(rank))
            self.sigmas = tuple(Param(f"{name}.sig{a}", np.zeros(shape), "sigma") for a in range(rank))
        else:
            self.positions, self.sigmas = sync.positions, sync.sigmas
        self.sync = sync
        if sync is not None:
            sync.attach(self)
        self.bias = Param(f"{name}.b", np.zeros(out_channels), "other") if bias else None
        self._cache = None

    def params(self):
        out = [self.weight, *self.positions, *self.sigmas]
        return out + ([self.bias] if self.bias is not None else [])

    def dcls_params(self) -> DclsParams:
        return DclsParams(
            self.weight.value,
            tuple(p.value for p in self.positions),
            tuple(s.value for s in self.sigmas),
        )

    def set_dcls_params(self, params: DclsParams) -> None:
        self.weight.value[...] = params.weights
        for dst, src in zip(self.positions, params.positions):
            dst.value[...] = src
        for dst, src in zip(self.sigmas, params.sigmas):
            dst.value[...] = src

    def kernel(self, keep_cache=False) -> ConstructedKernel:
        return construct_kernel(self.dcls_params(), self.geom, self.kind, keep_cache=keep_cache)

    def forward(self, x):
        y, self._cache = dcls_layer_forward(x, self.dcls_params(), self.geom, self.kind, self.spec)
        if self.bias is not None:
            y += self.bias.value.astype(y.dtype).reshape((1, -1) + (1,) * self.geom.rank)
        return y

    def backward(self, grad):
        grad_x, g = dcls_layer_backward(self._cache, grad)
        self.weight.grad += g.weights
        for p, gp in zip(self.positions, g.positions):
            p.grad += gp
        for s, gs in zip(self.sigmas, g.sigmas):
            s.grad += gs
        if self.bias is not None:
            self.bias.grad += grad.sum(axis=(0,) + tuple(range(2, grad.ndim)), dtype=np.float64)
        return grad_x

    def post_step(self):
        clamped = clamp_positions(self.dcls_params(), self.geom, self.kind)
        for dst, src in zip(self.positions, clamped.positions):
            dst.value[...] = src


def dcls_layer_forward(x, params: DclsParams, geom: DclsGeometry, kind, spec: ConvSpec):
    """Build the kernel and convolve. Returns ``(output, cache)``."""
    ck = construct_kernel(params, geom, kind, keep_cache=True)
    kernel = ck.kernel.astype(x.dtype, copy=False)
    return conv_forward(x, kernel, spec), (x, kernel, spec, ck)


def dcls_layer_backward(cache, grad_out):
    """Returns ``(grad_input, DclsParams of gradients)``."""
    x, kernel, spec, ck = cache
    grad_x, grad_k = conv_backward(x, kernel, spec, grad_out)
    return grad_x, construct_kernel_backward(ck, grad_k.astype(np.float64))


class Pointwise(Layer):
    """1x1 convolution, i.e. a per-position linear map over channels."""

    def __init__(self, name, in_channels, out_channels, bias=True):
        self.name = name
        self.weight = Param(f"{name}.w", np.zeros((out_channels, in_channels)), "weight")
        self.bias = Param(f"{name}.b", np.zeros(out_channels), "other") if bias else None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x):
        self._x = x
        n, c = x.shape[:2]
        w = self.weight.value.astype(x.dtype)
        y = np.matmul(w, x.reshape(n, c, -1)).reshape((n, w.shape[0]) + x.shape[2:])
        if self.bias is not None:
            y += self.bias.value.astype(x.dtype).reshape((1, -1) + (1,) * (x.ndim - 2))
        return y

    def backward(self, grad):
        x = self._x
        n, c = x.shape[:2]
        g = grad.reshape(n, grad.shape[1], -1)
        xf = x.reshape(n, c, -1)
        self.weight.grad += np.einsum("nol,ncl->oc", g, xf).astype(np.float64)
        if self.bias is not None:
            self.bias.grad += g.sum(axis=(0, 2), dtype=np.float64)
        w = self.weight.value.astype(x.dtype)
        return np.matmul(w.T, g).reshape(x.shape)


class ReLU(Layer):
    """Rectifier; ``slope > 0`` gives the leaky variant."""

    def __init__(self, slope: float = 0.0):
        self.slope = slope

    def forward(self, x):
        self._scale = np.where(x > 0, 1.0, self.slope).astype(x.dtype)
        return x * self._scale

    def backward(self, grad):
        return grad * self._scale


class GlobalPool(Layer):
    """Global max or average over all spatial positions: ``(N, C, ...) -> (N, C)``."""

    def __init__(self, mode="max"):
        if mode not in ("max", "avg"):
            raise ValueError(f"pool mode must be 'max' or 'avg', got {mode!r}")
        self.mode = mode

    def forward(self, x):
        self._shape = x.shape
        flat = x.reshape(x.shape[0], x.shape[1], -1)
        if self.mode == "avg":
            return flat.mean(axis=2)
        self._arg = flat.argmax(axis=2)
        return np.take_along_axis(flat, self._arg[..., None], axis=2)[..., 0]

    def backward(self, grad):
        n, c = self._shape[:2]
        size = int(np.prod(self._shape[2:]))
        if self.mode == "avg":
            out = np.broadcast_to((grad / size)[..., None], (n, c, size)).copy()
        else:
            out = np.zeros((n, c, size), dtype=grad.dtype)
            np.put_along_axis(out, self._arg[..., None], grad[..., None], axis=2)
        return out.reshape(self._shape)


class Linear(Layer):
    def __init__(self, name, in_features, out_features):
        self.name = name
        self.weight = Param(f"{name}.w", np.zeros((out_features, in_features)), "weight")
        self.bias = Param(f"{name}.b", np.zeros(out_features), "other")

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        self._x = x
        return x @ self.weight.value.T.astype(x.dtype) + self.bias.value.astype(x.dtype)

    def backward(self, grad):
        self.weight.grad += (grad.T @ self._x).astype(np.float64)
        self.bias.grad += grad.sum(axis=0, dtype=np.float64)
        return grad @ self.weight.value.astype(grad.dtype)


class Sequential(Layer):
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        seen, out = set(), []
        for layer in self.layers:
            for p in layer.params():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def dcls_layers(self) -> list[DclsConv]:
        return [layer for layer in self.layers if isinstance(layer, DclsConv)]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def post_step(self):
        for layer in self.dcls_layers():
            layer.post_step()


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
