"""N-D grouped convolution (cross-correlation, zero padding) with exact backward.

Tensors are C-contiguous numpy arrays in ``(batch, channels, *spatial)``
layout; kernels are ``(out_channels, in_channels // groups, *kernel_size)``.
The general path loops over kernel offsets and accumulates strided views of
the padded input. Depthwise 1-D/2-D convolutions (one input and one output
channel per group), the hot path of DCLS networks, instead unroll each
kernel row into a banded (Toeplitz) matrix so the work becomes one batched
matmul per kernel.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .exceptions import GroupDivisibilityError, ShapeMismatchError


@dataclass(frozen=True)
class ConvSpec:
    stride: tuple[int, ...] | int = 1
    padding: tuple[int, ...] | int = 0
    groups: int = 1

    def resolve(self, rank: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        stride = _expand(self.stride, rank, "stride")
        padding = _expand(self.padding, rank, "padding")
        if min(stride) < 1:
            raise ValueError(f"stride must be >= 1, got {stride}")
        if min(padding) < 0:
            raise ValueError(f"padding must be >= 0, got {padding}")
        return stride, padding


def same_padding(kernel_size) -> tuple[int, ...]:
    return tuple(int(s) // 2 for s in kernel_size)


def _expand(value, rank, name):
    if np.isscalar(value):
        return (int(value),) * rank
    value = tuple(int(v) for v in value)
    if len(value) != rank:
        raise ValueError(f"{name} has {len(value)} entries for a rank-{rank} convolution")
    return value


def output_shape(in_spatial, kernel_spatial, stride, padding) -> tuple[int, ...]:
    out = tuple(
        (n + 2 * p - k) // s + 1
        for n, k, s, p in zip(in_spatial, kernel_spatial, stride, padding)
    )
    if min(out) < 1:
        raise ShapeMismatchError(
            f"kernel {tuple(kernel_spatial)} does not fit input {tuple(in_spatial)} "
            f"with padding {padding}"
        )
    return out


def _check(x, kernel, spec):
    if x.ndim != kernel.ndim or x.ndim < 3:
        raise ShapeMismatchError(
            f"input {x.shape} and kernel {kernel.shape} must both be (N|C_out, C, *spatial)"
        )
    rank = x.ndim - 2
    g = spec.groups
    c_in, c_out = x.shape[1], kernel.shape[0]
    if g < 1 or c_in % g or c_out % g:
        raise GroupDivisibilityError(
            f"groups={g} must divide in_channels={c_in} and out_channels={c_out}"
        )
    if kernel.shape[1] != c_in // g:
        raise ShapeMismatchError(
            f"kernel expects {kernel.shape[1]} channels per group, input has {c_in // g}"
        )
    stride, padding = spec.resolve(rank)
    out = output_shape(x.shape[2:], kernel.shape[2:], stride, padding)
    return rank, stride, padding, out


def _pad(x, padding):
    if not any(padding):
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])


def _window(offset, out, stride):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, n, s in zip(offset, out, stride))


def _is_depthwise(x, kernel, groups):
    return kernel.shape[1] == 1 and kernel.shape[0] == groups == x.shape[1]


def _as_2d(x, kernel, stride, padding):
    if x.ndim == 3:
        return x[:, :, None, :], kernel[:, :, None, :], (1,) + stride, (0,) + padding
    return x, kernel, stride, padding


def _row_toeplitz(kc, wp, wo, sx):
    # T[c, i, ox*sx + j, ox] = kc[c, i, j]
    c, kh, kw = kc.shape
    t = np.zeros((c, kh, wp, wo), dtype=kc.dtype)
    ox = np.arange(wo)
    for j in range(kw):
        t[:, :, ox * sx + j, ox] = kc[:, :, j][..., None]
    return t


def _gather_rows(xp, kh, ho, sy):
    # rows[c, n, oy, i, :] = xp[n, c, oy*sy + i, :]
    n, c, _, wp = xp.shape
    rows = np.empty((c, n, ho, kh, wp), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        rows[:, :, :, i, :] = xt[:, :, i:i + sy * (ho - 1) + 1:sy, :]
    return rows


def _dw_forward(x, kernel, stride, padding, out):
    x2, k2, stride, padding = _as_2d(x, kernel, stride, padding)
    out2 = out if x.ndim == 4 else (1,) + out
    dtype = np.result_type(x2, k2)
    xp = _pad(x2.astype(dtype, copy=False), padding)
    n, c, _, wp = xp.shape
    kh, (ho, wo) = k2.shape[2], out2
    t = _row_toeplitz(k2[:, 0].astype(dtype, copy=False), wp, wo, stride[1])
    rows = _gather_rows(xp, kh, ho, stride[0])
    y = np.matmul(rows.reshape(c, n * ho, kh * wp), t.reshape(c, kh * wp, wo))
    y = y.reshape((c, n) + out2).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(y.reshape((n, c) + out))


def _dw_backward(x, kernel, stride, padding, out, grad_out):
    x2, k2, stride, padding = _as_2d(x, kernel, stride, padding)
    out2 = out if x.ndim == 4 else (1,) + out
    dtype = np.result_type(x2, k2, grad_out)
    xp = _pad(x2.astype(dtype, copy=False), padding)
    n, c, _, wp = xp.shape
    kh, kw = k2.shape[2:]
    ho, wo = out2
    sy, sx = stride
    t = _row_toeplitz(k2[:, 0].astype(dtype, copy=False), wp, wo, sx)
    rows = _gather_rows(xp, kh, ho, sy)
    g = np.ascontiguousarray(grad_out.reshape((n, c) + out2).transpose(1, 0, 2, 3))
    g = g.reshape(c, n * ho, wo).astype(dtype, copy=False)

    grad_rows = np.matmul(g, t.reshape(c, kh * wp, wo).transpose(0, 2, 1))
    grad_rows = grad_rows.reshape(c, n, ho, kh, wp)
    grad_t = np.matmul(rows.reshape(c, n * ho, kh * wp).transpose(0, 2, 1), g)
    grad_t = grad_t.reshape(c, kh, wp, wo)

    grad_xt = np.zeros((c, n) + xp.shape[2:], dtype=dtype)
    for i in range(kh):
        grad_xt[:, :, i:i + sy * (ho - 1) + 1:sy, :] += grad_rows[:, :, :, i, :]
    ox = np.arange(wo)
    grad_k = np.empty((c, 1, kh, kw), dtype=dtype)
    for j in range(kw):
        grad_k[:, 0, :, j] = grad_t[:, :, ox * sx + j, ox].sum(axis=-1)

    hp, wpad = xp.shape[2:]
    grad_x = grad_xt.transpose(1, 0, 2, 3)[:, :, padding[0]:hp - padding[0], padding[1]:wpad - padding[1]]
    return (
        np.ascontiguousarray(grad_x.reshape(x.shape)),
        grad_k.reshape(kernel.shape),
    )


def conv_forward(x: np.ndarray, kernel: np.ndarray, spec: ConvSpec = ConvSpec()) -> np.ndarray:
    rank, stride, padding, out = _check(x, kernel, spec)
    if rank <= 2 and _is_depthwise(x, kernel, spec.groups):
        return _dw_forward(x, kernel, stride, padding, out)
    n, c_in = x.shape[:2]
    c_out = kernel.shape[0]
    g = spec.groups
    xp = _pad(x, padding)
    dtype = np.result_type(x, kernel)
    y = np.zeros((n, c_out) + out, dtype=dtype)

    depthwise = kernel.shape[1] == 1 and c_out == g
    lead = (slice(None), slice(None))
    bcast = (None, slice(None)) + (None,) * rank
    if not depthwise:
        kg = kernel.reshape((g, c_out // g, c_in // g) + kernel.shape[2:])
        yg = y.reshape((n, g, c_out // g) + out)
    for offset in itertools.product(*(range(k) for k in kernel.shape[2:])):
        win = xp[lead + _window(offset, out, stride)]
        if depthwise:
            y += win * kernel[(slice(None), 0) + offset][bcast]
        else:
            wg = win.reshape((n, g, c_in // g) + out)
            yg += np.einsum("goc,ngc...->ngo...", kg[(Ellipsis,) + offset], wg)
    return y


def conv_backward(
    x: np.ndarray,
    kernel: np.ndarray,
    spec: ConvSpec,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * conv_forward(x, kernel, spec))``."""
    rank, stride, padding, out = _check(x, kernel, spec)
    n, c_in = x.shape[:2]
    c_out = kernel.shape[0]
    if grad_out.shape != (n, c_out) + out:
        raise ShapeMismatchError(
            f"grad_out shape {grad_out.shape} != output shape {(n, c_out) + out}"
        )
    if rank <= 2 and _is_depthwise(x, kernel, spec.groups):
        return _dw_backward(x, kernel, stride, padding, out, grad_out)
    g = spec.groups
    xp = _pad(x, padding)
    dtype = np.result_type(x, kernel, grad_out)
    grad_xp = np.zeros(xp.shape, dtype=dtype)
    grad_k = np.zeros(kernel.shape, dtype=dtype)

    depthwise = kernel.shape[1] == 1 and c_out == g
    lead = (slice(None), slice(None))
    bcast = (None, slice(None)) + (None,) * rank
    red_axes = (0,) + tuple(range(2, 2 + rank))
    if not depthwise:
        kg = kernel.reshape((g, c_out // g, c_in // g) + kernel.shape[2:])
        gkg = grad_k.reshape(kg.shape)
        go = grad_out.reshape((n, g, c_out // g) + out)
    for offset in itertools.product(*(range(k) for k in kernel.shape[2:])):
        sl = lead + _window(offset, out, stride)
        win = xp[sl]
        if depthwise:
            grad_k[(slice(None), 0) + offset] = (grad_out * win).sum(axis=red_axes)
            grad_xp[sl] += grad_out * kernel[(slice(None), 0) + offset][bcast]
        else:
            wg = win.reshape((n, g, c_in // g) + out)
            gkg[(Ellipsis,) + offset] = np.einsum(
                "ngol,ngcl->goc", go.reshape(go.shape[:3] + (-1,)), wg.reshape(wg.shape[:3] + (-1,))
            )
            contrib = np.einsum("goc,ngo...->ngc...", kg[(Ellipsis,) + offset], go)
            grad_xp[sl] += contrib.reshape((n, c_in) + out)

    unpad = lead + tuple(slice(p, p + s) for p, s in zip(padding, x.shape[2:]))
    return np.ascontiguousarray(grad_xp[unpad]), grad_k
