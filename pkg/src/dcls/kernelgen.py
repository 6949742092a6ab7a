"""Dense kernel construction from learnable weights, positions and widths.

Every kernel element ``k`` of every ``(out_channel, in_channel)`` pair owns a
weight, one position per spatial axis and one raw width per spatial axis.
Positions are in grid units with the origin at the kernel centre
(``s // 2`` along each axis). The element is spread over the whole grid as
the product of per-axis interpolation profiles, normalized to unit mass, and
scaled by its weight; elements are summed in ascending ``k``.
"""
from __future__ import annotations

import math
import string
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import MissingCacheError, NonFiniteError, ShapeMismatchError
from .interp import InterpolationKind, interp_eval_grad

EPS = 1e-7
CLAMP_MARGIN = 1e-6


@dataclass(frozen=True)
class DclsGeometry:
    dilated_kernel_size: tuple[int, ...]
    kernel_count: int

    def __post_init__(self):
        size = tuple(int(s) for s in np.atleast_1d(self.dilated_kernel_size))
        object.__setattr__(self, "dilated_kernel_size", size)
        if not 1 <= len(size) <= 3:
            raise ValueError(f"spatial rank must be 1, 2 or 3, got {len(size)}")
        if min(size) < 1:
            raise ValueError(f"dilated kernel size must be >= 1, got {size}")
        if int(self.kernel_count) < 1:
            raise ValueError(f"kernel count must be >= 1, got {self.kernel_count}")

    @property
    def rank(self) -> int:
        return len(self.dilated_kernel_size)

    @property
    def centre(self) -> tuple[int, ...]:
        return tuple(s // 2 for s in self.dilated_kernel_size)


@dataclass
class DclsParams:
    """Learnable tensors of one DCLS layer.

    ``weights`` and every entry of ``positions`` / ``sigmas`` have shape
    ``(out_channels, in_channels // groups, kernel_count)``; there is one
    position and one raw width tensor per spatial axis.
    """

    weights: np.ndarray
    positions: tuple[np.ndarray, ...]
    sigmas: tuple[np.ndarray, ...]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.positions = tuple(np.asarray(p, dtype=np.float64) for p in self.positions)
        self.sigmas = tuple(np.asarray(s, dtype=np.float64) for s in self.sigmas)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.weights.shape

    @property
    def rank(self) -> int:
        return len(self.positions)

    def arrays(self) -> list[np.ndarray]:
        return [self.weights, *self.positions, *self.sigmas]

    def copy(self) -> DclsParams:
        return DclsParams(
            self.weights.copy(),
            tuple(p.copy() for p in self.positions),
            tuple(s.copy() for s in self.sigmas),
        )

    def check(self, geom: DclsGeometry | None = None) -> None:
        if self.weights.ndim != 3:
            raise ShapeMismatchError(
                f"weights must be (out, in/groups, count), got shape {self.weights.shape}"
            )
        if len(self.positions) != len(self.sigmas):
            raise ShapeMismatchError(
                f"{len(self.positions)} position tensors but {len(self.sigmas)} sigma tensors"
            )
        for a in self.arrays():
            if a.shape != self.weights.shape:
                raise ShapeMismatchError(
                    f"parameter tensors differ in shape: {a.shape} vs {self.weights.shape}"
                )
            if not np.all(np.isfinite(a)):
                raise NonFiniteError("DCLS parameters contain NaN or Inf")
        if geom is not None:
            if geom.rank != self.rank:
                raise ShapeMismatchError(
                    f"geometry has rank {geom.rank}, parameters have rank {self.rank}"
                )
            if self.weights.shape[2] != geom.kernel_count:
                raise ShapeMismatchError(
                    f"kernel count {geom.kernel_count} != parameter count {self.weights.shape[2]}"
                )


@dataclass
class ConstructedKernel:
    """Dense kernel ``(out, in/groups, *dilated_kernel_size)`` plus backward cache."""

    kernel: np.ndarray
    geometry: DclsGeometry
    kind: InterpolationKind
    cache: dict | None = field(default=None, repr=False)

    @property
    def normalized_maps(self) -> np.ndarray:
        if self.cache is None:
            raise MissingCacheError("kernel was built without a cache")
        return self.cache["maps"]

    @property
    def map_sums(self) -> np.ndarray:
        """Un-normalized per-element mass ``(out, in/groups, count)``."""
        if self.cache is None:
            raise MissingCacheError("kernel was built without a cache")
        return self.cache["sums"]


def _outer(profiles: Sequence[np.ndarray]) -> np.ndarray:
    # (..., s0), (..., s1), ... -> (..., s0, s1, ...)
    out = profiles[0]
    for prof in profiles[1:]:
        out = out[..., None] * prof.reshape(prof.shape[:-1] + (1,) * (out.ndim - prof.ndim + 1) + prof.shape[-1:])
    return out


def _contract_except(grad: np.ndarray, profiles: Sequence[np.ndarray], axis: int) -> np.ndarray:
    """Sum ``grad * prod_{b != axis} profiles[b]`` over every grid axis but ``axis``."""
    rank = len(profiles)
    letters = string.ascii_lowercase[:rank]
    terms = [f"...{letters}"] + [f"...{letters[b]}" for b in range(rank) if b != axis]
    spec = ",".join(terms) + f"->...{letters[axis]}"
    operands = [grad] + [profiles[b] for b in range(rank) if b != axis]
    return np.einsum(spec, *operands)


def construct_kernel(
    params: DclsParams,
    geom: DclsGeometry,
    kind: InterpolationKind | str,
    keep_cache: bool = True,
) -> ConstructedKernel:
    kind = InterpolationKind.from_name(kind)
    params.check(geom)
    rank = geom.rank
    grid_axes = tuple(range(-rank, 0))

    profiles, dx, dsig = [], [], []
    for a, s in enumerate(geom.dilated_kernel_size):
        idx = np.arange(s, dtype=np.float64)
        x = (params.positions[a] + s // 2)[..., None] - idx
        f, fx, fs = interp_eval_grad(kind, x, params.sigmas[a][..., None])
        profiles.append(f)
        dx.append(fx)
        dsig.append(fs)

    raw = _outer(profiles)
    sums = raw.sum(axis=grid_axes)
    denom = EPS + sums
    maps = raw / denom.reshape(denom.shape + (1,) * rank)

    w = params.weights
    expand = (slice(None), slice(None)) + (None,) * rank
    kernel = w[:, :, 0][expand] * maps[:, :, 0]
    for k in range(1, geom.kernel_count):
        kernel = kernel + w[:, :, k][expand] * maps[:, :, k]

    cache = None
    if keep_cache:
        cache = {
            "maps": maps,
            "sums": sums,
            "denom": denom,
            "weights": w.copy(),
            "profiles": profiles,
            "dx": dx,
            "dsig": dsig,
        }
    return ConstructedKernel(kernel, geom, kind, cache)


def construct_kernel_backward(ck: ConstructedKernel, grad_kernel: np.ndarray) -> DclsParams:
    """Gradients of a loss w.r.t. ``(weights, positions, sigmas)``.

    Returned as a :class:`DclsParams` holding gradients in place of values.
    """
    if ck.cache is None:
        raise MissingCacheError("construct_kernel_backward needs a kernel built with keep_cache=True")
    grad_kernel = np.asarray(grad_kernel, dtype=np.float64)
    if grad_kernel.shape != ck.kernel.shape:
        raise ShapeMismatchError(
            f"gradient shape {grad_kernel.shape} != kernel shape {ck.kernel.shape}"
        )
    c = ck.cache
    rank = ck.geometry.rank
    grid_axes = tuple(range(-rank, 0))
    maps, denom, w = c["maps"], c["denom"], c["weights"]

    g = grad_kernel[:, :, None]
    grad_w = (g * maps).sum(axis=grid_axes)
    # quotient rule through maps = raw / (eps + sum(raw))
    scale = (w / denom).reshape(w.shape + (1,) * rank)
    grad_raw = scale * (g - grad_w.reshape(grad_w.shape + (1,) * rank))

    grad_p, grad_s = [], []
    for a in range(rank):
        grad_prof = _contract_except(grad_raw, c["profiles"], a)
        grad_p.append((grad_prof * c["dx"][a]).sum(axis=-1))
        grad_s.append((grad_prof * c["dsig"][a]).sum(axis=-1))
    return DclsParams(grad_w, tuple(grad_p), tuple(grad_s))


def clamp_positions(params: DclsParams, geom: DclsGeometry, kind: InterpolationKind | str) -> DclsParams:
    """Keep bilinear elements inside the grid; identity for other kinds.

    Centred positions are clipped to ``[-s//2, s - 1 - s//2 - 1e-6]`` per axis.
    """
    kind = InterpolationKind.from_name(kind)
    if not kind.clamp_positions:
        return params
    clamped = []
    for p, s in zip(params.positions, geom.dilated_kernel_size):
        lo = -(s // 2)
        hi = s - 1 - s // 2 - CLAMP_MARGIN
        clamped.append(np.clip(p, lo, hi))
    return DclsParams(params.weights, tuple(clamped), params.sigmas)


# ---------------------------------------------------------------- golden I/O
#
# One record per line, ';'-separated key=value fields:
#   kind=<name>;size=<s0,s1,..>;shape=<out,in,count>;w=<..>;p0=<..>;...;sig0=<..>;...;K=<..>
# Numbers are comma-separated and written with 17 significant digits, in
# row-major order of their tensors.


def _fmt(values: np.ndarray) -> str:
    return ",".join(f"{v:.17g}" for v in np.asarray(values, dtype=np.float64).ravel())


def format_golden_record(params: DclsParams, geom: DclsGeometry, kind: InterpolationKind | str) -> str:
    kind = InterpolationKind.from_name(kind)
    ck = construct_kernel(params, geom, kind, keep_cache=False)
    fields = [
        f"kind={kind.name}",
        "size=" + ",".join(map(str, geom.dilated_kernel_size)),
        "shape=" + ",".join(map(str, params.shape)),
        "w=" + _fmt(params.weights),
    ]
    fields += [f"p{a}=" + _fmt(p) for a, p in enumerate(params.positions)]
    fields += [f"sig{a}=" + _fmt(s) for a, s in enumerate(params.sigmas)]
    fields.append("K=" + _fmt(ck.kernel))
    return ";".join(fields)


def parse_golden_record(line: str) -> tuple[DclsParams, DclsGeometry, InterpolationKind, np.ndarray]:
    try:
        rec = dict(item.split("=", 1) for item in line.strip().split(";"))
        kind = InterpolationKind.from_name(rec["kind"])
        size = tuple(int(v) for v in rec["size"].split(","))
        shape = tuple(int(v) for v in rec["shape"].split(","))

        def arr(key, shp):
            values = np.array([float(v) for v in rec[key].split(",")])
            return values.reshape(shp)

        rank = len(size)
        params = DclsParams(
            arr("w", shape),
            tuple(arr(f"p{a}", shape) for a in range(rank)),
            tuple(arr(f"sig{a}", shape) for a in range(rank)),
        )
        geom = DclsGeometry(size, shape[2])
        expected = arr("K", shape[:2] + size)
    except (KeyError, ValueError) as exc:
        raise ValueError(f"malformed golden record: {exc}") from exc
    return params, geom, kind, expected


def kernel_mass_fraction(kernel: np.ndarray, centre: Sequence[int], radius: int = 1) -> float:
    """Fraction of ``sum(kernel)`` lying in the box of half-width ``radius`` at ``centre``."""
    box = tuple(slice(max(c - radius, 0), c + radius + 1) for c in centre)
    total = float(kernel.sum())
    return float(kernel[box].sum()) / total if total != 0 else math.nan
