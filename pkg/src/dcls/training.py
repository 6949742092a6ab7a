"""Initialization, parameter grouping, optimizers and checkpoints.

Positions and widths are optimized with a larger learning rate than
weights and never receive weight decay; bilinear positions are clamped back
into the grid after every step.
"""
from __future__ import annotations

import functools
import json
import operator
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, NonFiniteError, ShapeMismatchError
from .interp import InterpolationKind, Kind
from .kernelgen import DclsGeometry, DclsParams, clamp_positions
from .nn import Param

POSITION_INIT_STD = 0.5
GAUSS_SIGMA_INIT = 0.23
DEFAULT_LR_SCALE = 5.0


def init_params(geom: DclsGeometry, kind, shape, rng) -> DclsParams:
    """Draw initial ``(weights, positions, sigmas)`` for a layer.

    ``shape`` is ``(out_channels, in_channels // groups)``; ``rng`` is a seed or
    a ``numpy.random.Generator``. Weights are uniform in ``+-1/sqrt(fan_in * m)``
    with ``fan_in = in_channels // groups``; positions are N(0, 0.5^2) around
    the kernel centre; raw widths start at 0.23 for Gauss (effective width
    0.5) and 0 otherwise.
    """
    kind = InterpolationKind.from_name(kind)
    rng = np.random.default_rng(rng)
    full = tuple(shape) + (geom.kernel_count,)
    bound = 1.0 / np.sqrt(shape[1] * geom.kernel_count)
    weights = rng.uniform(-bound, bound, size=full)
    positions = tuple(rng.normal(0.0, POSITION_INIT_STD, size=full) for _ in range(geom.rank))
    sigma0 = GAUSS_SIGMA_INIT if kind.kind is Kind.GAUSS else 0.0
    sigmas = tuple(np.full(full, sigma0) for _ in range(geom.rank))
    return clamp_positions(DclsParams(weights, positions, sigmas), geom, kind)


def init_dense(shape, fan_in, rng) -> np.ndarray:
    """He-uniform init for layers followed by a rectifier."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ParamGroup:
    param_kind: str
    lr_scale: float
    weight_decay_enabled: bool
    params: list[Param] = field(default_factory=list)


def build_param_groups(params, lr_scale_positions: float = DEFAULT_LR_SCALE) -> list[ParamGroup]:
    """One group per parameter kind, in the fixed order weight, position, sigma, other."""
    groups = {
        "weight": ParamGroup("weight", 1.0, True),
        "position": ParamGroup("position", lr_scale_positions, False),
        "sigma": ParamGroup("sigma", lr_scale_positions, False),
        "other": ParamGroup("other", 1.0, False),
    }
    for p in params:
        groups[p.kind].params.append(p)
    return [g for g in groups.values() if g.params]


def _check_finite(groups):
    for g in groups:
        for p in g.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient for {p.name}")


class SGD:
    """Plain SGD with decoupled weight decay: ``w -= lr*g + lr*wd*w`` (decay only
    where the group allows it)."""

    name = "sgd"

    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.steps = 0

    def step(self, groups):
        _check_finite(groups)
        for g in groups:
            lr = self.lr * g.lr_scale
            wd = self.weight_decay if g.weight_decay_enabled else 0.0
            for p in g.params:
                update = lr * p.grad
                if wd:
                    update = update + lr * wd * p.value
                p.value -= update
        self.steps += 1

    def state_dict(self):
        return {"scalars": {"steps": self.steps}, "arrays": {}}

    def load_state_dict(self, state, params):
        self.steps = int(state["scalars"]["steps"])


class AdamW:
    """Adam with decoupled weight decay."""

    name = "adamw"

    def __init__(self, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.steps = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, groups):
        _check_finite(groups)
        self.steps += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.steps
        c2 = 1.0 - b2**self.steps
        for g in groups:
            lr = self.lr * g.lr_scale
            wd = self.weight_decay if g.weight_decay_enabled else 0.0
            for p in g.params:
                m = self.m.setdefault(p.name, np.zeros_like(p.value))
                v = self.v.setdefault(p.name, np.zeros_like(p.value))
                m *= b1
                m += (1 - b1) * p.grad
                v *= b2
                v += (1 - b2) * p.grad**2
                if wd:
                    p.value -= lr * wd * p.value
                p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        arrays = {f"m/{k}": v for k, v in self.m.items()}
        arrays.update({f"v/{k}": v for k, v in self.v.items()})
        return {"scalars": {"steps": self.steps}, "arrays": arrays}

    def load_state_dict(self, state, params):
        self.steps = int(state["scalars"]["steps"])
        self.m = {k[2:]: v.copy() for k, v in state["arrays"].items() if k.startswith("m/")}
        self.v = {k[2:]: v.copy() for k, v in state["arrays"].items() if k.startswith("v/")}


OPTIMIZERS = {"sgd": SGD, "adamw": AdamW}


def make_optimizer(name: str, lr: float, weight_decay: float = 0.0):
    try:
        return OPTIMIZERS[name](lr, weight_decay)
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}") from None


def sync_group_step(per_layer_grads):
    """Shared gradient of a sync group: member gradients summed in member order."""
    grads = [np.asarray(g, dtype=np.float64) for g in per_layer_grads]
    if not grads:
        raise ValueError("sync group has no members")
    for g in grads[1:]:
        if g.shape != grads[0].shape:
            raise ShapeMismatchError(f"member gradient shapes differ: {g.shape} vs {grads[0].shape}")
    return functools.reduce(operator.add, grads)


def auto_sync_groups(signatures: dict[str, tuple]) -> list[list[str]]:
    """Group layer names by identical ``(out, in/groups, count)`` signature,
    keeping only groups with at least two members."""
    by_sig: dict[tuple, list[str]] = {}
    for name, sig in signatures.items():
        by_sig.setdefault(tuple(sig), []).append(name)
    return [names for names in by_sig.values() if len(names) > 1]


def post_step_hook(params: DclsParams, geom: DclsGeometry, kind) -> DclsParams:
    return clamp_positions(params, geom, kind)


# ---------------------------------------------------------------- checkpoints
#
# Layout: b"DCLSCKPT" | uint32 version | uint64 header length | JSON header |
# raw little-endian array bytes at the offsets listed in the header. The JSON
# header is written with sorted keys so identical state gives identical bytes.

CHECKPOINT_MAGIC = b"DCLSCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC) + 12
    if len(buf) < head or buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a DCLS checkpoint")
    version, hlen = struct.unpack("<IQ", buf[len(CHECKPOINT_MAGIC):head])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[head:head + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    base = head + hlen
    arrays = {}
    for e in header["arrays"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        if start + count * dtype.itemsize > len(buf):
            raise CheckpointError(f"{path}: truncated array {e['name']}")
        arrays[e["name"]] = np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(e["shape"]).copy()
    return arrays, header["meta"]
