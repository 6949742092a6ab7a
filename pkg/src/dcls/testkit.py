"""Independent reference implementations used to verify the main code paths.

Nothing here calls the optimized kernel construction or convolution when it
acts as an oracle: the bilinear constructor writes the four corner weights
by hand and the convolution is a direct loop with explicit bounds checks.
The gradient-check suites compare the analytic backward passes against
central finite differences of the forward passes.

Central differences use ``h = 1e-5`` by default: in float64 the truncation
error is O(h^2) ~ 1e-10 and the round-off O(eps/h) ~ 1e-11, both far below
the 1e-5 relative tolerance.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conv import ConvSpec, conv_backward, conv_forward, same_padding
from .exceptions import NonFiniteError
from .interp import InterpolationKind, distance_to_kink
from .kernelgen import (
    EPS,
    DclsGeometry,
    DclsParams,
    construct_kernel,
    construct_kernel_backward,
    format_golden_record,
    parse_golden_record,
)
from .nn import dcls_layer_backward, dcls_layer_forward

KINK_EXCLUSION = 1e-3
FD_STEP = 1e-5


# ----------------------------------------------------------- bilinear oracle


def _corner_weights(pos, size):
    """Cells and weights of one element along one axis: floor and floor+1."""
    shifted = pos + size // 2
    base = math.floor(shifted)
    frac = shifted - base
    return ((base, 1.0 - frac), (base + 1, frac))


def bilinear_oracle(weights, positions, geom: DclsGeometry) -> np.ndarray:
    """Kernel from the four-corner bilinear formula, then per-element
    normalization by ``eps + sum``.

    Raises ``ValueError`` if a corner with non-zero weight falls outside the
    grid (positions must be clamped first).
    """
    weights = np.asarray(weights, dtype=np.float64)
    positions = [np.asarray(p, dtype=np.float64) for p in positions]
    size = geom.dilated_kernel_size
    c_out, c_in, m = weights.shape
    kernel = np.zeros((c_out, c_in) + size)
    for o, i, k in itertools.product(range(c_out), range(c_in), range(m)):
        if geom.rank == 2:
            # literal four cases
            px = positions[0][o, i, k] + size[0] // 2
            py = positions[1][o, i, k] + size[1] // 2
            fx, fy = math.floor(px), math.floor(py)
            rx, ry = px - fx, py - fy
            cells = [
                ((fx, fy), (1 - rx) * (1 - ry)),
                ((fx + 1, fy), rx * (1 - ry)),
                ((fx, fy + 1), (1 - rx) * ry),
                ((fx + 1, fy + 1), rx * ry),
            ]
        else:
            per_axis = [_corner_weights(positions[a][o, i, k], size[a]) for a in range(geom.rank)]
            cells = []
            for combo in itertools.product(*per_axis):
                cells.append((tuple(c for c, _ in combo), math.prod(v for _, v in combo)))
        element = np.zeros(size)
        for idx, value in cells:
            inside = all(0 <= j < s for j, s in zip(idx, size))
            if not inside:
                if value != 0.0:
                    raise ValueError(f"bilinear support of element {(o, i, k)} leaves the grid at {idx}")
                continue
            element[idx] += value
        kernel[o, i] += weights[o, i, k] * element / (EPS + element.sum())
    return kernel


# ----------------------------------------------------------- naive convolution


def naive_conv(x, kernel, stride=1, padding=0, groups=1) -> np.ndarray:
    """Direct cross-correlation with zero padding, one output cell at a time."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    rank = x.ndim - 2
    stride = (stride,) * rank if np.isscalar(stride) else tuple(stride)
    padding = (padding,) * rank if np.isscalar(padding) else tuple(padding)
    n_batch, c_in = x.shape[:2]
    c_out = kernel.shape[0]
    cin_g, cout_g = c_in // groups, c_out // groups
    ksize = kernel.shape[2:]
    out_size = tuple(
        (x.shape[2 + a] + 2 * padding[a] - ksize[a]) // stride[a] + 1 for a in range(rank)
    )
    y = np.zeros((n_batch, c_out) + out_size)
    for n in range(n_batch):
        for co in range(c_out):
            g = co // cout_g
            for out_idx in itertools.product(*(range(s) for s in out_size)):
                acc = 0.0
                for ci in range(cin_g):
                    for k_idx in itertools.product(*(range(s) for s in ksize)):
                        src = tuple(
                            out_idx[a] * stride[a] - padding[a] + k_idx[a] for a in range(rank)
                        )
                        if all(0 <= src[a] < x.shape[2 + a] for a in range(rank)):
                            acc += kernel[(co, ci) + k_idx] * x[(n, g * cin_g + ci) + src]
                y[(n, co) + out_idx] = acc
    return y


# ------------------------------------------------------------ finite differences


def fd_grad(loss_fn, params, h: float = FD_STEP, mask=None):
    """Central-difference gradient of ``loss_fn()`` w.r.t. each array in ``params``.

    Arrays are perturbed in place and restored. ``mask`` (same structure as
    ``params``, boolean) selects entries to evaluate; others are left NaN.
    """
    grads = []
    for a, arr in enumerate(params):
        g = np.full(arr.shape, np.nan)
        for idx in np.ndindex(arr.shape):
            if mask is not None and not mask[a][idx]:
                continue
            orig = arr[idx]
            arr[idx] = orig + h
            fp = loss_fn()
            arr[idx] = orig - h
            fm = loss_fn()
            arr[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"loss is not finite near parameter {a} at {idx}")
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


@dataclass
class GradCheckReport:
    threshold: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    points: dict[str, int] = field(default_factory=dict)
    skipped_kinks: int = 0
    fixed: set[str] = field(default_factory=set)
    configs: int = 0
    below_floor: int = 0

    def add(self, name, analytic, numeric, noise: float = 0.0):
        """Record one parameter's comparison.

        ``noise`` is the rounding noise of the finite differences. Entries with
        magnitude under ``noise / threshold`` cannot be resolved to the relative
        threshold; they must instead agree to within ``noise`` in absolute terms,
        and are counted in ``below_floor``.
        """
        analytic, numeric = np.asarray(analytic), np.asarray(numeric)
        sel = np.isfinite(numeric)
        a, n = analytic[sel], numeric[sel]
        tiny = np.maximum(np.abs(a), np.abs(n)) < noise / self.threshold
        err = relative_error(a[~tiny], n[~tiny])
        worst = float(err.max()) if err.size else 0.0
        if np.any(np.abs(a[tiny] - n[tiny]) > noise):
            worst = math.inf
        self.max_rel_error[name] = max(self.max_rel_error.get(name, 0.0), worst)
        self.points[name] = self.points.get(name, 0) + int(sel.sum())
        self.below_floor += int(tiny.sum())

    def merge(self, other: GradCheckReport):
        for name, err in other.max_rel_error.items():
            self.max_rel_error[name] = max(self.max_rel_error.get(name, 0.0), err)
            self.points[name] = self.points.get(name, 0) + other.points[name]
        self.skipped_kinks += other.skipped_kinks
        self.below_floor += other.below_floor
        self.fixed |= other.fixed
        self.configs += other.configs

    @property
    def passed(self) -> bool:
        return all(err < self.threshold for err in self.max_rel_error.values())

    def lines(self, title: str) -> list[str]:
        out = [f"{title}: {self.configs} configs, threshold {self.threshold:g}, "
               f"skipped {self.skipped_kinks} near-kink points, "
               f"{self.below_floor} points under the noise floor (checked absolutely)"]
        for name in sorted(set(self.max_rel_error) | self.fixed):
            if name in self.fixed and self.points.get(name, 0) == 0:
                out.append(f"  {name:<8} fixed (no gradient)")
            else:
                status = "ok" if self.max_rel_error[name] < self.threshold else "FAIL"
                out.append(f"  {name:<8} max rel err {self.max_rel_error[name]:.3e} "
                           f"over {self.points[name]} points  {status}")
        out.append(f"  result: {'PASS' if self.passed else 'FAIL'}")
        return out


def fd_noise_level(terms, h: float = FD_STEP) -> float:
    """Rounding noise of a central difference of a loss that is a sum of
    ``terms``: one ulp of the absolute sum per evaluation, over ``2h``."""
    return 2 * np.finfo(np.float64).eps * float(np.abs(terms).sum()) / (2 * h)


def _kink_mask(params: DclsParams, geom: DclsGeometry, kind: InterpolationKind):
    """Per-(element, axis) flag: True where finite differences are safe."""
    safe = []
    for a, s in enumerate(geom.dilated_kernel_size):
        x = (params.positions[a] + s // 2)[..., None] - np.arange(s)
        d = distance_to_kink(kind, x, params.sigmas[a][..., None]).min(axis=-1)
        safe.append(d > KINK_EXCLUSION)
    return safe


def random_dcls_params(rng, geom: DclsGeometry, kind, shape=(2, 1)) -> DclsParams:
    """Random parameters with every element's centre inside the grid."""
    kind = InterpolationKind.from_name(kind)
    full = tuple(shape) + (geom.kernel_count,)
    positions = []
    for s in geom.dilated_kernel_size:
        lo, hi = -(s // 2), s - 1 - s // 2
        positions.append(rng.uniform(lo, hi, size=full) if hi > lo else np.zeros(full))
    sigmas = tuple(rng.uniform(-1.0, 1.0, size=full) for _ in geom.dilated_kernel_size)
    weights = rng.normal(size=full)
    return DclsParams(weights, tuple(positions), sigmas)


def _param_names(rank):
    return ["w"] + [f"p{a}" for a in range(rank)] + [f"sig{a}" for a in range(rank)]


def check_kernel_gradients(params: DclsParams, geom: DclsGeometry, kind, rng, h=FD_STEP,
                           threshold=1e-5) -> GradCheckReport:
    """Gradcheck of kernel construction under ``L = sum(c * K)`` with random ``c``."""
    kind = InterpolationKind.from_name(kind)
    params = params.copy()
    coeff = rng.normal(size=(params.shape[0], params.shape[1]) + geom.dilated_kernel_size)

    def loss():
        return float((construct_kernel(params, geom, kind, keep_cache=False).kernel * coeff).sum())

    analytic = construct_kernel_backward(construct_kernel(params, geom, kind), coeff)
    safe = _kink_mask(params, geom, kind)
    arrays = params.arrays()
    mask = [np.ones(params.shape, bool)] + safe + safe
    report = GradCheckReport(threshold, configs=1)
    report.skipped_kinks = int(sum((~m).sum() for m in safe) * 2)
    if not kind.learns_sigma:
        mask = mask[: 1 + geom.rank] + [np.zeros(params.shape, bool)] * geom.rank
        report.fixed = {f"sig{a}" for a in range(geom.rank)}
    numeric = fd_grad(loss, arrays, h, mask)
    noise = fd_noise_level(construct_kernel(params, geom, kind, keep_cache=False).kernel * coeff, h)
    names = _param_names(geom.rank)
    for name, an, nu in zip(names, analytic.arrays(), numeric):
        if name in report.fixed:
            # a fixed width must report an exactly-zero gradient
            if np.any(an != 0):
                report.max_rel_error[name] = math.inf
                report.points[name] = an.size
            continue
        report.add(name, an, nu, noise)
    return report


def check_layer_gradients(x, params: DclsParams, geom: DclsGeometry, kind, spec: ConvSpec, rng,
                          h=FD_STEP, threshold=1e-4) -> GradCheckReport:
    """Gradcheck of the whole DCLS layer (kernel construction + convolution)
    w.r.t. its parameters and its input, under ``L = sum(c * y)``."""
    kind = InterpolationKind.from_name(kind)
    params = params.copy()
    x = np.array(x, dtype=np.float64)
    y, cache = dcls_layer_forward(x, params, geom, kind, spec)
    coeff = rng.normal(size=y.shape)
    grad_x, grads = dcls_layer_backward(cache, coeff)

    def loss():
        return float((dcls_layer_forward(x, params, geom, kind, spec)[0] * coeff).sum())

    safe = _kink_mask(params, geom, kind)
    mask = [np.ones(params.shape, bool)] + safe + safe
    report = GradCheckReport(threshold, configs=1)
    report.skipped_kinks = int(sum((~m).sum() for m in safe) * 2)
    if not kind.learns_sigma:
        mask = mask[: 1 + geom.rank] + [np.zeros(params.shape, bool)] * geom.rank
        report.fixed = {f"sig{a}" for a in range(geom.rank)}
    numeric = fd_grad(loss, params.arrays(), h, mask)
    noise = fd_noise_level(y * coeff, h)
    for name, an, nu in zip(_param_names(geom.rank), grads.arrays(), numeric):
        if name in report.fixed:
            if np.any(an != 0):
                report.max_rel_error[name] = math.inf
                report.points[name] = an.size
            continue
        report.add(name, an, nu, noise)
    (num_x,) = fd_grad(loss, [x], h)
    report.add("input", grad_x, num_x, noise)
    return report


def kernel_gradcheck_suite(seed=0, kinds=("triangle", "gauss"), n_configs=54) -> GradCheckReport:
    """Random configurations cycling over rank {1,2,3}, the given kinds,
    kernel count {1,3,7} and dilated size {3,5,9}."""
    rng = np.random.default_rng(seed)
    combos = [(r, k, m, s) for m, s, k, r in itertools.product((1, 3, 7), (3, 5, 9), kinds, (1, 2, 3))]
    total = GradCheckReport(1e-5)
    for i in range(n_configs):
        rank, kind, m, s = combos[i % len(combos)]
        geom = DclsGeometry((s,) * rank, m)
        params = random_dcls_params(rng, geom, kind)
        total.merge(check_kernel_gradients(params, geom, kind, rng))
    return total


def layer_gradcheck_suite(seed=0, kinds=("triangle", "gauss"), n_configs=10) -> GradCheckReport:
    """Small depthwise DCLS layers on a 1x4x9x9 input."""
    rng = np.random.default_rng(seed)
    total = GradCheckReport(1e-4)
    for i in range(n_configs):
        kind = kinds[i % len(kinds)]
        s = (3, 5, 7)[i % 3]
        m = (1, 2, 3)[(i // 3) % 3]
        stride = 1 + (i % 2)
        geom = DclsGeometry((s, s), m)
        params = random_dcls_params(rng, geom, kind, shape=(4, 1))
        spec = ConvSpec(stride, same_padding(geom.dilated_kernel_size), 4)
        x = rng.normal(size=(1, 4, 9, 9))
        total.merge(check_layer_gradients(x, params, geom, kind, spec, rng))
    return total


def conv_gradcheck(seed=0, h=FD_STEP, threshold=1e-6) -> GradCheckReport:
    """Finite-difference check of :func:`conv_backward` on a few random shapes."""
    rng = np.random.default_rng(seed)
    cases = [
        ((2, 4, 5, 5), (4, 1, 3, 3), ConvSpec(1, 1, 4)),
        ((1, 4, 6, 5), (2, 2, 3, 2), ConvSpec((2, 1), (1, 0), 2)),
        ((2, 3, 7), (6, 1, 3), ConvSpec(2, 1, 3)),
        ((1, 2, 4, 3, 4), (2, 2, 2, 2, 3), ConvSpec(1, 1, 1)),
    ]
    report = GradCheckReport(threshold)
    for xs, ks, spec in cases:
        x, k = rng.normal(size=xs), rng.normal(size=ks)
        y = conv_forward(x, k, spec)
        coeff = rng.normal(size=y.shape)
        gx, gk = conv_backward(x, k, spec, coeff)

        def loss():
            return float((conv_forward(x, k, spec) * coeff).sum())

        nx, nk = fd_grad(loss, [x, k], h)
        report.add("input", gx, nx)
        report.add("kernel", gk, nk)
        report.configs += 1
    return report


# ----------------------------------------------------------------- golden files


def golden_cases(seed=2024):
    """Three reference configurations, one per interpolation kind."""
    rng = np.random.default_rng(seed)
    cases = []
    for kind, rank, m, s in (("bilinear", 2, 3, 5), ("triangle", 1, 2, 7), ("gauss", 3, 2, 3)):
        geom = DclsGeometry((s,) * rank, m)
        params = random_dcls_params(rng, geom, kind)
        if kind == "bilinear":
            from .kernelgen import clamp_positions

            params = clamp_positions(params, geom, kind)
        cases.append((params, geom, InterpolationKind.from_name(kind)))
    return cases


def write_golden(path, cases=None) -> None:
    cases = golden_cases() if cases is None else cases
    lines = [format_golden_record(p, g, k) for p, g, k in cases]
    Path(path).write_text("\n".join(lines) + "\n")


def golden_roundtrip(path, tol: float = 1e-15) -> bool:
    """Rebuild every recorded kernel and compare with the recorded values."""
    ok = True
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        params, geom, kind, expected = parse_golden_record(line)
        got = construct_kernel(params, geom, kind, keep_cache=False).kernel
        ok &= bool(np.all(np.abs(got - expected) <= tol))
    return ok
