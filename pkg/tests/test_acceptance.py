"""Acceptance criteria, one test per criterion.

Each test records a single ``criterion N: PASS|FAIL`` line (echoed in the
pytest terminal summary) with the measured figure, the tolerance and the
elapsed time against the runtime budget, then asserts.
"""
import itertools
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest

from dcls.cli import train_run
from dcls.config import RunConfig
from dcls.conv import ConvSpec, conv_forward, same_padding
from dcls.interp import GAUSS
from dcls.kernelgen import DclsGeometry, DclsParams, construct_kernel
from dcls.nn import DclsConv, SyncGroup, dcls_layer_forward
from dcls.testkit import (
    bilinear_oracle,
    kernel_gradcheck_suite,
    layer_gradcheck_suite,
    naive_conv,
    random_dcls_params,
)
from dcls.training import (
    SGD,
    build_param_groups,
    init_params,
    sync_group_step,
)

KINDS = ("bilinear", "triangle", "gauss")


class Criterion:
    def __init__(self, number, title, budget, record):
        self.number, self.title, self.budget, self.record = number, title, budget, record
        self.start = time.perf_counter()

    def finish(self, ok: bool, detail: str) -> None:
        elapsed = time.perf_counter() - self.start
        in_time = elapsed < self.budget
        status = "PASS" if ok and in_time else "FAIL"
        self.record(
            f"criterion {self.number:>2}: {status}  {self.title}: {detail}; "
            f"runtime {elapsed:.1f}s (limit {self.budget:g}s)"
        )
        assert ok, detail
        assert in_time, f"runtime {elapsed:.1f}s exceeds {self.budget}s"


def random_geometry(rng, max_size=9, max_count=5):
    rank = int(rng.integers(1, 4))
    size = tuple(int(v) for v in rng.integers(1, max_size + 1, size=rank))
    return DclsGeometry(size, int(rng.integers(1, max_count + 1)))


def test_criterion_01_triangle_at_zero_width_is_bilinear(record_criterion):
    c = Criterion(1, "triangle(sigma_raw=0) vs bilinear", 5, record_criterion)
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(200):
        geom = random_geometry(rng)
        p = random_dcls_params(rng, geom, "bilinear", shape=(2, 2))
        zero = tuple(np.zeros_like(s) for s in p.sigmas)
        tri = construct_kernel(DclsParams(p.weights, p.positions, zero), geom, "triangle").kernel
        bil = construct_kernel(p, geom, "bilinear").kernel
        worst = max(worst, float(np.abs(tri - bil).max()))
    c.finish(worst <= 1e-12, f"max |diff| {worst:.3g} over 200 cases (tol 1e-12)")


def test_criterion_02_bilinear_matches_four_corner_oracle(record_criterion):
    c = Criterion(2, "bilinear vs four-corner oracle", 5, record_criterion)
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(200):
        geom = random_geometry(rng)
        p = random_dcls_params(rng, geom, "bilinear", shape=(2, 2))
        got = construct_kernel(p, geom, "bilinear").kernel
        ref = bilinear_oracle(p.weights, p.positions, geom)
        worst = max(worst, float(np.abs(got - ref).max()))
    c.finish(worst <= 1e-12, f"max |diff| {worst:.3g} over 200 cases (tol 1e-12)")


def test_criterion_03_normalized_maps_have_unit_mass(record_criterion):
    c = Criterion(3, "per-element normalization", 5, record_criterion)
    rng = np.random.default_rng(103)
    lo, hi, checked = np.inf, -np.inf, 0
    for kind, _ in itertools.product(KINDS, range(500)):
        geom = random_geometry(rng)
        p = random_dcls_params(rng, geom, kind, shape=(2, 1))
        ck = construct_kernel(p, geom, kind)
        grid = tuple(range(-geom.rank, 0))
        mass = ck.normalized_maps.sum(axis=grid)[ck.map_sums > 1e-3]
        if mass.size:
            lo, hi = min(lo, float(mass.min())), max(hi, float(mass.max()))
            checked += mass.size
    ok = checked > 0 and lo > 1 - 1e-4 and hi < 1.0
    c.finish(ok, f"{checked} element maps, mass in [{lo:.10f}, {hi:.10f}] (need (1-1e-4, 1))")


def test_criterion_04_kernel_gradcheck(record_criterion):
    c = Criterion(4, "kernel-level gradcheck", 60, record_criterion)
    report = kernel_gradcheck_suite(seed=0, kinds=("triangle", "gauss"), n_configs=54)
    worst = max(report.max_rel_error.values())
    has_3d = "p2" in report.max_rel_error and "sig2" in report.max_rel_error
    ok = report.configs >= 50 and has_3d and worst < 1e-5
    c.finish(ok, f"{report.configs} configs over ranks 1/2/3, max rel err {worst:.3g} (tol 1e-5), "
                 f"{report.skipped_kinks} kink points excluded")


def test_criterion_05_layer_gradcheck(record_criterion):
    c = Criterion(5, "layer-level gradcheck", 60, record_criterion)
    report = layer_gradcheck_suite(seed=0, kinds=("triangle", "gauss"), n_configs=10)
    worst = max(report.max_rel_error.values())
    names = {"w", "p0", "p1", "sig0", "sig1", "input"}
    ok = report.configs == 10 and names <= set(report.max_rel_error) and worst < 1e-4
    c.finish(ok, f"{report.configs} layers, max rel err {worst:.3g} (tol 1e-4), "
                 f"{report.below_floor} points under the noise floor")


def _sweep_shapes(rng):
    """Every combination with input and kernel dims <= 7 for ranks 1 and 2,
    cubes plus random anisotropic samples for rank 3."""
    for dims in itertools.product(range(1, 8), repeat=2):
        yield (dims[0],), (dims[1],)
    for dims in itertools.product(range(1, 8), repeat=4):
        yield dims[:2], dims[2:]
    for n, k in itertools.product(range(1, 8), repeat=2):
        yield (n,) * 3, (k,) * 3
    for _ in range(300):
        yield tuple(rng.integers(1, 8, size=3)), tuple(rng.integers(1, 8, size=3))


def test_criterion_06_conv_matches_naive_oracle(record_criterion):
    c = Criterion(6, "optimized conv vs naive oracle", 60, record_criterion)
    rng = np.random.default_rng(106)
    channels = 2
    worst, cases = 0.0, 0
    for spatial, ksize in _sweep_shapes(rng):
        for stride, pad, groups in itertools.product((1, 2), (0, 1), (1, channels)):
            if any(k > n + 2 * pad for n, k in zip(spatial, ksize)):
                continue
            x = rng.normal(size=(1, channels) + tuple(spatial))
            k = rng.normal(size=(channels, channels // groups) + tuple(ksize))
            got = conv_forward(x, k, ConvSpec(stride, pad, groups))
            ref = naive_conv(x, k, stride, pad, groups)
            worst = max(worst, float(np.abs(got - ref).max()))
            cases += 1
    c.finish(worst <= 1e-12, f"{cases} shape/stride/pad/group cases, max |diff| {worst:.3g} (tol 1e-12)")


def test_criterion_07_training_policies(record_criterion):
    c = Criterion(7, "initialization, grouping and sync policies", 10, record_criterion)
    checks = {}

    geom = DclsGeometry((7, 7), 4)
    p = init_params(geom, "gauss", (8, 1), 0)
    checks["gauss width init 0.5"] = bool(np.all(GAUSS.effective_sigma(np.concatenate(p.sigmas)) == 0.5))
    draws = init_params(DclsGeometry((9,), 10**5), "triangle", (1, 1), 1).positions[0]
    checks["position std in [0.49, 0.51]"] = 0.49 <= float(draws.std()) <= 0.51

    layer = DclsConv("l", 2, 2, 3, (5, 5), "gauss")
    groups = {g.param_kind: g for g in build_param_groups(layer.params(), lr_scale_positions=5.0)}
    checks["no decay on positions/widths"] = (
        groups["weight"].weight_decay_enabled
        and not groups["position"].weight_decay_enabled
        and not groups["sigma"].weight_decay_enabled
    )
    rng = np.random.default_rng(7)
    lr, wd = 0.01, 0.05
    grad = rng.normal(size=layer.weight.value.shape)
    start = rng.normal(size=grad.shape)
    for param in layer.params():
        param.value[...] = start if param.value.shape == start.shape else 0.0
        param.grad[...] = grad if param.grad.shape == grad.shape else 0.0
    SGD(lr, weight_decay=wd).step(list(groups.values()))
    checks["weight: w - lr*g - lr*wd*w"] = np.array_equal(layer.weight.value, start - (lr * grad + lr * wd * start))
    checks["position: p - (5*lr)*g"] = np.array_equal(layer.positions[0].value, start - 5.0 * lr * grad)
    checks["width: s - (5*lr)*g"] = np.array_equal(layer.sigmas[1].value, start - 5.0 * lr * grad)

    checks["sync members bit-identical after 100 steps"] = _sync_run(steps=100)

    failed = [name for name, ok in checks.items() if not ok]
    c.finish(not failed, f"{len(checks) - len(failed)}/{len(checks)} checks hold"
                         + (f"; failed: {', '.join(failed)}" if failed else ""))


def _sync_run(steps: int) -> bool:
    """Two stacked layers sharing positions/widths, trained with SGD, against
    a reference pair of independent layers whose gradients are summed by hand."""
    rng = np.random.default_rng(8)
    shape, size = (3, 1, 2), (5, 5)
    group = SyncGroup("g", shape, 2)
    synced = [DclsConv(f"s{i}", 3, 3, 2, size, "gauss", sync=group, bias=False) for i in range(2)]
    ref = [DclsConv(f"r{i}", 3, 3, 2, size, "gauss", bias=False) for i in range(2)]
    init = init_params(DclsGeometry(size, 2), "gauss", shape[:2], rng)
    for a, b in zip(synced, ref):
        w = init_params(DclsGeometry(size, 2), "gauss", shape[:2], rng).weights
        a.set_dcls_params(DclsParams(w, init.positions, init.sigmas))
        b.set_dcls_params(DclsParams(w, init.positions, init.sigmas))
    params = [q for layer in synced for q in layer.params()]
    params = list({id(q): q for q in params}.values())
    opt, ref_opt = SGD(0.05), SGD(0.05)
    x = rng.normal(size=(2, 3, 8, 8))
    coeff = rng.normal(size=(2, 3, 8, 8))
    for _ in range(steps):
        for net, ps in ((synced, params), (ref, [q for layer in ref for q in layer.params()])):
            for q in ps:
                q.zero_grad()
            y = net[1].forward(net[0].forward(x))
            net[0].backward(net[1].backward(coeff * np.tanh(y)))
        for a in range(2):
            for pair in (tuple(layer.positions[a] for layer in ref), tuple(layer.sigmas[a] for layer in ref)):
                shared = sync_group_step([q.grad for q in pair])
                for q in pair:
                    q.grad[...] = shared
        opt.step(build_param_groups(params))
        ref_opt.step(build_param_groups([q for layer in ref for q in layer.params()]))
        for layer in synced + ref:
            layer.post_step()
    same = True
    for a in range(2):
        for name in ("positions", "sigmas"):
            s0, s1 = (getattr(layer, name)[a].value for layer in synced)
            r0, r1 = (getattr(layer, name)[a].value for layer in ref)
            same &= np.array_equal(s0, s1) and np.array_equal(r0, r1) and np.array_equal(s0, r0)
    moved = not np.array_equal(synced[0].positions[0].value, init.positions[0])
    return bool(same and moved)


CRITERION_8_CONFIG = ["model.dilated_kernel_size=15", "data.n=2000", "data.size=32", "data.classes=4"]
LOSS_RATIO = 0.6
GAUSS_MARGIN = 0.02


@pytest.mark.slow
def test_criterion_08_training_trend(record_criterion):
    c = Criterion(8, "desk-scale training trend", 600, record_criterion)
    ratios, finals = {}, {}
    for kind, seed in itertools.product(KINDS, (0, 1, 2)):
        cfg = RunConfig().apply_overrides(CRITERION_8_CONFIG + [f"model.kind={kind}", f"run.seed={seed}"])
        hist = train_run(cfg, None).history_
        ratios.setdefault(kind, []).append(hist[-1]["train_loss"] / hist[0]["train_loss"])
        finals.setdefault(kind, []).append(hist[-1]["train_loss"])
    trend = all(r < LOSS_RATIO for rs in ratios.values() for r in rs)
    means = {k: float(np.mean(v)) for k, v in finals.items()}
    directional = means["gauss"] <= means["bilinear"] + GAUSS_MARGIN
    detail = "; ".join(
        f"{k} final/first {'/'.join(f'{r:.3f}' for r in ratios[k])} mean final {means[k]:.4f}" for k in KINDS
    )
    c.finish(trend and directional, f"(a) every ratio < {LOSS_RATIO}: {trend}, "
                                    f"(b) gauss <= bilinear + {GAUSS_MARGIN}: {directional}; {detail}")


def _dcls_command():
    exe = shutil.which("dcls")
    return [exe] if exe else [sys.executable, "-m", "dcls.cli"]


def test_criterion_09_train_is_reproducible(record_criterion, tmp_path):
    c = Criterion(9, "byte-identical dcls train reruns", 300, record_criterion)
    args = ["train", "--seed", "5", "--threads", "1",
            "--set", "model.dilated_kernel_size=15", "--set", "data.n=400", "--set", "optim.epochs=3"]
    for name in ("a", "b"):
        subprocess.run(_dcls_command() + args + ["--out", str(tmp_path / name)], check=True, capture_output=True)
    files = ["loss.csv", "checkpoint.bin"] + sorted(
        f"kernels/{p.name}" for p in (tmp_path / "a" / "kernels").iterdir()
    )
    differing = [f for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    c.finish(not differing, f"{len(files)} artifacts compared, {len(differing)} differ")


def test_criterion_10_rank_consistency(record_criterion):
    c = Criterion(10, "degenerate axes reproduce the lower rank", 10, record_criterion)
    rng = np.random.default_rng(110)
    mismatches, cases, layer_diff = 0, 0, 0.0
    for kind, _ in itertools.product(KINDS, range(40)):
        s, m = int(rng.choice([1, 3, 5, 7])), int(rng.integers(1, 5))
        g1 = DclsGeometry((s,), m)
        p1 = random_dcls_params(rng, g1, kind, shape=(3, 1))
        zero = np.zeros_like(p1.weights)
        k1 = construct_kernel(p1, g1, kind).kernel
        x1 = rng.normal(size=(2, 3, 11))
        spec1 = ConvSpec(1, same_padding((s,)), 3)
        y1 = dcls_layer_forward(x1, p1, g1, kind, spec1)[0]
        for extra in (1, 2):
            g = DclsGeometry((s,) + (1,) * extra, m)
            p = DclsParams(p1.weights, (p1.positions[0],) + (zero,) * extra, (p1.sigmas[0],) + (zero,) * extra)
            k = construct_kernel(p, g, kind).kernel
            spec = ConvSpec(1, same_padding(g.dilated_kernel_size), 3)
            y = dcls_layer_forward(x1.reshape(x1.shape + (1,) * extra), p, g, kind, spec)[0]
            # the constructed kernel must agree bit for bit; the convolution
            # runs a different loop order per rank, so outputs agree to rounding
            mismatches += not np.array_equal(k.reshape(k1.shape), k1)
            layer_diff = max(layer_diff, float(np.abs(y.reshape(y1.shape) - y1).max()))
            cases += 1
    ok = mismatches == 0 and layer_diff <= 1e-12
    c.finish(ok, f"{cases} constructions (2D and 3D vs 1D) with {mismatches} inexact, "
                 f"layer outputs within {layer_diff:.3g} (tol 1e-12); 3D gradients are covered by criterion 4")
