"""Command-line entry point: ``dcls train|eval|gradcheck|inspect-kernel|compare-interp``."""
from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig, parse_int_list, parse_str_list
from .data import load_csv, load_idx, synth_longrange, train_val_split
from .estimator import DclsClassifier
from .exceptions import DclsError, NonFiniteError
from .interp import InterpolationKind
from .nn import softmax_cross_entropy
from .stats import pooled_t_statistic
from .testkit import conv_gradcheck, kernel_gradcheck_suite, layer_gradcheck_suite
from .training import load_checkpoint, save_checkpoint

log = logging.getLogger("dcls")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_NONFINITE = 0, 1, 2, 3


# ------------------------------------------------------------------ helpers


def load_dataset(cfg: RunConfig):
    d = cfg.data
    if d.source == "synth":
        ds = synth_longrange(d.n, d.size, d.classes, d.data_seed, d.noise, d.dot_radius)
    elif d.source == "idx":
        ds = load_idx(d.images_path, d.labels_path)
    elif d.source == "csv":
        ds = load_csv(d.csv_path, d.height, d.width, d.csv_scale)
    else:
        raise DclsError(f"unknown data.source {d.source!r} (synth, idx or csv)")
    return ds.normalized(d.normalize)


def make_estimator(cfg: RunConfig) -> DclsClassifier:
    m, o = cfg.model, cfg.optim
    return DclsClassifier(
        layers=m.layers, kind=m.kind, kernel_count=m.kernel_count,
        dilated_kernel_size=m.dilated_kernel_size, optimizer=o.optimizer, lr=o.lr,
        weight_decay=o.weight_decay, lr_scale_positions=o.lr_scale_positions,
        epochs=o.epochs, batch_size=o.batch_size, sync_positions=m.sync_positions,
        dtype=m.dtype, random_state=cfg.run.seed,
    )


def _header(cfg: RunConfig) -> str:
    return f"# config_sha256={cfg.digest()}\n"


def _num(v: float) -> str:
    return repr(float(v))


def save_run_checkpoint(clf: DclsClassifier, cfg: RunConfig, path) -> None:
    meta = clf.state_meta()
    meta["config"] = cfg.canonical()
    save_checkpoint(path, clf.state_arrays(), meta)


def load_run_checkpoint(path):
    arrays, meta = load_checkpoint(path)
    cfg = RunConfig.from_ini(meta["config"])
    clf = DclsClassifier().load_state(arrays, meta)
    return clf, cfg


def train_run(cfg: RunConfig, out: Path | None):
    """Train one model. With ``out`` set, write loss.csv, checkpoint.bin and kernels/."""
    ds = load_dataset(cfg)
    train, val = train_val_split(ds, cfg.data.val_fraction, cfg.data.data_seed)
    clf = make_estimator(cfg)
    clf.initialize(train.images, classes=np.arange(ds.n_classes))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.to_ini())
        loss_csv = open(out / "loss.csv", "w")
        loss_csv.write(_header(cfg) + "epoch,train_loss,val_acc\n")
    try:
        for _ in range(cfg.optim.epochs):
            rec = clf.train_epoch(
                train.images, train.labels,
                None if val is None else val.images, None if val is None else val.labels,
            )
            log.info("epoch %d  train_loss %.4f  val_acc %.4f", rec["epoch"], rec["train_loss"], rec["val_acc"])
            if out is not None:
                loss_csv.write(f"{rec['epoch']},{_num(rec['train_loss'])},{_num(rec['val_acc'])}\n")
                loss_csv.flush()
    finally:
        if out is not None:
            loss_csv.close()
    if out is not None:
        save_run_checkpoint(clf, cfg, out / "checkpoint.bin")
        for li, layer in enumerate(clf.net_.dcls_layers()):
            for ch in range(layer.weight.value.shape[0]):
                write_kernel_files(clf, cfg, li, ch, out / "kernels", prefix="")
    return clf


# ------------------------------------------------------------ kernel dumps


def _kernel_planes(k: np.ndarray):
    """2-D views of one (in/groups, *spatial) kernel block for CSV/PGM output."""
    rank = k.ndim - 1
    for ci in range(k.shape[0]):
        block = k[ci]
        if rank == 1:
            yield f"in_channel={ci}", block[None, :]
        elif rank == 2:
            yield f"in_channel={ci}", block
        else:
            for z in range(block.shape[2]):
                yield f"in_channel={ci} z={z}", block[:, :, z]


def write_pgm(path, plane: np.ndarray) -> None:
    """8-bit binary PGM, min-max scaled (a constant plane is all zeros)."""
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        pix = np.rint((plane - lo) / (hi - lo) * 255.0)
    else:
        pix = np.zeros_like(plane)
    h, w = plane.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.astype(np.uint8).tobytes())


def write_kernel_files(clf: DclsClassifier, cfg: RunConfig, layer: int, channel: int, outdir: Path, prefix="inspect_"):
    layers = clf.net_.dcls_layers()
    if not 0 <= layer < len(layers):
        raise DclsError(f"layer {layer} out of range: model has {len(layers)} DCLS layers")
    dl = layers[layer]
    n_out = dl.weight.value.shape[0]
    if not 0 <= channel < n_out:
        raise DclsError(f"channel {channel} out of range: layer {layer} has {n_out} output channels")
    outdir.mkdir(parents=True, exist_ok=True)
    stem = f"{prefix}l{layer}_c{channel}"
    kernel = dl.kernel().kernel[channel]
    size = "x".join(map(str, dl.geom.dilated_kernel_size))

    with open(outdir / f"{stem}.csv", "w") as fh:
        fh.write(_header(cfg))
        fh.write(f"# layer={layer} channel={channel} kind={dl.kind.name} size={size}\n")
        planes = list(_kernel_planes(kernel))
        fh.write("row," + ",".join(f"col{j}" for j in range(planes[0][1].shape[1])) + "\n")
        for label, plane in planes:
            if len(planes) > 1:
                fh.write(f"# {label}\n")
            for i, row in enumerate(plane):
                fh.write(f"{i}," + ",".join(f"{v:.17g}" for v in row) + "\n")

    plane = planes[0][1] if kernel.ndim < 4 else kernel[0][:, :, kernel.shape[3] // 2]
    write_pgm(outdir / f"{stem}.pgm", plane)

    p = dl.dcls_params()
    rank = dl.geom.rank
    with open(outdir / f"{stem}_elements.csv", "w") as fh:
        fh.write(_header(cfg))
        cols = ["in_channel", "element", "weight"]
        cols += [f"p{a}" for a in range(rank)] + [f"sigma_raw{a}" for a in range(rank)]
        cols += [f"sigma_eff{a}" for a in range(rank)]
        fh.write(",".join(cols) + "\n")
        for ci in range(p.shape[1]):
            for k in range(p.shape[2]):
                vals = [p.weights[channel, ci, k]]
                vals += [pa[channel, ci, k] for pa in p.positions]
                vals += [sa[channel, ci, k] for sa in p.sigmas]
                vals += [float(dl.kind.effective_sigma(sa[channel, ci, k])) for sa in p.sigmas]
                fh.write(f"{ci},{k}," + ",".join(f"{v:.17g}" for v in vals) + "\n")
    return outdir / f"{stem}.csv"


# ------------------------------------------------------------------ commands


def cmd_train(cfg: RunConfig, out: Path) -> int:
    clf = train_run(cfg, out)
    hist = clf.history_
    lines = [f"config_sha256 {cfg.digest()}", f"epochs {len(hist)}"]
    if hist:
        lines.append(f"first_epoch_loss {hist[0]['train_loss']:.6f}")
        lines.append(f"final_train_loss {hist[-1]['train_loss']:.6f}")
        lines.append(f"final_val_acc {hist[-1]['val_acc']:.6f}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path, checkpoint: Path | None) -> int:
    ckpt = checkpoint or out / "checkpoint.bin"
    clf, saved_cfg = load_run_checkpoint(ckpt)
    saved_cfg.data = cfg.data if cfg is not None else saved_cfg.data
    ds = load_dataset(saved_cfg)
    train, val = train_val_split(ds, saved_cfg.data.val_fraction, saved_cfg.data.data_seed)
    lines = [f"checkpoint {ckpt}", f"config_sha256 {saved_cfg.digest()}"]
    for name, part in (("train", train), ("val", val)):
        if part is None:
            continue
        logits = clf.decision_function(part.images)
        loss, _ = softmax_cross_entropy(logits, np.searchsorted(clf.classes_, part.labels))
        acc = float((clf.classes_[logits.argmax(axis=1)] == part.labels).mean())
        lines += [f"{name}_loss {loss:.6f}", f"{name}_acc {acc:.6f}"]
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    g = cfg.gradcheck
    kinds = [InterpolationKind.from_name(k).name for k in parse_str_list(g.kinds)]
    if not kinds:
        raise DclsError("gradcheck.kinds is empty")
    # config budgets are totals, shared between the kinds
    n_kernel = -(-g.kernel_configs // len(kinds))
    n_layer = -(-g.layer_configs // len(kinds))
    lines, passed = [f"kinds {','.join(kinds)}"], True
    for kind in kinds:
        kernel = kernel_gradcheck_suite(g.seed, (kind,), n_kernel)
        layer = layer_gradcheck_suite(g.seed, (kind,), n_layer)
        lines += kernel.lines(f"kernel construction [{kind}]")
        lines += layer.lines(f"dcls layer [{kind}]")
        passed &= kernel.passed and layer.passed
    conv = conv_gradcheck(g.seed)
    lines += conv.lines("convolution")
    passed &= conv.passed
    lines.append(f"overall {'PASS' if passed else 'FAIL'}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_inspect_kernel(out: Path, checkpoint: Path | None, layer: int, channel: int) -> int:
    ckpt = checkpoint or out / "checkpoint.bin"
    clf, cfg = load_run_checkpoint(ckpt)
    path = write_kernel_files(clf, cfg, layer, channel, out / "kernels")
    print(f"wrote {path} (+ .pgm, _elements.csv)")
    return EXIT_OK


def compare_table(losses: dict[str, list[float]]) -> list[str]:
    lines = ["kind,seeds,mean_final_loss,final_losses"]
    for kind, vals in losses.items():
        lines.append(f"{kind},{len(vals)},{np.mean(vals):.6f},{' '.join(f'{v:.6f}' for v in vals)}")
    lines.append("pair,t_statistic")
    for a, b in itertools.combinations(losses, 2):
        t = pooled_t_statistic(losses[a], losses[b])
        lines.append(f"{a}-{b},{'n/a' if np.isnan(t) else f'{t:.4f}'}")
    return lines


def cmd_compare_interp(cfg: RunConfig, out: Path) -> int:
    kinds = parse_str_list(cfg.run.kinds)
    seeds = parse_int_list(cfg.run.seeds)
    losses: dict[str, list[float]] = {}
    for kind in kinds:
        for seed in seeds:
            run_cfg = cfg.copy()
            run_cfg.model.kind = kind
            run_cfg.run.seed = seed
            clf = train_run(run_cfg, None)
            final = clf.history_[-1]["train_loss"] if clf.history_ else float("nan")
            losses.setdefault(kind, []).append(final)
            log.info("%s seed %d final train loss %.4f", kind, seed, final)
    lines = compare_table(losses)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.csv").write_text(_header(cfg) + "\n".join(lines) + "\n")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", type=Path, help="output directory (DCLS_OUT overrides)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dcls", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p = sub.add_parser("inspect-kernel", parents=[common], help="dump one constructed kernel")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--channel", type=int, default=0)
    sub.add_parser("compare-interp", parents=[common], help="train under each interpolation and compare")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.apply_overrides(args.overrides)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.threads is not None:
        cfg.run.threads = args.threads
    if args.out is not None:
        cfg.run.out = str(args.out)
    if os.environ.get("DCLS_OUT"):
        cfg.run.out = os.environ["DCLS_OUT"]
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.run.out)
        with threadpool_limits(limits=max(1, cfg.run.threads)):
            if args.command == "train":
                return cmd_train(cfg, out)
            if args.command == "eval":
                return cmd_eval(cfg if args.config or args.overrides else None, out, args.checkpoint)
            if args.command == "gradcheck":
                return cmd_gradcheck(cfg, out)
            if args.command == "inspect-kernel":
                return cmd_inspect_kernel(out, args.checkpoint, args.layer, args.channel)
            return cmd_compare_interp(cfg, out)
    except NonFiniteError as exc:
        print(f"dcls: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (DclsError, OSError) as exc:
        print(f"dcls: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
