import csv

import numpy as np
import pytest

import dcls.kernelgen as kernelgen
from dcls.cli import load_run_checkpoint, main
from dcls.config import RunConfig
from dcls.training import load_checkpoint, save_checkpoint

SMALL = ["--set", "data.n=60", "--set", "data.size=16", "--set", "model.dilated_kernel_size=7",
         "--set", "model.kernel_count=2", "--set", "optim.batch_size=20"]


def read_pgm(path):
    raw = path.read_bytes()
    magic, dims, maxval, pixels = raw.split(b"\n", 3)
    w, h = map(int, dims.split())
    assert magic == b"P5" and maxval == b"255"
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def csv_body(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_sha256=")
    rows = [line for line in lines if not line.startswith("#")]
    return rows[0].split(","), [r.split(",") for r in rows[1:]]


def test_train_writes_artifacts(tmp_path):
    out = tmp_path / "run"
    assert main(["train", *SMALL, "--set", "optim.epochs=2", "--out", str(out)]) == 0
    header, rows = csv_body(out / "loss.csv")
    assert header == ["epoch", "train_loss", "val_acc"]
    assert [r[0] for r in rows] == ["1", "2"]
    assert (out / "checkpoint.bin").exists() and (out / "report.txt").exists()
    kernels = sorted(p.name for p in (out / "kernels").iterdir())
    assert "l0_c0.csv" in kernels and "l1_c3.pgm" in kernels and "l0_c0_elements.csv" in kernels
    for path in (out / "kernels").glob("*.csv"):
        csv_body(path)


def test_zero_epochs_is_header_only_and_init_checkpoint(tmp_path):
    out = tmp_path / "run"
    assert main(["train", *SMALL, "--set", "optim.epochs=0", "--seed", "3", "--out", str(out)]) == 0
    header, rows = csv_body(out / "loss.csv")
    assert rows == []
    clf, cfg = load_run_checkpoint(out / "checkpoint.bin")
    assert cfg.run.seed == 3 and clf.history_ == []
    fresh = clf.__class__(**clf.get_params()).initialize(np.zeros((1,) + tuple(clf.input_shape_)), classes=clf.classes_)
    for a, b in zip(clf.net_.params(), fresh.net_.params()):
        np.testing.assert_array_equal(a.value, b.value)


def test_runs_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["train", *SMALL, "--set", "optim.epochs=2", "--threads", "1", "--out", str(tmp_path / name)]) == 0
    for rel in ("loss.csv", "checkpoint.bin", "kernels/l1_c2.csv", "kernels/l1_c2.pgm"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_env_overrides_out(tmp_path, monkeypatch):
    monkeypatch.setenv("DCLS_OUT", str(tmp_path / "env"))
    assert main(["train", *SMALL, "--set", "optim.epochs=0", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env" / "loss.csv").exists()
    assert not (tmp_path / "flag").exists()


def test_config_file_and_errors(tmp_path, capsys):
    cfg = RunConfig()
    cfg.optim.epochs = 0
    cfg.data.n = 40
    cfg.data.size = 16
    path = tmp_path / "c.ini"
    path.write_text(cfg.to_ini())
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "r")]) == 0
    assert RunConfig.load(tmp_path / "r" / "config.ini").data.n == 40
    assert main(["train", "--set", "optim.bogus=1", "--out", str(tmp_path / "x")]) == 2
    assert "bogus" in capsys.readouterr().err
    (tmp_path / "bad.ini").write_text("[model]\nkind = gauss\nextra = 2\n")
    assert main(["train", "--config", str(tmp_path / "bad.ini")]) == 2
    assert main(["train", "--set", "data.source=idx", "--set", "data.images_path=/nonexistent",
                 "--out", str(tmp_path / "y")]) == 2


def test_eval(tmp_path):
    out = tmp_path / "run"
    main(["train", *SMALL, "--set", "optim.epochs=1", "--out", str(out)])
    (out / "report.txt").unlink()
    assert main(["eval", "--out", str(out)]) == 0
    report = (out / "report.txt").read_text()
    assert "train_acc" in report and "val_loss" in report
    assert main(["eval", "--out", str(tmp_path / "missing")]) == 2


def _one_element_checkpoint(tmp_path, kind, position, sigma=0.0):
    out = tmp_path / "run"
    main(["train", *SMALL, "--set", "optim.epochs=0", "--set", "model.kernel_count=1",
          "--set", f"model.kind={kind}", "--out", str(out)])
    arrays, meta = load_checkpoint(out / "checkpoint.bin")
    for name in arrays:
        if name.startswith("param/l1."):
            if name.endswith(".w"):
                arrays[name][...] = 1.0
            elif ".p" in name:
                arrays[name][...] = position
            elif ".sig" in name:
                arrays[name][...] = sigma
    save_checkpoint(out / "checkpoint.bin", arrays, meta)
    return out


def test_inspect_kernel_bilinear_one_white_pixel(tmp_path):
    out = _one_element_checkpoint(tmp_path, "bilinear", 1.0)
    assert main(["inspect-kernel", "--out", str(out), "--layer", "0", "--channel", "1"]) == 0
    img = read_pgm(out / "kernels" / "inspect_l0_c1.pgm")
    assert img.shape == (7, 7)
    assert (img == 255).sum() == 1 and (img == 0).sum() == 48
    assert img[4, 4] == 255


def test_inspect_kernel_csv_matches_constructed_kernel(tmp_path):
    out = tmp_path / "run"
    main(["train", *SMALL, "--set", "optim.epochs=1", "--out", str(out)])
    assert main(["inspect-kernel", "--out", str(out), "--layer", "1", "--channel", "2"]) == 0
    clf, _ = load_run_checkpoint(out / "checkpoint.bin")
    expected = clf.constructed_kernels()[1][2, 0]
    header, rows = csv_body(out / "kernels" / "inspect_l1_c2.csv")
    got = np.array([[float(v) for v in r[1:]] for r in rows])
    np.testing.assert_array_equal(got, expected)
    with open(out / "kernels" / "inspect_l1_c2_elements.csv") as fh:
        table = [r for r in csv.reader(fh) if not r[0].startswith("#")]
    assert table[0][:4] == ["in_channel", "element", "weight", "p0"]
    assert len(table) == 1 + 2


def test_inspect_kernel_gauss_narrow_mass(tmp_path):
    out = _one_element_checkpoint(tmp_path, "gauss", 0.0)
    assert main(["inspect-kernel", "--out", str(out), "--layer", "0", "--channel", "0"]) == 0
    _, rows = csv_body(out / "kernels" / "inspect_l0_c0.csv")
    k = np.array([[float(v) for v in r[1:]] for r in rows])
    assert k[2:5, 2:5].sum() / k.sum() >= 0.99


def test_inspect_kernel_missing(tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", *SMALL, "--set", "optim.epochs=0", "--out", str(out)])
    assert main(["inspect-kernel", "--out", str(out), "--layer", "9"]) == 2
    assert main(["inspect-kernel", "--out", str(out), "--layer", "0", "--channel", "99"]) == 2
    assert "out of range" in capsys.readouterr().err


GC_SMALL = ["--set", "gradcheck.kernel_configs=6", "--set", "gradcheck.layer_configs=2"]


def test_gradcheck_default_passes(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    assert "overall PASS" in (tmp_path / "report.txt").read_text()


def test_gradcheck_bilinear_sigma_fixed(tmp_path, capsys):
    assert main(["gradcheck", *GC_SMALL, "--set", "gradcheck.kinds=bilinear", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "sig0     fixed (no gradient)" in text
    assert "sig0     max rel err" not in text


def test_gradcheck_detects_sign_flip(tmp_path, monkeypatch):
    real = kernelgen.interp_eval_grad

    def flipped(kind, x, s):
        f, dx, ds = real(kind, x, s)
        return f, dx, -ds

    monkeypatch.setattr(kernelgen, "interp_eval_grad", flipped)
    assert main(["gradcheck", *GC_SMALL, "--out", str(tmp_path)]) == 1
    assert "overall FAIL" in (tmp_path / "report.txt").read_text()


def test_compare_interp_single_seed(tmp_path, capsys):
    args = ["compare-interp", *SMALL, "--set", "run.seeds=1", "--set", "optim.epochs=1", "--out", str(tmp_path)]
    assert main(args) == 0
    header, rows = csv_body(tmp_path / "compare.csv")
    assert header == ["kind", "seeds", "mean_final_loss", "final_losses"]
    kinds = [r[0] for r in rows[:3]]
    assert kinds == ["bilinear", "triangle", "gauss"]
    pairs = rows[4:]
    assert len(pairs) == 3 and all(r[1] == "n/a" for r in pairs)


def test_compare_interp_two_seeds_reports_t(tmp_path):
    args = ["compare-interp", *SMALL, "--set", "run.seeds=1,2", "--set", "run.kinds=gauss,bilinear",
            "--set", "optim.epochs=1", "--out", str(tmp_path)]
    assert main(args) == 0
    _, rows = csv_body(tmp_path / "compare.csv")
    assert rows[-1][0] == "gauss-bilinear"
    float(rows[-1][1])


def test_help_exits_cleanly(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "inspect-kernel" in capsys.readouterr().out
