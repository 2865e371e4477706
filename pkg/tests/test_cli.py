import csv

import numpy as np
import pytest

from rrnet.cli import main, weights_name
from rrnet.codec import Frame, encode_frame
from rrnet.formats import read_partition, read_pgm, read_resi, write_pgm
from rrnet.model import ModelConfig, Variant, build_model
from rrnet.weights import load_weights, save_weights

QPS = ["22", "27", "32", "37"]


def textured(seed, h=64, w=64):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:h, :w]
    plane = 120 + 50 * np.sin(xx / 4.0 + seed) * np.cos(yy / 6.0) + rng.normal(0, 8, (h, w))
    return Frame(np.clip(plane, 0, 255).astype(np.uint8))


@pytest.fixture
def image(tmp_path):
    path = tmp_path / "img.pgm"
    write_pgm(path, textured(0, 72, 80))
    return path


def test_encode_writes_all_outputs(tmp_path, image, capsys):
    assert main(["encode", "--in", str(image), "--qp", "37", "--out-dir", str(tmp_path / "d")]) == 0
    d = tmp_path / "d"
    triple = encode_frame(read_pgm(image), 37)
    assert read_pgm(d / "img.q37.recon.pgm") == triple.reconstruction
    np.testing.assert_array_equal(read_resi(d / "img.q37.resi"), triple.residual)
    assert read_partition(d / "img.q37.part.txt") == triple.partition
    line = (d / "img.q37.rate.txt").read_text()
    assert line == f"rate_proxy {triple.rate_proxy!r}\n"
    assert capsys.readouterr().out == line


def test_encode_is_reproducible_and_leaves_input(tmp_path, image):
    before = image.read_bytes()
    for out in ("a", "b"):
        assert main(["encode", "--in", str(image), "--qp", "27", "--out-dir", str(tmp_path / out)]) == 0
    assert image.read_bytes() == before
    for name in ("img.q27.recon.pgm", "img.q27.resi", "img.q27.part.txt", "img.q27.rate.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def write_curve(path, rows):
    path.write_text("rate,psnr\n" + "".join(f"{r},{q}\n" for r, q in rows))
    return path


def test_bdrate_identical_prints_zero(tmp_path, capsys):
    rows = [(1000, 30.0), (1800, 32.5), (3100, 35.2), (5200, 38.0)]
    a = write_curve(tmp_path / "a.csv", rows)
    t = write_curve(tmp_path / "t.csv", rows)
    assert main(["bdrate", "--anchor", str(a), "--test", str(t)]) == 0
    assert capsys.readouterr().out == "0.00\n"


def test_bdrate_bad_curve_is_validation_error(tmp_path, capsys):
    a = write_curve(tmp_path / "a.csv", [(1000, 30.0), (1800, 32.5), (3100, 35.2), (5200, 38.0)])
    t = write_curve(tmp_path / "t.csv", [(1000, 30.0), (1800, 32.5)])
    assert main(["bdrate", "--anchor", str(a), "--test", str(t)]) == 1
    assert "4 are required" in capsys.readouterr().err


def test_unknown_subcommand_prints_usage(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_no_subcommand(capsys):
    assert main([]) == 1


def test_missing_input_is_io_error(tmp_path, capsys):
    assert main(["encode", "--in", str(tmp_path / "nope.pgm"), "--qp", "37", "--out-dir", str(tmp_path)]) == 2
    assert "I/O error" in capsys.readouterr().err


def test_bad_qp_is_validation_error(tmp_path, image):
    assert main(["encode", "--in", str(image), "--qp", "60", "--out-dir", str(tmp_path)]) == 1


def test_config_unknown_key(tmp_path, image, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("bogus = 1\n")
    assert main(["encode", "--config", str(cfg), "--in", str(image), "--qp", "37", "--out-dir", str(tmp_path)]) == 1
    assert "bogus" in capsys.readouterr().err


def test_corrupt_weights_is_format_error(tmp_path, image, capsys):
    bad = tmp_path / "w.rrnw"
    bad.write_bytes(b"XXXX" + bytes(40))
    code = main(["apply", "--weights", str(bad), "--in", str(image), "--qp", "37", "--out", str(tmp_path / "o.pgm")])
    assert code == 2
    assert "magic" in capsys.readouterr().err


def test_apply_with_planes_and_unknown_layer(tmp_path, image, capsys):
    w = tmp_path / "w.rrnw"
    save_weights(build_model(ModelConfig(Variant.PARTITION_RECON)), w)
    main(["encode", "--in", str(image), "--qp", "32", "--out-dir", str(tmp_path / "c")])
    c = tmp_path / "c"
    args = ["apply", "--weights", str(w), "--recon", str(c / "img.q32.recon.pgm"), "--residual", str(c / "img.q32.resi")]
    assert main(args + ["--out", str(tmp_path / "o.pgm")]) == 1  # mask variant needs the partition
    args += ["--partition", str(c / "img.q32.part.txt"), "--out", str(tmp_path / "o.pgm")]
    assert main(args) == 0
    assert read_pgm(tmp_path / "o.pgm").plane.shape == (72, 80)
    code = main(
        ["dump-features", "--weights", str(w), "--in", str(image), "--qp", "32", "--layer", "nope", "--out-dir", str(tmp_path)]
    )
    assert code == 1
    assert "aux.conv1" in capsys.readouterr().err


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("max relative error")
    assert float(out.split()[3]) <= 1e-5


def test_pipeline_end_to_end(tmp_path, capsys):
    images = tmp_path / "imgs"
    for i in range(2):
        write_pgm(images / f"s{i}.pgm", textured(i + 1, 64, 128))
    cfg = tmp_path / "run.cfg"
    cfg.write_text("batch_size = 2\nedsr_channels = 8\n")
    common = ["--config", str(cfg)]
    ds = tmp_path / "ds"
    assert main(["dataset", *common, "--images", str(images), "--qps", "37", "--out-dir", str(ds)]) == 0
    weights = tmp_path / "w"
    w37 = weights / weights_name("RECON_ONLY_EDSR", 37)
    assert main(["train", *common, "--manifest", str(ds / "manifest.tsv"), "--variant", "RECON_ONLY_EDSR",
                 "--epochs", "2", "--out", str(w37)]) == 0
    assert load_weights(w37).config.qp_tag == 37
    history = list(csv.reader(open(w37.with_suffix(".loss.csv"))))
    assert history[0] == ["epoch", "loss"] and len(history) == 3
    assert w37.with_suffix(".loss.png").stat().st_size > 0

    for qp in (22, 27, 32):
        d = tmp_path / f"ds{qp}"
        assert main(["dataset", *common, "--images", str(images), "--qps", str(qp), "--out-dir", str(d)]) == 0
        out = weights / weights_name("RECON_ONLY_EDSR", qp)
        assert main(["finetune", *common, "--base", str(w37), "--manifest", str(d / "manifest.tsv"),
                     "--epochs", "1", "--out", str(out)]) == 0
        assert load_weights(out).config.qp_tag == qp

    report = tmp_path / "report"
    assert main(["eval", *common, "--weights-dir", str(weights), "--variants", "RECON_ONLY_EDSR",
                 "--images", str(images), "--qps", *QPS, "--out-dir", str(report)]) == 0
    for name in ("report.csv", "report.txt", "rd_curves.png", "gains.png"):
        assert (report / name).stat().st_size > 0
    rows = list(csv.reader(open(report / "report.csv")))
    assert {r[1] for r in rows[1:]} == {"s0", "s1", "average"}

    cross = tmp_path / "cross"
    assert main(["crossqp", *common, "--weights-dir", str(weights), "--variant", "RECON_ONLY_EDSR",
                 "--images", str(images), "--qps", *QPS, "--out-dir", str(cross)]) == 0
    matrix = list(csv.reader(open(cross / "cross_qp.csv")))
    assert len(matrix) == 5 and all(matrix[i][i] == "0.0000" for i in range(1, 5))
    assert (cross / "cross_qp.png").stat().st_size > 0

    feats = tmp_path / "feats"
    assert main(["dump-features", "--weights", str(w37), "--in", str(images / "s0.pgm"), "--qp", "37",
                 "--layer", "rec.conv8", "--out-dir", str(feats)]) == 0
    assert len(list(feats.glob("rec.conv8.c*.pgm"))) == 8

    capsys.readouterr()
    # eval is reproducible byte for byte
    again = tmp_path / "report2"
    main(["eval", *common, "--weights-dir", str(weights), "--variants", "RECON_ONLY_EDSR",
          "--images", str(images), "--qps", *QPS, "--out-dir", str(again)])
    for name in ("report.csv", "report.txt", "rd_curves.png", "gains.png"):
        assert (report / name).read_bytes() == (again / name).read_bytes()


def test_eval_missing_weights(tmp_path, capsys):
    assert main(["eval", "--weights-dir", str(tmp_path), "--out-dir", str(tmp_path / "o"), "--qps", "37"]) == 2
