import numpy as np
import pytest

from alien import cli
from alien.cli import main, read_config, resample_image
from alien.codec import Detection
from alien.errors import DivergedError
from alien.fileio import read_ppm, read_truth, write_ppm, write_truth
from alien.geometry import CellOrigin, TargetTruth
from alien.inference import DETECTION_HEADER, read_detections, write_detections
from alien.model import build_alien, load_weights, save_weights, alien_arch


@pytest.fixture
def scenes(tmp_path):
    cfg = tmp_path / "scene.cfg"
    cfg.write_text("scene.width = 160\nscene.height = 160\nscene.target_count = 12\n")
    out = tmp_path / "data"
    assert main(["synth", "--spec", str(cfg), "--seed", "4", "--out", str(out), "--count", "2"]) == 0
    return out


@pytest.fixture
def small_weights(tmp_path):
    m = build_alien(1, alien_arch(0.25))
    m.params[-1].bias[::9] = 0.0
    p = tmp_path / "w.bin"
    save_weights(m, p)
    return p


def det(x, y, conf=0.9, hue=0.0, ori=0.0):
    return Detection(x, y, conf, hue, 1.0, 1.0, ori, CellOrigin(0, 0, 0, 0), 0)


# ---------------------------------------------------------------- config


def test_read_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nscene.width = 64\n\ntrain.lambda = 1 2 3 4 5 6 7 8 9  # inline\n")
    assert read_config(str(p)) == {"scene.width": "64", "train.lambda": "1 2 3 4 5 6 7 8 9"}
    p.write_text("width = 3\n")
    with pytest.raises(cli.ConfigError):
        read_config(str(p))


def test_flags_override_config_and_echo(tmp_path, caplog):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("scene.width = 64\nscene.height = 64\nscene.target_count = 0\nsynth.seed = 1\n")
    with caplog.at_level("INFO", logger="alien"):
        assert main(["-v", "synth", "--spec", str(cfg), "--seed", "9", "--out", str(tmp_path / "o")]) == 0
    assert "config synth.seed = 9" in caplog.text and "config scene.width = 64" in caplog.text


# ---------------------------------------------------------------- synth


def test_synth_background_only(tmp_path, capsys):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("scene.width = 64\nscene.height = 48\nscene.target_count = 0\n")
    assert main(["synth", "--spec", str(cfg), "--seed", "1", "--out", str(tmp_path / "o"), "--count", "1"]) == 0
    assert read_truth(tmp_path / "o" / "scene_0000.truth") == []
    assert read_ppm(tmp_path / "o" / "scene_0000.ppm").shape == (48, 64, 3)
    assert "scene_0000" in capsys.readouterr().out


def test_synth_deterministic_and_numbered(tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("scene.width = 96\nscene.height = 96\nscene.target_count = 5\n")
    for name in ("a", "b"):
        assert main(["synth", "--spec", str(cfg), "--seed", "3", "--out", str(tmp_path / name), "--count", "10"]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted([f"scene_{i:04d}.ppm" for i in range(10)] + [f"scene_{i:04d}.truth" for i in range(10)])
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_synth_invalid_spec(tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("scene.width = -5\n")
    assert main(["synth", "--spec", str(cfg), "--out", str(tmp_path / "o")]) == 2
    cfg.write_text("scene.width = wide\n")
    assert main(["synth", "--spec", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_synth_io_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--out", str(blocker / "sub"), "--count", "1"]) == 3


# ---------------------------------------------------------------- train


def test_train_zero_epochs(tmp_path, scenes):
    out = tmp_path / "w.bin"
    assert main(["train", "--data", str(scenes), "--out", str(out), "--epochs", "0", "--seed", "5", "--width", "0.25", "--chips-per-scene", "4"]) == 0
    m = load_weights(out)
    ref = build_alien(5, alien_arch(0.25))
    assert np.array_equal(m.flat_params(), ref.flat_params())
    assert (tmp_path / "w.bin.history").read_text().count("\n") == 1


def test_train_overfit_preset(tmp_path, scenes):
    out = tmp_path / "w.bin"
    assert main(["train", "--data", str(scenes), "--out", str(out), "--preset", "overfit"]) == 0
    rows = (tmp_path / "w.bin.history").read_text().splitlines()[1:]
    losses = [float(r.split()[1]) for r in rows]
    assert len(losses) == 60
    assert losses[-1] < 0.5 * losses[0]
    assert load_weights(out).arch == alien_arch(0.5)


def test_train_missing_data(tmp_path):
    out = tmp_path / "w.bin"
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(out)]) == 3
    assert not out.exists() and list(tmp_path.iterdir()) == []


def test_train_bad_config(tmp_path, scenes):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("train.lambda = 1 2\n")
    assert main(["train", "--data", str(scenes), "--config", str(cfg), "--out", str(tmp_path / "w")]) == 2
    cfg.write_text("train.batch_size = 0\n")
    assert main(["train", "--data", str(scenes), "--config", str(cfg), "--out", str(tmp_path / "w")]) == 2
    cfg.write_text("train.lr_decay_factor = -1\n")
    assert main(["train", "--data", str(scenes), "--config", str(cfg), "--out", str(tmp_path / "w")]) == 2


def test_train_diverged_exit_code(tmp_path, scenes, monkeypatch):
    def boom(*a, **k):
        raise DivergedError("non-finite loss")

    monkeypatch.setattr(cli, "train", boom)
    out = tmp_path / "w.bin"
    assert main(["train", "--data", str(scenes), "--out", str(out), "--epochs", "1", "--chips-per-scene", "2"]) == 4
    assert not out.exists()


# ---------------------------------------------------------------- infer


def test_infer_and_determinism(tmp_path, scenes, small_weights, capsys):
    img = scenes / "scene_0000.ppm"
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert main(["infer", "--weights", str(small_weights), "--image", str(img), "--out", str(a)]) == 0
    out = capsys.readouterr().out
    assert "cells: 25" in out and "raw outputs: 1125" in out
    n = len(read_detections(a))
    assert f"detections: {n}" in out and n > 0
    assert main(["infer", "--weights", str(small_weights), "--image", str(img), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_infer_high_threshold_empty(tmp_path, scenes, small_weights):
    out = tmp_path / "d.txt"
    assert main(["infer", "--weights", str(small_weights), "--image", str(scenes / "scene_0000.ppm"), "--out", str(out), "--threshold", "0.999999"]) == 0
    assert out.read_text() == DETECTION_HEADER + "\n"


def test_infer_2048_cell_count(tmp_path, small_weights, capsys):
    img = np.zeros((2048, 2048, 3), np.uint8)
    write_ppm(tmp_path / "big.ppm", img)
    assert main(["infer", "--weights", str(small_weights), "--image", str(tmp_path / "big.ppm"), "--out", str(tmp_path / "d")]) == 0
    out = capsys.readouterr().out
    assert "cells: 4096" in out and "raw outputs: 184320" in out


def test_infer_bad_magic_and_missing(tmp_path, scenes):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"GARBAGE!" + b"\0" * 16)
    img = str(scenes / "scene_0000.ppm")
    assert main(["infer", "--weights", str(bad), "--image", img, "--out", str(tmp_path / "d")]) == 2
    assert main(["infer", "--weights", str(tmp_path / "none"), "--image", img, "--out", str(tmp_path / "d")]) == 3
    assert not (tmp_path / "d").exists()


# ---------------------------------------------------------------- eval


def _eval(tmp_path, dets, truth, capsys):
    write_detections(tmp_path / "d.txt", dets)
    write_truth(tmp_path / "t.truth", truth)
    assert main(["eval", "--detections", str(tmp_path / "d.txt"), "--truth", str(tmp_path / "t.truth")]) == 0
    return capsys.readouterr().out


def test_eval_perfect(tmp_path, capsys):
    truth = [TargetTruth(10.0 * i, 20.0, 0.0, 1.0, 1.0, 0.0) for i in range(5)]
    out = _eval(tmp_path, [det(t.x, t.y) for t in truth], truth, capsys)
    assert "f1\t1.0000" in out and "localization_rmse\t0.0000" in out


def test_eval_worked_counts(tmp_path, capsys):
    truth = [TargetTruth(20.0 * i, 0.0) for i in range(625)]
    dets = [det(20.0 * i, 0.0) for i in range(616)] + [det(20.0 * i, 200.0) for i in range(43)]
    out = _eval(tmp_path, dets, truth, capsys)
    assert "f1\t0.9595" in out
    assert "tp\t616" in out and "fp\t43" in out and "fn\t9" in out


def test_eval_empty_detections(tmp_path, capsys):
    out = _eval(tmp_path, [], [TargetTruth(1.0, 1.0)], capsys)
    assert "f1\t0.0000" in out


def test_eval_sweep(tmp_path, capsys):
    write_detections(tmp_path / "d.txt", [det(0, 0, 0.9), det(40, 0, 0.6)])
    write_truth(tmp_path / "t.truth", [TargetTruth(0.0, 0.0)])
    assert main(["eval", "--detections", str(tmp_path / "d.txt"), "--truth", str(tmp_path / "t.truth"), "--sweep", "0.5,0.7"]) == 0
    out = capsys.readouterr().out
    assert "0.5000\t1\t1\t0" in out and "0.7000\t1\t0\t0" in out


def test_eval_malformed(tmp_path):
    (tmp_path / "d.txt").write_text("nonsense\n")
    write_truth(tmp_path / "t.truth", [])
    assert main(["eval", "--detections", str(tmp_path / "d.txt"), "--truth", str(tmp_path / "t.truth")]) == 3


# ---------------------------------------------------------------- render / resample


def test_render_records(tmp_path, capsys):
    write_ppm(tmp_path / "i.ppm", np.zeros((160, 160, 3), np.uint8))
    write_detections(tmp_path / "d.txt", [det(80, 112, hue=0.0, ori=0.0)])
    assert main(["render", "--image", str(tmp_path / "i.ppm"), "--detections", str(tmp_path / "d.txt"), "--out", str(tmp_path / "o.txt"), "--raster", str(tmp_path / "o.ppm")]) == 0
    lines = (tmp_path / "o.txt").read_text().splitlines()
    assert lines[0] == cli.OVERLAY_HEADER
    x, y, x1, y1, x2, y2, r, g, b = lines[1].split()
    assert (float(x1), float(y1), float(x2), float(y2)) == (80.0, 97.0, 80.0, 127.0)
    assert (r, g, b) == ("255", "0", "0")
    raster = read_ppm(tmp_path / "o.ppm")
    assert tuple(raster[100, 80]) == (255, 0, 0)
    assert tuple(raster[5, 5]) == (0, 0, 0)


def test_render_orientation_90_points_right():
    (rec,) = cli.overlay_records([det(50, 50, ori=90.0)])
    assert rec[2] == pytest.approx(65.0) and rec[3] == pytest.approx(50.0)


def test_render_empty(tmp_path):
    write_ppm(tmp_path / "i.ppm", np.zeros((8, 8, 3), np.uint8))
    write_detections(tmp_path / "d.txt", [])
    assert main(["render", "--image", str(tmp_path / "i.ppm"), "--detections", str(tmp_path / "d.txt"), "--out", str(tmp_path / "o.txt")]) == 0
    assert (tmp_path / "o.txt").read_text() == cli.OVERLAY_HEADER + "\n"


def test_render_missing_image(tmp_path):
    write_detections(tmp_path / "d.txt", [])
    assert main(["render", "--image", str(tmp_path / "x.ppm"), "--detections", str(tmp_path / "d.txt"), "--out", str(tmp_path / "o.txt")]) == 3


def test_resample(tmp_path, rng):
    img = rng.integers(0, 256, (100, 100, 3), dtype=np.uint8)
    assert np.array_equal(resample_image(img, 1.0), img)
    half = resample_image(img, 0.5)
    assert half.shape == (50, 50, 3)
    assert resample_image(resample_image(img, 2.0), 0.5).shape == img.shape
    const = np.full((10, 10, 3), 77, np.uint8)
    assert np.all(resample_image(const, 1.7) == 77)
    write_ppm(tmp_path / "i.ppm", img)
    assert main(["resample", "--image", str(tmp_path / "i.ppm"), "--scale", "0.5", "--out", str(tmp_path / "o.ppm")]) == 0
    assert read_ppm(tmp_path / "o.ppm").shape == (50, 50, 3)
    assert main(["resample", "--image", str(tmp_path / "i.ppm"), "--scale", "0", "--out", str(tmp_path / "z.ppm")]) == 2
