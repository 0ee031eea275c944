import json
import shutil
import subprocess
import sys

import pytest

from obstacle_forge import cli
from obstacle_forge.dataset import lidar_path, load_boxes


@pytest.fixture(scope="module")
def detected(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("det")
    assert cli.main(["detect", "--dataset", str(small_dataset), "--out", str(out), "--threads", "1"]) == 0
    return out


def test_detect_then_eval(small_dataset, detected, capsys):
    boxes = load_boxes(detected / "predictions" / "boxes.csv")
    assert boxes and {b.c for b in boxes} == {"obstacle"}
    report = json.loads((detected / "report.json").read_text())
    assert report["frames"] == 15
    capsys.readouterr()
    assert cli.main(["eval", "--dataset", str(small_dataset), "--out", str(detected)]) == 0
    line = capsys.readouterr().out
    assert line.startswith("precision 1.0000 recall 1.0000")
    assert (detected / "eval" / "summary.csv").exists() and (detected / "eval" / "recall.pgm").exists()


def test_detect_is_byte_identical(small_dataset, detected, tmp_path):
    assert cli.main(["detect", "--dataset", str(small_dataset), "--out", str(tmp_path), "--threads", "1"]) == 0
    a = (detected / "predictions" / "boxes.csv").read_bytes()
    assert (tmp_path / "predictions" / "boxes.csv").read_bytes() == a


def test_baseline_writes_depths(small_dataset, tmp_path):
    assert cli.main(["baseline", "--dataset", str(small_dataset), "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "baseline" / "depths.csv").read_text().splitlines()
    assert len(rows) > 1


def test_synth_from_spec(tmp_path):
    from conftest import small_scene
    spec = tmp_path / "scene.json"
    spec.write_text(json.dumps(small_scene(duration=0.3).to_dict()))
    assert cli.main(["synth", "--config", str(spec), "--out", str(tmp_path / "seq")]) == 0
    assert (tmp_path / "seq" / "manifest.json").exists()


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["detect", "--out", "x"], ["detect", "--dataset", "d"],
                                  ["detect", "--dataset", "d", "--out", "x", "--threads", "two"],
                                  ["detect", "--dataset", "d", "--out", "x", "--threads", "0"]])
def test_usage_errors_exit_1(argv):
    try:
        code = cli.main(argv)
    except SystemExit as e:
        code = e.code
    assert code == 1


def test_missing_dataset_exits_2(tmp_path, capsys):
    assert cli.main(["detect", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2
    assert "nope" in capsys.readouterr().err


def test_corrupt_lidar_names_the_file(small_dataset, tmp_path, capsys):
    seq = tmp_path / "seq"
    shutil.copytree(small_dataset, seq)
    with open(lidar_path(seq, 3), "ab") as f:
        f.write(b"\x01\x02\x03")
    assert cli.main(["detect", "--dataset", str(seq), "--out", str(tmp_path / "o")]) == 2
    assert "000003.bin" in capsys.readouterr().err


@pytest.mark.parametrize("text", ["{broken", json.dumps({"dbscan": {"eps": -1}}), json.dumps({"nope": {}})])
def test_bad_config_exits_2(small_dataset, tmp_path, text):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(text)
    assert cli.main(["detect", "--dataset", str(small_dataset), "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_bad_scene_spec_exits_2(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"duration": -1}))
    assert cli.main(["synth", "--config", str(spec), "--out", str(tmp_path / "o")]) == 2


def test_eval_rejects_out_of_range_frames(small_dataset, detected, tmp_path):
    from obstacle_forge.dataset import save_boxes
    boxes = load_boxes(detected / "predictions" / "boxes.csv")
    boxes[0].frame_index = 99
    save_boxes(boxes, tmp_path / "bad.csv")
    assert cli.main(["eval", "--dataset", str(small_dataset), "--out", str(tmp_path),
                     "--predictions", str(tmp_path / "bad.csv")]) == 2


def test_internal_error_exits_3(small_dataset, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("kaput")
    monkeypatch.setattr(cli, "run_detect", boom)
    assert cli.main(["detect", "--dataset", str(small_dataset), "--out", str(tmp_path)]) == 3


def test_console_entry_point_usage():
    r = subprocess.run([sys.executable, "-m", "obstacle_forge.cli", "detect"], capture_output=True, text=True)
    assert r.returncode == 1 and "--dataset" in r.stderr


def test_thread_count_does_not_change_output(small_dataset, detected, tmp_path):
    assert cli.main(["detect", "--dataset", str(small_dataset), "--out", str(tmp_path), "--threads", "3"]) == 0
    assert (tmp_path / "predictions" / "boxes.csv").read_bytes() == \
        (detected / "predictions" / "boxes.csv").read_bytes()
