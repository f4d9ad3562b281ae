import json
import subprocess
import sys

import pytest

from rotkd.cli import main
from rotkd.data import parse_dota_annotation, read_task1, write_task1
from rotkd.evaluation import Detection
from rotkd.geometry import RotatedBox

TINY = {
    "seed": 1,
    "data": {"n_train": 8, "n_test": 4, "scene": {"image_size": 32, "num_classes": 2,
                                                  "long_side": [10, 16], "num_objects": [1, 2]}},
    "anchors": {"scales": [12], "ratios": [1.0]},
    "teacher_width": 3,
    "student_width": 2,
    "optim": {"lr": 0.02, "batch_size": 4, "steps": 6},
    "ablation_widths": [2],
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_data(tmp_path, config, capsys):
    out = tmp_path / "data"
    assert run("gen-data", "--config", config, "--output-dir", out) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["train"]) == 8 and len(manifest["test"]) == 4
    assert "train" in capsys.readouterr().out


def test_train_distill_evaluate(tmp_path, config):
    out = tmp_path / "run"
    assert run("train-teacher", "--config", config, "--output-dir", out) == 0
    teacher = out / "teacher.ckpt.json"
    rec = json.loads((out / "teacher.record.json").read_text())
    assert rec["role"] == "teacher" and len(rec["loss_trace"]) == 6
    assert (out / "teacher.record.txt").read_text().startswith(" " * 7 + "variant")

    assert run("train-baseline", "--config", config, "--output-dir", out) == 0
    assert run("distill", "--config", config, "--output-dir", out, "--teacher", teacher) == 0
    base = json.loads((out / "baseline.record.json").read_text())
    dist = json.loads((out / "distilled.record.json").read_text())
    assert dist["teacher_checkpoint"] == str(teacher)
    assert dist["loss_trace"][0]["l_kd_cls"] > 0
    assert base["loss_trace"][0]["l_kd_cls"] == 0

    assert run("evaluate", "--config", config, "--output-dir", out, "--checkpoint", teacher,
               "--pr-csv", "--task1") == 0
    ev = json.loads((out / "eval_test.json").read_text())
    assert ev["map_dota"] == rec["test_eval"]["map_dota"]
    assert (out / "pr_test_class0.csv").exists()
    assert (out / "task1" / "Task1_0.txt").exists()


def test_overrides_reach_config(tmp_path, config):
    out = tmp_path / "o"
    assert run("train-baseline", "--config", config, "--output-dir", out, "--steps", "2",
               "--lambda3", "0.5", "--student-width", "3") == 0
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["optim"]["steps"] == 2 and resolved["distill"]["lambda3"] == 0.5
    rec = json.loads((out / "baseline.record.json").read_text())
    assert rec["width"] == 3 and len(rec["loss_trace"]) == 2


def test_ablate(tmp_path, config):
    out = tmp_path / "abl"
    assert run("ablate", "--config", config, "--output-dir", out) == 0
    table = json.loads((out / "ablation.json").read_text())
    assert [r["variant"] for r in table["rows"]] == ["teacher", "baseline", "kd_cls", "kd_cls_reg"]
    assert "kd_cls_reg" in (out / "ablation.txt").read_text()


def test_reports_byte_identical(tmp_path, config):
    for name in ("a", "b"):
        assert run("train-teacher", "--config", config, "--output-dir", tmp_path / name) == 0
    for f in ("teacher.record.json", "teacher.ckpt.json"):
        a = (tmp_path / "a" / f).read_text().replace(str(tmp_path / "a"), "")
        b = (tmp_path / "b" / f).read_text().replace(str(tmp_path / "b"), "")
        assert a == b


def test_tile_and_merge(tmp_path):
    labels = tmp_path / "P0001.txt"
    labels.write_text("imagesource:synthetic\ngsd:1\n"
                      "100 100 140 100 140 120 100 120 plane 0\n"
                      "700 700 760 700 760 730 700 730 ship 1\n"
                      "440 200 480 200 480 220 440 220 small-vehicle 0\n")
    tiles = tmp_path / "tiles"
    assert run("tile", "--height", 900, "--width", 900, "--annotation", labels,
               "--image-id", "P0001", "--out", tiles) == 0
    report = json.loads((tiles / "tiles.json").read_text())
    assert sorted(map(tuple, report["origins"])) == [(0, 0), (0, 300), (300, 0), (300, 300)]
    counts = {t["image_id"]: t["objects"] for t in report["tiles"]}
    assert counts == {"P0001__0_0": 2, "P0001__300_0": 1, "P0001__0_300": 0, "P0001__300_300": 1}
    (box, _, _), = parse_dota_annotation((tiles / "P0001__300_300.txt").read_text())
    assert (box.cx, box.cy) == pytest.approx((430, 415))

    # the same object seen from two tiles collapses to one image-frame detection
    dets = [Detection(RotatedBox(460, 210, 40, 20, 0), 0, 0.9, "P0001__0_0"),
            Detection(RotatedBox(160, 210, 40, 20, 0), 0, 0.8, "P0001__300_0"),
            Detection(RotatedBox(30, 40, 10, 5, 0.3), 1, 0.7, "P0001__300_300")]
    tile_dets = tmp_path / "tile_dets"
    write_task1(dets, tile_dets)
    merged = tmp_path / "merged"
    assert run("merge", "--input", tile_dets, "--out", merged) == 0
    out = sorted(read_task1(merged), key=lambda d: d.cls)
    assert [(d.cls, d.score, d.image_id) for d in out] == [(0, 0.9, "P0001"), (1, 0.7, "P0001")]
    assert (out[1].box.cx, out[1].box.cy) == pytest.approx((330, 340), abs=1e-5)


@pytest.mark.parametrize("argv,needle", [
    (["train-teacher", "--config", "missing.json", "--output-dir", "{tmp}"], "config file not found"),
    (["distill", "--teacher", "nope.json", "--output-dir", "{tmp}"], "teacher checkpoint not found"),
    (["tile", "--height", "900", "--width", "900", "--overlap", "700", "--out", "{tmp}"], "overlap"),
])
def test_errors_exit_nonzero(tmp_path, capsys, argv, needle):
    argv = [a.replace("{tmp}", str(tmp_path)) for a in argv]
    assert main(argv) == 1
    assert needle in capsys.readouterr().err


def test_schema_violation(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"distill": {"lambda1": -1}}))
    assert main(["train-teacher", "--config", str(bad), "--output-dir", str(tmp_path)]) == 1
    assert "distill/lambda1" in capsys.readouterr().err


def test_malformed_annotation(tmp_path, capsys):
    labels = tmp_path / "bad.txt"
    labels.write_text("0 0 2 0 2 2 0 2 plane\n")
    assert main(["tile", "--height", "900", "--width", "900", "--annotation", str(labels),
                 "--out", str(tmp_path / "t")]) == 1
    assert "line 1" in capsys.readouterr().err


def test_merge_rejects_untiled_ids(tmp_path, capsys):
    write_task1([Detection(RotatedBox(5, 5, 4, 2, 0), 0, 0.5, "plain")], tmp_path / "in")
    assert main(["merge", "--input", str(tmp_path / "in"), "--out", str(tmp_path / "out")]) == 1
    assert "<image>__<x0>_<y0>" in capsys.readouterr().err


def test_checkpoint_class_mismatch(tmp_path, config, capsys):
    out = tmp_path / "t"
    assert run("train-teacher", "--config", config, "--output-dir", out, "--steps", "0") == 0
    assert main(["distill", "--config", str(config), "--num-classes", "3", "--output-dir", str(out),
                 "--teacher", str(out / "teacher.ckpt.json")]) == 1
    assert "num_classes" in capsys.readouterr().err


def test_usage_error_and_module_entry():
    assert subprocess.run([sys.executable, "-m", "rotkd", "bogus"], capture_output=True).returncode == 2
    res = subprocess.run([sys.executable, "-m", "rotkd", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "ablate" in res.stdout
