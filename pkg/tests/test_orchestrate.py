import json
from dataclasses import replace

import jsonschema
import numpy as np
import pytest

from rotkd import toynet
from rotkd.orchestrate import (
    CONFIG_SCHEMA, ExperimentConfig, OptimConfig, distill_student, format_table, prepare,
    run_ablation, train_baseline, train_teacher,
)

TINY = {
    "seed": 3,
    "data": {"n_train": 12, "n_test": 6, "scene": {"image_size": 32, "num_classes": 2,
                                                   "long_side": [10, 16], "num_objects": [1, 2]}},
    "anchors": {"scales": [12], "ratios": [0.5, 2.0]},
    "teacher_width": 4,
    "student_width": 2,
    "optim": {"lr": 0.02, "batch_size": 4, "steps": 25},
    "ablation_widths": [2, 3],
}


@pytest.fixture(scope="module")
def tiny():
    cfg = ExperimentConfig.from_dict(json.loads(json.dumps(TINY)))
    prep = prepare(cfg)
    teacher = train_teacher(cfg, prep)
    return cfg, prep, teacher


class TestConfig:
    def test_defaults_validate(self):
        cfg = ExperimentConfig()
        jsonschema.validate(cfg.to_dict(), CONFIG_SCHEMA)
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg

    def test_reference_experiment_size(self):
        cfg = ExperimentConfig()
        assert (cfg.n_train, cfg.n_test, cfg.optim.steps) == (200, 50, 2000)
        assert cfg.scene.shape == (64, 64) and cfg.scene.num_objects == (2, 4)
        assert cfg.scene.num_classes == 3
        assert cfg.teacher_width == 4 * cfg.student_width

    @pytest.mark.parametrize("bad", [
        {"seed": -1}, {"distill": {"lambda3": -0.5}}, {"distill": {"kd_direction": "sideways"}},
        {"optim": {"steps": 1.5}}, {"unknown_key": 1}, {"data": {"scene": {"long_side": [10]}}},
    ])
    def test_schema_rejects(self, bad):
        with pytest.raises(jsonschema.ValidationError):
            ExperimentConfig.from_dict(bad)

    def test_hash_ignores_output_dir(self):
        a = ExperimentConfig.from_dict({"output_dir": "x"})
        b = ExperimentConfig.from_dict({"output_dir": "y"})
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != ExperimentConfig.from_dict({"seed": 5}).config_hash()

    def test_lr_schedule(self):
        o = OptimConfig(lr=1.0, decay_at=(0.5, 0.75), decay_factor=0.1)
        assert [o.lr_at(s, 100) for s in (0, 49, 50, 74, 75, 99)] == pytest.approx(
            [1, 1, 0.1, 0.1, 0.01, 0.01])


class TestRuns:
    def test_teacher_record(self, tiny):
        cfg, _, (rec, params) = tiny
        assert rec.role == "teacher" and rec.width == 4
        assert len(rec.loss_trace) == 25
        assert all(t["l_kd_cls"] == 0 and t["l_kd_reg"] == 0 for t in rec.loss_trace)
        assert {"map_dota", "ap75", "map_coco"} <= set(rec.test_eval)
        assert rec.param_count == toynet.param_count(params)

    def test_zero_steps_untrained(self, tiny):
        cfg, prep, _ = tiny
        cfg0 = replace(cfg, optim=replace(cfg.optim, steps=0))
        rec, params = train_teacher(cfg0, prep)
        ref = toynet.init_params(cfg.detector(cfg.teacher_width), cfg.seed)
        for k in ref:
            np.testing.assert_array_equal(params[k], ref[k])
        assert rec.loss_trace == [] and rec.test_eval["map_dota"] < 0.2

    def test_rerun_identical(self, tiny):
        cfg, prep, (rec, _) = tiny
        rec2, _ = train_teacher(cfg, prepare(cfg))
        assert json.dumps(rec.to_dict(), sort_keys=True) == json.dumps(rec2.to_dict(), sort_keys=True)

    def test_no_kd_distill_equals_baseline(self, tiny):
        cfg, prep, (_, tparams) = tiny
        base, bp = train_baseline(cfg, prep)
        dcfg = replace(cfg.distill, lambda3=0.0, lambda4=0.0)
        dist, dp = distill_student(cfg, tparams, prep, dcfg=dcfg)
        assert base.loss_trace == dist.loss_trace
        for k in bp:
            np.testing.assert_array_equal(bp[k], dp[k])

    def test_teacher_untouched(self, tiny):
        cfg, prep, (_, tparams) = tiny
        before = {k: v.copy() for k, v in tparams.items()}
        distill_student(cfg, tparams, prep)
        for k in before:
            np.testing.assert_array_equal(before[k], tparams[k])

    def test_self_distillation_starts_at_zero(self, tiny):
        cfg, prep, (_, tparams) = tiny
        dcfg = replace(cfg.distill, lambda1=0.0, lambda2=0.0)
        rec, _ = distill_student(cfg, tparams, prep, width=cfg.teacher_width, dcfg=dcfg,
                                 student_init=tparams)
        first = rec.loss_trace[0]
        assert first["l_kd_cls"] == pytest.approx(0.0, abs=1e-12)
        assert first["l_kd_reg"] == pytest.approx(0.0, abs=1e-12)

    def test_class_count_mismatch(self, tiny):
        cfg, prep, _ = tiny
        other = replace(cfg, scene=replace(cfg.scene, num_classes=3))
        _, tparams = train_teacher(replace(other, optim=replace(other.optim, steps=0)))
        with pytest.raises(ValueError, match="class outputs"):
            distill_student(cfg, tparams, prep)

    def test_checkpoints_written(self, tiny, tmp_path):
        cfg, prep, _ = tiny
        cfg = replace(cfg, output_dir=str(tmp_path), optim=replace(cfg.optim, steps=2))
        rec, params = train_teacher(cfg, prep)
        loaded, det, meta = toynet.load_checkpoint(rec.checkpoint)
        assert det.width == cfg.teacher_width and meta["role"] == "teacher"
        for k in params:
            np.testing.assert_array_equal(loaded[k], params[k])
        before = (tmp_path / "teacher.ckpt.json").read_bytes()
        distill_student(cfg, params, prep)
        assert (tmp_path / "teacher.ckpt.json").read_bytes() == before


class TestAblation:
    def test_table(self, tiny):
        cfg, prep, teacher = tiny
        table = run_ablation(cfg, prep, teacher)
        rows = table["rows"]
        assert [r["variant"] for r in rows] == ["teacher"] + ["baseline", "kd_cls", "kd_cls_reg"] * 2
        assert all(r["status"] == "ok" for r in rows)
        by = {(r["variant"], r.get("width")): r for r in rows}
        assert by[("baseline", 3)]["params"] > by[("baseline", 2)]["params"]
        assert rows[0]["params"] > by[("baseline", 3)]["params"]
        base, _ = train_baseline(cfg, prep, width=2, role="baseline_w2")
        assert by[("baseline", 2)]["map_dota"] == base.summary()["map_dota"]
        text = format_table(rows)
        assert "kd_cls_reg" in text and len(text.splitlines()) == len(rows) + 1

    def test_failed_row_continues(self, tiny, monkeypatch):
        cfg, prep, teacher = tiny
        import rotkd.orchestrate as orch

        real = orch.distill_student

        def flaky(cfg_, tp, prep_, width=None, dcfg=None, role="", **kw):
            if role == "kd_cls_w2":
                raise orch.TrainingDiverged("non-finite loss at step 3")
            return real(cfg_, tp, prep_, width=width, dcfg=dcfg, role=role, **kw)
        monkeypatch.setattr(orch, "distill_student", flaky)
        rows = run_ablation(replace(cfg, ablation_widths=(2,)), prep, teacher)["rows"]
        status = {r["variant"]: r["status"] for r in rows}
        assert status["kd_cls"].startswith("failed") and status["kd_cls_reg"] == "ok"

    def test_kd_cls_row_config_diff(self, tiny):
        cfg, prep, teacher = tiny
        rows = run_ablation(replace(cfg, ablation_widths=(2,)), prep, teacher)["rows"]
        assert [r["kd_cls"] for r in rows[1:]] == [False, True, True]
        assert [r["kd_reg"] for r in rows[1:]] == [False, False, True]
        base, kd_cls = rows[1]["distill"], rows[2]["distill"]
        assert {k for k in base if base[k] != kd_cls[k]} == {"lambda3"}
