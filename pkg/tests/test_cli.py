"""Command-line interface: full round trips, determinism, resume, error codes."""

import json
from pathlib import Path

import numpy as np
import pytest

from uni3dseg.cli import main
from uni3dseg.scenes import load_scene


@pytest.fixture()
def workdir(tmp_path):
    (tmp_path / "catalog.json").write_text(json.dumps(
        {"names": ["floor", "wall", "crate", "barrel"],
         "is_thing": [False, False, True, True]}))
    (tmp_path / "spec.json").write_text(json.dumps({
        "extent": [3.0, 3.0, 2.0],
        "floor_points": 200, "wall_points": 20,
        "object_count": [2, 3], "points_per_object": 80,
        "catalog": {"names": ["floor", "wall", "crate", "barrel"],
                    "is_thing": [False, False, True, True]},
        "things": {
            "crate": {"shape": "box", "color": [0.72, 0.3, 0.2], "size": [0.4, 0.55]},
            "barrel": {"shape": "cylinder", "color": [0.2, 0.3, 0.72], "size": [0.4, 0.5],
                       "aspect_z": 1.4},
        },
    }))
    (tmp_path / "config.json").write_text(json.dumps({
        "schema": 1,
        "catalog": "catalog.json",
        "query_bank": {"synth": {"k": 2, "l": 2, "d_e": 16, "seed": 1}},
        "scenes": {"generate": {"spec": "spec.json", "count": 6, "seed": 2}},
        "model": {"d": 16, "S": 8, "B": 1, "s": 16, "voxel_size": 0.3},
        "loss": {"lambda1": 1.0, "lambda2": 1.0, "lambda3": 0.1},
        "optimizer": {"lr": 0.005, "weight_decay": 0.01, "batch_size": 2, "steps": 8},
        "augment": {"flip_prob": 0.5, "rotation_max": 1.57, "scale_range": [0.98, 1.02]},
        "seed": 9,
        "holdout_fraction": 0.34,
        "output_dir": str(tmp_path / "out"),
    }))
    return tmp_path


class TestGen:
    def test_writes_requested_scene_count(self, workdir):
        out = workdir / "scenes"
        rc = main(["gen", "--spec", str(workdir / "spec.json"), "--scenes", "2",
                   "--seed", "3", "--out", str(out)])
        assert rc == 0
        index = json.loads((out / "index.json").read_text())
        assert len(index["scenes"]) == 2
        for name in index["scenes"]:
            assert (out / name).exists()

    def test_same_seed_byte_identical(self, workdir):
        a, b = workdir / "a", workdir / "b"
        for out in (a, b):
            main(["gen", "--spec", str(workdir / "spec.json"), "--scenes", "2",
                  "--seed", "5", "--out", str(out)])
        for name in ("scene_00000.u3dt", "scene_00001.u3dt", "index.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_zero_scenes_is_usage_error(self, workdir, capsys):
        rc = main(["gen", "--spec", str(workdir / "spec.json"), "--scenes", "0",
                   "--out", str(workdir / "x")])
        assert rc == 2
        assert "ERROR[USAGE]" in capsys.readouterr().err

    def test_bad_spec_reports_config_error(self, workdir, capsys):
        bad = workdir / "bad.json"
        bad.write_text("{}")
        rc = main(["gen", "--spec", str(bad), "--scenes", "1", "--out", str(workdir / "x")])
        assert rc == 1
        assert "ERROR[CONFIG]" in capsys.readouterr().err


class TestTrain:
    def test_produces_log_and_checkpoint(self, workdir):
        rc = main(["train", "--config", str(workdir / "config.json")])
        assert rc == 0
        log = (workdir / "out" / "loss_log.jsonl").read_text().splitlines()
        assert len(log) == 8
        records = [json.loads(line) for line in log]
        assert [r["step"] for r in records] == list(range(8))
        assert all(np.isfinite(r["total"]) for r in records)
        assert (workdir / "out" / "checkpoint.u3dt").exists()
        assert (workdir / "out" / "summary.json").exists()

    def test_deterministic_loss_log(self, workdir):
        main(["train", "--config", str(workdir / "config.json")])
        first = (workdir / "out" / "loss_log.jsonl").read_bytes()
        main(["train", "--config", str(workdir / "config.json")])
        assert (workdir / "out" / "loss_log.jsonl").read_bytes() == first

    def test_resume_reproduces_uninterrupted_run(self, workdir):
        main(["train", "--config", str(workdir / "config.json")])
        full_log = (workdir / "out" / "loss_log.jsonl").read_bytes()
        full_ckpt = (workdir / "out" / "checkpoint.u3dt").read_bytes()

        doc = json.loads((workdir / "config.json").read_text())
        doc["output_dir"] = str(workdir / "out2")
        (workdir / "config2.json").write_text(json.dumps(doc))
        main(["train", "--config", str(workdir / "config2.json"), "--stop-after", "3"])
        partial = (workdir / "out2" / "loss_log.jsonl").read_text().splitlines()
        assert len(partial) == 3

        rc = main(["train", "--config", str(workdir / "config2.json"),
                   "--resume", str(workdir / "out2" / "checkpoint.u3dt")])
        assert rc == 0
        assert (workdir / "out2" / "loss_log.jsonl").read_bytes() == full_log
        assert (workdir / "out2" / "checkpoint.u3dt").read_bytes() == full_ckpt


class TestEval:
    def test_oracle_mode_all_ones(self, workdir, capsys):
        main(["gen", "--spec", str(workdir / "spec.json"), "--scenes", "2",
              "--seed", "4", "--out", str(workdir / "scenes")])
        main(["train", "--config", str(workdir / "config.json")])
        capsys.readouterr()
        rc = main(["eval", "--config", str(workdir / "config.json"),
                   "--checkpoint", str(workdir / "out" / "checkpoint.u3dt"),
                   "--scenes", str(workdir / "scenes"), "--oracle"])
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert report["miou"] == 1.0
        assert report["map"] == 1.0
        assert report["pq"] == 1.0

    def test_untrained_eval_emits_report(self, workdir, capsys):
        main(["gen", "--spec", str(workdir / "spec.json"), "--scenes", "2",
              "--seed", "4", "--out", str(workdir / "scenes")])
        main(["train", "--config", str(workdir / "config.json")])
        capsys.readouterr()
        rc = main(["eval", "--config", str(workdir / "config.json"),
                   "--checkpoint", str(workdir / "out" / "checkpoint.u3dt"),
                   "--scenes", str(workdir / "scenes")])
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        for value in report.values():
            if isinstance(value, float):
                assert np.isfinite(value)

    def test_dim_mismatch_is_explicit(self, workdir, capsys):
        main(["train", "--config", str(workdir / "config.json")])
        doc = json.loads((workdir / "config.json").read_text())
        doc["query_bank"]["synth"]["d_e"] = 24
        (workdir / "config_wide.json").write_text(json.dumps(doc))
        main(["gen", "--spec", str(workdir / "spec.json"), "--scenes", "1",
              "--seed", "4", "--out", str(workdir / "scenes")])
        rc = main(["eval", "--config", str(workdir / "config_wide.json"),
                   "--checkpoint", str(workdir / "out" / "checkpoint.u3dt"),
                   "--scenes", str(workdir / "scenes")])
        assert rc == 1
        err = capsys.readouterr().err
        assert "ERROR[" in err
        assert "d_e=16" in err and "d_e=24" in err


class TestPredict:
    def run_predict(self, workdir, out_prefix):
        main(["gen", "--spec", str(workdir / "spec.json"), "--scenes", "1",
              "--seed", "6", "--out", str(workdir / "scenes")])
        main(["train", "--config", str(workdir / "config.json")])
        return main(["predict", "--config", str(workdir / "config.json"),
                     "--checkpoint", str(workdir / "out" / "checkpoint.u3dt"),
                     "--scene", str(workdir / "scenes" / "scene_00000.u3dt"),
                     "--out-ply", str(out_prefix)])

    def test_outputs_match_point_count(self, workdir):
        rc = self.run_predict(workdir, workdir / "pred")
        assert rc == 0
        pc = load_scene(workdir / "scenes" / "scene_00000.u3dt")
        for kind in ("semantic", "instance", "panoptic"):
            text = (workdir / f"pred_{kind}.ply").read_text()
            assert f"element vertex {pc.n_points}" in text
        assignments = json.loads((workdir / "pred_assignments.json").read_text())
        assert len(assignments["semantic"]) == pc.n_points

    def test_identical_seeds_identical_ply_bytes(self, workdir):
        self.run_predict(workdir, workdir / "predA")
        rc = main(["predict", "--config", str(workdir / "config.json"),
                   "--checkpoint", str(workdir / "out" / "checkpoint.u3dt"),
                   "--scene", str(workdir / "scenes" / "scene_00000.u3dt"),
                   "--out-ply", str(workdir / "predB")])
        assert rc == 0
        for kind in ("semantic", "instance", "panoptic"):
            assert (workdir / f"predA_{kind}.ply").read_bytes() == \
                (workdir / f"predB_{kind}.ply").read_bytes()

    def test_distinct_segments_get_distinct_colors(self, workdir):
        self.run_predict(workdir, workdir / "pred")
        assignments = json.loads((workdir / "pred_assignments.json").read_text())
        segs = np.asarray(assignments["panoptic_segment"])
        lines = (workdir / "pred_panoptic.ply").read_text().splitlines()
        body = lines[lines.index("end_header") + 1:]
        colors = np.array([[int(v) for v in line.split()[3:6]] for line in body])
        seg_colors = {}
        for seg in np.unique(segs[segs > 0]):
            rows = np.flatnonzero(segs == seg)
            unique = {tuple(c) for c in colors[rows]}
            assert len(unique) == 1
            seg_colors[int(seg)] = unique.pop()
        assert len(set(seg_colors.values())) == len(seg_colors)


class TestErrorPlumbing:
    def test_missing_config(self, workdir, capsys):
        rc = main(["train", "--config", str(workdir / "nope.json")])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("ERROR[CONFIG]")
        assert err.count("\n") == 1

    def test_bad_checkpoint(self, workdir, capsys):
        (workdir / "junk.ckpt").write_bytes(b"junk\njunk")
        main(["gen", "--spec", str(workdir / "spec.json"), "--scenes", "1",
              "--seed", "4", "--out", str(workdir / "scenes")])
        rc = main(["eval", "--config", str(workdir / "config.json"),
                   "--checkpoint", str(workdir / "junk.ckpt"),
                   "--scenes", str(workdir / "scenes")])
        assert rc == 1
        assert "ERROR[CHECKPOINT]" in capsys.readouterr().err
