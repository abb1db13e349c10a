"""End-to-end tests for the command-line interface (exit codes and outputs)."""

from __future__ import annotations

import json

import numpy as np
import pytest

from mbasfm.cli import main
from mbasfm.io_formats import write_correspondences

SYNTH_CONFIG = {
    "frame_count": 4,
    "trajectory": "orbit",
    "surface": "sinusoid_heightfield",
    "affine_alpha_range": [0.9, 1.1],
    "affine_beta_range": [-0.1, 0.1],
    "seed": 2,
}

FAST = ["--kappa", "64", "--iters-coarse", "15", "--iters-fine", "15"]


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    (out / "config.json").write_text(json.dumps(SYNTH_CONFIG))
    assert main(["synth", "--config", str(out / "config.json"),
                 "--out", str(out)]) == 0
    return out


class TestParsing:
    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "sfm" in capsys.readouterr().out

    def test_unknown_command_exits_one(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_missing_required_flag_exits_one(self):
        assert main(["sfm", "--out", "/tmp/x"]) == 1


class TestSfm:
    def test_full_loop_with_eval(self, scene_dir, tmp_path, capsys):
        run = tmp_path / "run"
        code = main(["sfm", "--manifest", str(scene_dir / "manifest.json"),
                     "--out", str(run), "--shared-intrinsics", "--ply", "8", *FAST])
        out = capsys.readouterr()
        assert code == 0, out.err
        assert "registered 4/4 frames" in out.out
        assert (run / "result.json").exists()
        assert (run / "residual_histogram.csv").exists()
        assert (run / "cloud.ply").read_text().startswith("ply")
        assert main(["eval", "--est", str(run / "result.json"),
                     "--gt", str(scene_dir / "ground_truth.json")]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert any(line.startswith("RRA@5 = ") for line in lines)
        assert any(line.startswith("ATE = ") for line in lines)

    def test_eval_json_output(self, scene_dir, tmp_path, capsys):
        run = tmp_path / "run"
        assert main(["sfm", "--manifest", str(scene_dir / "manifest.json"),
                     "--out", str(run), *FAST]) == 0
        capsys.readouterr()
        assert main(["eval", "--est", str(run / "result.json"),
                     "--gt", str(scene_dir / "ground_truth.json"), "--json"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert set(report) >= {"RRA@5", "RTA@5", "AUC_rot@5", "AUC_trans@5", "ATE"}

    def test_seed_determinism_byte_identical(self, scene_dir, tmp_path, capsys):
        runs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["sfm", "--manifest", str(scene_dir / "manifest.json"),
                         "--out", str(out), "--seed", "3", *FAST]) == 0
            runs.append(out)
        capsys.readouterr()
        assert (runs[0] / "result.json").read_bytes() == (runs[1] / "result.json").read_bytes()
        assert ((runs[0] / "residual_histogram.csv").read_bytes()
                == (runs[1] / "residual_histogram.csv").read_bytes())

    def test_missing_manifest_exits_one(self, tmp_path, capsys):
        code = main(["sfm", "--manifest", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "out")])
        assert code == 1
        assert capsys.readouterr().err.startswith("error[IO_NOT_FOUND]:")

    def test_workers_env_override(self, scene_dir, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("MBA_WORKERS", "2")
        run = tmp_path / "run"
        assert main(["sfm", "--manifest", str(scene_dir / "manifest.json"),
                     "--out", str(run), "--workers", "1", *FAST]) == 0
        meta = json.loads((run / "result.json").read_text())["metadata"]
        assert meta["config"]["workers"] == 2


class TestReloc:
    def test_localizes_queries_against_frozen_map(self, scene_dir, tmp_path, capsys):
        run = tmp_path / "map"
        assert main(["sfm", "--manifest", str(scene_dir / "manifest.json"),
                     "--out", str(run), *FAST]) == 0
        # drop one frame from the map result; the manifest still covers it,
        # but reloc needs manifest intrinsics for the query frame
        doc = json.loads((run / "result.json").read_text())
        dropped = [f for f in doc["frames"] if f["frame_id"] == 3][0]
        doc["frames"] = [f for f in doc["frames"] if f["frame_id"] != 3]
        (run / "map.json").write_text(json.dumps(doc))
        manifest = json.loads((scene_dir / "manifest.json").read_text())
        for f in manifest["frames"]:
            f["intrinsics"] = {"focal": dropped["focal"], "cx": dropped["cx"],
                               "cy": dropped["cy"]}
        # depth/correspondence paths are relative to the manifest location
        (scene_dir / "manifest_q.json").write_text(json.dumps(manifest))
        code = main(["reloc", "--map", str(run / "map.json"),
                     "--manifest", str(scene_dir / "manifest_q.json"),
                     "--out", str(tmp_path / "reloc"), *FAST])
        out = capsys.readouterr()
        assert code == 0, out.err
        assert "localized 1/1 query frames" in out.out
        doc = json.loads((tmp_path / "reloc" / "result.json").read_text())
        entry = [f for f in doc["frames"] if f["frame_id"] == 3][0]
        assert entry["registered"] and "rotation" in entry

    def test_query_without_intrinsics_exits_one(self, scene_dir, tmp_path, capsys):
        run = tmp_path / "map"
        assert main(["sfm", "--manifest", str(scene_dir / "manifest.json"),
                     "--out", str(run), *FAST]) == 0
        doc = json.loads((run / "result.json").read_text())
        doc["frames"] = [f for f in doc["frames"] if f["frame_id"] != 3]
        (run / "map.json").write_text(json.dumps(doc))
        capsys.readouterr()
        code = main(["reloc", "--map", str(run / "map.json"),
                     "--manifest", str(scene_dir / "manifest.json"),
                     "--out", str(tmp_path / "reloc"), *FAST])
        assert code == 1
        assert capsys.readouterr().err.startswith("error[IO_NOT_FOUND]:")


class TestRansac2v:
    def test_pose_output_and_grid_sweep(self, scene_dir, tmp_path, capsys):
        corr_files = sorted(scene_dir.glob("corr_*.mbac"))
        args = ["ransac2v", "--corrs", str(corr_files[0]),
                "--fx", "120", "--cx", "64", "--cy", "48"]
        assert main(args) == 0
        out = capsys.readouterr().out
        assert "E =" in out and "t_hat =" in out and out.count("tau_max =") == 1
        assert main(args + ["--grid", "1e-4,1e-3"]) == 0
        assert capsys.readouterr().out.count("tau_max =") == 2

    def test_degenerate_correspondences_exit_two(self, tmp_path, capsys):
        path = tmp_path / "deg.mbac"
        records = np.tile([10.0, 10.0, 20.0, 20.0, 1.0], (30, 1)).astype(np.float32)
        write_correspondences(path, 0, 1, records)
        code = main(["ransac2v", "--corrs", str(path),
                     "--fx", "100", "--cx", "50", "--cy", "50"])
        assert code == 2
        assert capsys.readouterr().err.startswith("error[NO_VALID_HYPOTHESIS]:")


class TestSynth:
    def test_unknown_config_key_exits_one(self, tmp_path, capsys):
        cfg = dict(SYNTH_CONFIG, banana=1)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg))
        assert main(["synth", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
        assert capsys.readouterr().err.startswith("error[INVALID_VALUE]:")

    def test_ground_truth_written(self, scene_dir):
        doc = json.loads((scene_dir / "ground_truth.json").read_text())
        assert len(doc["frames"]) == 4
        assert all(f["registered"] for f in doc["frames"])
