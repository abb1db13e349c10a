"""Unit tests for the ground-truth scene generator and its oracle metrics."""

from __future__ import annotations

import numpy as np
import pytest

from mbasfm.errors import ConfigInfeasible
from mbasfm.geometry import project_between
from mbasfm.synthetic import SyntheticConfig, SyntheticScene, generate, oracle_metrics


class TestConfigValidation:
    @pytest.mark.parametrize("kwargs", [
        {"frame_count": 1},
        {"trajectory": "spiral"},
        {"surface": "sphere"},
        {"outlier_fraction": 1.0},
        {"outlier_fraction": -0.1},
        {"outlier_mode": "swap"},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SyntheticConfig(**kwargs)


class TestGenerate:
    def test_deterministic(self):
        cfg = SyntheticConfig(frame_count=4, corr_noise_px=0.5, outlier_fraction=0.1,
                              seed=3)
        a, b = generate(cfg), generate(cfg)
        for fid in a.true_states:
            np.testing.assert_array_equal(a.depth_maps[fid], b.depth_maps[fid])
            np.testing.assert_array_equal(a.true_states[fid].pose.translation,
                                          b.true_states[fid].pose.translation)
        for pair in a.correspondences:
            np.testing.assert_array_equal(a.correspondences[pair],
                                          b.correspondences[pair])

    def test_published_depth_inverts_the_affine_truth(self, clean_scene):
        for fid, state in clean_scene.true_states.items():
            recovered = state.correction.apply(clean_scene.depth_maps[fid])
            np.testing.assert_allclose(recovered, clean_scene.true_depth_maps[fid],
                                       rtol=1e-12)

    def test_correspondences_consistent_with_true_geometry(self, clean_scene):
        (i, j), block = next(iter(clean_scene.correspondences.items()))
        src_state = clean_scene.true_states[i]
        dst_state = clean_scene.true_states[j]
        depth_i = clean_scene.depth_maps[i]
        for row in block[:50]:
            src, dst = row[:2], row[2:4]
            raw = depth_i[int(src[1]), int(src[0])]
            got = project_between(src, raw, src_state, dst_state)
            np.testing.assert_allclose(got, dst, atol=1e-3)  # clipped at borders

    def test_confidence_in_range(self, noisy_scene):
        for block in noisy_scene.correspondences.values():
            assert np.all((block[:, 4] >= 0.5) & (block[:, 4] <= 1.0))

    def test_outlier_injection_breaks_expected_fraction(self):
        clean = generate(SyntheticConfig(frame_count=4, seed=9))
        dirty = generate(SyntheticConfig(frame_count=4, seed=9, outlier_fraction=0.25))
        pair = (0, 1)
        moved = np.any(clean.correspondences[pair][:, 2:4]
                       != dirty.correspondences[pair][:, 2:4], axis=1)
        n = len(moved)
        assert abs(moved.mean() - 0.25) < 0.02 or abs(moved.sum() - round(0.25 * n)) <= 2

    def test_pair_window_limits_pairs(self):
        scene = generate(SyntheticConfig(frame_count=8, pair_window=2, seed=1))
        # orbit trajectories measure the window around the ring
        assert all(min(abs(i - j), 8 - abs(i - j)) <= 2
                   for i, j in scene.correspondences)
        full = generate(SyntheticConfig(frame_count=8, seed=1))
        assert len(full.correspondences) > len(scene.correspondences)

    def test_infeasible_geometry_raises(self):
        # a very wide field of view points many rays above the horizon
        with pytest.raises(ConfigInfeasible):
            generate(SyntheticConfig(frame_count=3, focal_true=20.0))

    def test_write_emits_loadable_scene(self, tmp_path, clean_scene):
        clean_scene.write(tmp_path)
        from mbasfm.io_formats import load_scene
        inputs = load_scene(tmp_path / "manifest.json")
        assert set(inputs.frame_sizes) == set(clean_scene.true_states)
        assert inputs.shared_intrinsics
        for fid in inputs.depth_maps:
            np.testing.assert_allclose(inputs.depth_maps[fid],
                                       clean_scene.depth_maps[fid], rtol=1e-6)


class TestOracleMetrics:
    def test_zero_error_at_truth(self, clean_scene):
        metrics = oracle_metrics(clean_scene, clean_scene.true_states)
        assert metrics["aligned"]
        np.testing.assert_allclose(metrics["scale"], 1.0, rtol=1e-9)
        assert max(metrics["rotation_errors_deg"].values()) < 1e-6
        assert max(metrics["translation_errors"].values()) < 1e-9
        assert max(metrics["alpha_relative_errors"].values()) < 1e-9
        assert max(metrics["beta_abs_errors"].values()) < 1e-9

    def test_similarity_gauge_absorbed(self, clean_scene):
        from scipy.spatial.transform import Rotation
        from mbasfm.geometry import CameraPose
        from dataclasses import replace
        gauge = Rotation.from_rotvec([0.2, -0.4, 0.6]).as_matrix()
        shift, scale = np.array([1.0, -2.0, 0.5]), 3.0
        warped = {}
        for fid, s in clean_scene.true_states.items():
            rot = s.pose.rotation @ gauge.T
            center = scale * gauge @ s.pose.camera_center() + shift
            # world distances grow by `scale`, so the depth correction that
            # maps the fixed published depths to warped-world depths does too
            warped[fid] = replace(
                s, pose=CameraPose.from_rt(rot, -rot @ center),
                correction=type(s.correction).from_alpha_beta(
                    s.correction.alpha * scale, s.correction.beta * scale),
            )
        metrics = oracle_metrics(clean_scene, warped)
        np.testing.assert_allclose(metrics["scale"], 1.0 / scale, rtol=1e-9)
        assert max(metrics["rotation_errors_deg"].values()) < 1e-6
        assert max(metrics["translation_errors"].values()) < 1e-9
        assert max(metrics["alpha_relative_errors"].values()) < 1e-9

    def test_too_few_frames_unaligned(self, clean_scene):
        metrics = oracle_metrics(clean_scene, clean_scene.true_states, frame_ids=[0, 1])
        assert metrics == {"aligned": False, "frame_ids": [0, 1]}
