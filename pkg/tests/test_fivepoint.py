"""Unit tests for the minimal essential-matrix solvers and decomposition."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import random_rotation
from mbasfm.errors import DegenerateConfiguration
from mbasfm.evaluation import rotation_angle_deg
from mbasfm.fivepoint import (
    decompose_essential,
    estimate_essential_eightpoint,
    estimate_essential_fivepoint,
    select_pose_by_cheirality,
    triangulate_midpoint,
)


def make_pair(rng, n, planar=False):
    """Exact normalized correspondences from a random relative pose.

    Points behind either camera are discarded: a projection with negative
    depth is not a physical correspondence, and cheirality tests assume
    every match is front-of-camera in both views.
    """
    if planar:
        xy = rng.uniform(-1, 1, (4 * n, 2))
        pts = np.column_stack([xy, np.full(4 * n, 4.0)])
    else:
        pts = np.column_stack([rng.uniform(-1, 1, (4 * n, 2)),
                               rng.uniform(3, 6, 4 * n)])
    rot = random_rotation(rng)
    t = rng.standard_normal(3)
    t /= np.linalg.norm(t)
    p2 = pts @ rot.T + t
    keep = p2[:, 2] > 0.5
    assert np.count_nonzero(keep) >= n
    pts, p2 = pts[keep][:n], p2[keep][:n]
    return pts[:, :2] / pts[:, 2:], p2[:, :2] / p2[:, 2:], rot, t


def epipolar_residuals(e_mat, src, dst):
    src_h = np.column_stack([src, np.ones(len(src))])
    dst_h = np.column_stack([dst, np.ones(len(dst))])
    return np.abs(np.einsum("ni,ij,nj->n", dst_h, e_mat, src_h))


class TestFivePoint:
    def test_exact_constraints_and_truth_recovery(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            src, dst, rot, t = make_pair(rng, 5)
            solutions = estimate_essential_fivepoint(src, dst)
            assert solutions
            best = np.inf
            for e_mat in solutions:
                assert np.all(epipolar_residuals(e_mat, src, dst) < 1e-8)
                sel = select_pose_by_cheirality(e_mat, src, dst)
                if sel is not None:
                    best = min(best, rotation_angle_deg(rot, sel[0]))
            assert best < 1e-6

    def test_planar_points_still_solved(self):
        # five coplanar points are a valid minimal problem for the five-point
        # solver (unlike the eight-point linear one)
        rng = np.random.default_rng(1)
        src, dst, rot, _ = make_pair(rng, 5, planar=True)
        solutions = estimate_essential_fivepoint(src, dst)
        errs = []
        for e_mat in solutions:
            assert np.all(epipolar_residuals(e_mat, src, dst) < 1e-8)
            sel = select_pose_by_cheirality(e_mat, src, dst)
            if sel is not None:
                errs.append(rotation_angle_deg(rot, sel[0]))
        assert min(errs) < 1e-6

    def test_degenerate_sample_raises(self):
        src = np.tile([[0.1, 0.2]], (5, 1))
        with pytest.raises(DegenerateConfiguration):
            estimate_essential_fivepoint(src, src)


class TestEightPoint:
    def test_exact_recovery(self):
        rng = np.random.default_rng(2)
        src, dst, rot, _ = make_pair(rng, 30)
        [e_mat] = estimate_essential_eightpoint(src, dst)
        assert np.all(epipolar_residuals(e_mat, src, dst) < 1e-8)
        sel = select_pose_by_cheirality(e_mat, src, dst)
        assert rotation_angle_deg(rot, sel[0]) < 1e-6


class TestDecomposition:
    def test_four_candidate_poses(self):
        rng = np.random.default_rng(3)
        src, dst, rot, t = make_pair(rng, 5)
        e_true = np.cross(np.eye(3), t) @ rot  # [t]_x R
        poses = decompose_essential(e_true)
        assert len(poses) == 4
        rot_errs = [rotation_angle_deg(rot, r) for r, _ in poses]
        assert min(rot_errs) < 1e-9

    def test_cheirality_selects_truth(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            src, dst, rot, t = make_pair(rng, 12)
            e_true = np.cross(np.eye(3), t) @ rot
            sel = select_pose_by_cheirality(e_true, src, dst)
            assert sel is not None
            r_sel, t_sel, positive = sel
            assert rotation_angle_deg(rot, r_sel) < 1e-9
            np.testing.assert_allclose(t_sel, t, atol=1e-9)
            assert np.all(positive)


class TestTriangulation:
    def test_exact_depths(self):
        rng = np.random.default_rng(5)
        pts = np.column_stack([rng.uniform(-1, 1, (20, 2)), rng.uniform(3, 6, 20)])
        rot = random_rotation(rng)
        t = rng.standard_normal(3)
        p2 = pts @ rot.T + t
        src = pts[:, :2] / pts[:, 2:]
        dst = p2[:, :2] / p2[:, 2:]
        mids, z1, z2 = triangulate_midpoint(rot, t, src, dst)
        np.testing.assert_allclose(z1, pts[:, 2], rtol=1e-9)
        np.testing.assert_allclose(z2, p2[:, 2], rtol=1e-9)
        np.testing.assert_allclose(mids, pts, rtol=1e-8)
