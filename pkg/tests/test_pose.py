"""Pose tests: minimal-solver recovery against the synthesizing pose,
refinement convergence and monotonicity, seeded RANSAC behavior under
outliers, and pose-error closed forms."""

import numpy as np
import pytest

from xmreg.geometry import CameraIntrinsics, RigidTransform
from xmreg.errors import UsageError
from xmreg.pose import (
    PnPProblem,
    PoseEstimate,
    RansacConfig,
    pnp_minimal,
    pose_errors,
    ransac_pnp,
    refine_pose,
    reprojection_residuals,
)

INTR = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def random_pose(rng, max_angle=0.8, max_t=0.5):
    axis = rng.normal(size=3)
    angle = rng.uniform(-max_angle, max_angle)
    t = rng.uniform(-max_t, max_t, 3)
    return RigidTransform.from_axis_angle(axis, angle, t)


def synth_correspondences(rng, pose, n, noise_px=0.0, outlier_frac=0.0):
    """Cloud-frame points whose camera-frame projections are the pixels."""
    cam = np.column_stack(
        [
            rng.uniform(-0.8, 0.8, n),
            rng.uniform(-0.6, 0.6, n),
            rng.uniform(2.0, 5.0, n),
        ]
    )
    points = pose.inverse().apply(cam)
    u = INTR.fx * cam[:, 0] / cam[:, 2] + INTR.cx
    v = INTR.fy * cam[:, 1] / cam[:, 2] + INTR.cy
    pixels = np.stack([u, v], axis=1)
    if noise_px > 0:
        pixels = pixels + rng.normal(0.0, noise_px, pixels.shape)
    n_out = int(round(outlier_frac * n))
    if n_out:
        idx = rng.choice(n, size=n_out, replace=False)
        pixels[idx, 0] = rng.uniform(0, INTR.width, n_out)
        pixels[idx, 1] = rng.uniform(0, INTR.height, n_out)
    return pixels, points


def pose_close(a, b, rot_tol_rad, trans_tol):
    # elementwise rotation difference ~ angle for small angles and stays
    # well conditioned where arccos of a near-1 trace would not
    rot_diff = np.max(np.abs(a.rotation - b.rotation))
    return rot_diff <= rot_tol_rad and np.linalg.norm(
        a.translation - b.translation
    ) <= trans_tol


class TestPnpMinimal:
    def test_identity_pose_six_points(self, rng):
        pose = RigidTransform.identity()
        pixels, points = synth_correspondences(rng, pose, 6)
        candidates = pnp_minimal(pixels, points, INTR)
        assert candidates
        assert pose_close(candidates[0], pose, 1e-8, 1e-8)

    def test_random_pose_recovery(self, rng):
        for _ in range(10):
            pose = random_pose(rng)
            pixels, points = synth_correspondences(rng, pose, 6)
            candidates = pnp_minimal(pixels, points, INTR)
            assert candidates
            assert pose_close(candidates[0], pose, 1e-6, 1e-8)

    def test_coplanar_noncollinear_four_points(self, rng):
        for _ in range(10):
            pose = random_pose(rng)
            # a tilted rectangle in front of the camera
            corners_cam = np.array(
                [
                    [-0.4, -0.3, 3.0],
                    [0.4, -0.3, 3.2],
                    [0.4, 0.3, 3.4],
                    [-0.4, 0.3, 3.2],
                ]
            )
            points = pose.inverse().apply(corners_cam)
            u = INTR.fx * corners_cam[:, 0] / corners_cam[:, 2] + INTR.cx
            v = INTR.fy * corners_cam[:, 1] / corners_cam[:, 2] + INTR.cy
            candidates = pnp_minimal(np.stack([u, v], axis=1), points, INTR)
            assert candidates
            assert any(pose_close(c, pose, 1e-6, 1e-6) for c in candidates[:2])

    def test_collinear_sample_returns_empty(self, rng):
        pose = random_pose(rng)
        t = np.linspace(0, 1, 6)
        cam = np.outer(t, [0.1, 0.2, 0.5]) + [0.0, 0.0, 3.0]
        points = pose.inverse().apply(cam)
        u = INTR.fx * cam[:, 0] / cam[:, 2] + INTR.cx
        v = INTR.fy * cam[:, 1] / cam[:, 2] + INTR.cy
        assert pnp_minimal(np.stack([u, v], axis=1), points, INTR) == []

    def test_five_nonplanar_points_returns_empty(self, rng):
        pose = random_pose(rng)
        pixels, points = synth_correspondences(rng, pose, 5)
        assert pnp_minimal(pixels, points, INTR) == []

    def test_candidates_satisfy_so3(self, rng):
        pose = random_pose(rng)
        pixels, points = synth_correspondences(rng, pose, 8)
        for cand in pnp_minimal(pixels, points, INTR):
            r = cand.rotation
            assert np.allclose(r.T @ r, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(r) - 1.0) <= 1e-9


class TestRefinePose:
    def test_ground_truth_is_fixed_point(self, rng):
        pose = random_pose(rng)
        pixels, points = synth_correspondences(rng, pose, 30)
        problem = PnPProblem(pixels, points, INTR)
        out = refine_pose(pose, problem)
        assert not out.singular
        np.testing.assert_allclose(out.transform.rotation, pose.rotation, atol=1e-12)
        np.testing.assert_allclose(
            out.transform.translation, pose.translation, atol=1e-12
        )

    def test_converges_from_perturbed_start(self, rng):
        pose = random_pose(rng)
        pixels, points = synth_correspondences(rng, pose, 40)
        problem = PnPProblem(pixels, points, INTR)
        start = RigidTransform(
            pose.rotation
            @ RigidTransform.from_axis_angle([0, 0, 1], np.radians(2.0)).rotation,
            pose.translation + np.array([0.05, 0.0, -0.03]),
        )
        out = refine_pose(start, problem, iters=100)
        assert pose_close(out.transform, pose, 1e-6, 1e-6)

    def test_cost_history_non_increasing(self, rng):
        pose = random_pose(rng)
        pixels, points = synth_correspondences(rng, pose, 40, noise_px=1.0)
        problem = PnPProblem(pixels, points, INTR)
        start = RigidTransform(
            pose.rotation, pose.translation + np.array([0.1, -0.05, 0.08])
        )
        out = refine_pose(start, problem, iters=60)
        diffs = np.diff(out.cost_history)
        assert np.all(diffs <= 1e-9)


class TestRansacPnp:
    def test_exact_matches_all_inliers(self, rng):
        pose = random_pose(rng)
        pixels, points = synth_correspondences(rng, pose, 50)
        est = ransac_pnp(PnPProblem(pixels, points, INTR), RansacConfig(seed=3))
        assert est.success
        assert est.inlier_mask.all()
        assert pose_close(est.transform, pose, 1e-7, 1e-7)

    def test_outliers_and_noise(self, rng):
        for seed in range(5):
            pose = random_pose(rng)
            pixels, points = synth_correspondences(
                rng, pose, 200, noise_px=0.5, outlier_frac=0.3
            )
            est = ransac_pnp(
                PnPProblem(pixels, points, INTR), RansacConfig(seed=seed)
            )
            assert est.success
            rel = pose.rotation.T @ est.transform.rotation
            angle = np.degrees(
                np.arccos(np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0))
            )
            assert angle < 0.5
            assert np.linalg.norm(est.transform.translation - pose.translation) < 0.01

    def test_all_outliers_fails_without_exception(self, rng):
        pixels = np.column_stack(
            [rng.uniform(0, 640, 40), rng.uniform(0, 480, 40)]
        )
        points = rng.normal(size=(40, 3)) + [0, 0, 5.0]
        est = ransac_pnp(
            PnPProblem(pixels, points, INTR),
            RansacConfig(seed=1, max_iters=50, inlier_thresh=0.25),
        )
        assert isinstance(est, PoseEstimate)
        assert not est.success
        assert est.transform is None
        assert "best" in est.message

    def test_deterministic_given_seed(self, rng):
        pose = random_pose(rng)
        pixels, points = synth_correspondences(
            rng, pose, 120, noise_px=0.5, outlier_frac=0.2
        )
        problem = PnPProblem(pixels, points, INTR)
        a = ransac_pnp(problem, RansacConfig(seed=9))
        b = ransac_pnp(problem, RansacConfig(seed=9))
        np.testing.assert_array_equal(a.inlier_mask, b.inlier_mask)
        np.testing.assert_array_equal(a.transform.rotation, b.transform.rotation)
        np.testing.assert_array_equal(
            a.transform.translation, b.transform.translation
        )
        assert a.rmse == b.rmse and a.iterations == b.iterations

    def test_reported_inliers_reproject_within_threshold(self, rng):
        pose = random_pose(rng)
        pixels, points = synth_correspondences(
            rng, pose, 150, noise_px=0.5, outlier_frac=0.25
        )
        problem = PnPProblem(pixels, points, INTR)
        cfg = RansacConfig(seed=4)
        est = ransac_pnp(problem, cfg)
        res = reprojection_residuals(est.transform, problem)
        assert np.all(res[est.inlier_mask] < cfg.inlier_thresh)

    def test_too_few_correspondences_rejected(self):
        with pytest.raises(UsageError):
            PnPProblem(np.zeros((3, 2)), np.zeros((3, 3)), INTR)


class TestPoseErrors:
    def test_identical_poses(self, rng):
        pose = random_pose(rng)
        pts = rng.normal(size=(30, 3))
        rot, trans, rmse = pose_errors(pose, pose, pts)
        # the arccos form has a ~1e-6 degree conditioning floor at zero angle
        assert rot == pytest.approx(0.0, abs=1e-4)
        assert trans == 0.0 and rmse == 0.0

    def test_half_turn_about_z(self, rng):
        gt = RigidTransform.identity()
        est = RigidTransform.from_axis_angle([0, 0, 1], np.pi)
        rot, trans, _ = pose_errors(est, gt, rng.normal(size=(10, 3)))
        assert rot == pytest.approx(180.0)
        assert trans == 0.0

    def test_rmse_matches_bruteforce(self, rng):
        a, b = random_pose(rng), random_pose(rng)
        pts = rng.normal(size=(25, 3))
        _, _, rmse = pose_errors(a, b, pts)
        direct = np.sqrt(
            np.mean(
                [np.sum((a.apply(p) - b.apply(p)) ** 2) for p in pts]
            )
        )
        assert rmse == pytest.approx(direct, abs=1e-12)
