"""Pose regression from 2D-3D correspondences: a minimal direct solver,
Gauss-Newton refinement, and a seeded hypothesize-and-verify loop.

The minimal solver is a direct linear transform lifted to SO(3) by SVD
projection, with a homography route for planar samples (the DLT alone is
rank-deficient there and desk scenes contain planar clusters). Candidate
poses are disambiguated by positive-depth count; the verifier settles the
rest. RANSAC draws each iteration's sample from a counter-seeded generator,
so results do not depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .geometry import Z_MIN, CameraIntrinsics, RigidTransform, _project_to_so3

PLANARITY_RATIO = 1e-7  # third singular value / first, below which a sample
                        # of 3D points is treated as coplanar


@dataclass(frozen=True)
class PnPProblem:
    pixels: np.ndarray  # (M, 2) observed (u, v)
    points: np.ndarray  # (M, 3) in the cloud frame
    intrinsics: CameraIntrinsics
    weights: np.ndarray = None  # (M,) nonnegative; defaults to ones

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if px.shape[0] != pts.shape[0]:
            raise UsageError("pixel and point counts differ")
        if px.shape[0] < 4:
            raise UsageError("a solve attempt needs at least 4 correspondences")
        w = (
            np.ones(px.shape[0])
            if self.weights is None
            else np.asarray(self.weights, dtype=np.float64).reshape(-1)
        )
        if w.shape[0] != px.shape[0]:
            raise UsageError("one weight per correspondence required")
        if np.any(w < 0):
            raise UsageError("weights must be nonnegative")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.pixels.shape[0]


@dataclass(frozen=True)
class RansacConfig:
    max_iters: int = 1000
    inlier_thresh: float = 3.0  # pixels, reprojection
    confidence: float = 0.999
    seed: int = 0
    min_sample: int = 6

    def __post_init__(self):
        if self.max_iters < 1:
            raise UsageError("max_iters must be >= 1")
        if self.inlier_thresh <= 0:
            raise UsageError("inlier_thresh must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise UsageError("confidence must lie in (0, 1)")
        if self.min_sample < 4:
            raise UsageError("min_sample must be >= 4")


@dataclass
class PoseEstimate:
    transform: RigidTransform | None
    inlier_mask: np.ndarray
    rmse: float  # reprojection RMSE over inliers, pixels
    iterations: int
    success: bool
    message: str = ""


def _normalized_coords(intr, pixels):
    return np.stack(
        [
            (pixels[:, 0] - intr.cx) / intr.fx,
            (pixels[:, 1] - intr.cy) / intr.fy,
        ],
        axis=1,
    )


def _positive_depth_count(rotation, translation, points):
    z = points @ rotation.T[:, 2] + translation[2]
    return int(np.sum(z > Z_MIN))


def _isotropic_normalizer_2d(xy, target):
    centroid = xy.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((xy - centroid) ** 2, axis=1)))
    scale = target / rms if rms > 0 else 1.0
    t = np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    return t, (xy - centroid) * scale


def _dlt_candidates(norm_xy, points):
    """Direct linear transform over >= 6 non-coplanar correspondences.

    Both coordinate sets are isotropically normalized (Hartley) first; the
    minimal 6-point system is badly conditioned without it.
    """
    n = points.shape[0]
    t2, xy_n = _isotropic_normalizer_2d(norm_xy, np.sqrt(2.0))
    centroid3 = points.mean(axis=0)
    rms3 = np.sqrt(np.mean(np.sum((points - centroid3) ** 2, axis=1)))
    s3 = np.sqrt(3.0) / rms3 if rms3 > 0 else 1.0
    pts_n = (points - centroid3) * s3
    t3 = np.eye(4)
    t3[:3, :3] *= s3
    t3[:3, 3] = -s3 * centroid3

    a = np.zeros((2 * n, 12))
    hom = np.hstack([pts_n, np.ones((n, 1))])
    a[0::2, 0:4] = hom
    a[0::2, 8:12] = -xy_n[:, 0:1] * hom
    a[1::2, 4:8] = hom
    a[1::2, 8:12] = -xy_n[:, 1:2] * hom
    _, _, vt = np.linalg.svd(a)
    p_n = vt[-1].reshape(3, 4)
    p = np.linalg.inv(t2) @ p_n @ t3

    candidates = []
    for sign in (1.0, -1.0):
        m = sign * p[:, :3]
        u, s, vt_m = np.linalg.svd(m)
        if s[0] <= 0 or s[2] / s[0] < 1e-9:
            continue  # projective part collapsed; sample was degenerate
        scale = s.mean()
        rotation = _project_to_so3(m)
        translation = sign * p[:, 3] / scale
        candidates.append((rotation, translation))
    return candidates


def _homography_candidates(norm_xy, points):
    """Planar route: homography decomposition in an in-plane frame."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, svals, vt = np.linalg.svd(centered)
    if svals[1] / max(svals[0], 1e-300) < 1e-9:
        return []  # collinear
    b1, b2 = vt[0], vt[1]
    b3 = np.cross(b1, b2)
    plane_xy = centered @ np.stack([b1, b2], axis=1)

    t2, xy_n = _isotropic_normalizer_2d(norm_xy, np.sqrt(2.0))
    tq, q_n = _isotropic_normalizer_2d(plane_xy, np.sqrt(2.0))

    n = points.shape[0]
    a = np.zeros((2 * n, 9))
    hom = np.hstack([q_n, np.ones((n, 1))])
    a[0::2, 0:3] = hom
    a[0::2, 6:9] = -xy_n[:, 0:1] * hom
    a[1::2, 3:6] = hom
    a[1::2, 6:9] = -xy_n[:, 1:2] * hom
    _, _, vt_h = np.linalg.svd(a)
    h = np.linalg.inv(t2) @ vt_h[-1].reshape(3, 3) @ tq

    basis = np.stack([b1, b2, b3], axis=1)  # plane coords -> world
    candidates = []
    for sign in (1.0, -1.0):
        h1, h2, h3 = sign * h[:, 0], sign * h[:, 1], sign * h[:, 2]
        scale = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
        r_plane = np.stack(
            [scale * h1, scale * h2, np.cross(scale * h1, scale * h2)], axis=1
        )
        rotation = _project_to_so3(r_plane @ basis.T)
        translation = scale * h3 - rotation @ centroid
        candidates.append((rotation, translation))
    return candidates


def pnp_minimal(pixels, points, intrinsics):
    """Candidate rigid transforms from a minimal (or slightly larger) sample.

    Degenerate samples (collinear points, or non-planar samples below six
    correspondences) return an empty list so the caller can resample.
    Candidates come back ordered by positive-depth count.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] < 4:
        return []
    norm_xy = _normalized_coords(intrinsics, pixels)

    centered = points - points.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] / max(svals[0], 1e-300) < 1e-9:
        return []  # collinear in 3D
    planar = svals[2] / max(svals[0], 1e-300) < PLANARITY_RATIO

    if planar:
        raw = _homography_candidates(norm_xy, points)
    elif points.shape[0] >= 6:
        raw = _dlt_candidates(norm_xy, points)
    else:
        return []  # non-planar DLT needs six correspondences

    scored = []
    for order, (rotation, translation) in enumerate(raw):
        try:
            transform = RigidTransform(rotation, translation)
        except UsageError:
            continue
        depth_count = _positive_depth_count(rotation, translation, points)
        scored.append(
            (
                -depth_count,
                _sample_reproj_rmse(transform, norm_xy, points),
                order,
                transform,
            )
        )
    # most points in front first; sign-mangled twins can tie on depth count,
    # so the sample reprojection error settles it
    scored.sort(key=lambda item: item[:3])
    return [transform for *_, transform in scored]


def _sample_reproj_rmse(transform, norm_xy, points):
    cam = transform.apply(points)
    z = cam[:, 2]
    ok = z > Z_MIN
    if not np.any(ok):
        return np.inf
    safe_z = np.where(ok, z, 1.0)
    dx = cam[:, 0] / safe_z - norm_xy[:, 0]
    dy = cam[:, 1] / safe_z - norm_xy[:, 1]
    err = np.where(ok, np.hypot(dx, dy), 1e6)
    return float(np.sqrt(np.mean(err**2)))


def reprojection_residuals(transform, problem):
    """Per-correspondence pixel residual norms; behind-camera points get inf."""
    cam = transform.apply(problem.points)
    z = cam[:, 2]
    ok = z > Z_MIN
    safe_z = np.where(ok, z, 1.0)
    u = problem.intrinsics.fx * cam[:, 0] / safe_z + problem.intrinsics.cx
    v = problem.intrinsics.fy * cam[:, 1] / safe_z + problem.intrinsics.cy
    res = np.hypot(u - problem.pixels[:, 0], v - problem.pixels[:, 1])
    return np.where(ok, res, np.inf)


@dataclass
class RefineResult:
    transform: RigidTransform
    cost_history: list = field(default_factory=list)
    singular: bool = False


def _rodrigues(omega):
    angle = np.linalg.norm(omega)
    if angle < 1e-12:
        k = np.array(
            [
                [0.0, -omega[2], omega[1]],
                [omega[2], 0.0, -omega[0]],
                [-omega[1], omega[0], 0.0],
            ]
        )
        return np.eye(3) + k  # first order is exact at this scale
    axis = omega / angle
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def refine_pose(initial, problem, iters=50, grad_tol=1e-10):
    """Gauss-Newton over a 6-dof right perturbation of the pose.

    The weighted squared reprojection cost never increases: steps are halved
    until they improve, and a singular normal system returns the input pose
    flagged. Stops when the gradient norm falls below ``grad_tol``.
    """
    transform = initial
    intr = problem.intrinsics
    w = problem.weights
    history = [float(_cost(transform, problem))]
    singular = False

    for _ in range(iters):
        cam = transform.apply(problem.points)
        z = cam[:, 2]
        valid = z > Z_MIN
        if not np.any(valid):
            singular = True
            break
        safe_z = np.where(valid, z, 1.0)
        u = intr.fx * cam[:, 0] / safe_z + intr.cx
        v = intr.fy * cam[:, 1] / safe_z + intr.cy
        r = np.stack([u - problem.pixels[:, 0], v - problem.pixels[:, 1]], axis=1)
        r[~valid] = 0.0

        # d(pixel)/d(cam point), then cam point w.r.t. (omega, v) with
        # p_cam = R exp([w]x) p + t + v: dp/dw = -R [p]x, dp/dv = I
        jac = np.zeros((problem.points.shape[0], 2, 6))
        fx_z = intr.fx / safe_z
        fy_z = intr.fy / safe_z
        d_uv_cam = np.zeros((problem.points.shape[0], 2, 3))
        d_uv_cam[:, 0, 0] = fx_z
        d_uv_cam[:, 0, 2] = -intr.fx * cam[:, 0] / safe_z**2
        d_uv_cam[:, 1, 1] = fy_z
        d_uv_cam[:, 1, 2] = -intr.fy * cam[:, 1] / safe_z**2
        p = problem.points
        skew = np.zeros((p.shape[0], 3, 3))
        skew[:, 0, 1] = -p[:, 2]
        skew[:, 0, 2] = p[:, 1]
        skew[:, 1, 0] = p[:, 2]
        skew[:, 1, 2] = -p[:, 0]
        skew[:, 2, 0] = -p[:, 1]
        skew[:, 2, 1] = p[:, 0]
        dcam_dw = -np.einsum("ij,njk->nik", transform.rotation, skew)
        jac[:, :, :3] = np.einsum("nij,njk->nik", d_uv_cam, dcam_dw)
        jac[:, :, 3:] = d_uv_cam
        jac[~valid] = 0.0

        wr = w[:, None] * r
        grad = np.einsum("nij,ni->j", jac, wr)
        if np.linalg.norm(grad) < grad_tol:
            break
        hess = np.einsum("nij,nik->jk", jac * w[:, None, None], jac)
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            singular = True
            break
        if not np.all(np.isfinite(step)):
            singular = True
            break

        improved = False
        for _halving in range(12):
            candidate = RigidTransform(
                _project_to_so3(transform.rotation @ _rodrigues(step[:3])),
                transform.translation + step[3:],
            )
            cost = float(_cost(candidate, problem))
            if cost <= history[-1]:
                transform = candidate
                history.append(cost)
                improved = True
                break
            step = step / 2.0
        if not improved:
            break
    return RefineResult(transform=transform, cost_history=history, singular=singular)


def _cost(transform, problem):
    res = reprojection_residuals(transform, problem)
    finite = np.isfinite(res)
    if not np.any(finite):
        return np.inf
    penalty = np.sum(~finite) * 1e6  # behind-camera points dominate the cost
    return float(np.sum(problem.weights[finite] * res[finite] ** 2) + penalty)


def ransac_pnp(problem, config):
    """Seeded hypothesize-and-verify PnP with final refinement.

    Deterministic given (problem, config.seed): iteration i draws its sample
    from a generator seeded by (seed, i). Early exit uses the standard
    confidence bound on the inlier ratio of the best hypothesis.
    """
    n = len(problem)
    sample_size = min(config.min_sample, n)

    def verify(transform):
        res = reprojection_residuals(transform, problem)
        mask = res < config.inlier_thresh
        count = int(mask.sum())
        rmse = float(np.sqrt(np.mean(res[mask] ** 2))) if count else np.inf
        return mask, count, rmse

    def sub_problem(mask):
        return PnPProblem(
            problem.pixels[mask],
            problem.points[mask],
            problem.intrinsics,
            problem.weights[mask],
        )

    best_mask = np.zeros(n, dtype=bool)
    best_count = 0
    best_rmse = np.inf
    best_transform = None
    iterations = 0

    for i in range(config.max_iters):
        iterations = i + 1
        rng = np.random.default_rng([config.seed, i])
        sample = rng.choice(n, size=sample_size, replace=False)
        for candidate in pnp_minimal(
            problem.pixels[sample], problem.points[sample], problem.intrinsics
        ):
            mask, count, rmse = verify(candidate)
            if count > best_count or (count == best_count and rmse < best_rmse):
                # local optimization: polish a promising hypothesis on its
                # own inliers, then re-verify
                if count >= sample_size:
                    polished = refine_pose(candidate, sub_problem(mask), iters=10)
                    p_mask, p_count, p_rmse = verify(polished.transform)
                    if p_count > count or (p_count == count and p_rmse < rmse):
                        candidate, mask, count, rmse = (
                            polished.transform,
                            p_mask,
                            p_count,
                            p_rmse,
                        )
                best_mask, best_count, best_rmse = mask, count, rmse
                best_transform = candidate

        if best_count >= sample_size:
            good = (best_count / n) ** sample_size
            if good >= 1.0:
                break
            needed = np.log(1.0 - config.confidence) / np.log(1.0 - good)
            if iterations >= needed:
                break

    if best_transform is None or best_count < sample_size:
        return PoseEstimate(
            transform=None,
            inlier_mask=np.zeros(n, dtype=bool),
            rmse=np.inf,
            iterations=iterations,
            success=False,
            message=f"no hypothesis reached {sample_size} inliers "
            f"(best {best_count}/{n})",
        )

    # refine on the full inlier set to a fixed point of refine-and-recount
    transform, mask, rmse = best_transform, best_mask, best_rmse
    singular = False
    for _ in range(5):
        refined = refine_pose(transform, sub_problem(mask))
        singular = refined.singular
        new_mask, new_count, new_rmse = verify(refined.transform)
        if new_count < sample_size:
            break
        transform, rmse = refined.transform, new_rmse
        if np.array_equal(new_mask, mask):
            mask = new_mask
            break
        mask = new_mask

    return PoseEstimate(
        transform=transform,
        inlier_mask=mask,
        rmse=rmse,
        iterations=iterations,
        success=True,
        message="refined on full inlier set"
        + ("; refinement hit a singular system" if singular else ""),
    )


def pose_errors(estimate, ground_truth, scene_points):
    """(rotation error degrees, translation error meters, scene RMSE meters).

    The rotation-error trace argument is clamped to [-1, 1] so antipodal
    rotations do not produce NaN.
    """
    rel = ground_truth.rotation.T @ estimate.rotation
    cos_angle = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    rot_err = float(np.degrees(np.arccos(cos_angle)))
    trans_err = float(
        np.linalg.norm(estimate.translation - ground_truth.translation)
    )
    moved_est = estimate.apply(scene_points)
    moved_gt = ground_truth.apply(scene_points)
    rmse = float(np.sqrt(np.mean(np.sum((moved_est - moved_gt) ** 2, axis=1))))
    return rot_err, trans_err, rmse
