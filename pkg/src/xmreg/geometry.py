"""Camera model, rigid transforms, point-to-node partition, and ground-truth
correspondence construction.

Everything here is a pure function over immutable numpy inputs. Tie-breaking
is lowest-index throughout so results are identical across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError

ORTHONORMAL_TOL = 1e-9
Z_MIN = 1e-6  # meters; guards the projection division


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (3x3, orthonormal, det +1) and translation in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not np.allclose(r.T @ r, np.eye(3), atol=ORTHONORMAL_TOL):
            raise UsageError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise UsageError("rotation determinant is not +1 within 1e-9")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis, angle, translation=(0.0, 0.0, 0.0)):
        """Rodrigues rotation about ``axis`` by ``angle`` radians."""
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        k = np.array(
            [
                [0.0, -axis[2], axis[1]],
                [axis[2], 0.0, -axis[0]],
                [-axis[1], axis[0], 0.0],
            ]
        )
        r = np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)
        return cls(_project_to_so3(r), np.asarray(translation, dtype=np.float64))

    def apply(self, points):
        """Map (N, 3) or (3,) points by p -> R p + t."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other):
        """self ∘ other: apply ``other`` first, then ``self``."""
        return RigidTransform(
            _project_to_so3(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )


def _project_to_so3(m):
    """Nearest rotation to ``m`` by SVD orthogonal (polar) projection."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise UsageError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise UsageError("principal point must lie inside the image")

    def matrix(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3) meters
    descriptors: np.ndarray  # (N, C)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        desc = np.asarray(self.descriptors, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "descriptors", desc)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise UsageError(f"points must be (N>=1, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise UsageError("point coordinates must be finite")
        if desc.shape[0] != pts.shape[0]:
            raise UsageError("descriptor count must match point count")

    def __len__(self):
        return self.points.shape[0]


def transform_points(transform, cloud):
    """Apply a rigid transform to a cloud; descriptors are untouched."""
    return PointCloud(transform.apply(cloud.points), cloud.descriptors)


def project(intrinsics, point, z_min=Z_MIN):
    """Pinhole projection of one camera-frame point.

    Returns (u, v, in_front). Points at or behind z_min are flagged, never an
    error: being outside the frustum is normal data.
    """
    x, y, z = np.asarray(point, dtype=np.float64)
    if z <= z_min:
        return np.nan, np.nan, False
    return (
        intrinsics.fx * x / z + intrinsics.cx,
        intrinsics.fy * y / z + intrinsics.cy,
        True,
    )


def project_points(intrinsics, points, z_min=Z_MIN):
    """Vectorized pinhole projection; returns (uv (N,2), in_front (N,))."""
    pts = np.asarray(points, dtype=np.float64)
    z = pts[:, 2]
    ok = z > z_min
    safe_z = np.where(ok, z, 1.0)
    uv = np.stack(
        [
            intrinsics.fx * pts[:, 0] / safe_z + intrinsics.cx,
            intrinsics.fy * pts[:, 1] / safe_z + intrinsics.cy,
        ],
        axis=1,
    )
    uv[~ok] = np.nan
    return uv, ok


def backproject_pixel_centers(intrinsics, rows, cols, depths):
    """Camera-frame 3D locations of pixel centers at the given depths."""
    u = np.asarray(cols, dtype=np.float64) + 0.5
    v = np.asarray(rows, dtype=np.float64) + 0.5
    d = np.asarray(depths, dtype=np.float64)
    return np.stack(
        [
            d * (u - intrinsics.cx) / intrinsics.fx,
            d * (v - intrinsics.cy) / intrinsics.fy,
            d,
        ],
        axis=-1,
    )


def point_to_node_partition(cloud, nodes):
    """Assign every point to its nearest node (Euclidean); ties take the
    lowest node index. Returns an (N,) int array."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    nodes = np.asarray(nodes, dtype=np.float64)
    if nodes.ndim != 2 or nodes.shape[1] != 3 or nodes.shape[0] < 1:
        raise UsageError("node set must be a nonempty (n, 3) array")
    # exact squared distances; argmin picks the first (lowest-index) minimum
    d2 = ((pts[:, None, :] - nodes[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def farthest_point_sample(points, n, start=0):
    """Deterministic farthest-point subsample; returns ``n`` indices.

    Starts at ``start`` and repeatedly adds the point farthest from the
    current set (first occurrence on ties).
    """
    pts = np.asarray(points, dtype=np.float64)
    count = pts.shape[0]
    if n < 1 or n > count:
        raise UsageError(f"cannot sample {n} nodes from {count} points")
    chosen = [start]
    dist = np.linalg.norm(pts - pts[start], axis=1)
    for _ in range(n - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.array(chosen, dtype=np.intp)


@dataclass
class CorrespondenceSet:
    """Coarse patch-level matches and fine pixel-point matches with scores.

    Fine rows are (flat pixel index, point index); coarse rows are
    (node, patch, scale). Pixel indices are row-major r * W + c.
    """

    fine: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.intp))
    fine_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    coarse: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 3), dtype=np.intp)
    )
    coarse_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return self.fine.shape[0]


def patch_index_map(height, width, scale):
    """Flat pixel index -> patch index at the given pyramid scale.

    Scale x patches tile the image in blocks of side 2**x pixels.
    """
    side = 2**scale
    if height % side or width % side:
        raise UsageError(f"grid {height}x{width} not divisible by patch side {side}")
    rows = np.arange(height)[:, None] // side
    cols = np.arange(width)[None, :] // side
    return (rows * (width // side) + cols).reshape(-1)


def gt_correspondences(
    sample,
    dist_thresh=0.05,
    node_assignment=None,
    n_nodes=None,
    overlap_min=0.3,
    scales=(1, 2, 3),
):
    """Ground-truth pixel-point pairs, plus patch-level positives when a
    point-to-node assignment is supplied.

    A pixel and a point correspond iff the point projects inside that pixel
    cell and sits within ``dist_thresh`` meters of the pixel center
    back-projected at the rendered depth. A (node, patch, scale) triple is
    positive when the fraction of the node's points linked to that patch is
    at least ``overlap_min``; its score is that fraction.
    """
    intr = sample.intrinsics
    height, width = sample.depth.shape
    cam_pts = sample.gt_pose.apply(sample.cloud.points)
    uv, in_front = project_points(intr, cam_pts)

    cols = np.floor(uv[:, 0]).astype(np.intp)
    rows = np.floor(uv[:, 1]).astype(np.intp)
    inside = (
        in_front & (cols >= 0) & (cols < width) & (rows >= 0) & (rows < height)
    )
    idx = np.nonzero(inside)[0]
    r, c = rows[idx], cols[idx]
    depth = sample.depth[r, c]
    rendered = np.isfinite(depth)
    idx, r, c, depth = idx[rendered], r[rendered], c[rendered], depth[rendered]

    anchors = backproject_pixel_centers(intr, r, c, depth)
    disc = np.linalg.norm(cam_pts[idx] - anchors, axis=1)
    hit = disc < dist_thresh

    fine = np.stack([r[hit] * width + c[hit], idx[hit]], axis=1).astype(np.intp)
    fine_scores = 1.0 - disc[hit] / dist_thresh
    order = np.lexsort((fine[:, 1], fine[:, 0]))
    fine, fine_scores = fine[order], fine_scores[order]

    coarse_rows = []
    coarse_scores = []
    if node_assignment is not None and len(fine):
        node_assignment = np.asarray(node_assignment, dtype=np.intp)
        if n_nodes is None:
            n_nodes = int(node_assignment.max()) + 1
        for scale in scales:
            frac = patch_overlap_matrix(
                fine, node_assignment, n_nodes, height, width, scale
            )
            for a, b in zip(*np.nonzero(frac >= overlap_min)):
                coarse_rows.append((a, b, scale))
                coarse_scores.append(frac[a, b])

    return CorrespondenceSet(
        fine=fine,
        fine_scores=fine_scores,
        coarse=np.array(coarse_rows, dtype=np.intp).reshape(-1, 3),
        coarse_scores=np.array(coarse_scores),
    )


def patch_overlap_matrix(fine, node_assignment, n_nodes, height, width, scale):
    """Fraction of each node's visible points linked to each patch at one
    scale.

    ``fine`` holds ground-truth (flat pixel, point) rows. The denominator is
    the count of the node's points that appear in any pair, so occluded or
    out-of-frame parts of a node do not dilute its fractions; a node with no
    linked points has an all-zero row.
    """
    node_assignment = np.asarray(node_assignment, dtype=np.intp)
    pix_to_patch = patch_index_map(height, width, scale)
    n_patches = pix_to_patch.max() + 1
    links = np.zeros((n_nodes, n_patches))
    linked_counts = np.zeros(n_nodes)
    if len(fine):
        triples = np.unique(
            np.stack(
                [
                    node_assignment[fine[:, 1]],
                    pix_to_patch[fine[:, 0]],
                    fine[:, 1],
                ],
                axis=1,
            ),
            axis=0,
        )
        np.add.at(links, (triples[:, 0], triples[:, 1]), 1.0)
        linked_points = np.unique(fine[:, 1])
        linked_counts = np.bincount(
            node_assignment[linked_points], minlength=n_nodes
        ).astype(np.float64)
    return links / np.maximum(linked_counts, 1.0)[:, None]
