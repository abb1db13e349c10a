"""Camera models, pose parameterization, and cross-frame projection.

Pose convention is world-to-camera throughout: X_cam = R @ X_world + t.
Rotations are stored as a 6-vector (two unnormalized column seeds) and
materialized with Gram-Schmidt, which keeps the parameterization
continuous and free of gimbal issues.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateRotationSeed

# Corrected depths at or below this value, and camera-space z at or below it,
# make a projection invalid.
DEPTH_FLOOR = 1e-6
Z_FLOOR = 1e-6

INVALID = None  # sentinel returned by project_between for unprojectable records


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with square pixels and a single shared focal."""

    focal: float
    principal_point: np.ndarray  # (2,) pixels
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        object.__setattr__(self, "principal_point", np.asarray(self.principal_point, dtype=np.float64))
        if not self.focal > 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        w, h = self.image_size
        cx, cy = self.principal_point
        if not (0 < cx < w and 0 < cy < h):
            raise ValueError(f"principal point {self.principal_point} outside image {self.image_size}")

    @staticmethod
    def centered(focal, image_size):
        w, h = image_size
        return CameraIntrinsics(focal=focal, principal_point=np.array([w / 2.0, h / 2.0]), image_size=(w, h))


def rotation_from_6d(seed):
    """Materialize a proper rotation from two 3-vector column seeds.

    Column 1 = normalize(a); column 2 = normalize(b - (b . c1) c1);
    column 3 = c1 x c2.

    Raises:
        DegenerateRotationSeed: zero first seed or parallel seeds.
    """
    seed = np.asarray(seed, dtype=np.float64).reshape(6)
    a, b = seed[:3], seed[3:]
    na = np.linalg.norm(a)
    if na <= 1e-12:
        raise DegenerateRotationSeed(f"first seed norm {na} too small")
    c1 = a / na
    b_perp = b - (b @ c1) * c1
    nb = np.linalg.norm(b_perp)
    if nb <= 1e-12:
        raise DegenerateRotationSeed("rotation seeds are parallel")
    c2 = b_perp / nb
    c3 = np.cross(c1, c2)
    return np.stack([c1, c2, c3], axis=1)


def rotation_to_6d(rotation):
    """Inverse of rotation_from_6d up to seed scaling: first two columns."""
    rotation = np.asarray(rotation, dtype=np.float64)
    return np.concatenate([rotation[:, 0], rotation[:, 1]])


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera pose: X_cam = R @ X_world + t."""

    rotation_6d: np.ndarray  # (6,)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation_6d", np.asarray(self.rotation_6d, dtype=np.float64).reshape(6))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not hasattr(self, "_rotation_cache"):
            object.__setattr__(self, "_rotation_cache", None)

    @property
    def rotation(self):
        # Poses built via from_rt keep the caller's matrix verbatim: for an
        # orthonormal input re-orthonormalization is an identity up to one
        # ulp, and serialization round trips must not drift even that far.
        if self._rotation_cache is None:
            object.__setattr__(self, "_rotation_cache", rotation_from_6d(self.rotation_6d))
        return self._rotation_cache

    @staticmethod
    def identity():
        return CameraPose(rotation_6d=np.array([1.0, 0, 0, 0, 1.0, 0]), translation=np.zeros(3))

    @staticmethod
    def from_rt(rotation, translation):
        pose = CameraPose(rotation_6d=rotation_to_6d(rotation), translation=np.asarray(translation, dtype=np.float64))
        object.__setattr__(pose, "_rotation_cache", np.array(rotation, dtype=np.float64).reshape(3, 3))
        return pose

    def camera_center(self):
        rot = self.rotation
        return -rot.T @ self.translation

    def compose_with(self, other: "CameraPose") -> "CameraPose":
        """Return self o other: apply `other` (world->cam_j), then self as a relative motion."""
        r_rel, t_rel = self.rotation, self.translation
        r_o, t_o = other.rotation, other.translation
        return CameraPose.from_rt(r_rel @ r_o, r_rel @ t_o + t_rel)

    def inverse(self) -> "CameraPose":
        rot = self.rotation
        return CameraPose.from_rt(rot.T, -rot.T @ self.translation)


@dataclass(frozen=True)
class AffineDepthCorrection:
    """Per-frame corrected depth D' = alpha * D + beta, alpha kept positive via log storage."""

    log_alpha: float = 0.0
    beta: float = 0.0

    @property
    def alpha(self):
        return float(np.exp(self.log_alpha))

    @staticmethod
    def from_alpha_beta(alpha, beta=0.0):
        if not alpha > 0:
            raise ValueError(f"alpha must be positive, got {alpha}")
        return AffineDepthCorrection(log_alpha=float(np.log(alpha)), beta=float(beta))

    def apply(self, depth):
        return self.alpha * depth + self.beta


@dataclass(frozen=True)
class TrainableFlags:
    """Which parts of a frame's state the optimizer may move.

    alpha and beta are separate because the root frame fixes the scale gauge
    through alpha alone; beta is not a gauge freedom and stays trainable.
    """

    pose: bool = True
    focal: bool = True
    alpha: bool = True
    beta: bool = True

    @staticmethod
    def frozen():
        return TrainableFlags(pose=False, focal=False, alpha=False, beta=False)


@dataclass(frozen=True)
class FrameState:
    """Per-frame optimizable state: pose, focal, affine depth correction."""

    frame_id: int
    intrinsics: CameraIntrinsics
    pose: CameraPose
    correction: AffineDepthCorrection = field(default_factory=AffineDepthCorrection)
    trainable: TrainableFlags = field(default_factory=TrainableFlags)

    def with_pose(self, pose):
        return replace(self, pose=pose)

    def with_correction(self, correction):
        return replace(self, correction=correction)


def back_project(pixel, depth, intrinsics):
    """Pixel + depth -> camera-space 3D point (pinhole)."""
    pixel = np.asarray(pixel, dtype=np.float64)
    xy = (pixel - intrinsics.principal_point) * (depth / intrinsics.focal)
    return np.array([xy[0], xy[1], depth])


def project(point_cam, intrinsics):
    """Camera-space point -> pixel, or INVALID when z is at/below the floor."""
    z = point_cam[2]
    if z <= Z_FLOOR:
        return INVALID
    return intrinsics.focal * point_cam[:2] / z + intrinsics.principal_point


def project_between(pixel, depth, src: FrameState, dst: FrameState):
    """Project `pixel` of frame src into frame dst using src's corrected depth.

    Returns the destination pixel, or INVALID when the corrected depth or the
    destination-camera z falls below the floor.
    """
    corrected = src.correction.apply(depth)
    if not np.isfinite(corrected) or corrected <= DEPTH_FLOOR:
        return INVALID
    p_src = back_project(pixel, corrected, src.intrinsics)
    r_src, t_src = src.pose.rotation, src.pose.translation
    p_world = r_src.T @ (p_src - t_src)
    r_dst, t_dst = dst.pose.rotation, dst.pose.translation
    p_dst = r_dst @ p_world + t_dst
    return project(p_dst, dst.intrinsics)


def projective_residual(record, src: FrameState, dst: FrameState):
    """L2 pixel discrepancy of a data record under the current states; +inf when invalid.

    `record` carries (src_pixel, dst_pixel, src_depth); see posegraph.DataRecord.
    """
    projected = project_between(record.src_pixel, record.src_depth, src, dst)
    if projected is INVALID:
        return np.inf
    return float(np.linalg.norm(projected - np.asarray(record.dst_pixel, dtype=np.float64)))
