"""Pinhole camera geometry, keypoint normalization and the synthetic scene oracle.

Conventions: camera frame x right, y down, z forward.  Pedestrians stand
upright on a flat ground plane ``camera_height`` metres below a level camera.
The ground-truth distance of a pedestrian is the Euclidean norm of the hip
midpoint in the camera frame.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

NUM_JOINTS = 17

JOINT_NAMES = (
    "nose",
    "left_eye", "right_eye",
    "left_ear", "right_ear",
    "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
    "left_hip", "right_hip",
    "left_knee", "right_knee",
    "left_ankle", "right_ankle",
)
JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}
HEAD = JOINT_INDEX["nose"]
HIPS = (JOINT_INDEX["left_hip"], JOINT_INDEX["right_hip"])
ANKLES = (JOINT_INDEX["left_ankle"], JOINT_INDEX["right_ankle"])

MIN_VISIBLE = 4


class GeometryError(ValueError):
    pass


class VisibilityError(GeometryError):
    """Not enough (or not the right) joints are visible."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            if not math.isfinite(getattr(self, name)):
                raise GeometryError(f"{name} must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be > 0")


KITTI_LIKE = CameraIntrinsics(fx=721.5, fy=721.5, cx=609.6, cy=172.9)
DEFAULT_INTRINSICS = CameraIntrinsics(fx=720.0, fy=720.0, cx=640.0, cy=360.0)
DEFAULT_IMAGE_SIZE = (1280, 720)


@dataclass(frozen=True)
class Keypoints2D:
    """17 joints in pixels with a visibility mask; bbox is (x1, y1, x2, y2)."""

    joints: np.ndarray
    visible: np.ndarray
    bbox: Optional[tuple] = None

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=float)
        visible = np.asarray(self.visible, dtype=bool)
        if joints.shape != (NUM_JOINTS, 2):
            raise GeometryError(f"expected {NUM_JOINTS}x2 joints, got shape {joints.shape}")
        if visible.shape != (NUM_JOINTS,):
            raise GeometryError(f"expected {NUM_JOINTS} visibility flags, got shape {visible.shape}")
        if self.bbox is not None:
            x1, y1, x2, y2 = self.bbox
            if not (x2 > x1 and y2 > y1):
                raise GeometryError(f"bbox not well ordered: {self.bbox}")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "visible", visible)

    @property
    def num_visible(self):
        return int(self.visible.sum())


# Unit-height standing skeleton, origin at the hip midpoint, y down.  The
# nose ("head") sits 0.48 above the hips and the ankles 0.52 below, so the
# head-to-ankle extent is exactly 1.  Nose, hips and ankles are symmetric
# about the vertical body axis; geometric_distance relies on this.
HIP_TO_ANKLE = 0.52
HEAD_TO_HIP = 0.48

_TEMPLATE_OFFSETS = np.array([
    [0.000, -0.48, 0.0],   # nose
    [0.030, -0.50, 0.0],   # left_eye
    [-0.030, -0.50, 0.0],  # right_eye
    [0.070, -0.49, 0.0],   # left_ear
    [-0.070, -0.49, 0.0],  # right_ear
    [0.190, -0.34, 0.0],   # left_shoulder
    [-0.190, -0.34, 0.0],  # right_shoulder
    [0.220, -0.15, 0.0],   # left_elbow
    [-0.220, -0.15, 0.0],  # right_elbow
    [0.230, 0.02, 0.0],    # left_wrist
    [-0.230, 0.02, 0.0],   # right_wrist
    [0.100, 0.00, 0.0],    # left_hip
    [-0.100, 0.00, 0.0],   # right_hip
    [0.100, 0.27, 0.0],    # left_knee
    [-0.100, 0.27, 0.0],   # right_knee
    [0.100, 0.52, 0.0],    # left_ankle
    [-0.100, 0.52, 0.0],   # right_ankle
])

# joints that receive pose jitter; head, hips and ankles stay rigid
_JITTERED = np.array([JOINT_INDEX[n] for n in (
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_knee", "right_knee")])


@dataclass(frozen=True)
class SkeletonTemplate:
    names: tuple = JOINT_NAMES
    offsets: np.ndarray = field(default_factory=lambda: _TEMPLATE_OFFSETS.copy())

    def __post_init__(self):
        extent = self.offsets[ANKLES[0], 1] - self.offsets[HEAD, 1]
        if abs(extent - 1.0) > 1e-12:
            raise GeometryError(f"head-to-ankle extent must be 1.0, got {extent}")

    def to_text(self) -> str:
        """Plain-text table: ``name x y z`` per line, unit height, hip origin, y down."""
        buf = io.StringIO()
        buf.write("# joint x y z\n")
        for name, (x, y, z) in zip(self.names, self.offsets):
            buf.write(f"{name} {x:.3f} {y:.3f} {z:.3f}\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "SkeletonTemplate":
        names, rows = [], []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, *xyz = line.split()
            names.append(name)
            rows.append([float(v) for v in xyz])
        return cls(names=tuple(names), offsets=np.array(rows))


TEMPLATE = SkeletonTemplate()


@dataclass(frozen=True)
class SynthSample:
    keypoints: Keypoints2D
    gt_distance: float
    gt_center: tuple
    height: float
    sample_id: str
    joints_3d: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class SynthConfig:
    distance_range: tuple = (3.0, 40.0)
    lateral_max: float = 10.0
    height_range: tuple = (1.5, 1.9)
    pixel_noise_sigma: float = 0.0
    camera_height: float = 1.0
    max_bearing_tan: float = 0.7
    yaw_range: tuple = (-math.pi, math.pi)
    jitter_sigma: float = 0.02
    occlusion_prob: float = 0.0
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    image_size: Optional[tuple] = DEFAULT_IMAGE_SIZE

    def validate(self):
        lo, hi = self.distance_range
        if not (0 < lo <= hi):
            raise GeometryError(f"empty or invalid distance range {self.distance_range}")
        hlo, hhi = self.height_range
        if not (0 < hlo <= hhi):
            raise GeometryError(f"empty or invalid height range {self.height_range}")
        if self.pixel_noise_sigma < 0 or self.jitter_sigma < 0:
            raise GeometryError("noise levels must be >= 0")
        if not 0 <= self.occlusion_prob < 1:
            raise GeometryError("occlusion_prob must be in [0, 1)")
        if self.lateral_max < 0 or self.max_bearing_tan <= 0:
            raise GeometryError("invalid lateral limits")
        if self.yaw_range[0] > self.yaw_range[1]:
            raise GeometryError("empty yaw range")
        # hip centre must be reachable at the closest distance
        if lo <= abs(self.camera_height - HIP_TO_ANKLE * hlo) or lo <= abs(self.camera_height - HIP_TO_ANKLE * hhi):
            raise GeometryError("minimum distance below hip/camera height offset")


def project_point(point, k: CameraIntrinsics):
    x, y, z = point
    if not z > 0:
        raise GeometryError(f"point must be in front of the camera (z > 0), got z={z}")
    return (k.fx * x / z + k.cx, k.fy * y / z + k.cy)


def project_points(points: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    z = points[..., 2]
    if np.any(z <= 0):
        raise GeometryError("all points must have z > 0")
    u = k.fx * points[..., 0] / z + k.cx
    v = k.fy * points[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def back_project(uv, depth, k: CameraIntrinsics):
    u, v = uv
    return ((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth)


def normalize_keypoints(kp: Keypoints2D, k: CameraIntrinsics):
    """Map joints to normalized image coordinates ``((u-cx)/fx, (v-cy)/fy)``.

    Returns ``(coords, mask)``: a 34-vector (joint-major, x then y) with zeros
    at invisible joints, and the 17-element float visibility mask.
    """
    if kp.num_visible < MIN_VISIBLE:
        raise VisibilityError(f"{kp.num_visible} visible joints, need at least {MIN_VISIBLE}")
    xy = np.empty((NUM_JOINTS, 2))
    xy[:, 0] = (kp.joints[:, 0] - k.cx) / k.fx
    xy[:, 1] = (kp.joints[:, 1] - k.cy) / k.fy
    xy[~kp.visible] = 0.0
    return xy.reshape(-1), kp.visible.astype(float)


def _foot_point(kp: Keypoints2D):
    """Image point below the head on the ankle segment (v coordinate)."""
    (la, ra) = ANKLES
    vis_l, vis_r = kp.visible[la], kp.visible[ra]
    if vis_l and vis_r:
        (ul, vl), (ur, vr) = kp.joints[la], kp.joints[ra]
        du = ur - ul
        if abs(du) < 1e-9:
            return 0.5 * (vl + vr)
        # The 3D ankle midpoint lies directly below the head and projects onto
        # the ankle segment at the head's u coordinate.
        t = min(1.0, max(0.0, (kp.joints[HEAD, 0] - ul) / du))
        return vl + t * (vr - vl)
    if vis_l:
        return kp.joints[la, 1]
    if vis_r:
        return kp.joints[ra, 1]
    raise VisibilityError("no ankle visible")


def geometric_distance(kp: Keypoints2D, k: CameraIntrinsics, assumed_height: float) -> float:
    """Similar-triangles distance estimate from head and ankle pixels.

    Depth is ``fy * assumed_height / pixel_height``; the hip-midpoint position
    is then recovered along the head ray and its Euclidean norm returned.
    """
    if not kp.visible[HEAD]:
        raise VisibilityError("head joint not visible")
    if not assumed_height > 0:
        raise GeometryError("assumed_height must be > 0")
    v_foot = _foot_point(kp)
    u_head, v_head = kp.joints[HEAD]
    pixel_height = v_foot - v_head
    if not pixel_height > 0:
        raise GeometryError(f"degenerate pixel height {pixel_height}")
    depth = k.fy * assumed_height / pixel_height
    x = (u_head - k.cx) / k.fx * depth
    y = (v_head - k.cy) / k.fy * depth + HEAD_TO_HIP * assumed_height
    return math.sqrt(x * x + y * y + depth * depth)


def _yaw_matrix(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    # rotation about the vertical (y) axis
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _synth_one(config: SynthConfig, seed: int, index: int, template: SkeletonTemplate) -> SynthSample:
    rng = np.random.default_rng([seed, index])
    k = config.intrinsics
    d = rng.uniform(*config.distance_range)
    height = rng.uniform(*config.height_range)
    yaw = rng.uniform(*config.yaw_range)
    bearing_u = rng.uniform(-1.0, 1.0)
    jitter = rng.normal(0.0, 1.0, size=(len(_JITTERED), 3))
    noise = rng.normal(0.0, 1.0, size=(NUM_JOINTS, 2))
    drop = rng.random(NUM_JOINTS)

    y = config.camera_height - HIP_TO_ANKLE * height
    rho = math.sqrt(d * d - y * y)
    half = math.atan(config.max_bearing_tan)
    if config.lateral_max < rho:
        half = min(half, math.asin(config.lateral_max / rho))
    phi = bearing_u * half
    center = np.array([rho * math.sin(phi), y, rho * math.cos(phi)])

    offsets = template.offsets.copy()
    offsets[_JITTERED] += config.jitter_sigma * jitter
    joints_3d = center + height * offsets @ _yaw_matrix(yaw).T

    uv = project_points(joints_3d, k) + config.pixel_noise_sigma * noise
    visible = drop >= config.occlusion_prob
    if config.image_size is not None:
        w, h = config.image_size
        visible &= (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    bbox = None
    if visible.sum() >= 2:
        lo = uv[visible].min(axis=0)
        hi = uv[visible].max(axis=0)
        margin = 0.1 * max(hi[1] - lo[1], 1.0)
        bbox = (float(lo[0] - margin), float(lo[1] - margin), float(hi[0] + margin), float(hi[1] + margin))
    kp = Keypoints2D(uv, visible, bbox)
    return SynthSample(
        keypoints=kp,
        gt_distance=float(np.linalg.norm(center)),
        gt_center=tuple(float(c) for c in center),
        height=float(height),
        sample_id=f"{seed}-{index}",
        joints_3d=joints_3d,
    )


def synth_scene(n: int, seed: int, config: SynthConfig = SynthConfig(),
                template: SkeletonTemplate = TEMPLATE, start: int = 0) -> list:
    """Generate ``n`` synthetic pedestrians.

    Each sample draws from its own generator seeded by ``(seed, index)``, so
    sample ``i`` is the same no matter how many samples are generated or in
    which order.
    """
    if n < 0:
        raise GeometryError("n must be >= 0")
    config.validate()
    return [_synth_one(config, seed, i, template) for i in range(start, start + n)]


def sample_arrays(samples: Sequence[SynthSample], k: CameraIntrinsics):
    """Stack samples into (inputs[n, 51], gt[n]) skipping under-visible ones."""
    from .locnet import build_input

    xs, ys = [], []
    for s in samples:
        if s.keypoints.num_visible < MIN_VISIBLE:
            continue
        xs.append(build_input(s.keypoints, k))
        ys.append(s.gt_distance)
    if not xs:
        return np.zeros((0, 3 * NUM_JOINTS)), np.zeros(0)
    return np.array(xs), np.array(ys)
