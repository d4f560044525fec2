"""KITTI labels, the keypoint record format, label association and splits.

Keypoint file format (UTF-8, one record per line)::

    # pedloc-keypoints v1
    frame track_id x1 y1 x2 y2 gt_distance u0 v0 c0 ... u16 v16 c16

Fields are separated by single spaces.  Floats are written with 17
significant digits so that a write/read round trip is exact.  A missing
ground-truth distance is written as ``-``.  Lines starting with ``#`` and
blank lines are ignored on read.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np

from .geometry import NUM_JOINTS, CameraIntrinsics, Keypoints2D

KEYPOINT_HEADER = "# pedloc-keypoints v1"
KEYPOINT_COLUMNS = "# frame track_id x1 y1 x2 y2 gt_distance " + " ".join(
    f"u{i} v{i} c{i}" for i in range(NUM_JOINTS))
_FIXED_FIELDS = 7
_RECORD_FIELDS = _FIXED_FIELDS + 3 * NUM_JOINTS

PEDESTRIAN = "Pedestrian"


class ParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SchemaError(ValueError):
    def __init__(self, message, index=None):
        self.index = index
        super().__init__(f"record {index}: {message}" if index is not None else message)


@dataclass(frozen=True)
class KittiObject:
    object_class: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple
    dimensions: tuple
    location: tuple
    rotation_y: float
    score: Optional[float] = None

    @property
    def distance(self):
        return math.sqrt(sum(c * c for c in self.location))


def _kitti_line(fields, line_no):
    if len(fields) not in (15, 16):
        raise ParseError(f"expected 15 or 16 fields, got {len(fields)}", line_no)
    try:
        nums = [float(f) for f in fields[1:]]
    except ValueError as exc:
        raise ParseError(f"non-numeric field ({exc})", line_no) from None
    occluded = nums[1]
    if occluded != int(occluded):
        raise ParseError(f"occluded must be an integer, got {fields[2]}", line_no)
    occluded = int(occluded)
    truncated = nums[0]
    # -1 marks DontCare regions in KITTI
    if occluded not in (-1, 0, 1, 2, 3):
        raise ParseError(f"occluded must be in 0..3, got {occluded}", line_no)
    if not (truncated == -1 or 0.0 <= truncated <= 1.0):
        raise ParseError(f"truncated must be in [0, 1], got {truncated}", line_no)
    bbox = tuple(nums[3:7])
    if bbox[2] < bbox[0] or bbox[3] < bbox[1]:
        raise ParseError(f"bbox not well ordered: {bbox}", line_no)
    return KittiObject(
        object_class=fields[0],
        truncated=truncated,
        occluded=occluded,
        alpha=nums[2],
        bbox=bbox,
        dimensions=tuple(nums[7:10]),
        location=tuple(nums[10:13]),
        rotation_y=nums[13],
        score=nums[14] if len(nums) == 15 else None,
    )


def parse_kitti_labels(stream: Iterable[str]) -> list:
    """Parse a KITTI object label file.  Blank lines are skipped; any other
    line either yields an object or raises ParseError with its 1-based number."""
    objects = []
    for line_no, line in enumerate(stream, start=1):
        fields = line.split()
        if not fields:
            continue
        objects.append(_kitti_line(fields, line_no))
    return objects


def format_kitti_object(obj: KittiObject) -> str:
    vals = [obj.truncated, obj.occluded, obj.alpha, *obj.bbox, *obj.dimensions,
            *obj.location, obj.rotation_y]
    if obj.score is not None:
        vals.append(obj.score)
    return " ".join([obj.object_class] + [f"{v:.2f}" if isinstance(v, float) else str(v) for v in vals])


def parse_kitti_calib(stream: Iterable[str], camera: str = "P2") -> CameraIntrinsics:
    """Extract (fx, fy, cx, cy) from the 3x4 projection matrix of a calib file."""
    for line_no, line in enumerate(stream, start=1):
        key, _, rest = line.partition(":")
        if key.strip() != camera:
            continue
        try:
            vals = [float(v) for v in rest.split()]
        except ValueError:
            raise ParseError(f"non-numeric {camera} entry", line_no) from None
        if len(vals) != 12:
            raise ParseError(f"{camera} must have 12 values, got {len(vals)}", line_no)
        p = np.array(vals).reshape(3, 4)
        return CameraIntrinsics(fx=p[0, 0], fy=p[1, 1], cx=p[0, 2], cy=p[1, 2])
    raise ParseError(f"no {camera} entry in calibration file")


# ---------------------------------------------------------------------------
# keypoint records


@dataclass(frozen=True, eq=False)
class KeypointRecord:
    frame: int
    track_id: int
    joints: np.ndarray  # (17, 3): u, v, confidence
    bbox: tuple
    gt_distance: Optional[float] = None

    def __post_init__(self):
        joints = np.asarray(self.joints, dtype=float)
        if joints.shape != (NUM_JOINTS, 3):
            raise SchemaError(f"expected {NUM_JOINTS}x3 joints, got shape {joints.shape}")
        conf = joints[:, 2]
        if np.any((conf < 0) | (conf > 1)):
            raise SchemaError("confidences must be in [0, 1]")
        if len(self.bbox) != 4:
            raise SchemaError("bbox must have 4 values")
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "bbox", tuple(float(b) for b in self.bbox))

    def __eq__(self, other):
        if not isinstance(other, KeypointRecord):
            return NotImplemented
        return (self.frame == other.frame and self.track_id == other.track_id
                and self.bbox == other.bbox and self.gt_distance == other.gt_distance
                and np.array_equal(self.joints, other.joints))

    @property
    def record_id(self):
        return f"{self.frame}:{self.track_id}"

    def to_keypoints(self, min_confidence: float = 0.0) -> Keypoints2D:
        """Joints with confidence above ``min_confidence`` count as visible."""
        x1, y1, x2, y2 = self.bbox
        bbox = self.bbox if (x2 > x1 and y2 > y1) else None
        return Keypoints2D(self.joints[:, :2], self.joints[:, 2] > min_confidence, bbox)

    @classmethod
    def from_keypoints(cls, kp: Keypoints2D, frame=0, track_id=0, gt_distance=None):
        joints = np.column_stack([kp.joints, kp.visible.astype(float)])
        bbox = kp.bbox if kp.bbox is not None else (0.0, 0.0, 0.0, 0.0)
        return cls(frame, track_id, joints, bbox, gt_distance)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def format_record(r: KeypointRecord) -> str:
    parts = [str(int(r.frame)), str(int(r.track_id))]
    parts += [_fmt(b) for b in r.bbox]
    parts.append("-" if r.gt_distance is None else _fmt(r.gt_distance))
    parts += [_fmt(v) for v in r.joints.reshape(-1)]
    return " ".join(parts)


def parse_record(line: str, index=None) -> KeypointRecord:
    fields = line.split()
    if len(fields) != _RECORD_FIELDS:
        n_joint = (len(fields) - _FIXED_FIELDS) / 3
        raise SchemaError(f"expected {_RECORD_FIELDS} fields ({NUM_JOINTS} joints), got "
                          f"{len(fields)} ({n_joint:g} joints)", index)
    try:
        frame, track_id = int(fields[0]), int(fields[1])
        bbox = tuple(float(f) for f in fields[2:6])
        gt = None if fields[6] == "-" else float(fields[6])
        joints = np.array([float(f) for f in fields[_FIXED_FIELDS:]]).reshape(NUM_JOINTS, 3)
    except ValueError as exc:
        raise SchemaError(f"bad field ({exc})", index) from None
    try:
        return KeypointRecord(frame, track_id, joints, bbox, gt)
    except SchemaError as exc:
        raise SchemaError(str(exc), index) from None


def write_keypoints(records: Sequence[KeypointRecord], stream: TextIO):
    stream.write(KEYPOINT_HEADER + "\n")
    stream.write(KEYPOINT_COLUMNS + "\n")
    for r in records:
        stream.write(format_record(r) + "\n")


def read_keypoints(stream: Iterable[str]) -> list:
    records = []
    for line in stream:
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        records.append(parse_record(s, index=len(records)))
    return records


# ---------------------------------------------------------------------------
# association and splitting


def iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def match_pairs(record_boxes, object_boxes, iou_threshold=0.5):
    """Greedy highest-IoU matching.  Returns ``[(record_idx, object_idx, iou)]``."""
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must be in (0, 1]")
    cands = []
    for i, rb in enumerate(record_boxes):
        for j, ob in enumerate(object_boxes):
            v = iou(rb, ob)
            if v >= iou_threshold and v > 0:
                cands.append((-v, i, j))
    cands.sort()
    used_r, used_o, pairs = set(), set(), []
    for neg, i, j in cands:
        if i in used_r or j in used_o:
            continue
        used_r.add(i)
        used_o.add(j)
        pairs.append((i, j, -neg))
    return pairs


def match_keypoints_to_labels(records: Sequence[KeypointRecord], objects: Sequence[KittiObject],
                              iou_threshold: float = 0.5) -> list:
    """Fill ``gt_distance`` from pedestrian labels of the same frame.

    Unmatched records are dropped; output keeps the input record order.
    """
    peds = [o for o in objects if o.object_class == PEDESTRIAN]
    pairs = match_pairs([r.bbox for r in records], [o.bbox for o in peds], iou_threshold)
    pairs.sort()
    return [replace(records[i], gt_distance=peds[j].distance) for i, j, _ in pairs]


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    val: tuple
    seed: int


def split_dataset(ids: Sequence, fraction: float, seed: int) -> DatasetSplit:
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(math.floor(len(ids) * fraction))
    return DatasetSplit(
        train=tuple(ids[i] for i in order[:n_train]),
        val=tuple(ids[i] for i in order[n_train:]),
        seed=seed,
    )
