"""Object, box and detection types plus the geometric predicates on them."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import total_ordering
from typing import Mapping, Sequence

import numpy as np

from .geometry import ReferenceFrame, Rotation, Transform, transform_between

__all__ = [
    "ObjectType",
    "OcclusionScore",
    "BoundingBox3D",
    "ObjectState",
    "Detection",
    "iou_bev",
    "iou_3d",
    "bev_iou_matrix",
    "box_params",
    "blocked_fractions",
    "score_from_fraction",
    "occlusion_score",
    "in_fov",
    "fov_mask",
]


class ObjectType(Enum):
    Car = "Car"
    Truck = "Truck"
    Pedestrian = "Pedestrian"
    Cyclist = "Cyclist"
    Other = "Other"


@total_ordering
class OcclusionScore(Enum):
    NONE = 0
    PARTIAL = 1
    MOST = 2
    COMPLETE = 3
    UNKNOWN = 4

    def __lt__(self, other):
        if not isinstance(other, OcclusionScore):
            return NotImplemented
        if OcclusionScore.UNKNOWN in (self, other):
            raise TypeError("UNKNOWN occlusion is not ordered")
        return self.value < other.value


def _make(cls, **values):
    obj = object.__new__(cls)
    for k, v in values.items():
        object.__setattr__(obj, k, v)
    return obj


@dataclass(frozen=True, eq=False)
class BoundingBox3D:
    """Box centred at ``center`` with dimensions (height, width, length).

    Length runs along the box's local x axis, width along y, height along z.
    """

    center: np.ndarray
    dimensions: tuple[float, float, float]
    orientation: Rotation
    frame: ReferenceFrame

    def __post_init__(self):
        c = np.array(self.center, dtype=float).reshape(3)
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        dims = tuple(float(d) for d in self.dimensions)
        if len(dims) != 3 or min(dims) <= 0:
            raise ValueError(f"box dimensions must be three positive values, got {dims}")
        object.__setattr__(self, "dimensions", dims)

    @property
    def height(self) -> float:
        return self.dimensions[0]

    @property
    def width(self) -> float:
        return self.dimensions[1]

    @property
    def length(self) -> float:
        return self.dimensions[2]

    @property
    def volume(self) -> float:
        h, w, l = self.dimensions
        return h * w * l

    @property
    def yaw(self) -> float:
        return self.orientation.yaw

    def corners(self) -> np.ndarray:
        h, w, l = self.dimensions
        signs = np.array([[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)], dtype=float)
        local = signs * np.array([l / 2, w / 2, h / 2])
        return self.orientation.apply(local) + self.center

    def transformed(self, tf: Transform, frame: ReferenceFrame) -> "BoundingBox3D":
        if tf.dst != frame.id:
            raise ValueError(f"transform ends in {tf.dst!r}, not {frame.id!r}")
        rot = self.orientation.reflected() if tf.flip else self.orientation
        return BoundingBox3D.trusted(tf.apply(self.center), self.dimensions, tf.rotation * rot, frame)

    @classmethod
    def trusted(cls, center: np.ndarray, dimensions: tuple, orientation: Rotation, frame: ReferenceFrame) -> "BoundingBox3D":
        """Construct without validation from a float 3-array and a tuple of positive floats."""
        center.setflags(write=False)
        return _make(cls, center=center, dimensions=dimensions, orientation=orientation, frame=frame)

    def in_frame(self, frame: ReferenceFrame) -> "BoundingBox3D":
        if frame is self.frame:
            return self
        return self.transformed(transform_between(self.frame, frame), frame)

    def to_dict(self) -> dict:
        return {
            "center": [float(v) for v in self.center],
            "dimensions": list(self.dimensions),
            "quat": list(self.orientation.quat),
            "frame": self.frame.id,
        }

    @classmethod
    def from_dict(cls, d: Mapping, frames: Mapping[str, ReferenceFrame]) -> "BoundingBox3D":
        return cls(d["center"], tuple(d["dimensions"]), Rotation(d["quat"]), frames[d["frame"]])


@dataclass(frozen=True, eq=False)
class ObjectState:
    id: int
    object_type: ObjectType
    box: BoundingBox3D
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    acceleration: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    timestamp: float = 0.0

    def __post_init__(self):
        for name in ("velocity", "acceleration", "angular_velocity"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float).reshape(3))

    @property
    def frame(self) -> ReferenceFrame:
        return self.box.frame

    def in_frame(self, frame: ReferenceFrame) -> "ObjectState":
        if frame is self.box.frame:
            return self
        tf = transform_between(self.box.frame, frame)
        return replace(
            self,
            box=self.box.transformed(tf, frame),
            velocity=tf.apply_vector(self.velocity),
            acceleration=tf.apply_vector(self.acceleration),
            angular_velocity=tf.apply_vector(self.angular_velocity) * (-1.0 if tf.flip else 1.0),
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "type": self.object_type.value,
            "box": self.box.to_dict(),
            "velocity": self.velocity.tolist(),
            "acceleration": self.acceleration.tolist(),
            "angular_velocity": self.angular_velocity.tolist(),
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: Mapping, frames: Mapping[str, ReferenceFrame]) -> "ObjectState":
        return cls(
            id=int(d["id"]),
            object_type=ObjectType(d["type"]),
            box=BoundingBox3D.from_dict(d["box"], frames),
            velocity=d.get("velocity", (0, 0, 0)),
            acceleration=d.get("acceleration", (0, 0, 0)),
            angular_velocity=d.get("angular_velocity", (0, 0, 0)),
            timestamp=float(d.get("timestamp", 0.0)),
        )


@dataclass(frozen=True, eq=False)
class Detection:
    """Single-sensor box observation.

    ``covariance`` is 7x7 over (x, y, z, yaw, h, w, l), expressed in the box's
    frame.
    """

    box: BoundingBox3D
    covariance: np.ndarray
    sensor_id: int
    timestamp: float
    confidence: float = 1.0
    object_type: ObjectType = ObjectType.Car

    def __post_init__(self):
        cov = np.array(self.covariance, dtype=float)
        if cov.shape != (7, 7):
            raise ValueError("detection covariance must be 7x7")
        if np.abs(cov - cov.T).max() > 1e-9 * max(1.0, np.abs(cov).max()):
            raise ValueError("detection covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-9 * max(1.0, np.abs(cov).max()):
            raise ValueError("detection covariance must be positive semi-definite")
        object.__setattr__(self, "covariance", cov)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    def in_frame(self, frame: ReferenceFrame) -> "Detection":
        if frame is self.box.frame:
            return self
        return self.transformed(transform_between(self.box.frame, frame), frame)

    def transformed(self, tf: Transform, frame: ReferenceFrame) -> "Detection":
        """Apply ``tf`` (box frame to ``frame``) to the box and its covariance."""
        lin = tf.linear()
        cov = self.covariance.copy()
        cov[:3, :] = lin @ cov[:3, :]
        cov[:, :3] = cov[:, :3] @ lin.T
        return Detection.trusted(self.box.transformed(tf, frame), cov, self.sensor_id, self.timestamp,
                                 self.confidence, self.object_type)

    @classmethod
    def trusted(cls, box: BoundingBox3D, covariance: np.ndarray, sensor_id: int, timestamp: float,
                confidence: float = 1.0, object_type: ObjectType = ObjectType.Car) -> "Detection":
        """Construct without validation; ``covariance`` must be a symmetric float 7x7 array."""
        return _make(cls, box=box, covariance=covariance, sensor_id=sensor_id, timestamp=timestamp,
                     confidence=confidence, object_type=object_type)

    def to_dict(self) -> dict:
        return {
            "box": self.box.to_dict(),
            "covariance": self.covariance.tolist(),
            "sensor_id": self.sensor_id,
            "timestamp": self.timestamp,
            "confidence": self.confidence,
            "type": self.object_type.value,
        }

    @classmethod
    def from_dict(cls, d: Mapping, frames: Mapping[str, ReferenceFrame]) -> "Detection":
        return cls(
            box=BoundingBox3D.from_dict(d["box"], frames),
            covariance=d["covariance"],
            sensor_id=int(d["sensor_id"]),
            timestamp=float(d["timestamp"]),
            confidence=float(d.get("confidence", 1.0)),
            object_type=ObjectType(d.get("type", "Car")),
        )


# --- IoU -------------------------------------------------------------------


def _rect(cx, cy, length, width, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = length / 2.0, width / 2.0
    pts = []
    for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        pts.append((cx + c * dx - s * dy, cy + s * dx + c * dy))
    return pts


def _clip(subject, clip):
    """Sutherland-Hodgman clip of a polygon by a convex CCW polygon."""
    out = subject
    n = len(clip)
    for i in range(n):
        if not out:
            break
        x1, y1 = clip[i]
        x2, y2 = clip[(i + 1) % n]
        ex, ey = x2 - x1, y2 - y1
        inp, out = out, []
        prev = inp[-1]
        prev_side = ex * (prev[1] - y1) - ey * (prev[0] - x1)
        for cur in inp:
            side = ex * (cur[1] - y1) - ey * (cur[0] - x1)
            if side >= 0.0:
                if prev_side < 0.0:
                    t = prev_side / (prev_side - side)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif prev_side >= 0.0:
                t = prev_side / (prev_side - side)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, side
    return out


def _area(poly):
    a = 0.0
    for i in range(len(poly)):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % len(poly)]
        a += x1 * y2 - x2 * y1
    return abs(a) / 2.0


def _bev_intersection(p, q):
    """Overlap area of two BEV rectangles given as (x, y, length, width, yaw)."""
    r = math.hypot(p[2], p[3]) / 2.0 + math.hypot(q[2], q[3]) / 2.0
    if (p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= r * r:
        return 0.0
    # clip the box with the smaller yaw-index first so the result is order-free
    a, b = (p, q) if p <= q else (q, p)
    poly = _clip(_rect(*a), _rect(*b))
    return _area(poly) if len(poly) >= 3 else 0.0


def box_params(box: BoundingBox3D) -> tuple:
    """(x, y, z, h, w, l, yaw) of a box in its own frame."""
    x, y, z = box.center
    h, w, l = box.dimensions
    return (float(x), float(y), float(z), h, w, l, box.yaw)


def _common(a: BoundingBox3D, b: BoundingBox3D):
    if b.frame is not a.frame:
        b = b.in_frame(a.frame)
    return box_params(a), box_params(b)


def _iou_from_params(pa, pb, three_d: bool) -> float:
    bev_a = (pa[0], pa[1], pa[5], pa[4], pa[6])
    bev_b = (pb[0], pb[1], pb[5], pb[4], pb[6])
    inter = _bev_intersection(bev_a, bev_b)
    area_a, area_b = pa[5] * pa[4], pb[5] * pb[4]
    if not three_d:
        return inter / (area_a + area_b - inter)
    lo = max(pa[2] - pa[3] / 2, pb[2] - pb[3] / 2)
    hi = min(pa[2] + pa[3] / 2, pb[2] + pb[3] / 2)
    inter3 = inter * max(0.0, hi - lo)
    return inter3 / (area_a * pa[3] + area_b * pb[3] - inter3)


def iou_bev(a: BoundingBox3D, b: BoundingBox3D) -> float:
    """Ground-plane IoU of the yaw-rotated footprints."""
    pa, pb = _common(a, b)
    return _iou_from_params(pa, pb, False)


def iou_3d(a: BoundingBox3D, b: BoundingBox3D) -> float:
    pa, pb = _common(a, b)
    return _iou_from_params(pa, pb, True)


_CORNER_SIGNS = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])


def _rect_batch(p):
    """(K, 4, 2) CCW corners for rows (x, y, length, width, yaw)."""
    c, s = np.cos(p[:, 4]), np.sin(p[:, 4])
    local = _CORNER_SIGNS[None] * (p[:, None, 2:4] / 2.0)
    x = p[:, None, 0] + c[:, None] * local[..., 0] - s[:, None] * local[..., 1]
    y = p[:, None, 1] + s[:, None] * local[..., 0] + c[:, None] * local[..., 1]
    return np.stack([x, y], axis=-1)


def _inside(pts, rect_params, tol=1e-9):
    """Which of ``pts`` (K, M, 2) lie in the matching rectangles, boundary included."""
    d = pts - rect_params[:, None, :2]
    c, s = np.cos(rect_params[:, 4])[:, None], np.sin(rect_params[:, 4])[:, None]
    u = c * d[..., 0] + s * d[..., 1]
    v = -s * d[..., 0] + c * d[..., 1]
    hl = rect_params[:, 2:3] / 2.0
    hw = rect_params[:, 3:4] / 2.0
    return (np.abs(u) <= hl * (1 + tol) + tol) & (np.abs(v) <= hw * (1 + tol) + tol)


def bev_intersection_areas(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Overlap areas of paired BEV rectangles, rows (x, y, length, width, yaw).

    The overlap of two convex polygons is the convex hull of the corners of
    each inside the other plus all edge crossings, so every pair is
    evaluated at once by ordering those candidate points around their
    centroid.
    """
    p = np.asarray(p, dtype=float).reshape(-1, 5)
    q = np.asarray(q, dtype=float).reshape(-1, 5)
    # canonical pair order keeps the result exactly symmetric
    diff = p != q
    first = np.argmax(diff, axis=1)
    rows = np.arange(len(p))
    swap = diff[rows, first] & (p[rows, first] > q[rows, first])
    p, q = np.where(swap[:, None], q, p), np.where(swap[:, None], p, q)

    a, b = _rect_batch(p), _rect_batch(q)
    ea = np.roll(a, -1, axis=1) - a
    eb = np.roll(b, -1, axis=1) - b
    # segment a_i + t ea_i against b_j + u eb_j
    da = ea[:, :, None, :]
    db = eb[:, None, :, :]
    w = b[:, None, :, :] - a[:, :, None, :]
    den = da[..., 0] * db[..., 1] - da[..., 1] * db[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[..., 0] * db[..., 1] - w[..., 1] * db[..., 0]) / den
        u = (w[..., 0] * da[..., 1] - w[..., 1] * da[..., 0]) / den
    ok_x = (np.abs(den) > 1e-12) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    cross = a[:, :, None, :] + np.where(ok_x, t, 0.0)[..., None] * da

    pts = np.concatenate([a, b, cross.reshape(len(p), 16, 2)], axis=1)
    mask = np.concatenate([_inside(a, q), _inside(b, p), ok_x.reshape(len(p), 16)], axis=1)
    count = mask.sum(axis=1)
    weight = mask / np.maximum(count, 1)[:, None]
    centroid = np.einsum("km,kmd->kd", weight, pts)
    ang = np.arctan2(pts[..., 1] - centroid[:, None, 1], pts[..., 0] - centroid[:, None, 0])
    ang = np.where(mask, ang, np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    pts = np.take_along_axis(pts, order[..., None], axis=1)
    last = np.maximum(count - 1, 0)
    idx = np.minimum(np.arange(pts.shape[1])[None, :], last[:, None])
    pts = np.take_along_axis(pts, idx[..., None], axis=1)
    nxt = np.roll(pts, -1, axis=1)
    area = 0.5 * np.abs(np.sum(pts[..., 0] * nxt[..., 1] - nxt[..., 0] * pts[..., 1], axis=1))
    return np.where(count >= 3, area, 0.0)


def bev_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise BEV IoU between box arrays with rows (x, y, z, h, w, l, yaw)."""
    a = np.asarray(a, dtype=float).reshape(-1, 7)
    b = np.asarray(b, dtype=float).reshape(-1, 7)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    ra = np.hypot(a[:, 4], a[:, 5]) / 2.0
    rb = np.hypot(b[:, 4], b[:, 5]) / 2.0
    d2 = (a[:, None, 0] - b[None, :, 0]) ** 2 + (a[:, None, 1] - b[None, :, 1]) ** 2
    i, j = np.nonzero(d2 < (ra[:, None] + rb[None, :]) ** 2)
    if len(i) == 0:
        return out
    pa = a[i][:, [0, 1, 5, 4, 6]]
    pb = b[j][:, [0, 1, 5, 4, 6]]
    inter = bev_intersection_areas(pa, pb)
    union = pa[:, 2] * pa[:, 3] + pb[:, 2] * pb[:, 3] - inter
    out[i, j] = inter / union
    return out


# --- occlusion ---------------------------------------------------------------


def blocked_fractions(origin, targets, centers, rotations, half_extents, exclude) -> np.ndarray:
    """Fraction of rays from ``origin`` to each target point set blocked by boxes.

    Args:
        origin: (3,) ray origin.
        targets: (T, P, 3) end points, P rays per target.
        centers: (B, 3) occluder centres.
        rotations: (B, 3, 3) occluder orientations.
        half_extents: (B, 3) half sizes along each occluder's local axes.
        exclude: (T, B) boolean mask of occluders ignored for each target.

    Returns:
        (T,) blocked fraction per target.
    """
    targets = np.asarray(targets, dtype=float)
    t_count, p_count = targets.shape[:2]
    if len(centers) == 0 or t_count == 0:
        return np.zeros(t_count)
    origin = np.asarray(origin, dtype=float)
    centers = np.asarray(centers, dtype=float)
    half_extents = np.asarray(half_extents, dtype=float)

    # bounding-sphere prefilter: occluder sphere vs. the capsule around the sight line
    t_center = targets.mean(axis=1)
    t_radius = np.linalg.norm(targets - t_center[:, None], axis=2).max(axis=1)
    b_radius = np.linalg.norm(half_extents, axis=1)
    seg = t_center - origin
    seg_len2 = np.maximum((seg * seg).sum(axis=1), 1e-300)
    rel = centers[None, :, :] - origin
    u = np.clip(np.einsum("tbi,ti->tb", rel, seg) / seg_len2[:, None], 0.0, 1.0)
    closest = origin + u[..., None] * seg[:, None, :]
    dist2 = ((centers[None] - closest) ** 2).sum(axis=2)
    reach = t_radius[:, None] + b_radius[None, :]
    near = (dist2 <= reach * reach) & ~np.asarray(exclude, dtype=bool)
    ti, bi = np.nonzero(near)
    if len(ti) == 0:
        return np.zeros(t_count)

    rt = np.transpose(np.asarray(rotations, dtype=float)[bi], (0, 2, 1))
    o_local = np.einsum("kij,kj->ki", rt, origin - centers[bi])
    d_local = np.einsum("kij,kpj->kpi", rt, targets[ti] - origin)
    half = half_extents[bi][:, None, :]
    o_b = o_local[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d_local
        t1 = (-half - o_b) * inv
        t2 = (half - o_b) * inv
    tlo = np.minimum(t1, t2)
    thi = np.maximum(t1, t2)
    parallel = d_local == 0.0
    inside = np.abs(o_b) <= half
    tlo = np.where(parallel, np.where(inside, -np.inf, np.inf), tlo)
    thi = np.where(parallel, np.where(inside, np.inf, -np.inf), thi)
    enter = np.maximum(tlo.max(axis=-1), 0.0)
    leave = np.minimum(thi.min(axis=-1), 1.0)
    hit = leave > enter + 1e-12
    blocked = np.zeros((t_count, p_count), dtype=bool)
    np.logical_or.at(blocked, ti, hit)
    return blocked.sum(axis=1) / p_count


def score_from_fraction(f: float) -> OcclusionScore:
    if f <= 0.0:
        return OcclusionScore.NONE
    if f <= 0.5:
        return OcclusionScore.PARTIAL
    if f < 1.0:
        return OcclusionScore.MOST
    return OcclusionScore.COMPLETE


def _ray_targets(box: BoundingBox3D) -> np.ndarray:
    return np.vstack([box.corners(), box.center[None]])


def occlusion_score(obj: ObjectState, sensor_frame: ReferenceFrame, world_objects: Sequence[ObjectState]) -> OcclusionScore:
    """Score how much of ``obj`` is hidden from the sensor origin.

    Nine rays (eight corners plus centre) are cast from the sensor origin and
    tested against every other object's box.
    """
    target = obj.box.in_frame(sensor_frame)
    others = [o.box.in_frame(sensor_frame) for o in world_objects if o is not obj and o.id != obj.id]
    if not others:
        return OcclusionScore.NONE
    centers = np.array([b.center for b in others])
    rots = np.array([b.orientation.as_matrix() for b in others])
    halves = np.array([[b.length / 2, b.width / 2, b.height / 2] for b in others])
    frac = blocked_fractions(
        np.zeros(3), _ray_targets(target)[None], centers, rots, halves, np.zeros((1, len(others)), bool)
    )[0]
    return score_from_fraction(frac)


# --- field of view -------------------------------------------------------------


def fov_mask(points, fov_azimuth: float, fov_elevation: float, max_range: float) -> np.ndarray:
    """Which sensor-frame points fall in the cone; all bounds inclusive."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    rng = np.linalg.norm(p, axis=1)
    az = np.arctan2(p[:, 1], p[:, 0])
    el = np.arctan2(p[:, 2], np.hypot(p[:, 0], p[:, 1]))
    return (rng <= max_range) & (np.abs(az) <= fov_azimuth) & (np.abs(el) <= fov_elevation)


def in_fov(obj: ObjectState, sensor) -> bool:
    """Whether the object's centre lies within ``sensor``'s viewing cone and range.

    ``sensor`` needs ``frame``, ``fov_azimuth``, ``fov_elevation`` (half
    angles, radians) and ``max_range`` attributes.
    """
    tf = transform_between(obj.box.frame, sensor.frame)
    p = tf.apply(obj.box.center)
    return bool(fov_mask(p, sensor.fov_azimuth, sensor.fov_elevation, sensor.max_range)[0])
