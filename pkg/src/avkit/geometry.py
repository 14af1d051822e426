"""Reference frames, rotations and transform resolution along frame chains.

A :class:`ReferenceFrame` is the tuple (translation, rotation, parent,
handedness) plus a flag saying whether the translation is expressed before or
after the rotation is applied. Frames link to their parent by reference, so a
scene is a forest of frames with one world root. Any two frames of the same
forest can be related through their lowest common ancestor, see
:func:`transform_between`.

Conventions used throughout:

* A frame's rotation maps coordinates expressed in the frame into the parent's
  axes.
* ``PostRotation`` frames: ``p_parent = R @ p + Tr`` (4x4 matrix style).
  ``PreRotation`` frames: ``p_parent = R @ (p + Tr)``.
* A left-handed frame is the right-handed one with its y axis negated.
* :class:`Transform` always maps source-frame coordinates to destination-frame
  coordinates; ``compose(outer, inner)`` applies ``inner`` first.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "GeometryError",
    "CycleDetected",
    "OrphanFrame",
    "DisjointForests",
    "EndpointMismatch",
    "GimbalLock",
    "BehindCamera",
    "Handedness",
    "TranslationOrder",
    "EulerConvention",
    "Rotation",
    "Transform",
    "ReferenceFrame",
    "CameraCalibration",
    "world_frame",
    "compose",
    "resolve_to_world",
    "transform_between",
    "euler_to_rotation",
    "rotation_to_euler",
    "project_to_image",
    "unproject",
    "frame_to_dict",
    "frames_to_json",
    "frames_from_json",
]


class GeometryError(Exception):
    """Base class for frame and rotation errors."""


class CycleDetected(GeometryError):
    pass


class OrphanFrame(GeometryError):
    pass


class DisjointForests(GeometryError):
    pass


class EndpointMismatch(GeometryError):
    pass


class GimbalLock(GeometryError):
    """Raised at an Euler singularity.

    ``angles`` holds one valid decomposition (third angle set to zero) so
    callers that can live with the degeneracy may still use it.
    """

    def __init__(self, message: str, angles: tuple[float, float, float]):
        super().__init__(message)
        self.angles = angles


class BehindCamera(GeometryError):
    pass


class Handedness(Enum):
    RightHanded = "RH"
    LeftHanded = "LH"

    @property
    def flips(self) -> bool:
        return self is Handedness.LeftHanded

    def convert(self, vectors):
        """Map coordinates between this handedness and right-handed.

        Negating y is its own inverse, so the same call converts in either
        direction.
        """
        v = np.array(vectors, dtype=float, copy=True)
        if self.flips:
            v[..., 1] = -v[..., 1]
        return v


class TranslationOrder(Enum):
    PreRotation = "pre"
    PostRotation = "post"


_AXIS_INDEX = {"X": 0, "Y": 1, "Z": 2}


@dataclass(frozen=True)
class EulerConvention:
    """Axis sequence plus intrinsic/extrinsic composition.

    Intrinsic ``"ZYX"`` with angles (a, b, c) means ``Rz(a) @ Ry(b) @ Rx(c)``;
    extrinsic ``"ZYX"`` means ``Rx(c) @ Ry(b) @ Rz(a)``.
    """

    axes: str
    intrinsic: bool = True

    def __post_init__(self):
        axes = self.axes.upper()
        if len(axes) != 3 or any(a not in _AXIS_INDEX for a in axes):
            raise ValueError(f"invalid Euler axis sequence {self.axes!r}")
        if axes[0] == axes[1] or axes[1] == axes[2]:
            raise ValueError(f"Euler sequence {self.axes!r} repeats an adjacent axis")
        object.__setattr__(self, "axes", axes)

    @property
    def proper(self) -> bool:
        """True for symmetric sequences such as ZYZ."""
        return self.axes[0] == self.axes[2]

    @classmethod
    def all(cls) -> list["EulerConvention"]:
        """The 12 valid axis sequences in both composition modes."""
        out = []
        for intrinsic in (True, False):
            for seq in itertools.product("XYZ", repeat=3):
                if seq[0] != seq[1] and seq[1] != seq[2]:
                    out.append(cls("".join(seq), intrinsic))
        return out

    def __str__(self):
        return f"{'intrinsic' if self.intrinsic else 'extrinsic'}-{self.axes}"


def _qmul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


_SIGN_EPS = 1e-12


def _canonical(w, x, y, z):
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if not 0.0 < n < math.inf:
        raise ValueError("quaternion must have finite nonzero norm")
    w, x, y, z = w / n, x / n, y / n, z / n
    # Sign decided by the first component clearly away from zero, so a w that
    # is zero only up to rounding does not flip the representation.
    if abs(w) > _SIGN_EPS:
        lead = w
    else:
        lead = next((c for c in (x, y, z) if abs(c) > _SIGN_EPS), 0.0)
    if lead < 0.0:
        w, x, y, z = -w, -x, -y, -z
    # negative zero would break bitwise equality of q and -q
    return (w + 0.0, x + 0.0, y + 0.0, z + 0.0)


class Rotation:
    """Proper rotation stored as a canonical unit quaternion ``(w, x, y, z)``."""

    __slots__ = ("_q", "_matrix")

    def __init__(self, quat: Sequence[float] = (1.0, 0.0, 0.0, 0.0)):
        w, x, y, z = (float(c) for c in quat)
        self._q = _canonical(w, x, y, z)
        self._matrix = None

    @classmethod
    def _from_floats(cls, w: float, x: float, y: float, z: float) -> "Rotation":
        r = object.__new__(cls)
        r._q = _canonical(w, x, y, z)
        r._matrix = None
        return r

    @classmethod
    def identity(cls) -> "Rotation":
        return cls()

    @classmethod
    def from_quat(cls, quat: Sequence[float]) -> "Rotation":
        return cls(quat)

    @classmethod
    def from_axis_angle(cls, axis: Sequence[float], angle: float) -> "Rotation":
        ax = np.asarray(axis, dtype=float)
        ax = ax / np.linalg.norm(ax)
        s = math.sin(angle / 2.0)
        return cls((math.cos(angle / 2.0), ax[0] * s, ax[1] * s, ax[2] * s))

    @classmethod
    def from_yaw(cls, yaw: float) -> "Rotation":
        return cls._from_floats(math.cos(yaw / 2.0), 0.0, 0.0, math.sin(yaw / 2.0))

    @classmethod
    def from_matrix(cls, matrix) -> "Rotation":
        """Build from a direction-cosine matrix (Shepperd's method)."""
        m = np.asarray(matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError("rotation matrix must be 3x3")
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        cands = (tr, m[0, 0], m[1, 1], m[2, 2])
        k = max(range(4), key=lambda i: cands[i])
        if k == 0:
            s = 2.0 * math.sqrt(1.0 + tr)
            q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s)
        elif k == 1:
            s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s)
        elif k == 2:
            s = 2.0 * math.sqrt(1.0 - m[0, 0] + m[1, 1] - m[2, 2])
            q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s)
        else:
            s = 2.0 * math.sqrt(1.0 - m[0, 0] - m[1, 1] + m[2, 2])
            q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        return cls(q)

    @classmethod
    def from_euler(cls, angles: Sequence[float], conv: EulerConvention) -> "Rotation":
        return euler_to_rotation(angles, conv)

    @property
    def quat(self) -> tuple[float, float, float, float]:
        return self._q

    def as_quat(self) -> np.ndarray:
        return np.array(self._q)

    def as_matrix(self) -> np.ndarray:
        if self._matrix is None:
            w, x, y, z = self._q
            self._matrix = np.array(
                [
                    [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                    [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                    [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
                ]
            )
            self._matrix.setflags(write=False)
        return self._matrix

    def as_euler(self, conv: EulerConvention) -> np.ndarray:
        return rotation_to_euler(self, conv)

    @property
    def yaw(self) -> float:
        """Heading of the rotated x axis in the xy plane."""
        m = self.as_matrix()
        return math.atan2(m[1, 0], m[0, 0])

    def inverse(self) -> "Rotation":
        w, x, y, z = self._q
        return Rotation._from_floats(w, -x, -y, -z)

    def reflected(self) -> "Rotation":
        """Conjugate by the y-axis reflection, ``F @ R @ F``."""
        w, x, y, z = self._q
        return Rotation._from_floats(w, -x, y, -z)

    def apply(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.as_matrix().T

    def __mul__(self, other: "Rotation") -> "Rotation":
        if not isinstance(other, Rotation):
            return NotImplemented
        return Rotation._from_floats(*_qmul(self._q, other._q))

    def __eq__(self, other):
        return isinstance(other, Rotation) and self._q == other._q

    def __hash__(self):
        return hash(self._q)

    def isclose(self, other: "Rotation", tol: float = 1e-12) -> bool:
        return max(abs(a - b) for a, b in zip(self._q, other._q)) <= tol

    def __repr__(self):
        return "Rotation(w={:.6g}, x={:.6g}, y={:.6g}, z={:.6g})".format(*self._q)


def _elemental(axis: str, angle: float):
    h = angle / 2.0
    q = [math.cos(h), 0.0, 0.0, 0.0]
    q[1 + _AXIS_INDEX[axis]] = math.sin(h)
    return tuple(q)


def euler_to_rotation(angles: Sequence[float], conv: EulerConvention) -> Rotation:
    """Rotation from three angles (radians) under an explicit convention."""
    a, b, c = (float(v) for v in angles)
    q1, q2, q3 = (_elemental(ax, ang) for ax, ang in zip(conv.axes, (a, b, c)))
    if conv.intrinsic:
        q = _qmul(_qmul(q1, q2), q3)
    else:
        q = _qmul(_qmul(q3, q2), q1)
    return Rotation(q)


def _intrinsic_angles(m: np.ndarray, axes: str, conv_label: str):
    i, j = _AXIS_INDEX[axes[0]], _AXIS_INDEX[axes[1]]
    k = 3 - i - j
    s = 1.0 if (j - i) % 3 == 1 else -1.0
    if axes[0] == axes[2]:
        sb = math.hypot(m[i, j], m[i, k])
        b = math.atan2(sb, m[i, i])
        locked = sb < 1e-9
        if not locked:
            a = math.atan2(m[j, i], -s * m[k, i])
            c = math.atan2(m[i, j], s * m[i, k])
    else:
        cb = math.hypot(m[i, i], m[i, j])
        b = math.atan2(s * m[i, k], cb)
        locked = cb < 1e-9
        if not locked:
            a = math.atan2(-s * m[j, k], m[k, k])
            c = math.atan2(-s * m[i, j], m[i, i])
    if locked:
        a = math.atan2(s * m[k, j], m[j, j])
        raise GimbalLock(f"rotation is at the gimbal-lock singularity of {conv_label}", (a, b, 0.0))
    return a, b, c


def rotation_to_euler(rot: Rotation, conv: EulerConvention) -> np.ndarray:
    """Decompose ``rot`` into angles under ``conv``.

    Raises:
        GimbalLock: when the middle angle is within 1e-9 rad of the
            convention's singularity. The exception carries a valid solution.
    """
    m = rot.as_matrix()
    if conv.intrinsic:
        return np.array(_intrinsic_angles(m, conv.axes, str(conv)))
    try:
        a, b, c = _intrinsic_angles(m, conv.axes[::-1], str(conv))
    except GimbalLock as exc:
        a, b, c = exc.angles
        raise GimbalLock(str(exc), (c, b, a)) from None
    return np.array((c, b, a))


_FLIP = np.array([1.0, -1.0, 1.0])


class Transform:
    """Rigid map (possibly including the y reflection) between two frames.

    Applies ``p_dst = R @ (F^flip @ p_src) + t`` where ``F = diag(1, -1, 1)``.
    """

    __slots__ = ("rotation", "translation", "flip", "src", "dst")

    def __init__(self, rotation: Rotation, translation, src: str, dst: str, flip: bool = False):
        self.rotation = rotation
        self.translation = np.array(translation, dtype=float).reshape(3)
        self.flip = bool(flip)
        self.src = src
        self.dst = dst

    @classmethod
    def identity(cls, frame_id: str) -> "Transform":
        return cls(Rotation(), np.zeros(3), frame_id, frame_id)

    def apply(self, points) -> np.ndarray:
        """Map points (shape ``(3,)`` or ``(N, 3)``) from src to dst."""
        p = np.asarray(points, dtype=float)
        if self.flip:
            p = p * _FLIP
        return p @ self.rotation.as_matrix().T + self.translation

    def apply_vector(self, vectors) -> np.ndarray:
        """Map free vectors (velocities, directions); translation ignored."""
        v = np.asarray(vectors, dtype=float)
        if self.flip:
            v = v * _FLIP
        return v @ self.rotation.as_matrix().T

    def linear(self) -> np.ndarray:
        """The 3x3 linear part ``R @ F^flip``."""
        m = self.rotation.as_matrix()
        return m * _FLIP if self.flip else m.copy()

    def as_matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.linear()
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> "Transform":
        r_inv = self.rotation.inverse()
        if self.flip:
            r_inv = r_inv.reflected()
            t = -r_inv.apply(self.translation * _FLIP)
        else:
            t = -r_inv.apply(self.translation)
        return Transform(r_inv, t, self.dst, self.src, self.flip)

    def __matmul__(self, other: "Transform") -> "Transform":
        return compose(self, other)

    def __repr__(self):
        return (
            f"Transform({self.src}->{self.dst}, {self.rotation!r}, "
            f"t={self.translation.tolist()}, flip={self.flip})"
        )


def compose(outer: Transform, inner: Transform) -> Transform:
    """``outer`` after ``inner``; requires ``inner.dst == outer.src``."""
    if inner.dst != outer.src:
        raise EndpointMismatch(
            f"cannot compose {inner.src}->{inner.dst} with {outer.src}->{outer.dst}"
        )
    r_inner = inner.rotation.reflected() if outer.flip else inner.rotation
    t_inner = inner.translation * _FLIP if outer.flip else inner.translation
    return Transform(
        outer.rotation * r_inner,
        outer.rotation.apply(t_inner) + outer.translation,
        inner.src,
        outer.dst,
        inner.flip != outer.flip,
    )


_frame_ids = itertools.count()


@dataclass(frozen=True, eq=False)
class ReferenceFrame:
    """One node of a frame forest. Immutable once built.

    ``parent=None`` marks a world root, which must be the identity,
    right-handed frame.
    """

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: Rotation = field(default_factory=Rotation)
    parent: "ReferenceFrame | None" = None
    handedness: Handedness = Handedness.RightHanded
    translation_order: TranslationOrder = TranslationOrder.PostRotation
    id: str = ""

    def __post_init__(self):
        tr = np.array(self.translation, dtype=float).reshape(3)
        tr.setflags(write=False)
        object.__setattr__(self, "translation", tr)
        if not self.id:
            object.__setattr__(self, "id", f"frame-{next(_frame_ids)}")
        if self.parent is None:
            if (
                np.any(tr != 0.0)
                or self.rotation != Rotation()
                or self.handedness is not Handedness.RightHanded
            ):
                raise ValueError("a world root must be the identity right-handed frame")

    @property
    def is_root(self) -> bool:
        return self.parent is None

    def local_transform(self) -> Transform:
        """This frame -> its parent."""
        if self.parent is None:
            return Transform.identity(self.id)
        t = self.translation
        if self.translation_order is TranslationOrder.PreRotation:
            t = self.rotation.apply(t)
        return Transform(self.rotation, t, self.id, self.parent.id, self.handedness.flips)

    def child(self, translation=(0.0, 0.0, 0.0), rotation: Rotation | None = None, **kwargs) -> "ReferenceFrame":
        return ReferenceFrame(
            translation=translation, rotation=rotation or Rotation(), parent=self, **kwargs
        )

    def chain(self) -> list["ReferenceFrame"]:
        """This frame followed by its ancestors up to the root."""
        out = [self]
        seen = {id(self)}
        node = self.parent
        while node is not None:
            if id(node) in seen:
                raise CycleDetected(f"parent links of {self.id!r} loop at {node.id!r}")
            seen.add(id(node))
            out.append(node)
            node = node.parent
        return out

    def root(self) -> "ReferenceFrame":
        return self.chain()[-1]

    def __repr__(self):
        parent = self.parent.id if self.parent is not None else None
        return f"ReferenceFrame(id={self.id!r}, parent={parent!r})"


def world_frame(frame_id: str = "world") -> ReferenceFrame:
    return ReferenceFrame(id=frame_id)


def _to_ancestor(chain: list[ReferenceFrame]) -> Transform:
    t = Transform.identity(chain[0].id)
    for node in chain[:-1]:
        t = compose(node.local_transform(), t)
    return t


def resolve_to_world(frame: ReferenceFrame) -> Transform:
    """Compose local transforms up the parent chain: frame -> root.

    Frames are immutable, so the result is memoised on the frame. Callers
    must not mutate the returned transform.
    """
    tf = frame.__dict__.get("_world_tf")
    if tf is None:
        tf = _to_ancestor(frame.chain())
        tf.translation.setflags(write=False)
        object.__setattr__(frame, "_world_tf", tf)
    return tf


def transform_between(a: ReferenceFrame, b: ReferenceFrame) -> Transform:
    """Transform mapping coordinates in ``a`` to coordinates in ``b``.

    Walks both chains only as far as the lowest common ancestor.
    """
    if a is b:
        return Transform.identity(a.id)
    chain_a = a.chain()
    chain_b = b.chain()
    if chain_a[-1] is not chain_b[-1]:
        raise DisjointForests(f"{a.id!r} and {b.id!r} belong to different roots")
    index_a = {id(n): i for i, n in enumerate(chain_a)}
    for jb, node in enumerate(chain_b):
        ia = index_a.get(id(node))
        if ia is not None:
            break
    a_up = _to_ancestor(chain_a[: ia + 1])
    b_up = _to_ancestor(chain_b[: jb + 1])
    return compose(b_up.inverse(), a_up)


@dataclass(frozen=True)
class CameraCalibration:
    """Pinhole intrinsics for a camera whose optical axes are x right, y down, z forward."""

    frame: ReferenceFrame
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def project_to_image(point, calib: CameraCalibration) -> np.ndarray:
    x, y, z = (float(v) for v in point)
    if z <= 0.0:
        raise BehindCamera(f"point depth {z} is not in front of the camera")
    return np.array([calib.fx * x / z + calib.cx, calib.fy * y / z + calib.cy])


def unproject(pixel, depth: float, calib: CameraCalibration) -> np.ndarray:
    u, v = pixel
    return np.array([(u - calib.cx) * depth / calib.fx, (v - calib.cy) * depth / calib.fy, depth])


def frame_to_dict(frame: ReferenceFrame) -> dict:
    return {
        "id": frame.id,
        "parent_id": frame.parent.id if frame.parent is not None else None,
        "translation": [float(v) for v in frame.translation],
        "rotation": {"quat": list(frame.rotation.quat)},
        "handedness": frame.handedness.value,
        "translation_order": frame.translation_order.value,
    }


def frames_to_json(frames: Iterable[ReferenceFrame]) -> list[dict]:
    """Serialize frames, parents before children."""
    out, done = [], set()
    for f in frames:
        for node in reversed(f.chain()):
            if node.id not in done:
                done.add(node.id)
                out.append(frame_to_dict(node))
    return out


def frames_from_json(records: Iterable[dict]) -> dict[str, ReferenceFrame]:
    """Rebuild a forest from records in any order.

    Raises:
        OrphanFrame: a record names a parent id that is not present.
        CycleDetected: parent ids form a loop.
    """
    by_id = {}
    for rec in records:
        if rec["id"] in by_id:
            raise ValueError(f"duplicate frame id {rec['id']!r}")
        by_id[rec["id"]] = rec
    built: dict[str, ReferenceFrame] = {}

    def build(fid, stack):
        if fid in built:
            return built[fid]
        if fid in stack:
            raise CycleDetected(f"parent ids loop through {fid!r}")
        rec = by_id[fid]
        pid = rec.get("parent_id")
        parent = None
        if pid is not None:
            if pid not in by_id:
                raise OrphanFrame(f"frame {fid!r} references missing parent {pid!r}")
            parent = build(pid, stack | {fid})
        frame = ReferenceFrame(
            translation=rec.get("translation", (0.0, 0.0, 0.0)),
            rotation=Rotation(rec.get("rotation", {}).get("quat", (1.0, 0.0, 0.0, 0.0))),
            parent=parent,
            handedness=Handedness(rec.get("handedness", "RH")),
            translation_order=TranslationOrder(rec.get("translation_order", "post")),
            id=fid,
        )
        built[fid] = frame
        return frame

    for fid in by_id:
        build(fid, frozenset())
    return built
