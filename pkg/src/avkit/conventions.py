"""Source profiles and adapters between source conventions and the canonical one.

Canonical objects use forward-left-up axes, box-centre origins and quaternion
orientation. A raw object record is a plain dict::

    {"id": 3, "type": "Car",
     "position": [x, y, z],          # [x, y] for BEV-only sources
     "dimensions": [h, w, l],
     "rotation": ...,                # shape depends on the profile's encoding
     "velocity": [vx, vy, vz],       # optional
     "timestamp": 0.1}               # optional

Rotation payloads: a single angle about the source's vertical axis
(``Euler1D``), three intrinsic Z-Y-X angles ``[yaw, pitch, roll]``
(``Euler3D``/``EulerFull``), a nested 3x3 list (``DCM``) or ``[w, x, y, z]``
(``Quaternion``). All of them are expressed in the source's own axes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from .geometry import EulerConvention, GimbalLock, ReferenceFrame, Rotation
from .scene import BoundingBox3D, ObjectState, ObjectType

__all__ = [
    "ProfileMismatch",
    "Unrepresentable",
    "AxesConvention",
    "EgoOrigin",
    "ObjectOrigin",
    "RotationEncoding",
    "SourceProfile",
    "load_profiles",
    "ingest_object",
    "export_object",
]


class ProfileMismatch(ValueError):
    pass


class Unrepresentable(ValueError):
    pass


class AxesConvention(Enum):
    RDF = "RDF"
    FLU = "FLU"
    FRU = "FRU"
    FL_U = "FL_U"

    @property
    def matrix(self) -> np.ndarray:
        """Maps canonical FLU coordinates into this convention's coordinates."""
        return _AXES[self].copy()

    @property
    def vertical_axis(self) -> int:
        """Index of the source axis that is vertical (up or down)."""
        return 1 if self is AxesConvention.RDF else 2

    @property
    def left_handed(self) -> bool:
        return np.linalg.det(_AXES[self]) < 0


_AXES = {
    AxesConvention.RDF: np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]),
    AxesConvention.FLU: np.eye(3),
    AxesConvention.FRU: np.diag([1.0, -1.0, 1.0]),
    AxesConvention.FL_U: np.eye(3),
}


class EgoOrigin(Enum):
    None_ = "None"
    Camera0 = "Camera0"
    GPRearAxle = "GPRearAxle"
    EgoCenter = "EgoCenter"
    GPEgoCenter = "GPEgoCenter"
    BEVEgoCenter = "BEVEgoCenter"


class ObjectOrigin(Enum):
    BoxBottom = "BoxBottom"
    BoxCenter = "BoxCenter"
    BEVCenter = "BEVCenter"
    None_ = "None"


class RotationEncoding(Enum):
    Euler1D = "Euler1D"
    Euler3D = "Euler3D"
    EulerFull = "EulerFull"
    DCM = "DCM"
    Quaternion = "Quaternion"


_EULER3 = EulerConvention("ZYX", intrinsic=True)


@dataclass(frozen=True)
class SourceProfile:
    name: str
    vehicle_frame: AxesConvention
    ego_origin: EgoOrigin
    object_origin: ObjectOrigin
    rotation_encoding: RotationEncoding
    keyframe_rate: float | None = None
    sensors: str = ""

    @classmethod
    def from_dict(cls, d: Mapping) -> "SourceProfile":
        return cls(
            name=d["name"],
            vehicle_frame=AxesConvention(d["vehicle_frame"]),
            ego_origin=EgoOrigin(d["ego_origin"]),
            object_origin=ObjectOrigin(d["object_origin"]),
            rotation_encoding=RotationEncoding(d["rotation_encoding"]),
            keyframe_rate=d.get("keyframe_rate"),
            sensors=d.get("sensors", ""),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "vehicle_frame": self.vehicle_frame.value,
            "ego_origin": self.ego_origin.value,
            "object_origin": self.object_origin.value,
            "rotation_encoding": self.rotation_encoding.value,
            "keyframe_rate": self.keyframe_rate,
            "sensors": self.sensors,
        }

    @property
    def bev_only(self) -> bool:
        return self.vehicle_frame is AxesConvention.FL_U


def load_profiles(path: str | Path | None = None) -> dict[str, SourceProfile]:
    """Read a profile registry; defaults to the bundled one."""
    if path is None:
        text = resources.files("avkit").joinpath("profiles.json").read_text()
    else:
        text = Path(path).read_text()
    return {p.name: p for p in (SourceProfile.from_dict(d) for d in json.loads(text))}


def _decode_rotation(payload, encoding: RotationEncoding, axes: AxesConvention) -> np.ndarray:
    arr = np.asarray(payload, dtype=float)
    if encoding is RotationEncoding.Euler1D:
        if arr.size != 1:
            raise ProfileMismatch(f"Euler1D expects one angle, got {arr.size}")
        v = axes.vertical_axis
        angle = float(arr.reshape(-1)[0])
        axis = np.zeros(3)
        axis[v] = 1.0
        return Rotation.from_axis_angle(axis, angle).as_matrix()
    if encoding in (RotationEncoding.Euler3D, RotationEncoding.EulerFull):
        if arr.shape != (3,):
            raise ProfileMismatch(f"{encoding.value} expects three angles, got shape {arr.shape}")
        return Rotation.from_euler(arr, _EULER3).as_matrix()
    if encoding is RotationEncoding.DCM:
        if arr.shape != (3, 3):
            raise ProfileMismatch(f"DCM expects a 3x3 matrix, got shape {arr.shape}")
        return Rotation.from_matrix(arr).as_matrix()
    if arr.shape != (4,):
        raise ProfileMismatch(f"Quaternion expects four values, got shape {arr.shape}")
    return Rotation(arr).as_matrix()


def _encode_rotation(r_src: np.ndarray, encoding: RotationEncoding, axes: AxesConvention):
    if encoding is RotationEncoding.Euler1D:
        v = axes.vertical_axis
        a, b = (v + 1) % 3, (v + 2) % 3
        tilt = math.hypot(r_src[a, v], r_src[b, v])
        if tilt > 1e-9 or r_src[v, v] < 0:
            raise Unrepresentable("orientation has pitch/roll; a single-angle encoding cannot hold it")
        return math.atan2(r_src[b, a], r_src[a, a])
    rot = Rotation.from_matrix(r_src)
    if encoding in (RotationEncoding.Euler3D, RotationEncoding.EulerFull):
        try:
            return rot.as_euler(_EULER3).tolist()
        except GimbalLock as exc:
            return list(exc.angles)
    if encoding is RotationEncoding.DCM:
        return rot.as_matrix().tolist()
    return list(rot.quat)


def ingest_object(raw: Mapping, profile: SourceProfile, frame: ReferenceFrame) -> ObjectState:
    """Convert a source record into a canonical :class:`ObjectState` attached to ``frame``."""
    m = _AXES[profile.vehicle_frame]
    pos = np.asarray(raw["position"], dtype=float).reshape(-1)
    if profile.bev_only:
        if pos.size != 2:
            raise ProfileMismatch(f"{profile.name} records carry a 2D position")
        pos = np.array([pos[0], pos[1], 0.0])
    elif pos.size != 3:
        raise ProfileMismatch(f"{profile.name} records carry a 3D position")
    r_src = _decode_rotation(raw["rotation"], profile.rotation_encoding, profile.vehicle_frame)
    rot = Rotation.from_matrix(m.T @ r_src @ m)
    h, w, l = (float(v) for v in raw["dimensions"])
    center = m.T @ pos
    if profile.object_origin is ObjectOrigin.BoxBottom:
        center = center + rot.apply(np.array([0.0, 0.0, h / 2.0]))
    vel = m.T @ np.asarray(raw.get("velocity", (0.0, 0.0, 0.0)), dtype=float)
    return ObjectState(
        id=int(raw.get("id", 0)),
        object_type=ObjectType(raw.get("type", "Car")),
        box=BoundingBox3D(center, (h, w, l), rot, frame),
        velocity=vel,
        timestamp=float(raw.get("timestamp", 0.0)),
    )


def export_object(obj: ObjectState, profile: SourceProfile) -> dict:
    """Inverse of :func:`ingest_object`, expressed in the object's own frame.

    Raises:
        Unrepresentable: a tilted orientation is exported to a single-angle
            profile.
    """
    m = _AXES[profile.vehicle_frame]
    box = obj.box
    r_can = box.orientation.as_matrix()
    rotation = _encode_rotation(m @ r_can @ m.T, profile.rotation_encoding, profile.vehicle_frame)
    center = np.array(box.center)
    if profile.object_origin is ObjectOrigin.BoxBottom:
        center = center - box.orientation.apply(np.array([0.0, 0.0, box.height / 2.0]))
    pos = m @ center
    if profile.bev_only:
        pos = pos[:2]
    return {
        "id": obj.id,
        "type": obj.object_type.value,
        "position": pos.tolist(),
        "dimensions": list(box.dimensions),
        "rotation": rotation,
        "velocity": (m @ obj.velocity).tolist(),
        "timestamp": obj.timestamp,
    }
