"""Deterministic synthetic world, box-level sensors and V2I range filtering.

Randomness comes from counter-based Philox streams keyed on
``(seed, purpose, index, ...)``; a sensor's draws at a given frame never
depend on which other sensors exist or in what order they are evaluated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .geometry import ReferenceFrame, Rotation, resolve_to_world, transform_between, world_frame
from .scene import (
    BoundingBox3D,
    Detection,
    ObjectState,
    ObjectType,
    blocked_fractions,
    fov_mask,
)

__all__ = [
    "ScenarioConfig",
    "SensorModel",
    "CommModel",
    "Scenario",
    "NOISE_LEVELS",
    "rng_stream",
    "generate_scenario",
    "visible_objects",
    "sense",
    "sensors_in_range",
    "place_infrastructure",
]

# Stream purposes; keep values stable, they are part of the seed derivation.
_SCENE, _EGO, _INFRA, _SENSE = 1, 2, 3, 4

# Artifact calibration of the qualitative noise levels: centre sigma (m), yaw sigma (rad).
NOISE_LEVELS: dict[str, tuple[float, float]] = {
    "None": (0.0, 0.0),
    "Low": (0.1, 0.02),
    "Med": (0.3, 0.05),
    "High": (0.5, 0.1),
}


def rng_stream(*key: int) -> np.random.Generator:
    """Independent Philox generator for an integer key tuple."""
    seq = np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in key])
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    extent: float = 300.0
    num_objects: int = 150
    speed_range: tuple[float, float] = (2.0, 10.0)
    motion_mix: Mapping[str, float] = field(
        default_factory=lambda: {"constant_velocity": 0.6, "coordinated_turn": 0.2, "stationary": 0.2}
    )
    duration: int = 500
    frame_rate: float = 10.0
    turn_rate_range: tuple[float, float] = (0.05, 0.3)
    ego_speed_range: tuple[float, float] = (4.0, 8.0)
    min_separation: float = 8.0
    segment_duration_range: tuple[float, float] = (5.0, 15.0)

    def __post_init__(self):
        total = sum(self.motion_mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"motion_mix fractions must sum to 1, got {total}")
        unknown = set(self.motion_mix) - {"constant_velocity", "coordinated_turn", "stationary"}
        if unknown:
            raise ValueError(f"unknown motion types {sorted(unknown)}")
        if self.num_objects < 0:
            raise ValueError("num_objects must be >= 0")
        if self.duration < 1 or self.frame_rate <= 0 or self.extent <= 0:
            raise ValueError("duration, frame_rate and extent must be positive")
        lo, hi = self.segment_duration_range
        if lo <= 0 or hi < lo:
            raise ValueError("segment_duration_range must be positive and ordered")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioConfig":
        d = dict(d)
        for key in ("speed_range", "turn_rate_range", "ego_speed_range", "segment_duration_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class SensorModel:
    """Box-level sensor. Angles are half-angles in radians."""

    id: int
    frame: ReferenceFrame
    fov_azimuth: float = math.pi
    fov_elevation: float = math.radians(30)
    max_range: float = 25.0
    rate: float = 10.0
    noise_sigma: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw_sigma: float = 0.0
    p_miss: float = 0.0
    false_alarm_rate: float = 0.0
    line_count: int | None = None

    def __post_init__(self):
        sig = tuple(float(s) for s in np.broadcast_to(np.asarray(self.noise_sigma, dtype=float), (3,)))
        object.__setattr__(self, "noise_sigma", sig)
        if min(sig) < 0 or self.yaw_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not 0.0 <= self.p_miss <= 1.0:
            raise ValueError("p_miss must lie in [0, 1]")
        if self.rate <= 0 or self.max_range <= 0:
            raise ValueError("rate and max_range must be positive")

    def frame_step(self, frame_rate: float) -> int:
        """Scenario frames between two measurements."""
        ratio = frame_rate / self.rate
        step = int(round(ratio))
        if step < 1 or abs(ratio - step) > 1e-9:
            raise ValueError(f"sensor rate {self.rate} Hz does not divide frame rate {frame_rate} Hz")
        return step

    def covariance(self) -> np.ndarray:
        cov = np.zeros((7, 7))
        cov[0, 0], cov[1, 1], cov[2, 2] = (s * s for s in self.noise_sigma)
        cov[3, 3] = self.yaw_sigma ** 2
        return cov

    def with_noise(self, level: str) -> "SensorModel":
        sigma, yaw = NOISE_LEVELS[level]
        return replace(self, noise_sigma=(sigma, sigma, sigma), yaw_sigma=yaw)


@dataclass(frozen=True)
class CommModel:
    range: float = 100.0
    latency: int = 0

    def __post_init__(self):
        if self.range < 0:
            raise ValueError("comm range must be >= 0")
        if self.latency != 0:
            raise ValueError("only zero-latency delivery is modelled")


def _fold(x, size):
    """Reflect unbounded coordinates into [0, size]; also returns the slope sign."""
    m = np.mod(x, 2.0 * size)
    back = m > size
    return np.where(back, 2.0 * size - m, m), np.where(back, -1.0, 1.0)


class Scenario:
    """Ground truth for every frame, in the world frame.

    Arrays are indexed ``[frame, object]``. The ego follows its own
    constant-velocity path and is not part of the object list.
    """

    def __init__(self, cfg: ScenarioConfig, world: ReferenceFrame, ids, types, dims,
                 positions, velocities, yaws, ego_positions, ego_velocities, ego_yaws):
        self.cfg = cfg
        self.world = world
        self.ids = ids
        self.types = types
        self.dims = dims
        self.positions = positions
        self.velocities = velocities
        self.yaws = yaws
        self.ego_positions = ego_positions
        self.ego_velocities = ego_velocities
        self.ego_yaws = ego_yaws
        self._ego_frames: dict[int, ReferenceFrame] = {}

    @property
    def num_frames(self) -> int:
        return self.cfg.duration

    def timestamp(self, k: int) -> float:
        return k / self.cfg.frame_rate

    def ego_frame(self, k: int) -> ReferenceFrame:
        """Snapshot of the ego body frame at frame ``k`` (cached)."""
        f = self._ego_frames.get(k)
        if f is None:
            f = ReferenceFrame(
                translation=self.ego_positions[k],
                rotation=Rotation.from_yaw(float(self.ego_yaws[k])),
                parent=self.world,
                id=f"ego@{k}",
            )
            self._ego_frames[k] = f
        return f

    def box_array(self, k: int) -> np.ndarray:
        """Rows (x, y, z, h, w, l, yaw) in the world frame."""
        n = len(self.ids)
        out = np.empty((n, 7))
        out[:, :3] = self.positions[k]
        out[:, 3:6] = self.dims
        out[:, 6] = self.yaws[k]
        return out

    def objects_at(self, k: int) -> list[ObjectState]:
        t = self.timestamp(k)
        return [
            ObjectState(
                id=int(self.ids[i]),
                object_type=self.types[i],
                box=BoundingBox3D(self.positions[k, i], tuple(self.dims[i]),
                                  Rotation.from_yaw(float(self.yaws[k, i])), self.world),
                velocity=self.velocities[k, i],
                timestamp=t,
            )
            for i in range(len(self.ids))
        ]


def _trajectory(p0, heading, speed, turn_rate, times, size):
    """Single-mode path folded into the map; used for the ego."""
    return _piecewise(p0, heading, [(times[-1] + 1.0, speed, turn_rate)], times, size)


def _piecewise(p0, heading, segments, times, size):
    """Closed-form path through consecutive (end time, speed, turn rate) segments.

    Position and heading are continuous across segment boundaries; motion
    is integrated in an unbounded plane and then folded into the map, so
    objects reflect off the edges.
    """
    n = len(times)
    x, y, vx, vy = np.empty(n), np.empty(n), np.empty(n), np.empty(n)
    px, py, th, t0 = float(p0[0]), float(p0[1]), float(heading), 0.0
    lo = 0
    for t_end, speed, rate in segments:
        hi = int(np.searchsorted(times, t_end, side="left"))
        tau = times[lo:hi] - t0
        seg = t_end - t0
        if rate == 0.0:
            c, s_ = math.cos(th), math.sin(th)
            x[lo:hi] = px + speed * c * tau
            y[lo:hi] = py + speed * s_ * tau
            vx[lo:hi], vy[lo:hi] = speed * c, speed * s_
            px, py = px + speed * c * seg, py + speed * s_ * seg
        else:
            r = speed / rate
            ang = th + rate * tau
            x[lo:hi] = px + r * (np.sin(ang) - math.sin(th))
            y[lo:hi] = py + r * (math.cos(th) - np.cos(ang))
            vx[lo:hi], vy[lo:hi] = speed * np.cos(ang), speed * np.sin(ang)
            end = th + rate * seg
            px, py = px + r * (math.sin(end) - math.sin(th)), py + r * (math.cos(th) - math.cos(end))
            th = end
        t0, lo = t_end, hi
        if lo >= n:
            break
    fx, sx = _fold(x, size)
    fy, sy = _fold(y, size)
    vx, vy = vx * sx, vy * sy
    yaw = np.arctan2(vy, vx)
    # a stopped object keeps the heading it last moved with
    last = math.atan2(math.sin(heading) * sy[0], math.cos(heading) * sx[0])
    moving = np.hypot(vx, vy) > 0.0
    for i in range(n):
        if moving[i]:
            last = yaw[i]
        else:
            yaw[i] = last
    return np.stack([fx, fy], axis=1), np.stack([vx, vy], axis=1), yaw


def generate_scenario(cfg: ScenarioConfig, world: ReferenceFrame | None = None) -> Scenario:
    """Ground-truth trajectories as a pure function of ``cfg``.

    Spawn positions are uniform over the square map (centred on the world
    origin) with a minimum separation; objects reflect off the map edges.
    """
    world = world or world_frame()
    rng = rng_stream(cfg.seed, _SCENE)
    n, size = cfg.num_objects, cfg.extent
    times = np.arange(cfg.duration) / cfg.frame_rate
    half = size / 2.0

    spawn = []
    while len(spawn) < n:
        p = rng.uniform(0.0, size, 2)
        if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= cfg.min_separation ** 2 for q in spawn):
            spawn.append(p)
    kinds = list(cfg.motion_mix)
    probs = np.array([cfg.motion_mix[k] for k in kinds])
    dims = np.column_stack([rng.uniform(1.4, 1.7, n), rng.uniform(1.7, 2.0, n), rng.uniform(4.0, 4.8, n)])

    positions = np.zeros((cfg.duration, n, 3))
    velocities = np.zeros((cfg.duration, n, 3))
    yaws = np.zeros((cfg.duration, n))
    horizon = float(times[-1])
    for i in range(n):
        heading = rng.uniform(-math.pi, math.pi)
        cruise = rng.uniform(*cfg.speed_range)
        segments, t = [], 0.0
        while t <= horizon:
            t += rng.uniform(*cfg.segment_duration_range)
            kind = kinds[rng.choice(len(kinds), p=probs)]
            rate = rng.uniform(*cfg.turn_rate_range) * rng.choice((-1.0, 1.0))
            speed = 0.0 if kind == "stationary" else cruise
            segments.append((t, speed, rate if kind == "coordinated_turn" else 0.0))
        xy, vxy, yaw = _piecewise(spawn[i], heading, segments, times, size)
        positions[:, i, :2] = xy - half
        positions[:, i, 2] = dims[i, 0] / 2.0
        velocities[:, i, :2] = vxy
        yaws[:, i] = yaw

    erng = rng_stream(cfg.seed, _EGO)
    heading = erng.uniform(-math.pi, math.pi)
    speed = erng.uniform(*cfg.ego_speed_range)
    start = np.full(2, half) + erng.uniform(-0.1, 0.1, 2) * size
    exy, evxy, eyaw = _trajectory(start, heading, speed, 0.0, times, size)
    ego_pos = np.zeros((cfg.duration, 3))
    ego_pos[:, :2] = exy - half
    ego_vel = np.zeros((cfg.duration, 3))
    ego_vel[:, :2] = evxy

    ids = np.arange(1, n + 1)
    types = [ObjectType.Car] * n
    return Scenario(cfg, world, ids, types, dims, positions, velocities, yaws, ego_pos, ego_vel, eyaw)


def _yaw_rotations(yaws):
    c, s = np.cos(yaws), np.sin(yaws)
    rot = np.zeros((len(yaws), 3, 3))
    rot[:, 0, 0], rot[:, 0, 1] = c, -s
    rot[:, 1, 0], rot[:, 1, 1] = s, c
    rot[:, 2, 2] = 1.0
    return rot


def _box_points(boxes, rots):
    h, w, l = boxes[:, 3], boxes[:, 4], boxes[:, 5]
    signs = np.array([[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)] + [[0, 0, 0]], float)
    local = signs[None] * np.stack([l / 2, w / 2, h / 2], axis=1)[:, None, :]
    return np.einsum("nij,npj->npi", rots, local) + boxes[:, None, :3]


def visible_objects(origin, boxes: np.ndarray, candidates: np.ndarray, occluder_radius: float | None = None) -> np.ndarray:
    """Blocked-ray fraction for the candidate boxes as seen from ``origin``.

    ``boxes`` rows are (x, y, z, h, w, l, yaw) in the same frame as
    ``origin``; every box may occlude every other one.
    """
    candidates = np.asarray(candidates, dtype=int)
    if len(candidates) == 0:
        return np.zeros(0)
    origin = np.asarray(origin, dtype=float)
    occ = np.arange(len(boxes))
    if occluder_radius is not None:
        d = np.hypot(boxes[:, 0] - origin[0], boxes[:, 1] - origin[1])
        occ = occ[d <= occluder_radius]
    rots = _yaw_rotations(boxes[:, 6])
    targets = _box_points(boxes[candidates], rots[candidates])
    exclude = candidates[:, None] == occ[None, :]
    halves = boxes[occ][:, [5, 4, 3]] / 2.0
    return blocked_fractions(origin, targets, boxes[occ, :3], rots[occ], halves, exclude)


def sense(sensor: SensorModel, boxes: np.ndarray, seed: int, frame_index: int, timestamp: float,
          world: ReferenceFrame, object_types: Sequence[ObjectType] | None = None) -> list[Detection]:
    """Simulate one measurement of ``sensor`` over world boxes.

    Args:
        sensor: the sensor; its frame must chain to ``world``.
        boxes: (N, 7) world-frame ground truth rows (x, y, z, h, w, l, yaw).
        seed: trial seed; combined with the sensor id and frame index.
        frame_index: scenario frame, used only to key the random stream.
        timestamp: stamped on every detection.
        world: the world root the boxes are expressed in.

    Returns:
        Detections in the sensor's frame: visible truths (in FOV, not fully
        occluded, not missed) with Gaussian centre and yaw noise, followed by
        Poisson clutter inside the FOV.
    """
    rng = rng_stream(seed, _SENSE, sensor.id, frame_index)
    n = len(boxes)
    miss_u = rng.random(n)
    center_z = rng.standard_normal((n, 3))
    yaw_z = rng.standard_normal(n)
    conf_u = rng.random(n)

    to_sensor = transform_between(world, sensor.frame)
    out: list[Detection] = []
    if n:
        local = to_sensor.apply(boxes[:, :3])
        cand = np.nonzero(fov_mask(local, sensor.fov_azimuth, sensor.fov_elevation, sensor.max_range))[0]
        if len(cand):
            origin = resolve_to_world(sensor.frame).translation
            frac = visible_objects(origin, boxes, cand, occluder_radius=sensor.max_range + 10.0)
            keep = cand[(frac < 1.0) & (miss_u[cand] >= sensor.p_miss)]
            sigma = np.asarray(sensor.noise_sigma)
            cov = sensor.covariance()
            cov.setflags(write=False)
            centers = local[keep] + sigma * center_z[keep]
            yaws = boxes[keep, 6] + sensor.yaw_sigma * yaw_z[keep]
            for n_, i in enumerate(keep.tolist()):
                world_rot = Rotation.from_yaw(float(yaws[n_]))
                rot = world_rot.reflected() if to_sensor.flip else world_rot
                box = BoundingBox3D.trusted(centers[n_], tuple(boxes[i, 3:6].tolist()), to_sensor.rotation * rot,
                                            sensor.frame)
                otype = object_types[i] if object_types is not None else ObjectType.Car
                out.append(Detection.trusted(box, cov, sensor.id, timestamp, 0.5 + 0.5 * float(conf_u[i]), otype))

    n_clutter = rng.poisson(sensor.false_alarm_rate) if sensor.false_alarm_rate > 0 else 0
    if n_clutter:
        r = sensor.max_range * rng.random(n_clutter)
        az = rng.uniform(-sensor.fov_azimuth, sensor.fov_azimuth, n_clutter)
        el = rng.uniform(-sensor.fov_elevation, sensor.fov_elevation, n_clutter)
        yaw = rng.uniform(-math.pi, math.pi, n_clutter)
        conf = 0.5 * rng.random(n_clutter)
        pts = np.column_stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)])
        for p, y, c in zip(pts, yaw, conf):
            box = BoundingBox3D(p, (1.5, 1.8, 4.4), Rotation.from_yaw(float(y)), sensor.frame)
            out.append(Detection(box, sensor.covariance(), sensor.id, timestamp, float(c), ObjectType.Car))
    return out


def sensors_in_range(ego_position, sensors: Sequence[SensorModel], comm: CommModel) -> list[int]:
    """Ids of sensors whose mount origin is within comm range (inclusive)."""
    ego = np.asarray(ego_position, dtype=float).reshape(3)
    out = []
    for s in sensors:
        origin = resolve_to_world(s.frame).translation
        if np.linalg.norm(origin - ego) <= comm.range:
            out.append(s.id)
    return out


def place_infrastructure(count: int, extent: float, height: float, pitch: float, fov: float, seed: int,
                         world: ReferenceFrame, first_id: int = 1, **sensor_kwargs) -> list[SensorModel]:
    """Drop ``count`` sensors at uniform ground positions with random heading.

    ``pitch`` (radians, positive looks down) and ``fov`` (full azimuth
    angle) are shared; remaining keyword arguments go to :class:`SensorModel`.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = rng_stream(seed, _INFRA)
    xy = rng.uniform(-extent / 2.0, extent / 2.0, (count, 2))
    headings = rng.uniform(-math.pi, math.pi, count)
    sensors = []
    for k in range(count):
        rot = Rotation.from_yaw(float(headings[k])) * Rotation.from_axis_angle((0.0, 1.0, 0.0), pitch)
        frame = ReferenceFrame(translation=(xy[k, 0], xy[k, 1], height), rotation=rot, parent=world,
                               id=f"infra-{first_id + k}")
        sensors.append(SensorModel(id=first_id + k, frame=frame, fov_azimuth=fov / 2.0, **sensor_kwargs))
    return sensors
