"""Kalman multi-object tracker with gated optimal assignment.

State vector: ``(x, y, z, vx, vy, vz, yaw, h, w, l)``; measurements observe
``(x, y, z, yaw, h, w, l)``. Detections from several sensors arriving in the
same step are fused sequentially, one sensor batch at a time, so an object
seen by three sensors updates one track three times instead of spawning
duplicates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import ReferenceFrame, transform_between
from .scene import BoundingBox3D, Detection, ObjectType, bev_iou_matrix

__all__ = [
    "SingularInnovation",
    "TrackStatus",
    "Track",
    "TrackerConfig",
    "AssociationResult",
    "predict",
    "update",
    "update_many",
    "predict_many",
    "associate",
    "solve_assignment",
    "preprocess_remote",
    "Tracker",
    "wrap_angle",
]

MEAS_INDEX = np.array([0, 1, 2, 6, 7, 8, 9])
_MEAS_ROWS = MEAS_INDEX[:, None]


class SingularInnovation(ArithmeticError):
    pass


class TrackStatus(Enum):
    Tentative = "tentative"
    Confirmed = "confirmed"
    Deleted = "deleted"


def _wrap(a: np.ndarray) -> np.ndarray:
    w = np.mod(np.asarray(a, dtype=float) + math.pi, 2.0 * math.pi)
    w = np.where(w <= 0.0, w + 2.0 * math.pi, w)
    return w - math.pi


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass(frozen=True)
class TrackerConfig:
    gate: float = 4.0
    confirm_hits: int = 3
    delete_misses: int = 4
    q_pos: float = 0.01
    q_vel: float = 0.1
    q_yaw: float = 0.01
    q_dim: float = 1e-4
    cost: str = "distance"
    iou_threshold: float = 0.1
    meas_floor: float = 1e-4
    init_vel_var: float = 100.0

    def __post_init__(self):
        if self.cost not in ("distance", "iou"):
            raise ValueError(f"cost must be 'distance' or 'iou', not {self.cost!r}")
        if self.confirm_hits < 1 or self.delete_misses < 1:
            raise ValueError("confirm_hits and delete_misses must be >= 1")
        if self.gate <= 0:
            raise ValueError("gate must be positive")

    def process_noise(self, dt: float) -> np.ndarray:
        q = [self.q_pos] * 3 + [self.q_vel] * 3 + [self.q_yaw] + [self.q_dim] * 3
        return np.diag(q) * dt


@dataclass
class Track:
    id: int
    state: np.ndarray
    covariance: np.ndarray
    hits: int = 1
    misses: int = 0
    status: TrackStatus = TrackStatus.Tentative
    object_type: ObjectType = ObjectType.Car
    timestamp: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return self.state[:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.state[3:6]

    @property
    def yaw(self) -> float:
        return float(self.state[6])

    @property
    def box_row(self) -> np.ndarray:
        """(x, y, z, h, w, l, yaw), the layout used by the metrics."""
        s = self.state
        return np.array([s[0], s[1], s[2], s[7], s[8], s[9], s[6]])

    def copy(self) -> "Track":
        return replace(self, state=self.state.copy(), covariance=self.covariance.copy())

    def to_dict(self, frame: int | None = None) -> dict:
        d = {"id": self.id, "state": self.state.tolist(), "status": self.status.value,
             "type": self.object_type.value, "timestamp": self.timestamp}
        if frame is not None:
            d = {"frame": frame, **d}
        return d

    @classmethod
    def from_detection(cls, track_id: int, det: Detection, cfg: TrackerConfig) -> "Track":
        b = det.box
        state = np.zeros(10)
        state[:3] = b.center
        state[6] = b.yaw
        state[7:] = b.dimensions
        cov = np.zeros((10, 10))
        r = det.covariance + np.eye(7) * cfg.meas_floor
        cov[np.ix_(MEAS_INDEX, MEAS_INDEX)] = r
        cov[3:6, 3:6] = np.eye(3) * cfg.init_vel_var
        status = TrackStatus.Confirmed if cfg.confirm_hits <= 1 else TrackStatus.Tentative
        return cls(track_id, state, cov, 1, 0, status, det.object_type, det.timestamp)


def predict(track: Track, dt: float, cfg: TrackerConfig = TrackerConfig()) -> Track:
    """Constant-velocity prediction by ``dt`` seconds."""
    if dt < 0:
        raise ValueError("dt must be >= 0")
    out = track.copy()
    if dt == 0:
        return out
    f = np.eye(10)
    f[0, 3] = f[1, 4] = f[2, 5] = dt
    out.state = f @ track.state
    p = f @ track.covariance @ f.T + cfg.process_noise(dt)
    out.covariance = (p + p.T) / 2.0
    out.timestamp = track.timestamp + dt
    return out


def predict_many(tracks: Sequence[Track], dt: float, cfg: TrackerConfig = TrackerConfig()) -> list[Track]:
    """:func:`predict` applied to every track at once."""
    if dt < 0:
        raise ValueError("dt must be >= 0")
    if not tracks or dt == 0:
        return [t.copy() for t in tracks]
    f = np.eye(10)
    f[0, 3] = f[1, 4] = f[2, 5] = dt
    x = np.array([t.state for t in tracks]) @ f.T
    p = f @ np.array([t.covariance for t in tracks]) @ f.T + cfg.process_noise(dt)
    p = (p + p.transpose(0, 2, 1)) / 2.0
    return [Track(t.id, x[i], p[i], t.hits, t.misses, t.status, t.object_type, t.timestamp + dt)
            for i, t in enumerate(tracks)]


def update(track: Track, det: Detection, cfg: TrackerConfig = TrackerConfig()) -> Track:
    """Kalman measurement update with a box detection.

    Raises:
        SingularInnovation: the innovation covariance has condition number
            above 1e12.
    """
    return update_many([track], [det], cfg)[0]


def update_many(tracks: Sequence[Track], dets: Sequence[Detection], cfg: TrackerConfig = TrackerConfig()) -> list[Track]:
    """Independent updates of ``tracks[i]`` with ``dets[i]``, evaluated together.

    Joseph-form covariance update; the yaw innovation is wrapped to
    (-pi, pi].
    """
    n = len(tracks)
    if n == 0:
        return []
    x = np.array([t.state for t in tracks])
    p = np.array([t.covariance for t in tracks])
    z = np.array([[*d.box.center, d.box.yaw, *d.box.dimensions] for d in dets])
    r = np.array([d.covariance for d in dets]) + np.eye(7) * cfg.meas_floor
    y = z - x[:, MEAS_INDEX]
    y[:, 3] = _wrap(y[:, 3])
    s = p[:, _MEAS_ROWS, MEAS_INDEX] + r
    if not np.all(np.isfinite(s)):
        raise SingularInnovation("innovation covariance is not finite")
    eig = np.linalg.eigvalsh(s)
    if np.any(eig[:, 0] <= 0.0) or np.any(eig[:, -1] > 1e12 * eig[:, 0]):
        raise SingularInnovation("innovation covariance is not invertible")
    pht = p[:, :, MEAS_INDEX]
    k = np.linalg.solve(s, pht.transpose(0, 2, 1)).transpose(0, 2, 1)
    x_new = x + np.einsum("nij,nj->ni", k, y)
    x_new[:, 6] = _wrap(x_new[:, 6])
    ikh = np.broadcast_to(np.eye(10), (n, 10, 10)).copy()
    ikh[:, :, MEAS_INDEX] -= k
    p_new = ikh @ p @ ikh.transpose(0, 2, 1) + k @ r @ k.transpose(0, 2, 1)
    p_new = (p_new + p_new.transpose(0, 2, 1)) / 2.0
    out = []
    for i, (t, d) in enumerate(zip(tracks, dets)):
        out.append(Track(t.id, x_new[i], p_new[i], t.hits + 1, 0, t.status, t.object_type, d.timestamp))
    return out


@dataclass
class AssociationResult:
    matches: list[tuple[int, int]] = field(default_factory=list)
    unmatched_tracks: list[int] = field(default_factory=list)
    unmatched_detections: list[int] = field(default_factory=list)


def _lex_solve(cost: np.ndarray, valid: np.ndarray):
    """Max-cardinality, then min-cost matching on valid entries."""
    if not valid.any():
        return [], 0, 0.0
    big = float(cost[valid].sum()) + 1.0
    work = np.where(valid, cost - big, 0.0)
    rows, cols = linear_sum_assignment(work)
    pairs = sorted((int(r), int(c)) for r, c in zip(rows, cols) if valid[r, c])
    total = 0.0
    for r, c in pairs:
        total += cost[r, c]
    return pairs, len(pairs), total


def _objective(fixed, cost, valid, free_rows, free_cols):
    sub_pairs, n, _ = _lex_solve(cost[np.ix_(free_rows, free_cols)], valid[np.ix_(free_rows, free_cols)])
    pairs = sorted(fixed + [(free_rows[r], free_cols[c]) for r, c in sub_pairs])
    total = 0.0
    for r, c in pairs:
        total += cost[r, c]
    return pairs, len(pairs), total


def solve_assignment(cost: np.ndarray, valid: np.ndarray) -> list[tuple[int, int]]:
    """Optimal gated assignment with lexicographic tie-breaking.

    Maximises the number of valid pairs, then minimises their summed cost.
    Among equally good matchings the one whose (row, col) list is
    lexicographically smallest wins. Rows must already be in tie-break
    order.
    """
    cost = np.asarray(cost, dtype=float)
    valid = np.asarray(valid, dtype=bool)
    n, m = cost.shape
    if n == 0 or m == 0 or not valid.any():
        return []
    # connected components of the bipartite gate graph (union-find)
    parent = list(range(n + m))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    vr, vc = np.nonzero(valid)
    for r, c in zip(vr.tolist(), vc.tolist()):
        ra, rb = find(r), find(n + c)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    row_groups: dict[int, list[int]] = {}
    col_groups: dict[int, list[int]] = {}
    for i in range(n):
        row_groups.setdefault(find(i), []).append(i)
    for j in range(m):
        col_groups.setdefault(find(n + j), []).append(j)
    out: list[tuple[int, int]] = []
    for comp, rows in row_groups.items():
        cols = col_groups.get(comp)
        if not cols:
            continue
        if len(rows) == 1:
            # cheapest valid column, lowest index on ties
            r = rows[0]
            out.append((r, min((c for c in cols if valid[r, c]), key=lambda c: (cost[r, c], c))))
        elif len(cols) == 1:
            c = cols[0]
            out.append((min((r for r in rows if valid[r, c]), key=lambda r: (cost[r, c], r)), c))
        else:
            sub = np.ix_(rows, cols)
            out.extend((rows[r], cols[c]) for r, c in _refine(cost[sub], valid[sub]))
    return sorted(out)


def _refine(cost, valid):
    """Lexicographically smallest optimal matching.

    Rows are fixed in order; a row only needs to try columns that would
    make the pair list smaller than the incumbent optimum.
    """
    best_pairs, best_n, best_cost = _lex_solve(cost, valid)
    tol = 1e-12 * max(1.0, abs(best_cost))
    n, m = cost.shape
    current = dict(best_pairs)
    fixed: list[tuple[int, int]] = []
    free_rows, free_cols = list(range(n)), list(range(m))
    for r in range(n):
        rest_rows = [x for x in free_rows if x != r]
        limit = current.get(r, m)
        chosen = current.get(r)
        for c in free_cols:
            if c >= limit:
                break
            if not valid[r, c]:
                continue
            rest_cols = [x for x in free_cols if x != c]
            pairs, cnt, total = _objective(fixed + [(r, c)], cost, valid, rest_rows, rest_cols)
            if cnt == best_n and total <= best_cost + tol:
                chosen = c
                current = dict(pairs)
                break
        if chosen is not None:
            fixed.append((r, chosen))
            free_cols.remove(chosen)
        free_rows = rest_rows
    fixed.sort()
    return fixed


def associate(tracks: Sequence[Track], detections: Sequence[Detection], gate: float,
              cost: str = "distance", iou_threshold: float = 0.1) -> AssociationResult:
    """Assign detections to tracks.

    With ``cost="distance"`` pairs whose centre distance exceeds ``gate`` are
    forbidden; with ``cost="iou"`` the cost is ``1 - IoU`` and pairs below
    ``iou_threshold`` are forbidden. Tracks are considered in ascending id
    order for tie-breaking.
    """
    order = sorted(range(len(tracks)), key=lambda i: tracks[i].id)
    trk = [tracks[i] for i in order]
    n, m = len(trk), len(detections)
    if n == 0 or m == 0:
        return AssociationResult([], [t.id for t in trk], list(range(m)))
    tpos = np.array([t.state[:3] for t in trk])
    dpos = np.array([d.box.center for d in detections])
    if cost == "distance":
        c = np.linalg.norm(tpos[:, None, :] - dpos[None, :, :], axis=2)
        valid = c <= gate
    elif cost == "iou":
        drows = np.array([[*d.box.center, *d.box.dimensions, d.box.yaw] for d in detections])
        iou = bev_iou_matrix(np.array([t.box_row for t in trk]), drows)
        c = 1.0 - iou
        valid = iou >= iou_threshold
    else:
        raise ValueError(f"unknown association cost {cost!r}")
    pairs = solve_assignment(c, valid)
    matched_r = {r for r, _ in pairs}
    matched_c = {c_ for _, c_ in pairs}
    return AssociationResult(
        [(trk[r].id, c_) for r, c_ in pairs],
        [trk[r].id for r in range(n) if r not in matched_r],
        [j for j in range(m) if j not in matched_c],
    )


def preprocess_remote(detections: Iterable[Detection], ego_frame: ReferenceFrame, radius: float) -> list[Detection]:
    """Bring remote detections into the ego frame and drop those beyond ``radius`` (inclusive)."""
    out = []
    tfs: dict[int, tuple] = {}
    covs: dict[tuple[int, int], np.ndarray] = {}
    for det in detections:
        box = det.box
        src = box.frame
        entry = tfs.get(id(src))
        if entry is None:
            tf = transform_between(src, ego_frame)
            entry = tfs[id(src)] = (tf, tf.linear())
        tf, lin = entry
        center = tf.apply(box.center)
        if math.hypot(*center) > radius:
            continue
        # sensors share one covariance array across their detections
        key = (id(src), id(det.covariance))
        cov = covs.get(key)
        if cov is None:
            cov = det.covariance.copy()
            cov[:3, :] = lin @ cov[:3, :]
            cov[:, :3] = cov[:, :3] @ lin.T
            cov.setflags(write=False)
            covs[key] = cov
        rot = box.orientation.reflected() if tf.flip else box.orientation
        out.append(Detection.trusted(BoundingBox3D.trusted(center, box.dimensions, tf.rotation * rot, ego_frame),
                                     cov, det.sensor_id, det.timestamp, det.confidence, det.object_type))
    return out


class Tracker:
    """Track lifecycle state machine. One instance per sequence."""

    def __init__(self, cfg: TrackerConfig = TrackerConfig()):
        self.cfg = cfg
        self.tracks: list[Track] = []
        self.frame: ReferenceFrame | None = None
        self.timestamp: float | None = None
        self._next_id = 1

    def _reframe(self, frame: ReferenceFrame):
        tf = transform_between(self.frame, frame)
        lin = tf.linear()
        yaw_sign = 1.0 if np.linalg.det(lin[:2, :2]) >= 0 else -1.0
        jac = np.eye(10)
        jac[:3, :3] = lin
        jac[3:6, 3:6] = lin
        jac[6, 6] = yaw_sign
        for t in self.tracks:
            s = t.state
            heading = lin @ np.array([math.cos(s[6]), math.sin(s[6]), 0.0])
            new = s.copy()
            new[:3] = tf.apply(s[:3])
            new[3:6] = lin @ s[3:6]
            new[6] = math.atan2(heading[1], heading[0])
            t.state = new
            t.covariance = jac @ t.covariance @ jac.T

    def step(self, detections: Sequence[Detection], timestamp: float,
             frame: ReferenceFrame | None = None) -> list[Track]:
        """Advance to ``timestamp`` and fold in ``detections``.

        Returns copies of the confirmed tracks.
        """
        cfg = self.cfg
        if self.timestamp is not None and timestamp < self.timestamp:
            raise ValueError("timestamps must be non-decreasing")
        if frame is not None:
            if self.frame is not None and frame is not self.frame:
                self._reframe(frame)
            self.frame = frame
        dt = 0.0 if self.timestamp is None else timestamp - self.timestamp
        self.timestamp = timestamp
        self.tracks = predict_many(self.tracks, dt, cfg)
        for t in self.tracks:
            t.timestamp = timestamp

        if self.frame is not None:
            detections = [d if d.box.frame is self.frame else d.in_frame(self.frame) for d in detections]
        batches: dict[int, list[Detection]] = {}
        for d in detections:
            batches.setdefault(d.sensor_id, []).append(d)

        updated: set[int] = set()
        for sensor_id in sorted(batches):
            batch = batches[sensor_id]
            result = associate(self.tracks, batch, cfg.gate, cfg.cost, cfg.iou_threshold)
            by_id = {t.id: i for i, t in enumerate(self.tracks)}
            idx = [by_id[tid] for tid, _ in result.matches]
            fresh = update_many([self.tracks[i] for i in idx], [batch[j] for _, j in result.matches], cfg)
            for i, trk in zip(idx, fresh):
                self.tracks[i] = trk
                updated.add(trk.id)
            for j in result.unmatched_detections:
                trk = Track.from_detection(self._next_id, batch[j], cfg)
                trk.timestamp = timestamp
                self._next_id += 1
                self.tracks.append(trk)
                updated.add(trk.id)

        alive = []
        for t in self.tracks:
            if t.id not in updated:
                t.misses += 1
            if t.status is TrackStatus.Tentative and t.hits >= cfg.confirm_hits:
                t.status = TrackStatus.Confirmed
            if t.misses >= cfg.delete_misses:
                t.status = TrackStatus.Deleted
                continue
            alive.append(t)
        self.tracks = alive
        return [t.copy() for t in self.tracks if t.status is TrackStatus.Confirmed]
