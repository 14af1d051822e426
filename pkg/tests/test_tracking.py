import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avkit.geometry import Handedness, Rotation, transform_between, world_frame
from avkit.scene import BoundingBox3D, Detection
from avkit.tracking import (
    SingularInnovation,
    Track,
    Tracker,
    TrackerConfig,
    TrackStatus,
    associate,
    predict,
    preprocess_remote,
    solve_assignment,
    update,
    wrap_angle,
)

from oracles import brute_force_assignment, brute_force_lex_assignment, transform_oracle

W = world_frame()
CFG = TrackerConfig()


def det(x, y, z=0.0, yaw=0.0, sigma=0.0, frame=W, sensor_id=0, t=0.0, dims=(1.5, 1.8, 4.2)):
    cov = np.zeros((7, 7))
    cov[np.arange(7), np.arange(7)] = sigma ** 2
    return Detection(BoundingBox3D((x, y, z), dims, Rotation.from_yaw(yaw), frame), cov, sensor_id, t)


def track(state=None, cov=None, tid=1):
    s = np.zeros(10) if state is None else np.asarray(state, dtype=float)
    if state is None:
        s[7:] = (1.5, 1.8, 4.2)
    return Track(tid, s, np.eye(10) if cov is None else cov)


# --- predict ------------------------------------------------------------------


def test_predict_zero_dt_is_identity():
    t = track([1, 2, 3, 4, 5, 6, 0.3, 1, 2, 3])
    p = predict(t, 0.0)
    assert np.array_equal(p.state, t.state) and np.array_equal(p.covariance, t.covariance)
    with pytest.raises(ValueError):
        predict(t, -0.1)


def test_predict_constant_velocity():
    t = track([0, 0, 0, 1, 0, 0, 0.2, 1, 2, 3])
    p = predict(t, 2.0)
    assert np.allclose(p.position, [2, 0, 0])
    assert np.array_equal(p.state[6:], t.state[6:])
    assert np.trace(p.covariance) > np.trace(t.covariance)


# --- update -------------------------------------------------------------------


def test_zero_innovation_keeps_state_and_shrinks_covariance():
    t = track([1, 2, 0, 0, 0, 0, 0.5, 1.5, 1.8, 4.2])
    u = update(t, det(1, 2, 0, 0.5, sigma=0.2))
    assert np.allclose(u.state, t.state, atol=1e-12)
    assert np.trace(u.covariance) < np.trace(t.covariance)
    assert (u.hits, u.misses) == (t.hits + 1, 0)


def test_huge_measurement_noise_barely_moves_state():
    t = track()
    u = update(t, det(5, -3, 1, 1.0, sigma=1e6))
    assert np.abs(u.state - t.state).max() < 1e-3


def test_two_noiseless_updates_converge():
    cfg = TrackerConfig(meas_floor=1e-10)
    t = track([1.0, -1.0, 0.5, 0, 0, 0, 0, 1.5, 1.8, 4.2])
    truth = det(3.0, 2.0, 0.0)
    for _ in range(2):
        t = update(t, truth, cfg)
    assert np.linalg.norm(t.position - [3.0, 2.0, 0.0]) < 1e-6


def test_yaw_innovation_wraps():
    t = track([0, 0, 0, 0, 0, 0, math.pi - 0.05, 1.5, 1.8, 4.2])
    u = update(t, det(0, 0, 0, -math.pi + 0.05, sigma=0.1))
    # the short way round crosses +-pi instead of sweeping through 0
    assert abs(abs(u.yaw) - math.pi) < 0.06
    assert -math.pi < wrap_angle(3 * math.pi) <= math.pi
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)


def test_singular_innovation():
    t = track(cov=np.zeros((10, 10)))
    with pytest.raises(SingularInnovation):
        update(t, det(0, 0), TrackerConfig(meas_floor=0.0))


def test_covariance_stays_spd(rng):
    t = track(cov=np.eye(10) * 5.0)
    for k in range(10000):
        t = predict(t, float(rng.uniform(0.0, 0.5)))
        truth = t.position + rng.normal(size=3) * 0.5
        t = update(t, det(*truth, yaw=float(rng.uniform(-math.pi, math.pi)), sigma=float(rng.uniform(0.0, 1.0))))
        if k % 97 == 0:
            assert np.linalg.eigvalsh(t.covariance).min() > 0
            assert np.array_equal(t.covariance, t.covariance.T)
    assert np.linalg.eigvalsh(t.covariance).min() > 0


# --- association --------------------------------------------------------------


def test_assignment_matches_brute_force(rng):
    for _ in range(300):
        n, m = rng.integers(1, 6, size=2)
        cost = rng.uniform(0, 10, (n, m))
        valid = rng.random((n, m)) < 0.7
        pairs = solve_assignment(cost, valid)
        count, total = brute_force_assignment(cost, valid)
        assert len(pairs) == count
        assert abs(sum(cost[r, c] for r, c in pairs) - total) < 1e-9


def test_assignment_tie_break_is_lexicographic(rng):
    for _ in range(300):
        n, m = rng.integers(1, 5, size=2)
        cost = rng.integers(0, 3, (n, m)).astype(float)
        valid = rng.random((n, m)) < 0.8
        assert solve_assignment(cost, valid) == brute_force_lex_assignment(cost, valid)
    assert solve_assignment(np.ones((2, 2)), np.ones((2, 2), bool)) == [(0, 0), (1, 1)]


def test_maximum_cardinality_before_cost():
    cost = np.array([[0.0, 1.0], [9.0, 100.0]])
    valid = np.array([[True, True], [False, True]])
    assert solve_assignment(cost, valid) == [(0, 0), (1, 1)]
    valid = np.array([[True, True], [True, False]])
    assert solve_assignment(cost, valid) == [(0, 1), (1, 0)]


def test_associate_examples():
    r = associate([track()], [det(1, 0)], gate=4.0)
    assert r.matches == [(1, 0)] and r.unmatched_tracks == [] and r.unmatched_detections == []
    r = associate([track()], [det(10, 0)], gate=4.0)
    assert r.matches == [] and r.unmatched_tracks == [1] and r.unmatched_detections == [0]
    r = associate([], [], gate=4.0)
    assert (r.matches, r.unmatched_tracks, r.unmatched_detections) == ([], [], [])


@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), max_size=7),
       st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), max_size=7))
def test_association_partitions_inputs(tpos, dpos):
    tracks = [track([x, y, 0, 0, 0, 0, 0, 1.5, 1.8, 4.2], tid=10 - i) for i, (x, y) in enumerate(tpos)]
    dets = [det(x, y) for x, y in dpos]
    r = associate(tracks, dets, gate=4.0)
    tids = [a for a, _ in r.matches] + r.unmatched_tracks
    dids = [b for _, b in r.matches] + r.unmatched_detections
    assert sorted(tids) == sorted(t.id for t in tracks)
    assert sorted(dids) == list(range(len(dets)))


def test_iou_cost_mode():
    r = associate([track()], [det(0.5, 0.0), det(3.0, 0.0)], gate=4.0, cost="iou", iou_threshold=0.1)
    assert r.matches == [(1, 0)]


# --- lifecycle ----------------------------------------------------------------


def test_empty_step():
    assert Tracker().step([], 0.0) == []


def test_confirmation_at_third_hit():
    trk = Tracker(TrackerConfig(confirm_hits=3))
    out = [trk.step([det(5, 5, t=k * 0.1)], k * 0.1) for k in range(4)]
    assert [len(o) for o in out] == [0, 0, 1, 1]


def test_deletion_after_k_misses():
    trk = Tracker(TrackerConfig(confirm_hits=1, delete_misses=4))
    trk.step([det(5, 5)], 0.0)
    alive = []
    for k in range(1, 7):
        trk.step([], k * 0.1)
        alive.append(len(trk.tracks))
    assert alive == [1, 1, 1, 0, 0, 0]


def test_status_transitions():
    trk = Tracker(TrackerConfig(confirm_hits=2, delete_misses=2))
    seen = {}
    plan = [[det(0, 0)], [], [], [det(0, 0)], [det(0, 0)], [], []]
    for k, dets in enumerate(plan):
        trk.step(dets, k * 0.1)
        for t in trk.tracks:
            seen.setdefault(t.id, []).append(t.status)
    allowed = {(TrackStatus.Tentative, TrackStatus.Confirmed), (TrackStatus.Tentative, TrackStatus.Tentative),
               (TrackStatus.Confirmed, TrackStatus.Confirmed)}
    for history in seen.values():
        assert all((a, b) in allowed for a, b in zip(history, history[1:]))


def test_converges_on_moving_object(rng):
    trk = Tracker()
    for k in range(50):
        t = k * 0.1
        truth = np.array([2.0 * t, 1.0 * t, 0.0])
        out = trk.step([det(*(truth + rng.normal(size=3) * 0.1), yaw=math.atan2(1, 2), sigma=0.1, t=t)], t)
    assert len(out) == 1
    assert np.linalg.norm(out[0].position - truth) < 0.3
    assert np.linalg.norm(out[0].velocity - [2.0, 1.0, 0.0]) < 0.5


def test_multi_sensor_batches_fuse_into_one_track():
    trk = Tracker(TrackerConfig(confirm_hits=1))
    out = trk.step([det(0, 0, sensor_id=1), det(0.2, 0, sensor_id=2), det(-0.1, 0, sensor_id=3)], 0.0)
    assert len(out) == 1 and out[0].hits == 3


def test_tracker_deterministic(rng):
    stream = [[det(*rng.uniform(-20, 20, 2), sigma=0.3, sensor_id=int(rng.integers(3))) for _ in range(8)]
              for _ in range(20)]

    def run():
        trk = Tracker()
        return [[(t.id, t.state.tolist()) for t in trk.step(d, k * 0.1)] for k, d in enumerate(stream)]

    assert run() == run()


def test_frame_invariance(rng):
    a = W.child((10.0, -4.0, 2.0), Rotation(rng.normal(size=4)))
    b = W.child((-3.0, 7.0, 1.0), Rotation(rng.normal(size=4)), handedness=Handedness.LeftHanded)
    stream = [det(1.0 + 0.5 * k, 2.0, 0.0, yaw=0.1, sigma=0.2, t=k * 0.1) for k in range(12)]
    runs = []
    for f in (a, b):
        trk = Tracker()
        for k, d in enumerate(stream):
            out = trk.step([d.in_frame(f)], k * 0.1, W)
        runs.append(np.array([t.position for t in out]))
    assert runs[0].shape == (1, 3)
    assert np.allclose(runs[0], runs[1], atol=1e-8)


def test_reframing_preserves_world_positions():
    trk = Tracker(TrackerConfig(confirm_hits=1))
    e0 = W.child((5.0, 0.0, 0.0))
    e1 = W.child((6.0, 1.0, 0.0), Rotation.from_yaw(0.3))
    out0 = trk.step([det(2.0, 3.0, frame=e0)], 0.0, e0)
    out1 = trk.step([], 0.0, e1)
    assert np.allclose(transform_between(e1, W).apply(out1[0].position),
                       transform_between(e0, W).apply(out0[0].position), atol=1e-12)


# --- remote detections --------------------------------------------------------


def test_preprocess_remote_radius():
    ego = W.child((0.0, 0.0, 0.0))
    sensor = W.child((50.0, 0.0, 15.0))
    kept = det(50.0, 0.0, -15.0, frame=sensor)
    dropped = det(100.0, 0.0, -15.0, frame=sensor)
    out = preprocess_remote([kept, dropped], ego, 100.0)
    assert len(out) == 1
    assert np.allclose(out[0].box.center, [100.0, 0.0, 0.0])
    assert out[0].box.frame is ego


def test_preprocess_remote_matches_oracle(rng):
    ego = W.child(rng.normal(size=3) * 10, Rotation(rng.normal(size=4)))
    sensor = W.child(rng.normal(size=3) * 10, Rotation(rng.normal(size=4)), handedness=Handedness.LeftHanded)
    d = det(*rng.normal(size=3) * 5, frame=sensor)
    out = preprocess_remote([d], ego, 1e9)[0]
    expect = transform_oracle(sensor, ego) @ np.append(d.box.center, 1.0)
    assert np.allclose(out.box.center, expect[:3], atol=1e-10)
