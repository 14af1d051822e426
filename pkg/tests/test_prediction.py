import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avkit.prediction import PredictedTrajectory, kinematic_predict
from avkit.tracking import Track, predict

vec = st.tuples(*[st.floats(-30, 30)] * 3)


def track(pos=(0.0, 0.0, 0.0), vel=(0.0, 0.0, 0.0), t=0.0):
    s = np.zeros(10)
    s[:3], s[3:6], s[7:] = pos, vel, (1.5, 1.8, 4.2)
    return Track(4, s, np.eye(10), timestamp=t)


def test_closed_form_waypoints():
    p = kinematic_predict(track(vel=(2.0, 0.0, 0.0)), horizon=3.0, step=1.0)
    assert np.allclose(p.positions[:, 0], [2.0, 4.0, 6.0])
    assert np.allclose(p.timestamps, [1.0, 2.0, 3.0])


def test_zero_velocity_stays_put():
    p = kinematic_predict(track(pos=(1.0, 2.0, 3.0)), 3.0, 0.5)
    assert np.array_equal(p.positions, np.tile([1.0, 2.0, 3.0], (6, 1)))


@pytest.mark.parametrize("horizon,step,count", [(3.0, 0.5, 6), (0.3, 0.1, 3), (1.0, 0.3, 3), (0.2, 0.5, 0)])
def test_waypoint_count(horizon, step, count):
    p = kinematic_predict(track(vel=(1, 1, 0)), horizon, step)
    assert len(p.waypoints) == count
    assert np.all(np.diff(p.timestamps) > 0)


def test_rejects_bad_arguments():
    with pytest.raises(ValueError):
        kinematic_predict(track(), 0.0, 0.5)
    with pytest.raises(ValueError):
        kinematic_predict(track(), 1.0, -0.5)


@given(vec, vec)
def test_matches_step_by_step_integration(pos, vel):
    t = track(pos, vel, t=2.0)
    p = kinematic_predict(t, 3.0, 0.5)
    state = t
    for k in range(6):
        state = predict(state, 0.5)
        assert np.allclose(p.positions[k], state.position, atol=1e-9)
        assert abs(p.timestamps[k] - state.timestamp) < 1e-12


@given(vec, vec, vec)
def test_translation_equivariance(pos, vel, shift):
    a = kinematic_predict(track(pos, vel), 3.0, 0.5)
    b = kinematic_predict(track(np.add(pos, shift), vel), 3.0, 0.5)
    assert np.allclose(b.positions - a.positions, np.broadcast_to(shift, a.positions.shape), atol=1e-9)


@given(vec, vec)
def test_concatenation(pos, vel):
    t = track(pos, vel)
    whole = kinematic_predict(t, 3.0, 0.5)
    first = kinematic_predict(t, 1.5, 0.5)
    rolled = track(first.positions[-1], vel, first.timestamps[-1])
    second = kinematic_predict(rolled, 1.5, 0.5)
    assert np.allclose(np.vstack([first.positions, second.positions]), whole.positions, atol=1e-9)
    assert np.allclose(np.concatenate([first.timestamps, second.timestamps]), whole.timestamps)


def test_json_round_trip():
    p = kinematic_predict(track((1, 2, 0), (0.5, -1, 0), t=1.0), 2.0, 0.5)
    q = PredictedTrajectory.from_dict(p.to_dict(frame=3))
    assert np.array_equal(q.positions, p.positions) and np.array_equal(q.timestamps, p.timestamps)
    assert math.isclose(q.horizon, 2.0) and q.track_id == 4
