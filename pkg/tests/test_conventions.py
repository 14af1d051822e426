import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avkit.conventions import (
    AxesConvention,
    EgoOrigin,
    ObjectOrigin,
    ProfileMismatch,
    RotationEncoding,
    Unrepresentable,
    export_object,
    ingest_object,
    load_profiles,
)
from avkit.geometry import EulerConvention, Rotation, world_frame
from avkit.scene import BoundingBox3D, ObjectState, ObjectType

PROFILES = load_profiles()

# (vehicle frame, ego origin, object origin, rotation, keyframe rate)
TABLE = {
    "KITTI-Object": ("RDF", "None", "BoxBottom", "Euler1D", 10.0),
    "KITTI-Raw": ("FLU", "None", "BoxBottom", "Euler1D", 10.0),
    "KITTI-Odometry": ("FLU", "Camera0", "None", "DCM", 10.0),
    "nuScenes": ("FLU", "GPRearAxle", "BoxCenter", "Quaternion", 2.0),
    "Waymo": ("FLU", "EgoCenter", "BoxCenter", "EulerFull", 10.0),
    "CARLA": ("FRU", "GPEgoCenter", "BoxCenter", "Euler3D", None),
    "TORCS": ("FL_U", "BEVEgoCenter", "BEVCenter", "Euler1D", None),
}


@pytest.fixture
def world():
    return world_frame()


def canonical(world, center=(0.0, 0.0, 0.0), rot=None, dims=(1.5, 1.8, 4.2), vel=(0.0, 0.0, 0.0)):
    return ObjectState(7, ObjectType.Car, BoundingBox3D(center, dims, rot or Rotation(), world),
                       velocity=np.array(vel, dtype=float), timestamp=0.5)


@pytest.mark.parametrize("name", sorted(TABLE))
def test_profiles_reproduce_table(name):
    p = PROFILES[name]
    frame, ego, obj, rot, rate = TABLE[name]
    assert p.vehicle_frame is AxesConvention(frame)
    assert p.ego_origin is EgoOrigin(ego)
    assert p.object_origin is ObjectOrigin(obj)
    assert p.rotation_encoding is RotationEncoding(rot)
    assert p.keyframe_rate == rate


def test_profile_registry_is_exactly_the_table():
    assert set(PROFILES) == set(TABLE)


@pytest.mark.parametrize("axes", list(AxesConvention))
def test_axes_matrices_are_signed_permutations(axes):
    m = axes.matrix
    assert set(np.unique(m)) <= {-1.0, 0.0, 1.0}
    assert np.allclose(m @ m.T, np.eye(3))
    assert abs(abs(np.linalg.det(m)) - 1.0) < 1e-12
    assert axes.left_handed == (axes is AxesConvention.FRU)


def test_kitti_object_box_bottom_lift(world):
    raw = {"position": [0.0, 1.0, 10.0], "dimensions": [2.0, 1.6, 4.0], "rotation": 0.0}
    obj = ingest_object(raw, PROFILES["KITTI-Object"], world)
    # RDF (0, 1, 10) is FLU (10, 0, -1): 1 m below the origin, raised by h/2 = 1
    assert np.allclose(obj.box.center, [10.0, 0.0, 0.0], atol=1e-12)
    assert obj.box.orientation.isclose(Rotation())


def test_canonical_profile_is_fixed_point(world):
    raw = {"id": 2, "type": "Truck", "position": [1.0, 2.0, 3.0], "dimensions": [3.0, 2.5, 8.0],
           "rotation": [1.0, 0.0, 0.0, 0.0], "velocity": [1.0, 0.0, 0.0], "timestamp": 0.0}
    obj = ingest_object(raw, PROFILES["nuScenes"], world)
    assert np.array_equal(obj.box.center, [1.0, 2.0, 3.0])
    assert obj.box.orientation == Rotation()
    assert export_object(obj, PROFILES["nuScenes"]) == raw


def test_carla_yaw_is_negated(world):
    raw = {"position": [5.0, 2.0, 0.5], "dimensions": [1.5, 2.0, 4.5], "rotation": [math.radians(30), 0.0, 0.0]}
    obj = ingest_object(raw, PROFILES["CARLA"], world)
    assert abs(obj.box.yaw - math.radians(-30)) < 1e-12
    assert np.allclose(obj.box.center, [5.0, -2.0, 0.5])


def test_kitti_object_exports_one_angle(world):
    rec = export_object(canonical(world, rot=Rotation.from_yaw(0.7)), PROFILES["KITTI-Object"])
    assert isinstance(rec["rotation"], float)


@pytest.mark.parametrize("name", ["KITTI-Object", "KITTI-Raw", "TORCS"])
def test_tilt_is_unrepresentable_in_single_angle(world, name):
    rot = Rotation.from_euler((0.2, 0.3, 0.0), EulerConvention("ZYX"))
    with pytest.raises(Unrepresentable):
        export_object(canonical(world, rot=rot), PROFILES[name])


def test_rotation_arity_mismatch(world):
    with pytest.raises(ProfileMismatch):
        ingest_object({"position": [0, 0, 0], "dimensions": [1, 1, 1], "rotation": [0.1, 0.2, 0.3]},
                      PROFILES["KITTI-Raw"], world)
    with pytest.raises(ProfileMismatch):
        ingest_object({"position": [0, 0, 0], "dimensions": [1, 1, 1], "rotation": 0.1},
                      PROFILES["Waymo"], world)
    with pytest.raises(ProfileMismatch):
        ingest_object({"position": [0, 0, 0], "dimensions": [1, 1, 1], "rotation": 0.1},
                      PROFILES["TORCS"], world)


def _geometry(rec):
    return np.concatenate([np.ravel(rec["position"]), np.ravel(rec["dimensions"]),
                           np.ravel(rec["rotation"]), np.ravel(rec["velocity"])])


def random_yaw_object(rng, world, bev=False):
    z = 0.0 if bev else rng.uniform(-2, 2)
    return canonical(world, (rng.uniform(-80, 80), rng.uniform(-80, 80), z),
                     Rotation.from_yaw(rng.uniform(-math.pi, math.pi)),
                     tuple(rng.uniform(0.5, 5.0, 3)), (rng.uniform(-10, 10), rng.uniform(-10, 10), 0.0))


@pytest.mark.parametrize("name", sorted(TABLE))
def test_yaw_only_round_trip(world, rng, name):
    p = PROFILES[name]
    for _ in range(200):
        obj = random_yaw_object(rng, world, p.bev_only)
        rec = export_object(obj, p)
        back = ingest_object(rec, p, world)
        assert np.allclose(back.box.center, obj.box.center, atol=1e-10)
        assert np.allclose(back.box.orientation.as_quat(), obj.box.orientation.as_quat(), atol=1e-10)
        assert np.allclose(_geometry(export_object(back, p)), _geometry(rec), atol=1e-10)


@pytest.mark.parametrize("name", ["KITTI-Odometry", "nuScenes", "Waymo", "CARLA"])
@given(st.tuples(*[st.floats(-1, 1)] * 4).filter(lambda q: np.linalg.norm(q) > 0.1),
       st.tuples(*[st.floats(-50, 50)] * 3))
def test_full_rotation_round_trip(name, q, center):
    world = world_frame()
    p = PROFILES[name]
    obj = canonical(world, center, Rotation(q))
    back = ingest_object(export_object(obj, p), p, world)
    assert np.allclose(back.box.center, obj.box.center, atol=1e-10)
    assert np.allclose(back.box.orientation.as_matrix(), obj.box.orientation.as_matrix(), atol=1e-10)


def test_torcs_is_planar(world):
    rec = export_object(canonical(world, (3.0, 4.0, 0.0), Rotation.from_yaw(1.0)), PROFILES["TORCS"])
    assert len(rec["position"]) == 2
    back = ingest_object(rec, PROFILES["TORCS"], world)
    assert back.box.center[2] == 0.0


def test_custom_registry(tmp_path):
    path = tmp_path / "profiles.json"
    path.write_text('[{"name": "Mine", "vehicle_frame": "RDF", "ego_origin": "EgoCenter", '
                    '"object_origin": "BoxCenter", "rotation_encoding": "DCM", "keyframe_rate": 5}]')
    profiles = load_profiles(path)
    assert profiles["Mine"].rotation_encoding is RotationEncoding.DCM
    assert profiles["Mine"].to_dict()["keyframe_rate"] == 5
