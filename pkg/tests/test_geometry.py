import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matmap.exceptions import InvalidInputError
from matmap.geometry import (
    back_project_pixel,
    depth_to_cloud,
    inverse_transform_points,
    project_point,
    transform_point,
    transform_points,
)
from matmap.models import CameraIntrinsics, DepthImage, Point3, Pose

INTR = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
SMALL = CameraIntrinsics(100.0, 100.0, 2.0, 2.0, 4, 4)


def test_back_project_principal_point():
    point = back_project_pixel(320, 240, 2.0, INTR)
    assert point == Point3(0.0, 0.0, 2.0)


def test_back_project_off_center():
    point = back_project_pixel(420, 240, 1.0, INTR)
    assert point.x == pytest.approx(0.2)
    assert point.y == pytest.approx(0.0)
    assert point.z == pytest.approx(1.0)


@pytest.mark.parametrize("depth", [0.0, -1.0, math.nan])
def test_back_project_rejects_bad_depth(depth):
    with pytest.raises(InvalidInputError):
        back_project_pixel(10, 10, depth, INTR)


@pytest.mark.parametrize("pixel", [(-1, 0), (640, 0), (0, 480)])
def test_back_project_rejects_outside_pixel(pixel):
    with pytest.raises(InvalidInputError):
        back_project_pixel(*pixel, 1.0, INTR)


@settings(max_examples=200, deadline=None)
@given(
    u=st.floats(0, 639.99),
    v=st.floats(0, 479.99),
    depth=st.floats(0.1, 10.0),
)
def test_projection_round_trip(u, v, depth):
    point = back_project_pixel(u, v, depth, INTR)
    pu, pv = project_point(point, INTR)
    assert pu == pytest.approx(u, abs=1e-6)
    assert pv == pytest.approx(v, abs=1e-6)


def test_project_point_behind_camera():
    with pytest.raises(InvalidInputError):
        project_point(Point3(0.0, 0.0, -1.0), INTR)


def test_identity_pose_keeps_points():
    p = Point3(1.0, -2.0, 3.0)
    assert transform_point(Pose.identity(), p) == p


def test_translation_and_rotation():
    # 90 degrees about z
    half = math.sqrt(0.5)
    pose = Pose((1.0, 2.0, 3.0), (0.0, 0.0, half, half))
    moved = transform_point(pose, Point3(1.0, 0.0, 0.0))
    assert moved.x == pytest.approx(1.0)
    assert moved.y == pytest.approx(3.0)
    assert moved.z == pytest.approx(3.0)


def test_inverse_transform_undoes_transform(rng):
    quat = rng.normal(size=4)
    pose = Pose(tuple(rng.normal(size=3)), tuple(quat / np.linalg.norm(quat)))
    points = rng.normal(size=(50, 3))
    back = inverse_transform_points(pose, transform_points(pose, points))
    np.testing.assert_allclose(back, points, atol=1e-12)


def test_pose_rejects_unnormalized_quaternion():
    with pytest.raises(InvalidInputError):
        Pose((0.0, 0.0, 0.0), (0.0, 0.0, 0.0, 2.0))


def test_depth_to_cloud_single_valid_pixel():
    values = np.zeros((4, 4), dtype=np.uint16)
    values[2, 2] = 1000
    cloud = depth_to_cloud(DepthImage(4, 4, values), SMALL, Pose.identity(), 1)
    np.testing.assert_allclose(cloud.points, [[0.0, 0.0, 1.0]])


def test_depth_to_cloud_all_zero_is_empty():
    depth = DepthImage(4, 4, np.zeros((4, 4), dtype=np.uint16))
    assert len(depth_to_cloud(depth, SMALL, Pose.identity(), 1)) == 0


def test_depth_to_cloud_clamps_range():
    values = np.full((4, 4), 6000, dtype=np.uint16)
    values[0, 0] = 200
    values[1, 1] = 1500
    cloud = depth_to_cloud(DepthImage(4, 4, values), SMALL, Pose.identity(), 1)
    assert len(cloud) == 1
    assert cloud.points[0, 2] == pytest.approx(1.5)


@pytest.mark.parametrize("stride, expected", [(1, 16), (2, 4), (3, 4), (4, 1)])
def test_depth_to_cloud_stride_count(stride, expected):
    depth = DepthImage(4, 4, np.full((4, 4), 1000, dtype=np.uint16))
    cloud = depth_to_cloud(depth, SMALL, Pose.identity(), stride)
    assert len(cloud) == expected


def test_depth_to_cloud_row_major_order():
    values = np.full((4, 4), 1000, dtype=np.uint16)
    cloud = depth_to_cloud(DepthImage(4, 4, values), SMALL, Pose.identity(), 2)
    expected = [
        back_project_pixel(u, v, 1.0, SMALL).as_array()
        for v in (0, 2)
        for u in (0, 2)
    ]
    np.testing.assert_allclose(cloud.points, expected)


def test_depth_to_cloud_matches_pixelwise_back_projection(rng):
    values = rng.integers(0, 6000, (4, 4)).astype(np.uint16)
    pose = Pose((0.5, -1.0, 2.0), (0.0, 0.0, 0.0, 1.0))
    cloud = depth_to_cloud(DepthImage(4, 4, values), SMALL, pose, 1)
    expected = [
        transform_point(
            pose, back_project_pixel(u, v, values[v, u] / 1000.0, SMALL)
        ).as_array()
        for v in range(4)
        for u in range(4)
        if values[v, u] and 0.3 <= values[v, u] / 1000.0 <= 5.0
    ]
    np.testing.assert_allclose(cloud.points, np.reshape(expected, (-1, 3)))


def test_depth_to_cloud_picks_colors():
    values = np.full((4, 4), 1000, dtype=np.uint16)
    rgb = np.arange(48, dtype=np.uint8).reshape(4, 4, 3)
    cloud = depth_to_cloud(
        DepthImage(4, 4, values), SMALL, Pose.identity(), 2, rgb=rgb
    )
    np.testing.assert_array_equal(cloud.colors[1], rgb[0, 2])


def test_depth_to_cloud_rejects_zero_stride():
    depth = DepthImage(4, 4, np.zeros((4, 4), dtype=np.uint16))
    with pytest.raises(InvalidInputError):
        depth_to_cloud(depth, SMALL, Pose.identity(), 0)
