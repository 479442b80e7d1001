"""Pinhole camera geometry and depth back-projection."""

import logging
from typing import Optional

import numpy as np

from matmap.constants import (
    DEFAULT_MAX_DEPTH,
    DEFAULT_MIN_DEPTH,
    DEFAULT_STRIDE,
    MILLIMETERS_PER_METER,
)
from matmap.exceptions import InvalidInputError
from matmap.models import (
    CameraIntrinsics,
    DepthImage,
    Point3,
    PointCloud,
    Pose,
)

logger = logging.getLogger(__name__)


def back_project_pixel(
    u: float, v: float, depth: float, intr: CameraIntrinsics
) -> Point3:
    """
    Recover the camera-frame point seen at pixel `(u, v)`.

    Camera looks down +z, x to the right, y down.

    :param u: column in pixels.
    :param v: row in pixels.
    :param depth: distance along the optical axis, meters.
    :param intr: camera intrinsics.
    :raises InvalidInputError: on non-positive depth or outside pixel.
    :return: point in the camera frame.
    """
    if not depth > 0:
        raise InvalidInputError(depth, "depth must be positive")
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise InvalidInputError((u, v), "pixel outside the image")
    return Point3(
        (u - intr.cx) * depth / intr.fx,
        (v - intr.cy) * depth / intr.fy,
        float(depth),
    )


def project_point(p: Point3, intr: CameraIntrinsics) -> tuple[float, float]:
    """
    Project a camera-frame point to pixel coordinates.

    :raises InvalidInputError: for points at or behind the camera.
    """
    if not p.z > 0:
        raise InvalidInputError(p, "point is not in front of the camera")
    return intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy


def transform_point(pose: Pose, p: Point3) -> Point3:
    """Map a camera-frame point to the world frame."""
    return Point3.from_array(transform_points(pose, p.as_array()[None])[0])


def transform_points(pose: Pose, points: np.ndarray) -> np.ndarray:
    """Vectorized `transform_point` over an (N, 3) array."""
    return points @ pose.rotation_matrix.T + pose.translation_vector


def inverse_transform_points(pose: Pose, points: np.ndarray) -> np.ndarray:
    """Map world-frame points into the camera frame of `pose`."""
    return (points - pose.translation_vector) @ pose.rotation_matrix


def depth_to_cloud(
    depth: DepthImage,
    intr: CameraIntrinsics,
    pose: Pose,
    stride: int = DEFAULT_STRIDE,
    min_depth: float = DEFAULT_MIN_DEPTH,
    max_depth: float = DEFAULT_MAX_DEPTH,
    rgb: Optional[np.ndarray] = None,
) -> PointCloud:
    """
    Back-project every `stride`-th pixel of a depth image to the world.

    Sampling is row-major over rows `0, stride, ...` and columns
    `0, stride, ...`; pixels with value 0 or depth outside
    `[min_depth, max_depth]` are skipped.

    :param depth: depth image in millimeters.
    :param intr: camera intrinsics.
    :param pose: camera-to-world pose of the frame.
    :param stride: sampling step in pixels.
    :param min_depth: closest accepted depth, meters.
    :param max_depth: farthest accepted depth, meters.
    :param rgb: optional (H, W, 3) uint8 image for point colors.
    :return: world-frame cloud, possibly empty.
    """
    if stride < 1:
        raise InvalidInputError(stride, "stride must be at least 1")
    if not 0 < min_depth < max_depth:
        raise InvalidInputError(
            (min_depth, max_depth), "need 0 < min_depth < max_depth"
        )
    if (depth.width, depth.height) != (intr.width, intr.height):
        raise InvalidInputError(
            (depth.width, depth.height), "depth size differs from camera"
        )
    rows = np.arange(0, depth.height, stride)
    cols = np.arange(0, depth.width, stride)
    vv, uu = np.meshgrid(rows, cols, indexing="ij")
    raw = depth.values[vv, uu].reshape(-1)
    meters = raw.astype(np.float64) / MILLIMETERS_PER_METER
    valid = (raw != 0) & (meters >= min_depth) & (meters <= max_depth)
    u = uu.reshape(-1)[valid].astype(np.float64)
    v = vv.reshape(-1)[valid].astype(np.float64)
    z = meters[valid]
    camera = np.stack(
        [(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z],
        axis=1,
    )
    colors = None
    if rgb is not None:
        colors = rgb[v.astype(np.intp), u.astype(np.intp)]
    logger.debug("back-projected %d of %d samples", z.size, raw.size)
    return PointCloud(transform_points(pose, camera), colors)
