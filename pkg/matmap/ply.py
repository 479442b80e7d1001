"""
PLY export of semantic maps and PGM/PPM image codecs.

PLY layout: binary little-endian vertices with float x, y, z, uchar
red, green, blue, uchar material_id and int cluster_id (-1 = unlabeled).
"""

import logging
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from plyfile import PlyData, PlyElement, PlyParseError as PlyfileError

from matmap.constants import PLY_VERTEX_DTYPE, UNASSIGNED_CLUSTER
from matmap.exceptions import ImageError, InvalidInputError, PlyParseError
from matmap.models import (
    CameraIntrinsics,
    DepthImage,
    MaterialLabel,
    PointCloud,
    SemanticMap,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def write_ply(
    semantic_map: SemanticMap, path: PathLike, allow_empty: bool = False
) -> None:
    """
    Write a semantic map as a binary little-endian PLY file.

    :param semantic_map: map to export.
    :param path: destination file.
    :param allow_empty: write a zero-vertex file instead of failing.
    :raises InvalidInputError: if the map is empty and not allowed to be.
    """
    if len(semantic_map) == 0 and not allow_empty:
        raise InvalidInputError("semantic map", "nothing to write")
    vertices = np.empty(len(semantic_map), dtype=PLY_VERTEX_DTYPE)
    points = semantic_map.cloud.points
    vertices["x"], vertices["y"], vertices["z"] = points.T
    colors = semantic_map.colors
    vertices["red"], vertices["green"], vertices["blue"] = colors.T
    vertices["material_id"] = semantic_map.materials
    vertices["cluster_id"] = semantic_map.cluster_ids
    element = PlyElement.describe(vertices, "vertex")
    PlyData([element], text=False, byte_order="<").write(str(path))
    logger.debug("wrote %d vertices to %s", len(vertices), path)


def _read_vertices(path: PathLike) -> np.ndarray:
    try:
        data = PlyData.read(str(path))
    except PlyfileError as exception:
        line = getattr(exception, "line", None)
        if line is None:
            line = getattr(exception, "row", None)
        logger.exception("cannot parse ply %s", path)
        raise PlyParseError(path, exception, line) from exception
    except (OSError, ValueError) as exception:
        logger.exception("cannot read ply %s", path)
        raise PlyParseError(path, exception) from exception
    if "vertex" not in data:
        raise PlyParseError(path, "no vertex element")
    vertex = data["vertex"].data
    names = vertex.dtype.names or ()
    if not {"x", "y", "z"} <= set(names):
        raise PlyParseError(path, "vertex element lacks x, y, z")
    return vertex


def read_ply(path: PathLike) -> PointCloud:
    """
    Read positions and, when present, colors from any PLY file.

    :raises PlyParseError: on malformed headers or truncated bodies.
    """
    vertex = _read_vertices(path)
    points = np.column_stack([vertex["x"], vertex["y"], vertex["z"]])
    colors = None
    if {"red", "green", "blue"} <= set(vertex.dtype.names):
        colors = np.column_stack(
            [vertex["red"], vertex["green"], vertex["blue"]]
        )
    try:
        return PointCloud(points.astype(np.float64), colors)
    except InvalidInputError as exception:
        raise PlyParseError(path, exception) from exception


def read_semantic_ply(path: PathLike) -> SemanticMap:
    """
    Read a PLY written by `write_ply` back into a semantic map.

    Files without material or cluster properties load as unlabeled
    `OTHER` points.
    """
    vertex = _read_vertices(path)
    cloud = read_ply(path)
    names = set(vertex.dtype.names)
    n = len(cloud)
    materials = np.full(n, MaterialLabel.OTHER, dtype=np.uint8)
    if "material_id" in names:
        materials = np.asarray(vertex["material_id"], dtype=np.uint8)
    cluster_ids = np.full(n, UNASSIGNED_CLUSTER, dtype=np.int64)
    if "cluster_id" in names:
        cluster_ids = np.asarray(vertex["cluster_id"], dtype=np.int64)
    colors = cloud.colors
    if colors is None:
        colors = np.zeros((n, 3), dtype=np.uint8)
    try:
        return SemanticMap(cloud, cluster_ids, materials, colors)
    except InvalidInputError as exception:
        raise PlyParseError(path, exception) from exception


def read_depth_pgm(path: PathLike, intr: CameraIntrinsics) -> DepthImage:
    """
    Read a 16-bit binary PGM (P5, maxval 65535) of millimeter depths.

    :raises ImageError: on decoding failures or a size mismatch.
    """
    try:
        with Image.open(path) as image:
            if not image.mode.startswith("I"):
                raise ImageError(path, f"expected 16-bit, got {image.mode}")
            values = np.array(image).astype(np.uint16)
    except (OSError, ValueError, UnidentifiedImageError) as exception:
        logger.exception("cannot decode depth image %s", path)
        raise ImageError(path, exception) from exception
    if values.shape != (intr.height, intr.width):
        raise ImageError(path, f"size {values.shape[::-1]} differs")
    return DepthImage(intr.width, intr.height, values)


def write_depth_pgm(depth: DepthImage, path: PathLike) -> None:
    """Write millimeter depths as a big-endian 16-bit binary PGM."""
    Image.fromarray(np.ascontiguousarray(depth.values, dtype=np.uint16)).save(
        path, format="PPM"
    )


def read_rgb_ppm(path: PathLike, intr: CameraIntrinsics) -> np.ndarray:
    """
    Read a binary PPM (P6) into an (H, W, 3) uint8 array.

    :raises ImageError: on decoding failures or a size mismatch.
    """
    try:
        with Image.open(path) as image:
            values = np.array(image.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError, UnidentifiedImageError) as exception:
        logger.exception("cannot decode rgb image %s", path)
        raise ImageError(path, exception) from exception
    if values.shape[:2] != (intr.height, intr.width):
        raise ImageError(path, f"size {values.shape[1::-1]} differs")
    return values


def write_rgb_ppm(rgb: np.ndarray, path: PathLike) -> None:
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(
        path, format="PPM"
    )
