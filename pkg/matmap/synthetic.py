"""
Synthetic RGB-D recordings of the shipped room inventories.

Objects are boxes standing on an invisible floor at height 0, laid out
on a square grid. One camera looks straight down on every grid cell and
every object is detected, perfectly, in each frame showing its whole
top face.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from tqdm import tqdm

from matmap.config import Config
from matmap.constants import (
    FIXTURE_BACKGROUND_RGB,
    FIXTURE_CAMERA_HEIGHT,
    FIXTURE_DETECTION_CONFIDENCE,
    FIXTURE_FLOOR_HEIGHT,
    FIXTURE_FOCAL,
    FIXTURE_FOOTPRINT_RANGE,
    FIXTURE_HEIGHT_RANGE,
    FIXTURE_IMAGE_SIZE,
    FIXTURE_PITCH,
    MILLIMETERS_PER_METER,
    ROOMS_PATH,
)
from matmap.exceptions import ConfigurationError, InvalidInputError
from matmap.geometry import inverse_transform_points
from matmap.models import (
    BBox3D,
    CameraIntrinsics,
    DepthImage,
    Detection2D,
    FrameRecord,
    GroundTruthMap,
    MaterialLabel,
    Palette,
    Pose,
    Sequence,
)
from matmap.ply import write_depth_pgm, write_rgb_ppm
from matmap.sequence_io import DetectionMap, dump_groundtruth, dump_manifest
from matmap.voxmap import default_palette

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
LOOKING_DOWN = (1.0, 0.0, 0.0, 0.0)
GROUNDTRUTH_FILE_NAME = "groundtruth.jsonl"
MANIFEST_FILE_NAME = "manifest.json"


@dataclass(frozen=True, slots=True)
class InventoryEntry:
    object_label: str
    material: str
    count: int


def load_rooms(
    path: PathLike = ROOMS_PATH,
) -> dict[str, tuple[InventoryEntry, ...]]:
    """Room name to its object inventory."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {
        room: tuple(InventoryEntry(str(a), str(b), int(c)) for a, b, c in rows)
        for room, rows in raw.items()
    }


def room_inventory(room: str) -> tuple[InventoryEntry, ...]:
    rooms = load_rooms()
    if room not in rooms:
        raise ConfigurationError(
            "room", f"unknown room {room!r}, pick one of {sorted(rooms)}"
        )
    return rooms[room]


def fixture_intrinsics() -> CameraIntrinsics:
    width, height = FIXTURE_IMAGE_SIZE
    return CameraIntrinsics(
        FIXTURE_FOCAL,
        FIXTURE_FOCAL,
        (width - 1) / 2.0,
        (height - 1) / 2.0,
        width,
        height,
    )


def _grid_side(n_objects: int) -> int:
    return max(1, math.ceil(math.sqrt(n_objects)))


def layout_room(room: str, seed: int = 0) -> list[BBox3D]:
    """
    Ground-truth boxes of a room, row-major on a square grid.

    Footprints and heights are drawn from the seed and rounded to
    millimeters. Centers sit exactly on the grid and footprints are
    symmetric around them; box ids follow the inventory order.
    """
    rng = np.random.default_rng(seed)
    objects = [
        (entry.object_label, MaterialLabel.parse(entry.material))
        for entry in room_inventory(room)
        for _ in range(entry.count)
    ]
    side = _grid_side(len(objects))
    shift = (side - 1) / 2.0
    boxes = []
    for index, (label, material) in enumerate(objects):
        row, col = divmod(index, side)
        center = np.array([col - shift, row - shift]) * FIXTURE_PITCH
        footprint = rng.uniform(*FIXTURE_FOOTPRINT_RANGE, 2)
        height = round(float(rng.uniform(*FIXTURE_HEIGHT_RANGE)), 3)
        half = np.round(footprint / 2.0, 3)
        lo = center - half
        hi = center + half
        boxes.append(
            BBox3D.from_bounds(
                [lo[0], lo[1], 0.0],
                [hi[0], hi[1], height],
                material,
                object_label=label,
                box_id=index,
            )
        )
    return boxes


def camera_poses(n_objects: int) -> list[Pose]:
    """
    Downward-looking cameras, one above every cell of the object grid.

    Poses are ordered row-major.
    """
    side = _grid_side(n_objects)
    shift = (side - 1) / 2.0
    positions = [(k - shift) * FIXTURE_PITCH for k in range(side)]
    return [
        Pose((x, y, FIXTURE_CAMERA_HEIGHT), LOOKING_DOWN)
        for y in positions
        for x in positions
    ]


def render_frame(
    boxes: list[BBox3D],
    pose: Pose,
    intr: CameraIntrinsics,
    palette: Optional[Palette] = None,
) -> tuple[DepthImage, np.ndarray]:
    """
    Ray cast the boxes into a millimeter depth image and an RGB image.

    Rays that miss every box get depth 0 and the background color.
    """
    palette = palette or default_palette()
    v, u = np.mgrid[0 : intr.height, 0 : intr.width]
    rays = np.stack(
        [
            ((u - intr.cx) / intr.fx).reshape(-1),
            ((v - intr.cy) / intr.fy).reshape(-1),
            np.ones(u.size),
        ],
        axis=1,
    )
    directions = rays @ pose.rotation_matrix.T
    origin = pose.translation_vector
    nearest = np.full(u.size, np.inf)
    owner = np.full(u.size, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inverse = 1.0 / directions
        for index, box in enumerate(boxes):
            t_lo = (box.lo - origin) * inverse
            t_hi = (box.hi - origin) * inverse
            enter = np.minimum(t_lo, t_hi).max(axis=1)
            leave = np.maximum(t_lo, t_hi).min(axis=1)
            hit = (enter <= leave) & (enter > 0) & (enter < nearest)
            nearest[hit] = enter[hit]
            owner[hit] = index
    seen = owner >= 0
    millimeters = np.zeros(u.size, dtype=np.uint16)
    millimeters[seen] = np.rint(nearest[seen] * MILLIMETERS_PER_METER)
    colors = np.array(
        [palette(box.material) for box in boxes] + [FIXTURE_BACKGROUND_RGB],
        dtype=np.uint8,
    )
    rgb = colors[owner].reshape(intr.height, intr.width, 3)
    return DepthImage(intr.width, intr.height, millimeters), rgb


def top_face_bbox(
    box: BBox3D, pose: Pose, intr: CameraIntrinsics
) -> Optional[tuple[float, float, float, float]]:
    """Pixel bbox of a box's top face, `None` unless fully in view."""
    top = box.hi[2]
    corners = np.array(
        [
            [x, y, top]
            for x in (box.lo[0], box.hi[0])
            for y in (box.lo[1], box.hi[1])
        ]
    )
    camera = inverse_transform_points(pose, corners)
    if (camera[:, 2] <= 0).any():
        return None
    u = intr.fx * camera[:, 0] / camera[:, 2] + intr.cx
    v = intr.fy * camera[:, 1] / camera[:, 2] + intr.cy
    if u.min() < 0 or v.min() < 0:
        return None
    if u.max() > intr.width - 1 or v.max() > intr.height - 1:
        return None
    return (
        float(u.min()),
        float(v.min()),
        float(u.max() - u.min()),
        float(v.max() - v.min()),
    )


def fixture_detections(
    boxes: list[BBox3D], poses: list[Pose], intr: CameraIntrinsics
) -> DetectionMap:
    """A detection of every object in every frame that sees it whole."""
    found: dict[int, list[Detection2D]] = {}
    for box in boxes:
        views = 0
        for frame_id, pose in enumerate(poses):
            bbox = top_face_bbox(box, pose, intr)
            if bbox is None:
                continue
            views += 1
            found.setdefault(frame_id, []).append(
                Detection2D(
                    frame_id,
                    bbox,
                    box.object_label,
                    FIXTURE_DETECTION_CONFIDENCE,
                    box.material,
                )
            )
        if not views:
            logger.warning("object %d is never fully in view", box.box_id)
    return {frame_id: tuple(found[frame_id]) for frame_id in sorted(found)}


def inject_label_noise(
    detections: DetectionMap, rate: float, seed: int = 0
) -> DetectionMap:
    """
    Flip the material of `round(rate * n)` of the `n` detections.

    Each flipped detection gets a different material drawn uniformly
    from the other ten labels.

    :raises InvalidInputError: if the rate is outside [0, 1].
    """
    if not 0.0 <= rate <= 1.0:
        raise InvalidInputError(rate, "noise rate must be in [0, 1]")
    rng = np.random.default_rng(seed)
    flat = [
        (frame_id, index)
        for frame_id in sorted(detections)
        for index in range(len(detections[frame_id]))
    ]
    n_flips = int(math.floor(rate * len(flat) + 0.5))
    chosen = rng.choice(len(flat), size=n_flips, replace=False)
    noisy = {frame_id: list(items) for frame_id, items in detections.items()}
    for position in sorted(int(c) for c in chosen):
        frame_id, index = flat[position]
        detection = noisy[frame_id][index]
        current = detection.material or MaterialLabel.OTHER
        others = [label for label in MaterialLabel if label != current]
        flipped = others[int(rng.integers(len(others)))]
        noisy[frame_id][index] = Detection2D(
            detection.frame_id,
            detection.bbox,
            detection.object_label,
            detection.confidence,
            flipped,
        )
        logger.debug(
            "flipped %s in frame %d to %s",
            detection.object_label,
            frame_id,
            flipped.display_name,
        )
    return {frame_id: tuple(items) for frame_id, items in noisy.items()}


@dataclass(frozen=True, eq=False)
class Fixture:
    room: str
    intrinsics: CameraIntrinsics
    poses: list[Pose]
    boxes: list[BBox3D]
    depths: list[DepthImage] = field(default_factory=list)
    rgbs: list[np.ndarray] = field(default_factory=list)
    detections: DetectionMap = field(default_factory=dict)

    @property
    def groundtruth(self) -> GroundTruthMap:
        return GroundTruthMap(boxes=tuple(self.boxes))


def build_fixture(
    room: str,
    seed: int = 0,
    noise_rate: float = 0.0,
    noise_seed: int = 0,
) -> Fixture:
    """Lay out, render and detect a room in memory."""
    boxes = layout_room(room, seed)
    poses = camera_poses(len(boxes))
    intr = fixture_intrinsics()
    palette = default_palette()
    depths, rgbs = [], []
    for pose in tqdm(
        poses,
        desc="Rendering frames",
        colour="green",
        disable=not Config.PROGRESS,
    ):
        depth, rgb = render_frame(boxes, pose, intr, palette)
        depths.append(depth)
        rgbs.append(rgb)
    detections = fixture_detections(boxes, poses, intr)
    if noise_rate > 0:
        detections = inject_label_noise(detections, noise_rate, noise_seed)
    return Fixture(room, intr, poses, boxes, depths, rgbs, detections)


def make_fixture(
    room: str,
    output_dir: PathLike,
    seed: int = 0,
    noise_rate: float = 0.0,
    noise_seed: int = 0,
) -> Path:
    """
    Write a synthetic recording of a room to a directory.

    Layout: `manifest.json`, `detections.jsonl`, `groundtruth.jsonl`,
    `depth/NNNNNN.pgm` and `rgb/NNNNNN.ppm`.

    :return: path of the manifest.
    """
    fixture = build_fixture(room, seed, noise_rate, noise_seed)
    output = Path(output_dir)
    (output / "depth").mkdir(parents=True, exist_ok=True)
    (output / "rgb").mkdir(parents=True, exist_ok=True)
    frames = []
    for frame_id, (pose, depth, rgb) in enumerate(
        zip(fixture.poses, fixture.depths, fixture.rgbs)
    ):
        record = FrameRecord(
            frame_id,
            round(frame_id * 0.1, 6),
            f"rgb/{frame_id:06d}.ppm",
            f"depth/{frame_id:06d}.pgm",
            pose,
        )
        write_depth_pgm(depth, output / record.depth_path)
        write_rgb_ppm(rgb, output / record.rgb_path)
        frames.append(record)
    sequence = Sequence(
        fixture.intrinsics,
        tuple(frames),
        fixture.detections,
        output,
        "detections.jsonl",
        GROUNDTRUTH_FILE_NAME,
        FIXTURE_FLOOR_HEIGHT,
    )
    manifest = output / MANIFEST_FILE_NAME
    dump_groundtruth(fixture.groundtruth, output / GROUNDTRUTH_FILE_NAME)
    dump_manifest(sequence, manifest)
    logger.debug(
        "wrote %s: %d frames, %d objects",
        manifest,
        len(frames),
        len(fixture.boxes),
    )
    return manifest
