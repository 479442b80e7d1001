"""
Readers and canonical writers for recorded sequences.

Manifest: one JSON document with `intrinsics`, `frames` and optional
`detections` / `groundtruth` file names relative to the manifest, plus
an optional `floor_height` in world meters.
Detections, boxes and object ground truth: JSON-lines.
"""

import json
import logging
from pathlib import Path
from typing import Any, Iterator, Optional, Union

from matmap.exceptions import (
    DetectionsError,
    GroundTruthError,
    InvalidInputError,
    ManifestError,
    ParseError,
)
from matmap.models import (
    BBox3D,
    CameraIntrinsics,
    Detection2D,
    FrameRecord,
    GroundTruthMap,
    MaterialLabel,
    Pose,
    Sequence,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
DetectionMap = dict[int, tuple[Detection2D, ...]]

INTRINSICS_FIELDS = ("fx", "fy", "cx", "cy", "width", "height")
FRAME_FIELDS = ("frame_id", "t", "rgb", "depth", "pose")
BOX_2D_FIELDS = ("x", "y", "w", "h", "label", "conf")
BOX_3D_FIELDS = ("min", "max", "material")


def _check_type(
    data: Any,
    expected: type,
    error: type[ParseError],
    source: Any,
    line: Optional[int] = None,
) -> None:
    if not isinstance(data, expected):
        raise error(
            source,
            f"expected {expected.__name__}, got {type(data).__name__}",
            line,
        )


def _require(
    record: dict[str, Any],
    names: tuple[str, ...],
    error: type[ParseError],
    source: Any,
    line: Optional[int] = None,
    context: str = "",
) -> None:
    for name in names:
        if name not in record:
            raise error(source, f"{context}missing field '{name}'", line)


def _read_json(path: PathLike, error: type[ParseError]) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exception:
        raise error(path, exception.msg, exception.lineno) from exception
    except OSError as exception:
        logger.exception("cannot read %s", path)
        raise error(path, exception) from exception


def _json_lines(
    path: PathLike, error: type[ParseError]
) -> Iterator[tuple[int, dict[str, Any]]]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exception:
        logger.exception("cannot read %s", path)
        raise error(path, exception) from exception
    for number, text in enumerate(lines, start=1):
        if not text.strip():
            continue
        try:
            record = json.loads(text)
        except json.JSONDecodeError as exception:
            raise error(path, exception.msg, number) from exception
        _check_type(record, dict, error, path, number)
        yield number, record


def _parse_intrinsics(raw: Any, path: PathLike) -> CameraIntrinsics:
    _check_type(raw, dict, ManifestError, path)
    _require(raw, INTRINSICS_FIELDS, ManifestError, path, context="intr: ")
    try:
        return CameraIntrinsics(
            float(raw["fx"]),
            float(raw["fy"]),
            float(raw["cx"]),
            float(raw["cy"]),
            int(raw["width"]),
            int(raw["height"]),
        )
    except (TypeError, ValueError, InvalidInputError) as exception:
        raise ManifestError(path, exception) from exception


def _parse_frame(raw: Any, index: int, path: PathLike) -> FrameRecord:
    _check_type(raw, dict, ManifestError, path)
    context = f"frame {index}: "
    _require(raw, FRAME_FIELDS, ManifestError, path, context=context)
    try:
        return FrameRecord(
            int(raw["frame_id"]),
            float(raw["t"]),
            str(raw["rgb"]),
            str(raw["depth"]),
            Pose.from_tum(raw["pose"]),
        )
    except (TypeError, ValueError, InvalidInputError) as exception:
        raise ManifestError(path, f"frame {index}: {exception}") from exception


def _parse_box_2d(
    raw: Any,
    frame_id: int,
    image_size: Optional[tuple[int, int]],
    path: PathLike,
    line: int,
) -> Detection2D:
    _check_type(raw, dict, DetectionsError, path, line)
    _require(raw, BOX_2D_FIELDS, DetectionsError, path, line)
    try:
        x, y, w, h = (float(raw[key]) for key in ("x", "y", "w", "h"))
        x0, y0 = max(0.0, x), max(0.0, y)
        x1, y1 = x + w, y + h
        if image_size is not None:
            width, height = image_size
            x1, y1 = min(float(width), x1), min(float(height), y1)
        material = raw.get("material")
        return Detection2D(
            frame_id,
            (x0, y0, x1 - x0, y1 - y0),
            str(raw["label"]),
            float(raw["conf"]),
            MaterialLabel.parse(material) if material is not None else None,
        )
    except (TypeError, ValueError, InvalidInputError) as exception:
        raise DetectionsError(path, exception, line) from exception


def load_detections(
    path: PathLike, image_size: Optional[tuple[int, int]] = None
) -> DetectionMap:
    """
    Parse a JSON-lines detections file, one frame per line.

    Each line is `{"frame_id": int, "boxes": [{x, y, w, h, label, conf,
    material?}]}`. Boxes are clamped to `[0, width] x [0, height]` when
    `image_size` is given, otherwise to the positive quadrant.

    :param path: detections file.
    :param image_size: `(width, height)` used for clamping.
    :raises DetectionsError: naming the offending line.
    :return: detections keyed by frame id.
    """
    detections: DetectionMap = {}
    for line, record in _json_lines(path, DetectionsError):
        _require(record, ("frame_id", "boxes"), DetectionsError, path, line)
        _check_type(record["boxes"], list, DetectionsError, path, line)
        try:
            frame_id = int(record["frame_id"])
        except (TypeError, ValueError) as exception:
            raise DetectionsError(path, exception, line) from exception
        if frame_id in detections:
            raise DetectionsError(path, f"frame {frame_id} repeated", line)
        detections[frame_id] = tuple(
            _parse_box_2d(raw, frame_id, image_size, path, line)
            for raw in record["boxes"]
        )
    logger.debug("loaded detections for %d frames", len(detections))
    return detections


def load_manifest(path: PathLike) -> Sequence:
    """
    Load and fully validate a sequence manifest.

    :raises ManifestError: on missing fields, non-increasing timestamps
     or detections of unknown frames.
    :raises DetectionsError: if the referenced detections file is bad.
    :return: the recorded sequence.
    """
    path = Path(path)
    raw = _read_json(path, ManifestError)
    _check_type(raw, dict, ManifestError, path)
    _require(raw, ("intrinsics", "frames"), ManifestError, path)
    intrinsics = _parse_intrinsics(raw["intrinsics"], path)
    _check_type(raw["frames"], list, ManifestError, path)
    frames = tuple(
        _parse_frame(item, index, path)
        for index, item in enumerate(raw["frames"])
    )
    detections: DetectionMap = {}
    detections_file = raw.get("detections")
    if detections_file is not None:
        detections = load_detections(
            path.parent / detections_file,
            (intrinsics.width, intrinsics.height),
        )
    known = {frame.frame_id for frame in frames}
    for frame_id in sorted(detections):
        if frame_id not in known:
            raise ManifestError(
                path, f"detections reference unknown frame_id {frame_id}"
            )
    floor_height = raw.get("floor_height")
    if floor_height is not None:
        if isinstance(floor_height, bool) or not isinstance(
            floor_height, (int, float)
        ):
            raise ManifestError(path, "floor_height must be a number")
        floor_height = float(floor_height)
    try:
        return Sequence(
            intrinsics,
            frames,
            detections,
            path.parent,
            detections_file,
            raw.get("groundtruth"),
            floor_height,
        )
    except InvalidInputError as exception:
        raise ManifestError(path, exception) from exception


def parse_box_record(
    record: dict[str, Any],
    id_key: str,
    error: type[ParseError],
    path: PathLike,
    line: int,
) -> BBox3D:
    """Build a `BBox3D` from one JSON-lines record."""
    _require(record, (id_key, *BOX_3D_FIELDS), error, path, line)
    try:
        return BBox3D.from_bounds(
            [float(c) for c in record["min"]],
            [float(c) for c in record["max"]],
            MaterialLabel.parse(record["material"]),
            object_label=str(record.get("label", "")),
            confidence=float(record.get("conf", 1.0)),
            source_frame=int(record.get("frame_id", -1)),
            box_id=int(record[id_key]),
        )
    except (TypeError, ValueError, InvalidInputError) as exception:
        raise error(path, exception, line) from exception


def box_record(box: BBox3D, id_key: str) -> dict[str, Any]:
    """Inverse of `parse_box_record`, in canonical key order."""
    return {
        id_key: box.box_id,
        "label": box.object_label,
        "material": box.material.display_name,
        "conf": box.confidence,
        "frame_id": box.source_frame,
        "min": box.lo.tolist(),
        "max": box.hi.tolist(),
    }


def load_boxes(path: PathLike) -> list[BBox3D]:
    """Load realized 3D boxes (`box_id`, `min`, `max`, `material`, ...)."""
    boxes = [
        parse_box_record(record, "box_id", ParseError, path, line)
        for line, record in _json_lines(path, ParseError)
    ]
    ids = [box.box_id for box in boxes]
    if len(set(ids)) != len(ids):
        raise ParseError(path, "duplicate box ids")
    return boxes


def load_groundtruth(path: PathLike) -> GroundTruthMap:
    """
    Load ground truth for evaluation.

    A `.ply` file is per-point ground truth (positions plus
    `material_id`); anything else is JSON-lines of labeled object boxes
    keyed by `object_id`.

    :raises GroundTruthError: if empty, malformed, or ids repeat.
    """
    path = Path(path)
    if path.suffix.lower() == ".ply":
        from matmap.ply import read_semantic_ply

        reference = read_semantic_ply(path)
        if len(reference) == 0:
            raise GroundTruthError(path, "no labeled points")
        return GroundTruthMap(
            points=reference.cloud.points, point_labels=reference.materials
        )
    boxes: list[BBox3D] = []
    seen: set[int] = set()
    for line, record in _json_lines(path, GroundTruthError):
        box = parse_box_record(
            record, "object_id", GroundTruthError, path, line
        )
        if box.box_id in seen:
            raise GroundTruthError(
                path, f"duplicate object id {box.box_id}", line
            )
        seen.add(box.box_id)
        boxes.append(box)
    if not boxes:
        raise GroundTruthError(path, "at least one labeled object required")
    return GroundTruthMap(boxes=tuple(boxes))


def _write_lines(path: PathLike, records: list[dict[str, Any]]) -> None:
    text = "".join(json.dumps(record) + "\n" for record in records)
    Path(path).write_text(text, encoding="utf-8")


def dump_detections(detections: DetectionMap, path: PathLike) -> None:
    """Write detections in canonical form, frames in id order."""
    records = []
    for frame_id in sorted(detections):
        boxes = []
        for det in detections[frame_id]:
            x, y, w, h = det.bbox
            item: dict[str, Any] = {
                "x": x,
                "y": y,
                "w": w,
                "h": h,
                "label": det.object_label,
                "conf": det.confidence,
            }
            if det.material is not None:
                item["material"] = det.material.display_name
            boxes.append(item)
        records.append({"frame_id": frame_id, "boxes": boxes})
    _write_lines(path, records)


def dump_boxes(boxes: list[BBox3D], path: PathLike) -> None:
    _write_lines(path, [box_record(box, "box_id") for box in boxes])


def dump_groundtruth(groundtruth: GroundTruthMap, path: PathLike) -> None:
    """Write object ground truth as JSON-lines keyed by `object_id`."""
    if groundtruth.kind != "objects":
        raise InvalidInputError(path, "only object ground truth is dumped")
    _write_lines(
        path, [box_record(box, "object_id") for box in groundtruth.boxes]
    )


def dump_manifest(
    sequence: Sequence, path: PathLike, with_detections: bool = True
) -> None:
    """
    Write a manifest in canonical form.

    Detections go to the sequence's detections file name (default
    `detections.jsonl`) next to the manifest.
    """
    path = Path(path)
    intr = sequence.intrinsics
    document: dict[str, Any] = {
        "intrinsics": {
            name: getattr(intr, name) for name in INTRINSICS_FIELDS
        },
        "frames": [
            frame.to_dict(
                exclude={"timestamp", "rgb_path", "depth_path", "pose"},
                include={
                    "t": frame.timestamp,
                    "rgb": frame.rgb_path,
                    "depth": frame.depth_path,
                    "pose": frame.pose.to_tum(),
                },
            )
            for frame in sequence.frames
        ],
    }
    if with_detections and (sequence.detections or sequence.detections_file):
        name = sequence.detections_file or "detections.jsonl"
        document["detections"] = name
        dump_detections(sequence.detections, path.parent / name)
    if sequence.groundtruth_file is not None:
        document["groundtruth"] = sequence.groundtruth_file
    if sequence.floor_height is not None:
        document["floor_height"] = sequence.floor_height
    path.write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
