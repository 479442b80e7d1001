"""
Mapping of a recorded sequence, keyframe by keyframe.

Every keyframe is read, its detections get a material, its depth is
back-projected into the world cloud and its detections are lifted to
3D boxes. Boxes of the same object seen from several keyframes are fused, the
accumulated cloud is segmented and every cluster is labeled once at the
end; `incremental` runs additionally re-segment after every keyframe.
"""

import json
import logging
import os
import shutil
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Union

import numpy as np
from tqdm import tqdm

from matmap.cafusion import ToyMaterialClassifier, ToyModel
from matmap.config import Config, RunConfig
from matmap.constants import (
    BOXES_FILE_NAME,
    DEFAULT_IOU_THRESHOLD,
    MAP_FILE_NAME,
    METRICS_FILE_NAME,
    MILLIMETERS_PER_METER,
    PROFILE_FILE_NAME,
)
from matmap.evaluation import MetricsReport, StageProfiler, evaluate
from matmap.exceptions import ConfigurationError, PipelineStageError
from matmap.geometry import depth_to_cloud
from matmap.models import (
    BBox3D,
    DepthImage,
    Detection2D,
    FrameRecord,
    GroundTruthMap,
    MaterialLabel,
    Palette,
    PointCloud,
    Segmentation,
    SemanticMap,
    Sequence,
)
from matmap.ply import read_depth_pgm, read_ply, read_rgb_ppm
from matmap.ply import read_semantic_ply, write_ply
from matmap.sequence_io import (
    dump_boxes,
    load_boxes,
    load_groundtruth,
    load_manifest,
)
from matmap.voxmap import (
    CellIndex,
    anchor_clusters,
    associate_boxes,
    cluster_boxes,
    detection_pixels,
    fuse_boxes,
    mscc_segment,
    propagate_labels,
    realize_box,
    voxelize,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class RunResult:
    """
    Outcome of a run.

    `boxes` are the fused object boxes, `realized` the per-detection
    boxes they were fused from, `associations` the finest-scale cell
    of every object box.
    """

    semantic_map: SemanticMap
    boxes: list[BBox3D]
    report: MetricsReport
    associations: dict[int, CellIndex] = field(default_factory=dict)
    realized: list[BBox3D] = field(default_factory=list)


@contextmanager
def _stage(profiler: StageProfiler, name: str) -> Iterator[None]:
    """Time a stage and tag every error raised inside it."""
    with profiler.stage(name):
        try:
            yield
        except PipelineStageError:
            raise
        except Exception as exception:
            logger.exception("stage %s failed", name)
            raise PipelineStageError(name, exception) from exception


class MaterialSource:
    """Material of a detection: as recorded, or from the toy classifier."""

    def __init__(
        self,
        classifier: Optional[ToyMaterialClassifier] = None,
    ):
        self.classifier = classifier

    @classmethod
    def from_config(cls, config: RunConfig) -> "MaterialSource":
        if config.classifier == "passthrough":
            return cls()
        model = (
            ToyModel.load(config.cafn_weights)
            if config.cafn_weights is not None
            else ToyModel.seeded(config.seed)
        )
        return cls(ToyMaterialClassifier(model))

    def __call__(
        self,
        detection: Detection2D,
        depth: DepthImage,
        rgb: np.ndarray,
        sequence: Sequence,
    ) -> MaterialLabel:
        if self.classifier is None:
            if detection.material is None:
                logger.warning(
                    "detection %s in frame %d has no material",
                    detection.object_label,
                    detection.frame_id,
                )
                return MaterialLabel.OTHER
            return detection.material
        pixels = detection_pixels(detection, sequence.intrinsics)
        if pixels is None:
            return MaterialLabel.OTHER
        u0, v0, u1, v1 = pixels
        crop_rgb = rgb[v0 : v1 + 1, u0 : u1 + 1]
        crop_depth = (
            depth.values[v0 : v1 + 1, u0 : u1 + 1].astype(np.float64)
            / MILLIMETERS_PER_METER
        )
        label, _ = self.classifier(crop_rgb, crop_depth)
        return label


@dataclass
class _Mapped:
    semantic_map: SemanticMap
    objects: list[BBox3D]
    associations: dict[int, CellIndex]


def _segment_and_label(
    cloud: PointCloud,
    realized: list[BBox3D],
    config: RunConfig,
    palette: Palette,
    profiler: StageProfiler,
) -> _Mapped:
    with _stage(profiler, "fuse"):
        objects = fuse_boxes(realized)
    with _stage(profiler, "segment"):
        segmentation: Segmentation = mscc_segment(
            cloud,
            config.scales,
            objects,
            config.connectivity,
            config.origin,
            config.color_threshold,
            config.workers,
        )
        finest = voxelize(cloud, config.scales[-1], config.origin)
        associations = associate_boxes(finest, objects)
        anchors = anchor_clusters(segmentation, finest, associations)
    with _stage(profiler, "label"):
        semantic_map = propagate_labels(
            segmentation,
            cloud,
            objects,
            config.label_cutoff,
            palette,
            anchors,
        )
    return _Mapped(semantic_map, objects, associations)


def _load_groundtruth(
    config: RunConfig, sequence: Sequence
) -> Optional[GroundTruthMap]:
    if config.groundtruth is not None:
        return load_groundtruth(config.groundtruth)
    if sequence.groundtruth_file is not None:
        path = sequence.resolve(sequence.groundtruth_file)
        if path.is_file():
            return load_groundtruth(path)
        logger.warning("ground truth %s not found, skipping metrics", path)
    return None


def write_metrics(
    report: MetricsReport, path: PathLike, include_timings: bool = False
) -> None:
    Path(path).write_text(
        json.dumps(report.to_dict(include_timings), indent=2) + "\n",
        encoding="utf-8",
    )


def write_profile(timings: dict[str, float], path: PathLike) -> None:
    Path(path).write_text(
        json.dumps({"timings_ms": timings}, indent=2) + "\n",
        encoding="utf-8",
    )


@contextmanager
def staged_outputs(output: Path) -> Iterator[Path]:
    """
    Scratch directory next to `output` for a run's artifacts.

    The files are moved into `output` only when the block succeeds; the
    scratch directory is removed in any case.

    :raises PipelineStageError: tagged `write` on any failure.
    """
    staging: Optional[Path] = None
    try:
        output.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(
            tempfile.mkdtemp(prefix=f".{output.name}-", dir=output.parent)
        )
        yield staging
        output.mkdir(exist_ok=True)
        for item in sorted(staging.iterdir()):
            os.replace(item, output / item.name)
    except Exception as exception:
        logger.exception("writing %s failed", output)
        raise PipelineStageError("write", exception) from exception
    finally:
        if staging is not None:
            shutil.rmtree(staging, ignore_errors=True)


def run(config: RunConfig) -> RunResult:
    """
    Map a recorded sequence and write its artifacts.

    All inputs (manifest, detections, ground truth, palette, classifier
    weights) are loaded before the first frame is touched; the output
    files appear in the output directory only after all of them were
    written.

    :param config: validated run configuration with a manifest.
    :raises ConfigurationError: without a manifest.
    :raises ParseError: on malformed inputs.
    :raises PipelineStageError: on any error inside a stage.
    :return: the map, the object boxes and the metrics.
    """
    if config.manifest is None:
        raise ConfigurationError("manifest", "a manifest is required")
    sequence = load_manifest(config.manifest)
    groundtruth = _load_groundtruth(config, sequence)
    palette = Palette.from_file(config.palette)
    materials = MaterialSource.from_config(config)
    keyframes = sequence.frames[:: config.keyframe_interval]
    floor_height = (
        config.floor_height
        if config.floor_height is not None
        else sequence.floor_height
    )

    clouds: list[PointCloud] = []
    realized: list[BBox3D] = []
    with StageProfiler() as profiler:
        for frame in tqdm(
            keyframes,
            desc="Processing keyframes",
            colour="green",
            disable=not Config.PROGRESS,
        ):
            _process_keyframe(
                frame,
                sequence,
                config,
                materials,
                profiler,
                clouds,
                realized,
                floor_height,
            )
            if config.incremental:
                with _stage(profiler, "accumulate"):
                    partial = PointCloud.concatenate(clouds)
                _segment_and_label(
                    partial, realized, config, palette, profiler
                )
        with _stage(profiler, "accumulate"):
            cloud = PointCloud.concatenate(clouds)
        mapped = _segment_and_label(
            cloud, realized, config, palette, profiler
        )
    semantic_map = mapped.semantic_map
    report = evaluate(
        semantic_map, groundtruth, mapped.objects, config.iou_threshold
    )
    report.timings_ms = profiler.profile_stages()

    output = Path(config.output_dir)
    with staged_outputs(output) as staging:
        write_ply(semantic_map, staging / MAP_FILE_NAME, allow_empty=True)
        write_metrics(
            report, staging / METRICS_FILE_NAME, config.include_timings
        )
        dump_boxes(mapped.objects, staging / BOXES_FILE_NAME)
        write_profile(report.timings_ms, staging / PROFILE_FILE_NAME)
    logger.info(
        "mapped %d keyframes: %d points, %d clusters, %d objects "
        "from %d boxes",
        len(keyframes),
        len(semantic_map),
        semantic_map.n_clusters,
        len(mapped.objects),
        len(realized),
    )
    return RunResult(
        semantic_map,
        mapped.objects,
        report,
        mapped.associations,
        realized,
    )


def _process_keyframe(
    frame: FrameRecord,
    sequence: Sequence,
    config: RunConfig,
    materials: MaterialSource,
    profiler: StageProfiler,
    clouds: list[PointCloud],
    boxes: list[BBox3D],
    floor_height: Optional[float] = None,
) -> None:
    intr = sequence.intrinsics
    with _stage(profiler, "ingest"):
        depth = read_depth_pgm(sequence.resolve(frame.depth_path), intr)
        rgb = read_rgb_ppm(sequence.resolve(frame.rgb_path), intr)
        detections = sequence.frame_detections(frame.frame_id)
    with _stage(profiler, "classify"):
        labels = [materials(det, depth, rgb, sequence) for det in detections]
    with _stage(profiler, "accumulate"):
        clouds.append(
            depth_to_cloud(
                depth,
                intr,
                frame.pose,
                config.stride,
                config.min_depth,
                config.max_depth,
                rgb,
            )
        )
    with _stage(profiler, "realize"):
        for detection, label in zip(detections, labels):
            box = realize_box(
                detection,
                depth,
                intr,
                frame.pose,
                len(boxes),
                config.min_depth,
                config.max_depth,
                label,
                floor_height,
            )
            if box is None:
                logger.warning(
                    "detection %s in frame %d has no depth support",
                    detection.object_label,
                    frame.frame_id,
                )
                continue
            boxes.append(box)


def segment(
    cloud_path: PathLike,
    boxes_path: PathLike,
    config: RunConfig,
    output: Optional[PathLike] = None,
) -> SemanticMap:
    """
    Segment and label a stored cloud with stored boxes.

    :param cloud_path: PLY with the accumulated cloud.
    :param boxes_path: JSON-lines boxes, as written by `run`.
    :param config: scales, connectivity, cutoff and palette.
    :param output: PLY destination, nothing written if `None`.
    """
    cloud = read_ply(cloud_path)
    boxes = load_boxes(boxes_path)
    palette = Palette.from_file(config.palette)
    profiler = StageProfiler()
    semantic_map = _segment_and_label(
        cloud, boxes, config, palette, profiler
    ).semantic_map
    if output is not None:
        write_ply(semantic_map, output, allow_empty=True)
    return semantic_map


def evaluate_files(
    prediction_path: PathLike,
    groundtruth_path: PathLike,
    boxes_path: Optional[PathLike] = None,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    output: Optional[PathLike] = None,
) -> MetricsReport:
    """
    Score a labeled PLY against ground truth.

    Detections come from `boxes_path` when given, otherwise from the
    bounds of the map's clusters.
    """
    semantic_map = read_semantic_ply(prediction_path)
    groundtruth = load_groundtruth(groundtruth_path)
    detections = (
        load_boxes(boxes_path)
        if boxes_path is not None
        else cluster_boxes(semantic_map)
    )
    report = evaluate(semantic_map, groundtruth, detections, iou_threshold)
    if output is not None:
        write_metrics(report, output)
    return report


def report_summary(report: MetricsReport) -> str:
    """Short human-readable summary of a metrics report."""
    data: dict[str, Any] = report.to_dict()
    lines = [
        f"objects {data['n_objects']}",
        f"detections {data['n_detections']} "
        f"(tp {data['tp']}, fp {data['fp']})",
    ]
    if report.mean_iou is not None:
        lines.append(f"mean IoU {report.mean_iou:.4f}")
    if report.map is not None:
        lines.append(f"mAP {report.map:.4f}")
    return "\n".join(lines) + "\n"
