"""Clustering and detection metrics of a semantic map."""

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional, Sequence, Union

import numpy as np

from matmap.constants import (
    DEFAULT_IOU_THRESHOLD,
    FLAT_AXIS_TOLERANCE,
    GT_BOX_MARGIN,
    STAGES,
    UNLABELED,
)
from matmap.exceptions import (
    DisjointPointSetsError,
    InvalidInputError,
    ShapeError,
)
from matmap.models import (
    AbstractModel,
    BBox3D,
    GroundTruthMap,
    MaterialLabel,
    SemanticMap,
)

logger = logging.getLogger(__name__)

N_LABELS = len(MaterialLabel)


def rasterize_groundtruth(
    points: np.ndarray,
    groundtruth: GroundTruthMap,
    margin: float = GT_BOX_MARGIN,
) -> np.ndarray:
    """
    Ground-truth material of every point, `UNLABELED` outside all boxes.

    Points inside several boxes take the smallest box (smallest id on
    equal volumes). Per-point ground truth must list the same points in
    the same order.

    :raises DisjointPointSetsError: if per-point positions differ.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if groundtruth.kind == "points":
        reference = groundtruth.points
        if reference.shape != points.shape or not np.allclose(
            reference, points, rtol=0.0, atol=1e-6
        ):
            raise DisjointPointSetsError()
        return np.asarray(groundtruth.point_labels, dtype=np.int64)
    labels = np.full(len(points), UNLABELED, dtype=np.int64)
    ordered = sorted(
        groundtruth.boxes, key=lambda box: (-box.volume, -box.box_id)
    )
    for box in ordered:
        labels[box.contains(points, margin)] = int(box.material)
    return labels


def label_iou(
    pred: np.ndarray, truth: np.ndarray
) -> dict[MaterialLabel, float]:
    """
    Per-class IoU of two aligned label arrays.

    Entries equal to `UNLABELED` in either array are ignored; classes
    absent from both are omitted.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ShapeError(truth.shape, pred.shape)
    keep = (pred != UNLABELED) & (truth != UNLABELED)
    pred, truth = pred[keep], truth[keep]
    scores: dict[MaterialLabel, float] = {}
    for label in MaterialLabel:
        in_pred = pred == label
        in_truth = truth == label
        union = int((in_pred | in_truth).sum())
        if union:
            scores[label] = int((in_pred & in_truth).sum()) / union
    return scores


def iou_per_class(
    pred: SemanticMap, groundtruth: GroundTruthMap
) -> dict[MaterialLabel, float]:
    """
    Point-set IoU of every material between a map and its ground truth.

    :raises DisjointPointSetsError: if no predicted point is covered by
     the ground truth.
    """
    truth = rasterize_groundtruth(pred.cloud.points, groundtruth)
    covered = truth != UNLABELED
    if not covered.any():
        raise DisjointPointSetsError()
    return label_iou(pred.materials.astype(np.int64)[covered], truth[covered])


def _interval_overlap(
    lo_a: np.ndarray, hi_a: np.ndarray, lo_b: np.ndarray, hi_b: np.ndarray
) -> np.ndarray:
    return np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b)


def box_iou_3d(a: BBox3D, b: BBox3D) -> float:
    """
    Volume IoU of two axis-aligned boxes.

    A zero-volume box scores 0 against any box, except against a box
    flat along the same axes at the same coordinates: those axes are
    then dropped and the boxes compare on the remaining ones.
    """
    overlap = _interval_overlap(a.lo, a.hi, b.lo, b.hi)
    extent_a = a.hi - a.lo
    extent_b = b.hi - b.lo
    flat = extent_a <= 0
    if (flat != (extent_b <= 0)).any():
        return 0.0
    if (np.abs(a.lo[flat] - b.lo[flat]) > FLAT_AXIS_TOLERANCE).any():
        return 0.0
    solid = ~flat
    if not solid.any():
        return 1.0
    intersection = float(np.prod(np.maximum(overlap[solid], 0.0)))
    union = (
        float(np.prod(extent_a[solid]))
        + float(np.prod(extent_b[solid]))
        - intersection
    )
    return intersection / union if union > 0 else 0.0


@dataclass(frozen=True, slots=True)
class Match(AbstractModel):
    box_id: int
    material: MaterialLabel
    confidence: float
    true_positive: bool
    gt_id: Optional[int] = None
    iou: float = 0.0


def match_detections(
    predictions: Sequence[BBox3D],
    groundtruth: Sequence[BBox3D],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> list[Match]:
    """
    Greedy matching of predicted boxes to ground-truth boxes.

    Predictions are visited by descending confidence (smallest id
    first on ties); each takes the unmatched same-material ground
    truth box of highest IoU and is a true positive if that IoU reaches
    the threshold.

    :raises InvalidInputError: if the threshold is outside (0, 1].
    :return: matches in visiting order.
    """
    if not 0 < iou_threshold <= 1:
        raise InvalidInputError(iou_threshold, "threshold not in (0, 1]")
    unmatched = sorted(groundtruth, key=lambda box: box.box_id)
    matches = []
    for box in sorted(predictions, key=lambda p: (-p.confidence, p.box_id)):
        best: Optional[BBox3D] = None
        best_iou = 0.0
        for candidate in unmatched:
            if candidate.material != box.material:
                continue
            iou = box_iou_3d(box, candidate)
            if best is None or iou > best_iou:
                best, best_iou = candidate, iou
        hit = best is not None and best_iou >= iou_threshold
        if hit:
            unmatched.remove(best)  # type: ignore
        matches.append(
            Match(
                box.box_id,
                box.material,
                box.confidence,
                hit,
                best.box_id if hit else None,  # type: ignore
                best_iou,
            )
        )
    return matches


def average_precision(true_positives: Sequence[bool], n_gt: int) -> float:
    """
    Area under the all-point interpolated precision-recall curve.

    :param true_positives: outcome of every prediction, by confidence.
    :param n_gt: number of ground-truth instances, at least one.
    """
    if n_gt < 1:
        raise InvalidInputError(n_gt, "at least one ground-truth instance")
    hits = np.asarray(true_positives, dtype=bool)
    if hits.size == 0:
        return 0.0
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = np.concatenate([[0.0], tp / n_gt, [1.0]])
    precision = np.concatenate([[0.0], tp / (tp + fp), [0.0]])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.flatnonzero(recall[1:] != recall[:-1])
    widths = recall[steps + 1] - recall[steps]
    return float((widths * precision[steps + 1]).sum())


def mean_average_precision(
    matches: Sequence[Match], groundtruth: Sequence[BBox3D]
) -> tuple[dict[MaterialLabel, float], Optional[float]]:
    """
    AP per material with ground truth, and their unweighted mean.

    Materials that only occur among predictions are left out.
    """
    n_gt = np.bincount(
        [int(box.material) for box in groundtruth], minlength=N_LABELS
    )
    per_class: dict[MaterialLabel, float] = {}
    for label in MaterialLabel:
        outcomes = [m.true_positive for m in matches if m.material == label]
        if n_gt[label] == 0:
            if outcomes:
                logger.warning(
                    "no ground truth for %s, excluded from mAP",
                    label.display_name,
                )
            continue
        per_class[label] = average_precision(outcomes, int(n_gt[label]))
    if not per_class:
        return per_class, None
    return per_class, float(np.mean(list(per_class.values())))


def confusion_matrix(
    pred: Sequence[Union[int, MaterialLabel]],
    truth: Sequence[Union[int, MaterialLabel]],
) -> np.ndarray:
    """
    11 x 11 counts, rows ground truth, columns prediction.

    :raises ShapeError: on length mismatch.
    """
    pred_array = np.asarray(pred, dtype=np.int64).reshape(-1)
    truth_array = np.asarray(truth, dtype=np.int64).reshape(-1)
    if pred_array.shape != truth_array.shape:
        raise ShapeError(truth_array.shape, pred_array.shape)
    counts = np.bincount(
        truth_array * N_LABELS + pred_array, minlength=N_LABELS * N_LABELS
    )
    return counts.reshape(N_LABELS, N_LABELS)


def object_predictions(
    semantic_map: SemanticMap,
    boxes: Sequence[BBox3D],
    margin: float = GT_BOX_MARGIN,
) -> list[MaterialLabel]:
    """Majority predicted material of the points inside every box."""
    labels = []
    for box in boxes:
        inside = semantic_map.materials[
            box.contains(semantic_map.cloud.points, margin)
        ]
        if inside.size == 0:
            labels.append(MaterialLabel.OTHER)
            continue
        counts = np.bincount(inside, minlength=N_LABELS)
        labels.append(MaterialLabel(int(counts.argmax())))
    return labels


class StageProfiler:
    """Wall-clock milliseconds per named stage, plus the total."""

    def __init__(self, stages: Sequence[str] = STAGES):
        self.timings: dict[str, float] = {name: 0.0 for name in stages}
        self._started: Optional[float] = None
        self.total_ms = 0.0

    def __enter__(self) -> "StageProfiler":
        self._started = time.perf_counter()
        return self

    def __exit__(self, *exc_info: Any) -> None:
        if self._started is not None:
            self.total_ms = (time.perf_counter() - self._started) * 1000.0

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        started = time.perf_counter()
        logger.debug("stage %s started", name)
        try:
            yield
        finally:
            elapsed = (time.perf_counter() - started) * 1000.0
            self.timings[name] = self.timings.get(name, 0.0) + elapsed
            logger.debug("stage %s took %.3f ms", name, elapsed)

    def profile_stages(self) -> dict[str, float]:
        """Per-stage milliseconds and their `total`."""
        return {**self.timings, "total": self.total_ms}


@dataclass
class ClassMetrics:
    iou: Optional[float] = None
    ap: Optional[float] = None
    n_gt: int = 0
    n_det: int = 0
    tp: int = 0
    fp: int = 0


@dataclass
class MetricsReport:
    """Everything reported for one map, serialized by `to_dict`."""

    per_class: dict[MaterialLabel, ClassMetrics] = field(default_factory=dict)
    mean_iou: Optional[float] = None
    map: Optional[float] = None
    n_objects: int = 0
    n_detections: int = 0
    groundtruth: Optional[str] = None
    confusion: Optional[np.ndarray] = None
    timings_ms: dict[str, float] = field(default_factory=dict)

    @property
    def tp(self) -> int:
        return sum(metrics.tp for metrics in self.per_class.values())

    @property
    def fp(self) -> int:
        return sum(metrics.fp for metrics in self.per_class.values())

    def to_dict(self, include_timings: bool = False) -> dict[str, Any]:
        data: dict[str, Any] = {
            "per_class": {
                label.display_name: {
                    "iou": metrics.iou,
                    "ap": metrics.ap,
                    "n_gt": metrics.n_gt,
                    "n_det": metrics.n_det,
                    "tp": metrics.tp,
                    "fp": metrics.fp,
                }
                for label, metrics in sorted(self.per_class.items())
            },
            "mean_iou": self.mean_iou,
            "map": self.map,
            "n_objects": self.n_objects,
            "n_detections": self.n_detections,
            "tp": self.tp,
            "fp": self.fp,
            "groundtruth": self.groundtruth,
        }
        if self.confusion is not None:
            data["confusion_matrix"] = self.confusion.tolist()
        if include_timings:
            data["timings_ms"] = dict(self.timings_ms)
        return data


def evaluate(
    semantic_map: SemanticMap,
    groundtruth: Optional[GroundTruthMap] = None,
    detections: Sequence[BBox3D] = (),
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> MetricsReport:
    """
    Build the metrics report of a map.

    Without ground truth only counts are filled in. Detection metrics
    need object ground truth.
    """
    report = MetricsReport(
        n_objects=semantic_map.n_clusters, n_detections=len(detections)
    )
    per_class = report.per_class
    for box in detections:
        per_class.setdefault(box.material, ClassMetrics()).n_det += 1
    if groundtruth is None:
        for box in detections:
            per_class[box.material].fp += 1
        return report
    report.groundtruth = groundtruth.kind
    if len(semantic_map):
        scores = iou_per_class(semantic_map, groundtruth)
        for label, score in scores.items():
            per_class.setdefault(label, ClassMetrics()).iou = score
        if scores:
            report.mean_iou = float(np.mean(list(scores.values())))
    if groundtruth.kind != "objects":
        for box in detections:
            per_class[box.material].fp += 1
        return report
    for box in groundtruth.boxes:
        per_class.setdefault(box.material, ClassMetrics()).n_gt += 1
    matches = match_detections(detections, groundtruth.boxes, iou_threshold)
    for match in matches:
        if match.true_positive:
            per_class[match.material].tp += 1
        else:
            per_class[match.material].fp += 1
    aps, report.map = mean_average_precision(matches, groundtruth.boxes)
    for label, ap in aps.items():
        per_class[label].ap = ap
    if len(semantic_map):
        report.confusion = confusion_matrix(
            object_predictions(semantic_map, groundtruth.boxes),
            [box.material for box in groundtruth.boxes],
        )
    return report
