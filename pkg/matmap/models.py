import json
import logging
import math
from abc import ABC
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np
from scipy.spatial.transform import Rotation

from matmap.constants import QUATERNION_NORM_TOLERANCE, UNASSIGNED_CLUSTER
from matmap.exceptions import ConfigurationError, InvalidInputError

logger = logging.getLogger(__name__)


def _frozen_array(values: Any, dtype: Any, shape_tail: tuple = ()) -> Any:
    array = np.array(values, dtype=dtype, copy=True)
    if shape_tail and array.size == 0:
        array = array.reshape((0, *shape_tail))
    array.setflags(write=False)
    return array


class AbstractModel(ABC):
    """Base model, from which any domain model should be inherited."""

    def to_dict(
        self,
        include: Optional[dict[str, Any]] = None,
        exclude: Optional[set[str]] = None,
    ) -> dict[str, Any]:
        """
        Create a dictionary representation of the model.

        :param exclude: set of model fields,
         which should be excluded from dictionary representation.
        :param include: set of model fields,
         which should be included into dictionary representation.

        :return: dictionary representation of the model.
        """

        data: dict[str, Any] = asdict(self)
        if exclude:
            for key in exclude:
                data.pop(key, None)
        if include:
            data.update(include)
        return data


class MaterialLabel(IntEnum):
    """Closed set of material classes, `OTHER` being the fallback."""

    CARDBOARD = 0
    CERAMIC = 1
    CLOTH = 2
    GLASS = 3
    METAL = 4
    PAPER = 5
    PLASTIC = 6
    RUBBER = 7
    SPONGE = 8
    WOOD = 9
    OTHER = 10

    @property
    def display_name(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str) -> "MaterialLabel":
        """
        Resolve a material string, case-insensitively.

        Strings outside the vocabulary map to `OTHER` with a warning.
        """
        try:
            return cls[str(name).strip().upper()]
        except KeyError:
            logger.warning("unknown material %r mapped to other", name)
            return cls.OTHER

    @classmethod
    def classes(cls) -> tuple["MaterialLabel", ...]:
        """The ten real material classes, without `OTHER`."""
        return tuple(label for label in cls if label is not cls.OTHER)


@dataclass(frozen=True, slots=True)
class Point3:
    """A point in meters; the frame is given by context."""

    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise InvalidInputError(self, "coordinates must be finite")

    @classmethod
    def from_array(cls, values: Any) -> "Point3":
        x, y, z = (float(c) for c in values)
        return cls(x, y, z)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True, slots=True)
class Pose:
    """
    Rigid camera-to-world transform.

    Serialized as `tx ty tz qx qy qz qw`, the TUM trajectory layout.
    """

    translation: tuple[float, float, float]
    rotation: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        values = (*self.translation, *self.rotation)
        if len(self.translation) != 3 or len(self.rotation) != 4:
            raise InvalidInputError(values, "pose needs 3 + 4 components")
        if not all(math.isfinite(v) for v in values):
            raise InvalidInputError(values, "pose must be finite")
        norm = math.sqrt(sum(q * q for q in self.rotation))
        if abs(norm - 1.0) > QUATERNION_NORM_TOLERANCE:
            raise InvalidInputError(
                self.rotation, f"quaternion norm {norm} is not 1"
            )

    @classmethod
    def identity(cls) -> "Pose":
        return cls((0.0, 0.0, 0.0), (0.0, 0.0, 0.0, 1.0))

    @classmethod
    def from_tum(cls, values: Any) -> "Pose":
        items = [float(v) for v in values]
        if len(items) != 7:
            raise InvalidInputError(items, "pose needs 7 values")
        tx, ty, tz, qx, qy, qz, qw = items
        return cls((tx, ty, tz), (qx, qy, qz, qw))

    def to_tum(self) -> list[float]:
        return [*self.translation, *self.rotation]

    @property
    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    @property
    def translation_vector(self) -> np.ndarray:
        return np.array(self.translation, dtype=np.float64)


@dataclass(frozen=True, slots=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError(self, "focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError(self, "image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError(self, "principal point outside image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0, 0, 1.0]]
        )


@dataclass(frozen=True, eq=False)
class DepthImage:
    """16-bit depth in millimeters, 0 meaning missing."""

    width: int
    height: int
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.size != self.width * self.height:
            raise InvalidInputError(
                values.shape,
                f"expected {self.width}x{self.height} depth values",
            )
        array = _frozen_array(
            values.reshape(self.height, self.width), np.uint16
        )
        object.__setattr__(self, "values", array)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Points as an (N, 3) float array with optional (N, 3) uint8 colors."""

    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        points = _frozen_array(self.points, np.float64, (3,))
        if points.ndim != 2 or points.shape[1] != 3:
            raise InvalidInputError(points.shape, "points must be (N, 3)")
        if not np.isfinite(points).all():
            raise InvalidInputError("point cloud", "points must be finite")
        object.__setattr__(self, "points", points)
        if self.colors is not None:
            colors = _frozen_array(self.colors, np.uint8, (3,))
            if colors.shape != points.shape:
                raise InvalidInputError(
                    colors.shape, "colors must be parallel to points"
                )
            object.__setattr__(self, "colors", colors)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.empty((0, 3)), np.empty((0, 3), dtype=np.uint8))

    @classmethod
    def concatenate(cls, clouds: list["PointCloud"]) -> "PointCloud":
        """Join clouds in order; colors are kept only if all have them."""
        if not clouds:
            return cls.empty()
        points = np.concatenate([c.points for c in clouds])
        if all(c.colors is not None for c in clouds):
            colors = np.concatenate([c.colors for c in clouds])  # type: ignore
            return cls(points, colors)
        return cls(points)


@dataclass(frozen=True, slots=True)
class BBox3D(AbstractModel):
    """Axis-aligned, material-labeled box in the world frame."""

    min_corner: Point3
    max_corner: Point3
    material: MaterialLabel
    object_label: str = ""
    confidence: float = 1.0
    source_frame: int = -1
    box_id: int = 0
    degenerate: bool = False

    def __post_init__(self) -> None:
        if not isinstance(self.material, MaterialLabel):
            raise InvalidInputError(
                self.box_id, f"material {self.material!r} is not a label"
            )
        lo, hi = self.lo, self.hi
        if (lo > hi).any():
            raise InvalidInputError(self.box_id, "min corner exceeds max")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidInputError(self.box_id, "confidence not in [0, 1]")
        if not self.degenerate and (hi - lo <= 0).any():
            raise InvalidInputError(
                self.box_id, "zero volume box needs the degenerate flag"
            )

    @classmethod
    def from_bounds(
        cls, lo: Any, hi: Any, material: MaterialLabel, **kwargs: Any
    ) -> "BBox3D":
        """Build a box from corner arrays, flagging zero extents."""
        lo_arr = np.asarray(lo, dtype=np.float64)
        hi_arr = np.asarray(hi, dtype=np.float64)
        kwargs.setdefault("degenerate", bool((hi_arr - lo_arr <= 0).any()))
        return cls(
            Point3.from_array(lo_arr),
            Point3.from_array(hi_arr),
            material,
            **kwargs,
        )

    @property
    def lo(self) -> np.ndarray:
        return self.min_corner.as_array()

    @property
    def hi(self) -> np.ndarray:
        return self.max_corner.as_array()

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Inclusive point-in-box test for an (N, 3) array."""
        return np.all(
            (points >= self.lo - margin) & (points <= self.hi + margin),
            axis=1,
        )


@dataclass(frozen=True, slots=True)
class Detection2D(AbstractModel):
    """2D detection in pixels: top-left corner plus width and height."""

    frame_id: int
    bbox: tuple[float, float, float, float]
    object_label: str
    confidence: float
    material: Optional[MaterialLabel] = None

    def __post_init__(self) -> None:
        _, _, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise InvalidInputError(self.bbox, "width and height must be > 0")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidInputError(self.confidence, "not in [0, 1]")

    def clamped(self, width: int, height: int) -> "Detection2D":
        """Clamp the box to `[0, width] x [0, height]`."""
        x, y, w, h = self.bbox
        x0, y0 = max(0.0, x), max(0.0, y)
        x1, y1 = min(float(width), x + w), min(float(height), y + h)
        return Detection2D(
            self.frame_id,
            (x0, y0, x1 - x0, y1 - y0),
            self.object_label,
            self.confidence,
            self.material,
        )


@dataclass(frozen=True, slots=True)
class FrameRecord(AbstractModel):
    """One recorded RGB-D frame with its camera pose."""

    frame_id: int
    timestamp: float
    rgb_path: str
    depth_path: str
    pose: Pose


@dataclass(frozen=True, eq=False)
class Sequence:
    """A validated recording: camera, ordered frames, detections."""

    intrinsics: CameraIntrinsics
    frames: tuple[FrameRecord, ...]
    detections: dict[int, tuple[Detection2D, ...]] = field(
        default_factory=dict
    )
    base_dir: Path = Path(".")
    detections_file: Optional[str] = None
    groundtruth_file: Optional[str] = None
    floor_height: Optional[float] = None

    def __post_init__(self) -> None:
        ids = [frame.frame_id for frame in self.frames]
        if len(set(ids)) != len(ids):
            raise InvalidInputError(ids, "frame ids must be unique")
        stamps = [frame.timestamp for frame in self.frames]
        if any(a >= b for a, b in zip(stamps, stamps[1:])):
            raise InvalidInputError(
                "timestamps", "must be strictly increasing"
            )
        dangling = sorted(set(self.detections) - set(ids))
        if dangling:
            raise InvalidInputError(
                f"frame_id {dangling[0]}", "detections reference no frame"
            )

    def resolve(self, relative: str) -> Path:
        return self.base_dir / relative

    def frame_detections(self, frame_id: int) -> tuple[Detection2D, ...]:
        return self.detections.get(frame_id, ())


@dataclass(frozen=True, eq=False)
class GroundTruthMap:
    """
    Ground truth as labeled object boxes, or as per-point labels.

    Exactly one representation is present; `kind` names it.
    """

    boxes: tuple[BBox3D, ...] = ()
    points: Optional[np.ndarray] = None
    point_labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.points is not None:
            if self.point_labels is None:
                raise InvalidInputError("points", "labels are missing")
            points = _frozen_array(self.points, np.float64, (3,))
            labels = _frozen_array(self.point_labels, np.int64)
            if labels.shape != (points.shape[0],):
                raise InvalidInputError(
                    labels.shape, "one label per reference point required"
                )
            valid = {int(label) for label in MaterialLabel}
            if not set(np.unique(labels).tolist()) <= valid:
                raise InvalidInputError("labels", "not material labels")
            object.__setattr__(self, "points", points)
            object.__setattr__(self, "point_labels", labels)

    @property
    def kind(self) -> str:
        return "points" if self.points is not None else "objects"

    def __len__(self) -> int:
        if self.points is not None:
            return int(self.points.shape[0])
        return len(self.boxes)


@dataclass(frozen=True, slots=True)
class ScaleSet:
    """Voxel edge lengths, strictly decreasing, coarse to fine."""

    scales: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.scales:
            raise InvalidInputError(self.scales, "at least one scale needed")
        if any(s <= 0 for s in self.scales):
            raise InvalidInputError(self.scales, "scales must be positive")
        if any(a <= b for a, b in zip(self.scales, self.scales[1:])):
            raise InvalidInputError(self.scales, "must strictly decrease")

    def __iter__(self) -> Iterator[float]:
        return iter(self.scales)

    def __len__(self) -> int:
        return len(self.scales)


@dataclass(frozen=True, eq=False)
class Segmentation:
    """Cluster id per point, `-1` for unassigned points."""

    labels: np.ndarray
    n_clusters: int

    def __post_init__(self) -> None:
        labels = _frozen_array(self.labels, np.int64)
        if labels.ndim != 1:
            raise InvalidInputError(labels.shape, "labels must be 1-D")
        assigned = labels[labels != UNASSIGNED_CLUSTER]
        if (assigned < 0).any() or (assigned >= self.n_clusters).any():
            raise InvalidInputError("labels", "ids outside [0, k)")
        if np.unique(assigned).size != self.n_clusters:
            raise InvalidInputError("labels", "cluster ids are not dense")
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True, eq=False)
class Palette:
    """Total, injective map from material label to an RGB triple."""

    colors: dict[MaterialLabel, tuple[int, int, int]]

    def __post_init__(self) -> None:
        missing = [
            m.display_name for m in MaterialLabel if m not in self.colors
        ]
        if missing:
            raise ConfigurationError("palette", f"missing {missing}")
        for label, color in self.colors.items():
            if len(color) != 3 or not all(0 <= c <= 255 for c in color):
                raise ConfigurationError(
                    "palette", f"bad color {color} for {label.display_name}"
                )
        if len(set(map(tuple, self.colors.values()))) != len(self.colors):
            raise ConfigurationError("palette", "colors must be distinct")

    @classmethod
    def from_file(cls, path: Path) -> "Palette":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exception:
            raise ConfigurationError("palette", str(exception)) from exception
        colors: dict[MaterialLabel, tuple[int, int, int]] = {}
        for name, color in raw.items():
            try:
                label = MaterialLabel[name.upper()]
            except KeyError:
                raise ConfigurationError("palette", f"unknown label {name}")
            colors[label] = tuple(int(c) for c in color)  # type: ignore
        return cls(colors)

    def table(self) -> np.ndarray:
        """Colors as an (11, 3) uint8 lookup table indexed by label id."""
        return np.array(
            [self.colors[label] for label in MaterialLabel], dtype=np.uint8
        )

    def __call__(self, label: MaterialLabel) -> tuple[int, int, int]:
        return self.colors[label]


@dataclass(frozen=True, eq=False)
class SemanticMap:
    """
    Final map: every point carries a cluster id, a material, a color.

    Object labels are kept per cluster; `object_labels` expands them.
    """

    cloud: PointCloud
    cluster_ids: np.ndarray
    materials: np.ndarray
    colors: np.ndarray
    cluster_objects: dict[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.cloud)
        cluster_ids = _frozen_array(self.cluster_ids, np.int64)
        materials = _frozen_array(self.materials, np.uint8)
        colors = _frozen_array(self.colors, np.uint8, (3,))
        if cluster_ids.shape != (n,) or materials.shape != (n,):
            raise InvalidInputError(n, "per-point arrays must match points")
        if colors.shape != (n, 3):
            raise InvalidInputError(colors.shape, "colors must be (N, 3)")
        if materials.size and materials.max() > max(MaterialLabel):
            raise InvalidInputError("materials", "not material labels")
        clustered = cluster_ids != UNASSIGNED_CLUSTER
        keys = np.unique(
            cluster_ids[clustered] * 16 + materials[clustered]
        )
        if np.unique(keys // 16).size != keys.size:
            raise InvalidInputError(
                "materials", "a cluster carries more than one material"
            )
        object.__setattr__(self, "cluster_ids", cluster_ids)
        object.__setattr__(self, "materials", materials)
        object.__setattr__(self, "colors", colors)

    def __len__(self) -> int:
        return len(self.cloud)

    @classmethod
    def unlabeled(cls, cloud: PointCloud, palette: Palette) -> "SemanticMap":
        """Wrap a raw cloud: no clusters, every point `OTHER`."""
        n = len(cloud)
        materials = np.full(n, MaterialLabel.OTHER, dtype=np.uint8)
        return cls(
            cloud,
            np.full(n, UNASSIGNED_CLUSTER, dtype=np.int64),
            materials,
            palette.table()[materials],
        )

    @property
    def n_clusters(self) -> int:
        ids = self.cluster_ids[self.cluster_ids != UNASSIGNED_CLUSTER]
        return int(np.unique(ids).size)

    @property
    def object_labels(self) -> list[Optional[str]]:
        return [self.cluster_objects.get(int(c)) for c in self.cluster_ids]
