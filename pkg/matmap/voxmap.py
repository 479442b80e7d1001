"""
Voxel-grid clustering of the accumulated cloud and material labeling.

Cells are addressed by integer triples `floor((p - origin) / scale)`.
Everything that has to be ordered (cells, clusters, boxes) is ordered
lexicographically or by id, so results do not depend on the number of
worker threads.
"""

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property, lru_cache
from itertools import product
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from matmap.config import Config, worker_count
from matmap.constants import (
    BOX_DEPTH_PERCENTILES,
    BOX_FUSION_IOU,
    BOX_MIN_DEPTH_EXTENT,
    CONNECTIVITIES,
    DEFAULT_CONNECTIVITY,
    DEFAULT_LABEL_CUTOFF,
    DEFAULT_MAX_DEPTH,
    DEFAULT_MIN_DEPTH,
    DEFAULT_PALETTE_PATH,
    DENSE_LOOKUP_LIMIT,
    FLAT_AXIS_TOLERANCE,
    MILLIMETERS_PER_METER,
    UNASSIGNED_CLUSTER,
)
from matmap.evaluation import box_iou_3d
from matmap.exceptions import (
    InvalidInputError,
    NoSupportError,
    ShapeError,
)
from matmap.geometry import transform_points
from matmap.models import (
    BBox3D,
    CameraIntrinsics,
    DepthImage,
    Detection2D,
    MaterialLabel,
    Palette,
    Point3,
    PointCloud,
    Pose,
    ScaleSet,
    Segmentation,
    SemanticMap,
)

logger = logging.getLogger(__name__)

CellIndex = tuple[int, int, int]
Origin = Union[Point3, Sequence[float], np.ndarray, None]
CellSimilarity = Callable[[np.ndarray, np.ndarray], np.ndarray]


@lru_cache(maxsize=1)
def default_palette() -> Palette:
    return Palette.from_file(DEFAULT_PALETTE_PATH)


def _origin_array(origin: Origin) -> np.ndarray:
    if origin is None:
        return np.zeros(3)
    if isinstance(origin, Point3):
        return origin.as_array()
    array = np.asarray(origin, dtype=np.float64).reshape(-1)
    if array.shape != (3,):
        raise InvalidInputError(origin, "origin needs three coordinates")
    return array


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """
    Partition of a cloud into cubic cells.

    `cell_keys` holds the occupied cells in lexicographic order and
    `point_cell[i]` is the row of `cell_keys` holding point `i`.
    """

    origin: np.ndarray
    scale: float
    points: np.ndarray
    cell_keys: np.ndarray
    point_cell: np.ndarray

    def __len__(self) -> int:
        return int(self.cell_keys.shape[0])

    @cached_property
    def cells(self) -> dict[CellIndex, list[int]]:
        """Cell index triple to the (ascending) indices of its points."""
        order = np.argsort(self.point_cell, kind="stable")
        bounds = np.searchsorted(
            self.point_cell[order], np.arange(len(self) + 1)
        )
        return {
            tuple(int(c) for c in key): order[lo:hi].tolist()
            for key, lo, hi in zip(self.cell_keys, bounds[:-1], bounds[1:])
        }

    @property
    def centers(self) -> np.ndarray:
        return self.origin + (self.cell_keys + 0.5) * self.scale

    def cell_of(self, point: np.ndarray) -> CellIndex:
        index = np.floor((np.asarray(point) - self.origin) / self.scale)
        return tuple(int(c) for c in index)  # type: ignore


def _cell_codes(
    keys: np.ndarray, low: np.ndarray, dims: np.ndarray
) -> np.ndarray:
    """Row-major integer code of every cell; preserves lexicographic order."""
    i, j, k = (keys - low).T
    return (i * dims[1] + j) * dims[2] + k


def voxelize(
    cloud: PointCloud, scale: float, origin: Origin = None
) -> VoxelGrid:
    """
    Bucket every point of the cloud into its grid cell.

    :param cloud: points to partition.
    :param scale: cell edge length in meters.
    :param origin: grid origin, the world origin by default.
    :raises InvalidInputError: if the scale is not positive.
    :return: grid with cells in lexicographic order.
    """
    if not scale > 0:
        raise InvalidInputError(scale, "scale must be positive")
    base = _origin_array(origin)
    points = cloud.points
    if len(cloud) == 0:
        empty = np.empty((0, 3), dtype=np.int64)
        return VoxelGrid(
            base, float(scale), points, empty, np.empty(0, np.int64)
        )
    indices = np.floor((points - base) / scale).astype(np.int64)
    low = indices.min(axis=0)
    dims = indices.max(axis=0) - low + 1
    codes = _cell_codes(indices, low, dims)
    _, first, inverse = np.unique(
        codes, return_index=True, return_inverse=True
    )
    return VoxelGrid(
        base,
        float(scale),
        points,
        indices[first],
        inverse.reshape(-1).astype(np.int64),
    )


def _majority_row(
    grid: VoxelGrid, box: BBox3D, candidates: Optional[np.ndarray] = None
) -> Optional[int]:
    """Row of the cell holding most points inside a box, smallest on ties."""
    if candidates is None:
        inside = np.flatnonzero(box.contains(grid.points))
    else:
        inside = candidates[box.contains(grid.points[candidates])]
    if inside.size == 0:
        return None
    rows, counts = np.unique(grid.point_cell[inside], return_counts=True)
    return int(rows[counts.argmax()])


def _cell_tuple(key: np.ndarray) -> CellIndex:
    return tuple(int(c) for c in key)  # type: ignore


def box_to_voxel(grid: VoxelGrid, box: BBox3D) -> CellIndex:
    """
    Cell holding most of the cloud points that fall inside a box.

    Ties go to the lexicographically smallest cell.

    :raises InvalidInputError: on an empty grid.
    :raises NoSupportError: if no point lies inside the box.
    """
    if len(grid) == 0:
        raise InvalidInputError("grid", "grid has no cells")
    row = _majority_row(grid, box)
    if row is None:
        raise NoSupportError(box.box_id)
    return _cell_tuple(grid.cell_keys[row])


def associate_boxes(
    grid: VoxelGrid, boxes: Iterable[BBox3D]
) -> dict[int, CellIndex]:
    """
    Map every box id to its majority cell.

    Points are sorted along x once; each box only tests the points of
    its own x slab. Boxes without supporting points fall back to the
    cell of their center.

    :raises InvalidInputError: if two boxes share an id.
    """
    boxes = list(boxes)
    seen: set[int] = set()
    for box in boxes:
        if box.box_id in seen:
            raise InvalidInputError(box.box_id, "box ids must be unique")
        seen.add(box.box_id)
    association: dict[int, CellIndex] = {}
    if len(grid) == 0:
        return association
    order = np.argsort(grid.points[:, 0], kind="stable")
    xs = grid.points[order, 0]
    for box in boxes:
        start = int(np.searchsorted(xs, box.lo[0], side="left"))
        stop = int(np.searchsorted(xs, box.hi[0], side="right"))
        row = _majority_row(grid, box, order[start:stop])
        if row is None:
            logger.warning("box %d has no support in the cloud", box.box_id)
            association[box.box_id] = grid.cell_of(box.center)
        else:
            association[box.box_id] = _cell_tuple(grid.cell_keys[row])
    return association


def anchor_clusters(
    segmentation: Segmentation,
    grid: VoxelGrid,
    associations: Mapping[int, CellIndex],
) -> dict[int, int]:
    """
    Cluster holding the majority cell of each box.

    :param grid: the grid the associations were computed on, over the
     segmented cloud.
    :return: cluster id to the smallest id of the boxes anchored in it.
    """
    if len(grid) == 0 or not associations:
        return {}
    if len(segmentation) != grid.points.shape[0]:
        raise ShapeError(grid.points.shape[0], len(segmentation))
    keys = grid.cell_keys
    low = keys.min(axis=0)
    dims = keys.max(axis=0) - low + 1
    codes = _cell_codes(keys, low, dims)
    member = np.empty(len(grid), dtype=np.int64)
    member[grid.point_cell] = np.arange(grid.points.shape[0])
    anchors: dict[int, int] = {}
    for box_id in sorted(associations):
        cell = np.asarray(associations[box_id], dtype=np.int64)
        if ((cell < low) | (cell >= low + dims)).any():
            continue
        code = _cell_codes(cell.reshape(1, 3), low, dims)[0]
        row = int(np.searchsorted(codes, code))
        if row == len(codes) or codes[row] != code:
            continue
        cluster = int(segmentation.labels[member[row]])
        if cluster != UNASSIGNED_CLUSTER:
            anchors.setdefault(cluster, box_id)
    return anchors


def sort_boxes(boxes: Iterable[BBox3D]) -> list[BBox3D]:
    return sorted(boxes, key=lambda box: box.box_id)


def _box_bounds(boxes: Sequence[BBox3D]) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([box.lo for box in boxes]).reshape(-1, 3)
    hi = np.array([box.hi for box in boxes]).reshape(-1, 3)
    return lo, hi


AxisValues = tuple[np.ndarray, Optional[np.ndarray]]


def _nearest_in_order(
    axes: list[AxisValues], n: int, lo: np.ndarray, hi: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """
    Position and squared distance of the closest box for `n` queries.

    Along every axis the query coordinates are `values[inverse]`, or
    `values` itself when `inverse` is `None`. The box gap is separable
    per axis, so a gap is computed once per distinct coordinate. Earlier
    boxes win ties.
    """
    best = np.full(n, np.inf)
    position = np.zeros(n, dtype=np.int64)
    for index in range(lo.shape[0]):
        squared = np.zeros(n)
        for axis, (values, inverse) in enumerate(axes):
            gap = np.maximum(
                np.maximum(lo[index, axis] - values, values - hi[index, axis]),
                0.0,
            )
            gap *= gap
            squared += gap if inverse is None else gap[inverse]
        closer = squared < best
        best[closer] = squared[closer]
        position[closer] = index
    return position, best


def nearest_boxes(
    points: np.ndarray, boxes: Sequence[BBox3D]
) -> tuple[np.ndarray, np.ndarray]:
    """
    Closest box of every point and the Euclidean distance to it, 0 inside.

    :param boxes: candidates; the returned positions index this sequence
     and the earlier box wins ties.
    :return: (N,) positions and (N,) distances.
    """
    query = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lo, hi = _box_bounds(boxes)
    axes: list[AxisValues] = [(query[:, axis], None) for axis in range(3)]
    position, squared = _nearest_in_order(axes, len(query), lo, hi)
    return position, np.sqrt(squared)


def nearest_box(
    query: Union[Point3, np.ndarray, Sequence[float]],
    boxes: Sequence[BBox3D],
) -> int:
    """
    Id of the box closest to a query point, the smallest id on ties.

    :raises InvalidInputError: if there are no boxes.
    """
    if not boxes:
        raise InvalidInputError("boxes", "no boxes to choose from")
    if isinstance(query, Point3):
        query = query.as_array()
    ordered = sort_boxes(boxes)
    position, _ = nearest_boxes(np.asarray(query), ordered)
    return ordered[int(position[0])].box_id


def provisional_labels(
    centers: np.ndarray, boxes: Sequence[BBox3D]
) -> np.ndarray:
    """Material of the nearest box for every query point, no cutoff."""
    if not boxes:
        return np.full(len(centers), MaterialLabel.OTHER, dtype=np.int64)
    ordered = sort_boxes(boxes)
    materials = np.array([int(box.material) for box in ordered])
    position, _ = nearest_boxes(centers, ordered)
    return materials[position]


def grid_labels(grid: VoxelGrid, boxes: Sequence[BBox3D]) -> np.ndarray:
    """
    Provisional label of every cell center of a grid.

    Same result as `provisional_labels(grid.centers, boxes)`; center
    coordinates repeat along each axis, so gaps are computed per
    distinct cell coordinate.
    """
    if not boxes or len(grid) == 0:
        return provisional_labels(grid.centers, boxes)
    keys = grid.cell_keys
    low = keys.min(axis=0)
    span = keys.max(axis=0) - low + 1
    if int(span.sum()) > 3 * len(grid):
        return provisional_labels(grid.centers, boxes)
    ordered = sort_boxes(boxes)
    materials = np.array([int(box.material) for box in ordered])
    axes: list[AxisValues] = []
    for axis in range(3):
        steps = np.arange(low[axis], low[axis] + span[axis])
        values = grid.origin[axis] + (steps + 0.5) * grid.scale
        axes.append((values, keys[:, axis] - low[axis]))
    lo, hi = _box_bounds(ordered)
    position, _ = _nearest_in_order(axes, len(grid), lo, hi)
    return materials[position]


class LabelSimilarity:
    """Adjacent cells are similar iff their provisional labels agree."""

    def __init__(self, cell_labels: np.ndarray):
        self.cell_labels = np.asarray(cell_labels)

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self.cell_labels[a] == self.cell_labels[b]


class ColorSimilarity:
    """Adjacent cells are similar iff their mean colors are close."""

    def __init__(self, cell_colors: np.ndarray, threshold: float):
        self.cell_colors = np.asarray(cell_colors, dtype=np.float64)
        self.threshold = threshold

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        difference = self.cell_colors[a] - self.cell_colors[b]
        return np.sqrt((difference**2).sum(axis=1)) <= self.threshold


class AllOf:
    def __init__(self, *predicates: CellSimilarity):
        self.predicates = predicates

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        passed = np.ones(len(a), dtype=bool)
        for predicate in self.predicates:
            passed &= predicate(a, b)
        return passed


@lru_cache(maxsize=None)
def neighbor_offsets(connectivity: int) -> np.ndarray:
    """
    Lexicographically positive half of the 6/18/26 neighborhood.

    The other half is reached by symmetry of the adjacency.
    """
    if connectivity not in CONNECTIVITIES:
        raise InvalidInputError(
            connectivity, f"connectivity must be one of {CONNECTIVITIES}"
        )
    max_nonzero = {6: 1, 18: 2, 26: 3}[connectivity]
    offsets = [
        offset
        for offset in product((-1, 0, 1), repeat=3)
        if offset > (0, 0, 0)
        and sum(1 for c in offset if c) <= max_nonzero
    ]
    return np.array(offsets, dtype=np.int64)


def _dense_first_seen(labels: np.ndarray) -> np.ndarray:
    """Renumber labels 0, 1, ... in order of first appearance."""
    if labels.size == 0:
        return labels.astype(np.int64)
    unique, first = np.unique(labels, return_index=True)
    mapping = np.empty(int(unique.max()) + 1, dtype=np.int64)
    mapping[unique[np.argsort(first)]] = np.arange(unique.size)
    return mapping[labels]


def cell_adjacency(
    grid: VoxelGrid, connectivity: int = DEFAULT_CONNECTIVITY
) -> tuple[np.ndarray, np.ndarray]:
    """
    All pairs of occupied adjacent cells, each pair once.

    Neighbors are found through a dense code-to-row table when the
    bounding block of the cells is small enough, by binary search over
    the sorted codes otherwise.

    :return: two parallel arrays of rows of `grid.cell_keys`.
    """
    offsets = neighbor_offsets(connectivity)
    keys = grid.cell_keys
    if len(grid) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    low = keys.min(axis=0)
    high = keys.max(axis=0)
    dims = high - low + 1
    codes = _cell_codes(keys, low, dims)
    table: Optional[np.ndarray] = None
    if int(np.prod(dims)) <= DENSE_LOOKUP_LIMIT:
        table = np.full(int(np.prod(dims)), -1, dtype=np.int64)
        table[codes] = np.arange(len(codes))
    sources, targets = [], []
    for offset in offsets:
        shifted = keys + offset
        inside = np.all((shifted >= low) & (shifted <= high), axis=1)
        candidates = np.flatnonzero(inside)
        wanted = _cell_codes(shifted[candidates], low, dims)
        if table is not None:
            position = table[wanted]
            found = position >= 0
        else:
            position = np.searchsorted(codes, wanted)
            position = np.minimum(position, len(codes) - 1)
            found = codes[position] == wanted
        sources.append(candidates[found])
        targets.append(position[found])
    return np.concatenate(sources), np.concatenate(targets)


def connected_components(
    grid: VoxelGrid,
    connectivity: int = DEFAULT_CONNECTIVITY,
    similarity: Optional[CellSimilarity] = None,
) -> Segmentation:
    """
    Group cells linked by chains of adjacent, similar cells.

    Cluster ids follow the first appearance over the lexicographic cell
    order.

    :param grid: voxelized cloud.
    :param connectivity: 6, 18 or 26 neighborhood.
    :param similarity: vectorized predicate over pairs of cell rows;
     every adjacent pair passes when omitted.
    :return: per-point segmentation.
    """
    if len(grid) == 0:
        return Segmentation(np.empty(0, dtype=np.int64), 0)
    sources, targets = cell_adjacency(grid, connectivity)
    if similarity is not None and sources.size:
        keep = similarity(sources, targets)
        sources, targets = sources[keep], targets[keep]
    n = len(grid)
    graph = sparse.coo_matrix(
        (np.ones(sources.size, dtype=np.int8), (sources, targets)),
        shape=(n, n),
    )
    n_components, components = csgraph.connected_components(
        graph, directed=False
    )
    cell_cluster = _dense_first_seen(components)
    return Segmentation(cell_cluster[grid.point_cell], int(n_components))


def merge_scales(
    segmentations: Sequence[Segmentation], base_labels: np.ndarray
) -> Segmentation:
    """
    Merge finest-scale clusters that share a coarser component.

    Two base clusters (the clusters of the last, finest segmentation)
    end up together iff a chain of coarser components links them and
    their labels agree. Final ids follow the smallest member base id.

    :param segmentations: per-scale segmentations, coarse to fine.
    :param base_labels: label of every finest-scale cluster.
    :raises ShapeError: on point count or label count mismatch.
    :return: merged segmentation.
    """
    if not segmentations:
        raise InvalidInputError("segmentations", "at least one required")
    base = segmentations[-1]
    labels = np.asarray(base_labels, dtype=np.int64)
    if labels.shape != (base.n_clusters,):
        raise ShapeError((base.n_clusters,), labels.shape)
    for segmentation in segmentations:
        if len(segmentation) != len(base):
            raise ShapeError(len(base), len(segmentation))
    if len(segmentations) == 1 or base.n_clusters == 0:
        return base
    k = base.n_clusters
    assigned = base.labels != UNASSIGNED_CLUSTER
    sources, targets = [], []
    offset = k
    for coarse in segmentations[:-1]:
        both = assigned & (coarse.labels != UNASSIGNED_CLUSTER)
        members = base.labels[both]
        n_labels = int(labels.max()) + 1
        groups = coarse.labels[both] * n_labels + labels[members]
        keys, node = np.unique(groups, return_inverse=True)
        sources.append(members)
        targets.append(node.reshape(-1) + offset)
        offset += keys.size
    edges_from = np.concatenate(sources)
    edges_to = np.concatenate(targets)
    graph = sparse.coo_matrix(
        (np.ones(edges_from.size, dtype=np.int8), (edges_from, edges_to)),
        shape=(offset, offset),
    )
    _, components = csgraph.connected_components(graph, directed=False)
    final = _dense_first_seen(components[:k])
    merged = np.full(len(base), UNASSIGNED_CLUSTER, dtype=np.int64)
    merged[assigned] = final[base.labels[assigned]]
    return Segmentation(merged, int(final.max()) + 1)


def _cell_means(grid: VoxelGrid, values: np.ndarray) -> np.ndarray:
    counts = np.bincount(grid.point_cell, minlength=len(grid))
    sums = np.stack(
        [
            np.bincount(grid.point_cell, weights=column, minlength=len(grid))
            for column in np.asarray(values, dtype=np.float64).T
        ],
        axis=1,
    )
    return sums / counts[:, None]


def _segment_scale(
    cloud: PointCloud,
    scale: float,
    boxes: Sequence[BBox3D],
    connectivity: int,
    origin: np.ndarray,
    color_threshold: Optional[float],
) -> tuple[Segmentation, np.ndarray]:
    grid = voxelize(cloud, scale, origin)
    cell_labels = grid_labels(grid, boxes)
    similarity: CellSimilarity = LabelSimilarity(cell_labels)
    if color_threshold is not None and cloud.colors is not None:
        similarity = AllOf(
            similarity,
            ColorSimilarity(_cell_means(grid, cloud.colors), color_threshold),
        )
    segmentation = connected_components(grid, connectivity, similarity)
    cluster_labels = np.empty(segmentation.n_clusters, dtype=np.int64)
    cluster_labels[segmentation.labels] = cell_labels[grid.point_cell]
    logger.debug(
        "scale %.3f: %d cells, %d clusters",
        scale,
        len(grid),
        segmentation.n_clusters,
    )
    return segmentation, cluster_labels


def mscc_segment(
    cloud: PointCloud,
    scales: Union[ScaleSet, Sequence[float]],
    boxes: Sequence[BBox3D],
    connectivity: int = DEFAULT_CONNECTIVITY,
    origin: Origin = None,
    color_threshold: Optional[float] = None,
    workers: Optional[int] = None,
) -> Segmentation:
    """
    Multi-scale connected-component segmentation.

    Every scale is labeled on its own, coarse to fine, with adjacent
    cells required to share the material of their nearest box. The
    finest components are then merged when a coarser component holds
    them together and their materials agree.

    :param cloud: accumulated world-frame cloud.
    :param scales: voxel sizes, strictly decreasing.
    :param boxes: material-labeled boxes for provisional labels.
    :param connectivity: 6, 18 or 26.
    :param origin: shared grid origin of all scales.
    :param color_threshold: optional max mean-color distance of
     adjacent cells.
    :param workers: threads for the per-scale passes,
     `MATMAP_WORKERS` by default.
    :return: final segmentation.
    """
    scale_set = scales if isinstance(scales, ScaleSet) else ScaleSet(
        tuple(float(s) for s in scales)
    )
    if len(cloud) == 0:
        return Segmentation(np.empty(0, dtype=np.int64), 0)
    base_origin = _origin_array(origin)
    boxes = sort_boxes(boxes)

    def run(scale: float) -> tuple[Segmentation, np.ndarray]:
        return _segment_scale(
            cloud, scale, boxes, connectivity, base_origin, color_threshold
        )

    threads = workers or worker_count(Config.WORKERS)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(run, scale_set))
    segmentations = [segmentation for segmentation, _ in results]
    return merge_scales(segmentations, results[-1][1])


def cluster_centroids(
    segmentation: Segmentation, cloud: PointCloud
) -> np.ndarray:
    """Mean point of every cluster as a (k, 3) array."""
    assigned = segmentation.labels != UNASSIGNED_CLUSTER
    labels = segmentation.labels[assigned]
    k = segmentation.n_clusters
    counts = np.bincount(labels, minlength=k)
    sums = np.stack(
        [
            np.bincount(labels, weights=column, minlength=k)
            for column in cloud.points[assigned].T
        ],
        axis=1,
    )
    return sums / np.maximum(counts, 1)[:, None]


def propagate_labels(
    segmentation: Segmentation,
    cloud: PointCloud,
    boxes: Sequence[BBox3D],
    cutoff: float = DEFAULT_LABEL_CUTOFF,
    palette: Optional[Palette] = None,
    anchors: Optional[Mapping[int, int]] = None,
) -> SemanticMap:
    """
    Give every cluster the material and object label of its nearest box.

    A cluster whose centroid is farther than `cutoff` from every box
    takes the box anchored in it, if any (see `anchor_clusters`), and
    `OTHER` otherwise. Unassigned points are `OTHER`.

    :param anchors: cluster id to the id of a box whose majority cell
     lies in that cluster.
    :raises ShapeError: if the segmentation does not cover the cloud.
    :return: colorized semantic map.
    """
    if len(segmentation) != len(cloud):
        raise ShapeError(len(cloud), len(segmentation))
    palette = palette or default_palette()
    k = segmentation.n_clusters
    cluster_materials = np.full(k, MaterialLabel.OTHER, dtype=np.uint8)
    cluster_objects: dict[int, str] = {}
    if not boxes:
        if k:
            logger.warning("no boxes, %d clusters labeled other", k)
    elif k:
        ordered = sort_boxes(boxes)
        by_id = {box.box_id: box for box in ordered}
        nearest, distances = nearest_boxes(
            cluster_centroids(segmentation, cloud), ordered
        )
        for cluster, (index, distance) in enumerate(zip(nearest, distances)):
            if distance <= cutoff:
                box = ordered[int(index)]
            elif anchors and anchors.get(cluster) in by_id:
                box = by_id[anchors[cluster]]
                logger.debug("cluster %d labeled by its anchor", cluster)
            else:
                continue
            cluster_materials[cluster] = box.material
            if box.object_label:
                cluster_objects[cluster] = box.object_label
    materials = np.full(len(cloud), MaterialLabel.OTHER, dtype=np.uint8)
    assigned = segmentation.labels != UNASSIGNED_CLUSTER
    materials[assigned] = cluster_materials[segmentation.labels[assigned]]
    uncolored = SemanticMap(
        cloud,
        segmentation.labels,
        materials,
        np.zeros((len(cloud), 3), dtype=np.uint8),
        cluster_objects,
    )
    return colorize(uncolored, palette)


def colorize(semantic_map: SemanticMap, palette: Palette) -> SemanticMap:
    """Recolor every point from its material, geometry untouched."""
    return SemanticMap(
        semantic_map.cloud,
        semantic_map.cluster_ids,
        semantic_map.materials,
        palette.table()[semantic_map.materials],
        dict(semantic_map.cluster_objects),
    )


def cluster_boxes(semantic_map: SemanticMap) -> list[BBox3D]:
    """Axis-aligned bounds of every cluster, ids equal to cluster ids."""
    boxes = []
    points = semantic_map.cloud.points
    for cluster in range(semantic_map.n_clusters):
        members = semantic_map.cluster_ids == cluster
        if not members.any():
            continue
        material = MaterialLabel(int(semantic_map.materials[members][0]))
        boxes.append(
            BBox3D.from_bounds(
                points[members].min(axis=0),
                points[members].max(axis=0),
                material,
                object_label=semantic_map.cluster_objects.get(cluster, ""),
                box_id=cluster,
            )
        )
    return boxes


def detection_pixels(
    detection: Detection2D, intr: CameraIntrinsics
) -> Optional[tuple[int, int, int, int]]:
    """
    Inclusive pixel range `(u0, v0, u1, v1)` whose centers lie inside a
    detection, clipped to the image; `None` if it holds no pixel.
    """
    x, y, w, h = detection.bbox
    u0 = max(0, int(np.ceil(x)))
    v0 = max(0, int(np.ceil(y)))
    u1 = min(intr.width - 1, int(np.floor(x + w)))
    v1 = min(intr.height - 1, int(np.floor(y + h)))
    if u1 < u0 or v1 < v0:
        return None
    return u0, v0, u1, v1


def realize_box(
    detection: Detection2D,
    depth: DepthImage,
    intr: CameraIntrinsics,
    pose: Pose,
    box_id: int,
    min_depth: float = DEFAULT_MIN_DEPTH,
    max_depth: float = DEFAULT_MAX_DEPTH,
    material: Optional[MaterialLabel] = None,
    floor_height: Optional[float] = None,
) -> Optional[BBox3D]:
    """
    Lift a 2D detection to a world-frame box.

    Uses the valid depths of the pixels whose centers fall inside the
    detection: the median places the lateral extent (bbox corners
    back-projected at that depth), the 10th to 90th percentiles give the
    extent along the optical axis, at least `BOX_MIN_DEPTH_EXTENT` deep.
    With a floor height, a box above the floor is extended down to it.

    :param material: overrides the detection's own material.
    :param floor_height: world z of the floor the objects stand on.
    :return: the box, or `None` without valid depth support.
    """
    pixels = detection_pixels(detection, intr)
    if pixels is None:
        return None
    u0, v0, u1, v1 = pixels
    x, y, w, h = detection.bbox
    patch = depth.values[v0 : v1 + 1, u0 : u1 + 1].reshape(-1)
    meters = patch.astype(np.float64) / MILLIMETERS_PER_METER
    valid = (patch != 0) & (meters >= min_depth) & (meters <= max_depth)
    meters = meters[valid]
    if meters.size == 0:
        return None
    median = float(np.median(meters))
    near, far = (
        float(d) for d in np.percentile(meters, BOX_DEPTH_PERCENTILES)
    )
    far = max(far, near + BOX_MIN_DEPTH_EXTENT)
    lateral_x = (np.array([x, x + w]) - intr.cx) * median / intr.fx
    lateral_y = (np.array([y, y + h]) - intr.cy) * median / intr.fy
    corners = np.array(list(product(lateral_x, lateral_y, (near, far))))
    world = transform_points(pose, corners)
    lo, hi = world.min(axis=0), world.max(axis=0)
    if floor_height is not None and hi[2] > floor_height:
        lo[2] = floor_height
    label = material if material is not None else detection.material
    return BBox3D.from_bounds(
        lo,
        hi,
        label if label is not None else MaterialLabel.OTHER,
        object_label=detection.object_label,
        confidence=detection.confidence,
        source_frame=detection.frame_id,
        box_id=box_id,
    )


def _touching_pairs(
    boxes: Sequence[BBox3D],
) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs `i < j` of boxes that intersect or touch."""
    lo, hi = _box_bounds(boxes)
    first, second = [np.empty(0, np.int64)], [np.empty(0, np.int64)]
    for i in range(len(boxes) - 1):
        overlap = np.minimum(hi[i], hi[i + 1 :]) - np.maximum(
            lo[i], lo[i + 1 :]
        )
        touching = (overlap >= -FLAT_AXIS_TOLERANCE).all(axis=1)
        partners = np.flatnonzero(touching) + i + 1
        first.append(np.full(partners.size, i, dtype=np.int64))
        second.append(partners)
    return np.concatenate(first), np.concatenate(second)


def fuse_boxes(
    boxes: Sequence[BBox3D], iou_threshold: float = BOX_FUSION_IOU
) -> list[BBox3D]:
    """
    Merge the boxes of one object seen from several keyframes.

    Boxes linked by a chain of pairs with IoU at or above the threshold
    form one object. Its box spans the per-axis median corners of the
    members and takes:

    - the material with the largest summed confidence, the smallest
      label on ties;
    - the most frequent object label, the first seen on ties;
    - the mean confidence and the earliest source frame.

    Objects are numbered from 0 in the order of their smallest member id.

    :raises InvalidInputError: if the threshold is outside (0, 1].
    """
    if not 0 < iou_threshold <= 1:
        raise InvalidInputError(iou_threshold, "threshold not in (0, 1]")
    ordered = sort_boxes(boxes)
    if not ordered:
        return []
    n = len(ordered)
    first, second = _touching_pairs(ordered)
    linked = np.array(
        [
            box_iou_3d(ordered[i], ordered[j]) >= iou_threshold
            for i, j in zip(first.tolist(), second.tolist())
        ],
        dtype=bool,
    )
    sources, targets = first[linked], second[linked]
    graph = sparse.coo_matrix(
        (np.ones(sources.size, dtype=np.int8), (sources, targets)),
        shape=(n, n),
    )
    _, components = csgraph.connected_components(graph, directed=False)
    groups = _dense_first_seen(components)
    fused = []
    for group in range(int(groups.max()) + 1):
        members = [ordered[i] for i in np.flatnonzero(groups == group)]
        materials = [int(box.material) for box in members]
        votes = np.bincount(
            materials,
            weights=[box.confidence for box in members],
            minlength=len(MaterialLabel),
        )
        if votes.max() <= 0:
            votes = np.bincount(materials, minlength=len(MaterialLabel))
        labels = Counter(box.object_label for box in members)
        fused.append(
            BBox3D.from_bounds(
                np.median([box.lo for box in members], axis=0),
                np.median([box.hi for box in members], axis=0),
                MaterialLabel(int(votes.argmax())),
                object_label=labels.most_common(1)[0][0],
                confidence=float(np.mean([b.confidence for b in members])),
                source_frame=min(box.source_frame for box in members),
                box_id=group,
            )
        )
        if len(members) > 1:
            logger.debug(
                "object %d fused from boxes %s",
                group,
                [box.box_id for box in members],
            )
    return fused
