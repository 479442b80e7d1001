import logging
import math
import time
from collections import deque
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matmap.constants import UNASSIGNED_CLUSTER
from matmap.exceptions import InvalidInputError, NoSupportError, ShapeError
from matmap.models import (
    CameraIntrinsics,
    DepthImage,
    Detection2D,
    MaterialLabel,
    PointCloud,
    Pose,
    Segmentation,
)
from matmap.voxmap import (
    anchor_clusters,
    associate_boxes,
    box_to_voxel,
    cluster_boxes,
    colorize,
    connected_components,
    fuse_boxes,
    grid_labels,
    merge_scales,
    mscc_segment,
    nearest_box,
    nearest_boxes,
    neighbor_offsets,
    propagate_labels,
    provisional_labels,
    realize_box,
    voxelize,
)
from tests.conftest import make_box, random_boxes, random_cloud

WOOD = MaterialLabel.WOOD
METAL = MaterialLabel.METAL


def same_partition(a, b):
    """Equal up to a renaming of cluster ids."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        return False
    forward, backward = {}, {}
    for x, y in zip(a.tolist(), b.tolist()):
        if forward.setdefault(x, y) != y or backward.setdefault(y, x) != x:
            return False
    return True


def box_gap(point, box):
    """Squared distance from a point to a box, summed axis by axis."""
    total = 0.0
    for x, lo, hi in zip(point, box.lo.tolist(), box.hi.tolist()):
        gap = max(lo - x, x - hi, 0.0)
        total += gap * gap
    return total


def brute_force_nearest(point, boxes):
    """Closest box, scanning boxes by ascending id; first minimum wins."""
    best, found = None, None
    for box in sorted(boxes, key=lambda b: b.box_id):
        squared = box_gap(point, box)
        if best is None or squared < best:
            best, found = squared, box
    return found, best


def brute_force_labels(centers, boxes):
    return [
        int(brute_force_nearest(center, boxes)[0].material)
        for center in np.asarray(centers).tolist()
    ]


def flood_fill(points, scale, boxes, connectivity=26):
    """Breadth-first labeling over a dict of occupied cells."""
    keys = np.floor(points / scale).astype(np.int64)
    cells = {}
    for index, key in enumerate(map(tuple, keys.tolist())):
        cells.setdefault(key, []).append(index)
    ordered = sorted(cells)
    centers = (np.array(ordered, dtype=np.float64) + 0.5) * scale
    cell_label = dict(zip(ordered, brute_force_labels(centers, boxes)))
    max_nonzero = {6: 1, 18: 2, 26: 3}[connectivity]
    steps = [
        d
        for d in product((-1, 0, 1), repeat=3)
        if 0 < sum(1 for c in d if c) <= max_nonzero
    ]
    component = {}
    n = 0
    for start in ordered:
        if start in component:
            continue
        component[start] = n
        queue = deque([start])
        while queue:
            cell = queue.popleft()
            for d in steps:
                other = (cell[0] + d[0], cell[1] + d[1], cell[2] + d[2])
                if (
                    other in cells
                    and other not in component
                    and cell_label[other] == cell_label[cell]
                ):
                    component[other] = n
                    queue.append(other)
        n += 1
    labels = np.empty(len(points), dtype=np.int64)
    for key, members in cells.items():
        labels[members] = component[key]
    base_labels = {component[key]: cell_label[key] for key in ordered}
    return labels, base_labels


def transitive_merge(points, scales, boxes):
    """Union-find over base clusters per the cross-scale merge rule."""
    per_scale = [flood_fill(points, scale, boxes) for scale in scales]
    base, base_label = per_scale[-1]
    parent = list(range(max(base_label) + 1))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for coarse, _ in per_scale[:-1]:
        first_seen = {}
        for point in range(len(points)):
            key = (coarse[point], base_label[base[point]])
            other = first_seen.setdefault(key, base[point])
            parent[find(base[point])] = find(other)
    return np.array([find(c) for c in base])


def test_voxelize_orders_cells_lexicographically():
    cloud = PointCloud([[0.5, 0.5, 0.5], [-0.5, 0.1, 0.1], [0.6, 0.6, 0.4]])
    grid = voxelize(cloud, 1.0)
    assert grid.cell_keys.tolist() == [[-1, 0, 0], [0, 0, 0]]
    assert grid.point_cell.tolist() == [1, 0, 1]
    assert grid.cells == {(-1, 0, 0): [1], (0, 0, 0): [0, 2]}


def test_voxelize_respects_origin():
    cloud = PointCloud([[0.2, 0.2, 0.2]])
    grid = voxelize(cloud, 0.5, origin=(0.25, 0.0, 0.0))
    assert grid.cell_keys.tolist() == [[-1, 0, 0]]


def test_voxelize_rejects_bad_scale():
    with pytest.raises(InvalidInputError):
        voxelize(PointCloud([[0, 0, 0]]), 0.0)


def test_voxelize_matches_floor_division():
    rng = np.random.default_rng(8)
    points = rng.uniform(-3.0, 3.0, (1000, 3))
    origin = (0.13, -0.2, 0.05)
    grid = voxelize(PointCloud(points), 0.3, origin)
    keys = grid.cell_keys[grid.point_cell]
    for point, key in zip(points.tolist(), keys.tolist()):
        expected = [
            math.floor((c - o) / 0.3) for c, o in zip(point, origin)
        ]
        assert key == expected
    rows = [tuple(key) for key in grid.cell_keys.tolist()]
    assert rows == sorted(set(rows))


@pytest.mark.parametrize("connectivity, count", [(6, 3), (18, 9), (26, 13)])
def test_neighbor_offsets_are_half_neighborhoods(connectivity, count):
    assert len(neighbor_offsets(connectivity)) == count


def test_neighbor_offsets_rejects_other_connectivity():
    with pytest.raises(InvalidInputError):
        neighbor_offsets(8)


def test_box_to_voxel_majority_cell():
    cloud = PointCloud(
        [[0.1, 0.1, 0.1], [1.1, 0.1, 0.1], [1.2, 0.2, 0.2], [5, 5, 5]]
    )
    grid = voxelize(cloud, 1.0)
    box = make_box([0, 0, 0], [2, 1, 1])
    assert box_to_voxel(grid, box) == (1, 0, 0)


def test_box_to_voxel_tie_goes_to_smallest_cell():
    cloud = PointCloud([[1.5, 0.5, 0.5], [0.5, 0.5, 0.5]])
    grid = voxelize(cloud, 1.0)
    assert box_to_voxel(grid, make_box([0, 0, 0], [2, 1, 1])) == (0, 0, 0)


def test_box_to_voxel_without_support():
    grid = voxelize(PointCloud([[0.5, 0.5, 0.5]]), 1.0)
    with pytest.raises(NoSupportError):
        box_to_voxel(grid, make_box([3, 3, 3], [4, 4, 4], box_id=9))


def test_associate_boxes_falls_back_to_center():
    grid = voxelize(PointCloud([[0.5, 0.5, 0.5]]), 1.0)
    association = associate_boxes(
        grid,
        [
            make_box([0, 0, 0], [1, 1, 1]),
            make_box([3, 3, 3], [4, 4, 4], box_id=1),
        ],
    )
    assert association == {0: (0, 0, 0), 1: (3, 3, 3)}


def test_associate_boxes_rejects_duplicate_ids():
    grid = voxelize(PointCloud([[0.5, 0.5, 0.5]]), 1.0)
    boxes = [make_box([0, 0, 0], [1, 1, 1]), make_box([2, 2, 2], [3, 3, 3])]
    with pytest.raises(InvalidInputError, match="unique"):
        associate_boxes(grid, boxes)


def test_associate_boxes_matches_box_to_voxel():
    rng = np.random.default_rng(31)
    cloud = random_cloud(rng, 2000)
    boxes = random_boxes(rng, 12)
    grid = voxelize(cloud, 0.2)
    association = associate_boxes(grid, boxes)
    for box in boxes:
        if box.contains(cloud.points).any():
            assert association[box.box_id] == box_to_voxel(grid, box)
        else:
            assert association[box.box_id] == grid.cell_of(box.center)


def test_box_rejects_plain_integer_material():
    with pytest.raises(InvalidInputError, match="material"):
        make_box([0, 0, 0], [1, 1, 1], 1)


def test_nearest_box_prefers_smallest_id_on_ties():
    boxes = [
        make_box([2, 0, 0], [3, 1, 1], box_id=5),
        make_box([-3, 0, 0], [-2, 1, 1], box_id=2),
    ]
    assert nearest_box([0.0, 0.5, 0.5], boxes) == 2


def test_nearest_box_matches_exhaustive_search():
    rng = np.random.default_rng(99)
    boxes = random_boxes(rng, 20)
    ids = rng.permutation(100)[:20]
    boxes = [
        make_box(box.lo, box.hi, box.material, int(box_id))
        for box, box_id in zip(boxes, ids)
    ]
    queries = rng.uniform(-1.0, 3.0, (50, 3))
    for query in queries:
        expected, _ = brute_force_nearest(query.tolist(), boxes)
        assert nearest_box(query, boxes) == expected.box_id


def test_nearest_boxes_distance_is_zero_inside():
    boxes = [make_box([0, 0, 0], [1, 1, 1]), make_box([3, 0, 0], [4, 1, 1])]
    positions, distances = nearest_boxes(
        np.array([[0.5, 0.5, 0.5], [2.0, 0.5, 0.5], [5.0, 0.5, 0.5]]), boxes
    )
    assert positions.tolist() == [0, 0, 1]
    np.testing.assert_allclose(distances, [0.0, 1.0, 1.0])


def test_provisional_labels_match_exhaustive_search():
    rng = np.random.default_rng(6)
    boxes = random_boxes(rng, 7)
    centers = rng.uniform(-0.5, 2.5, (300, 3))
    labels = provisional_labels(centers, boxes)
    assert labels.tolist() == brute_force_labels(centers, boxes)


@pytest.mark.parametrize("origin", [None, (0.07, -0.3, 0.11)])
def test_grid_labels_equal_labels_of_cell_centers(origin):
    rng = np.random.default_rng(14)
    for _ in range(20):
        cloud = random_cloud(rng)
        boxes = random_boxes(rng, int(rng.integers(1, 8)))
        grid = voxelize(cloud, float(rng.choice([0.05, 0.1, 0.3])), origin)
        np.testing.assert_array_equal(
            grid_labels(grid, boxes), provisional_labels(grid.centers, boxes)
        )


def test_grid_labels_sparse_grid():
    cloud = PointCloud([[0.0, 0.0, 0.0], [50.0, 50.0, 50.0]])
    grid = voxelize(cloud, 0.1)
    boxes = [
        make_box([0, 0, 0], [1, 1, 1], WOOD, 0),
        make_box([49, 49, 49], [50, 50, 50], METAL, 1),
    ]
    assert grid_labels(grid, boxes).tolist() == [WOOD, METAL]


def test_connected_components_two_blobs():
    points = [[0.1, 0.1, 0.1], [0.3, 0.1, 0.1], [2.1, 0.1, 0.1]]
    grid = voxelize(PointCloud(points), 0.25)
    segmentation = connected_components(grid, 26)
    assert segmentation.n_clusters == 2
    assert segmentation.labels.tolist() == [0, 0, 1]


def test_connectivity_changes_diagonal_links():
    points = [[0.5, 0.5, 0.5], [1.5, 1.5, 0.5]]
    grid = voxelize(PointCloud(points), 1.0)
    assert connected_components(grid, 6).n_clusters == 2
    assert connected_components(grid, 18).n_clusters == 1


def test_mscc_separates_blobs_at_both_scales():
    rng = np.random.default_rng(3)
    first = rng.uniform([0.1, 0.1, 0.1], [0.15, 0.15, 0.15], (20, 3))
    second = rng.uniform([0.45, 0.45, 0.45], [0.5, 0.5, 0.5], (20, 3))
    cloud = PointCloud(np.vstack([first, second]))
    boxes = [
        make_box([0.1] * 3, [0.15] * 3, WOOD, 0),
        make_box([0.45] * 3, [0.5] * 3, METAL, 1),
    ]
    segmentation = mscc_segment(cloud, (0.4, 0.1), boxes)
    assert segmentation.n_clusters == 2
    assert len(set(segmentation.labels[:20])) == 1
    assert len(set(segmentation.labels[20:])) == 1


def test_mscc_merges_fragments_held_together_by_a_coarse_scale():
    points = np.array([[0.05, 0.05, 0.05], [0.3, 0.05, 0.05]])
    box = make_box([0, 0, 0], [0.4, 0.1, 0.1], WOOD)
    fine = mscc_segment(PointCloud(points), (0.1,), [box])
    both = mscc_segment(PointCloud(points), (0.4, 0.1), [box])
    assert fine.n_clusters == 2
    assert both.n_clusters == 1


def test_mscc_keeps_different_materials_apart():
    points = np.array([[0.05, 0.05, 0.05], [0.15, 0.05, 0.05]])
    boxes = [
        make_box([0, 0, 0], [0.1, 0.1, 0.1], WOOD, 0),
        make_box([0.1, 0, 0], [0.2, 0.1, 0.1], METAL, 1),
    ]
    segmentation = mscc_segment(PointCloud(points), (0.4, 0.1), boxes)
    assert segmentation.n_clusters == 2


def test_mscc_empty_cloud():
    segmentation = mscc_segment(PointCloud.empty(), (0.4, 0.2), [])
    assert segmentation.n_clusters == 0
    assert len(segmentation) == 0


def test_mscc_rejects_increasing_scales():
    with pytest.raises(InvalidInputError):
        mscc_segment(PointCloud([[0, 0, 0]]), (0.1, 0.2), [])


def test_mscc_matches_flood_fill_oracle():
    rng = np.random.default_rng(2024)
    started = time.perf_counter()
    for _ in range(200):
        cloud = random_cloud(rng)
        boxes = random_boxes(rng, int(rng.integers(1, 6)))
        scale = float(rng.choice([0.1, 0.2, 0.3]))
        connectivity = int(rng.choice([6, 18, 26]))
        segmentation = mscc_segment(cloud, (scale,), boxes, connectivity)
        expected, _ = flood_fill(cloud.points, scale, boxes, connectivity)
        assert same_partition(segmentation.labels, expected)
    assert time.perf_counter() - started < 10.0


def test_mscc_matches_transitive_merge_oracle():
    rng = np.random.default_rng(77)
    scale_sets = [(0.4, 0.1), (0.5, 0.2), (0.6, 0.3, 0.1), (0.4, 0.2, 0.05)]
    for _ in range(200):
        cloud = random_cloud(rng, 300)
        boxes = random_boxes(rng, int(rng.integers(1, 6)))
        scales = scale_sets[int(rng.integers(len(scale_sets)))]
        segmentation = mscc_segment(cloud, scales, boxes)
        expected = transitive_merge(cloud.points, scales, boxes)
        assert same_partition(segmentation.labels, expected)


def test_mscc_does_not_depend_on_worker_count():
    rng = np.random.default_rng(5)
    cloud = random_cloud(rng)
    boxes = random_boxes(rng, 4)
    single = mscc_segment(cloud, (0.4, 0.2, 0.1), boxes, workers=1)
    pooled = mscc_segment(cloud, (0.4, 0.2, 0.1), boxes, workers=3)
    np.testing.assert_array_equal(single.labels, pooled.labels)


def test_mscc_cluster_count_shrinks_with_coarser_scales():
    rng = np.random.default_rng(21)
    scales = (0.8, 0.4, 0.2, 0.1)
    for _ in range(30):
        cloud = random_cloud(rng, 300)
        boxes = random_boxes(rng, int(rng.integers(1, 5)))
        counts = [
            mscc_segment(cloud, scales[k:], boxes).n_clusters
            for k in range(len(scales))
        ]
        assert counts == sorted(counts)


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    shift=st.tuples(*[st.integers(-8, 8)] * 3),
)
def test_mscc_is_translation_equivariant(seed, shift):
    rng = np.random.default_rng(seed)
    scales = (0.5, 0.25)
    cloud = random_cloud(rng, 200)
    boxes = random_boxes(rng, 3)
    offset = np.array(shift, dtype=np.float64) * scales[0]
    moved_boxes = [
        make_box(b.lo + offset, b.hi + offset, b.material, b.box_id)
        for b in boxes
    ]
    moved = PointCloud(cloud.points + offset)
    before = mscc_segment(cloud, scales, boxes)
    after = mscc_segment(moved, scales, moved_boxes)
    assert same_partition(before.labels, after.labels)


def test_merge_scales_identity_for_one_scale():
    base = Segmentation(np.array([0, 1, 1]), 2)
    assert merge_scales([base], np.array([3, 4])) is base


def test_merge_scales_shape_mismatch():
    coarse = Segmentation(np.array([0, 0]), 1)
    base = Segmentation(np.array([0, 1, 1]), 2)
    with pytest.raises(ShapeError):
        merge_scales([coarse, base], np.array([1, 1]))
    with pytest.raises(ShapeError):
        merge_scales([base], np.array([1]))


def test_merge_scales_requires_agreeing_labels():
    coarse = Segmentation(np.array([0, 0, 0]), 1)
    base = Segmentation(np.array([0, 1, 2]), 3)
    merged = merge_scales([coarse, base], np.array([5, 6, 5]))
    assert merged.labels.tolist() == [0, 1, 0]


def test_propagate_labels_nearest_box_and_cutoff(palette):
    cloud = PointCloud([[0.5, 0.5, 0.5], [0.6, 0.5, 0.5], [9, 9, 9]])
    segmentation = Segmentation(np.array([0, 0, 1]), 2)
    box = make_box([0, 0, 0], [1, 1, 1], METAL, object_label="robot")
    semantic_map = propagate_labels(
        segmentation, cloud, [box], 0.5, palette
    )
    assert semantic_map.materials.tolist() == [METAL, METAL, 10]
    assert semantic_map.object_labels == ["robot", "robot", None]
    assert tuple(semantic_map.colors[0]) == palette(METAL)


def test_propagate_labels_without_boxes(palette, caplog):
    caplog.set_level(logging.WARNING, logger="matmap")
    cloud = PointCloud([[0, 0, 0]])
    semantic_map = propagate_labels(
        Segmentation(np.array([0]), 1), cloud, [], palette=palette
    )
    assert semantic_map.materials.tolist() == [MaterialLabel.OTHER]
    assert "no boxes" in caplog.text


def test_propagate_labels_keeps_unassigned_points(palette):
    cloud = PointCloud([[0, 0, 0], [1, 1, 1]])
    segmentation = Segmentation(np.array([0, UNASSIGNED_CLUSTER]), 1)
    box = make_box([0, 0, 0], [0.1, 0.1, 0.1], WOOD)
    semantic_map = propagate_labels(segmentation, cloud, [box], 1.0, palette)
    assert semantic_map.cluster_ids.tolist() == [0, UNASSIGNED_CLUSTER]
    assert semantic_map.materials.tolist() == [WOOD, MaterialLabel.OTHER]


def test_propagate_labels_shape_mismatch(palette):
    with pytest.raises(ShapeError):
        propagate_labels(
            Segmentation(np.array([0]), 1),
            PointCloud([[0, 0, 0], [1, 1, 1]]),
            [],
            palette=palette,
        )


def test_propagate_labels_matches_exhaustive_search():
    rng = np.random.default_rng(42)
    cutoff = 0.5
    for _ in range(20):
        points = rng.uniform(0.0, 4.0, (60, 3))
        clusters = rng.permutation(np.arange(60) % 5)
        boxes = random_boxes(rng, 3)
        semantic_map = propagate_labels(
            Segmentation(clusters, 5), PointCloud(points), boxes, cutoff
        )
        for cluster in range(5):
            centroid = points[clusters == cluster].mean(axis=0)
            box, squared = brute_force_nearest(centroid.tolist(), boxes)
            expected = (
                box.material
                if math.sqrt(squared) <= cutoff
                else MaterialLabel.OTHER
            )
            members = semantic_map.materials[clusters == cluster]
            assert set(members.tolist()) == {int(expected)}


def line_of_points():
    xs = np.arange(0.05, 10.0, 0.1)
    return PointCloud(np.column_stack([xs, np.full_like(xs, 0.5), xs * 0]))


def test_anchor_clusters_map_cluster_to_box():
    cloud = line_of_points()
    segmentation = Segmentation(np.zeros(len(cloud), dtype=np.int64), 1)
    grid = voxelize(cloud, 0.1)
    boxes = [
        make_box([0, 0, -0.1], [0.5, 1, 0.1], METAL, 4),
        make_box([0, 0, -0.1], [0.3, 1, 0.1], WOOD, 2),
        make_box([20, 20, 20], [21, 21, 21], WOOD, 7),
    ]
    anchors = anchor_clusters(
        segmentation, grid, associate_boxes(grid, boxes)
    )
    assert anchors == {0: 2}


def test_anchor_clusters_skip_unassigned_points():
    cloud = PointCloud([[0.5, 0.5, 0.5]])
    segmentation = Segmentation(np.array([UNASSIGNED_CLUSTER]), 0)
    grid = voxelize(cloud, 1.0)
    assert anchor_clusters(segmentation, grid, {0: (0, 0, 0)}) == {}


def test_anchor_clusters_shape_mismatch():
    grid = voxelize(PointCloud([[0.5, 0.5, 0.5]]), 1.0)
    with pytest.raises(ShapeError):
        anchor_clusters(
            Segmentation(np.array([0, 0]), 1), grid, {0: (0, 0, 0)}
        )


def test_anchored_cluster_beyond_cutoff_takes_its_box(palette):
    cloud = line_of_points()
    segmentation = Segmentation(np.zeros(len(cloud), dtype=np.int64), 1)
    box = make_box([0, 0, -0.1], [0.5, 1, 0.1], METAL, 3, object_label="rod")
    plain = propagate_labels(segmentation, cloud, [box], 0.5, palette)
    anchored = propagate_labels(
        segmentation, cloud, [box], 0.5, palette, {0: 3}
    )
    assert set(plain.materials.tolist()) == {MaterialLabel.OTHER}
    assert set(anchored.materials.tolist()) == {METAL}
    assert anchored.cluster_objects == {0: "rod"}


def test_unknown_anchor_is_ignored(palette):
    cloud = line_of_points()
    segmentation = Segmentation(np.zeros(len(cloud), dtype=np.int64), 1)
    box = make_box([0, 0, -0.1], [0.5, 1, 0.1], METAL, 3)
    semantic_map = propagate_labels(
        segmentation, cloud, [box], 0.5, palette, {0: 8}
    )
    assert set(semantic_map.materials.tolist()) == {MaterialLabel.OTHER}


def test_colorize_follows_palette(palette):
    cloud = PointCloud([[0, 0, 0]])
    semantic_map = propagate_labels(
        Segmentation(np.array([0]), 1),
        cloud,
        [make_box([0, 0, 0], [1, 1, 1], WOOD)],
        palette=palette,
    )
    recolored = colorize(semantic_map, palette)
    assert tuple(recolored.colors[0]) == palette(WOOD)
    assert recolored.materials.tolist() == semantic_map.materials.tolist()


def test_cluster_boxes_cover_clusters(palette):
    cloud = PointCloud([[0, 0, 0], [1, 2, 3], [5, 5, 5]])
    semantic_map = propagate_labels(
        Segmentation(np.array([0, 0, 1]), 2),
        cloud,
        [make_box([0, 0, 0], [1, 2, 3], WOOD)],
        palette=palette,
    )
    boxes = cluster_boxes(semantic_map)
    assert [box.box_id for box in boxes] == [0, 1]
    np.testing.assert_allclose(boxes[0].hi, [1, 2, 3])
    assert boxes[0].material is WOOD
    assert boxes[1].degenerate


INTR = CameraIntrinsics(100.0, 100.0, 10.0, 10.0, 21, 21)


def test_realize_box_constant_depth_has_minimum_thickness():
    depth = DepthImage(21, 21, np.full((21, 21), 2000, dtype=np.uint16))
    detection = Detection2D(0, (5.0, 5.0, 10.0, 10.0), "desk", 0.7, WOOD)
    box = realize_box(detection, depth, INTR, Pose.identity(), 4)
    np.testing.assert_allclose(box.lo, [-0.1, -0.1, 2.0])
    np.testing.assert_allclose(box.hi, [0.1, 0.1, 2.02])
    assert not box.degenerate
    assert box.material is WOOD
    assert (box.box_id, box.confidence, box.object_label) == (4, 0.7, "desk")


def test_realize_box_without_depth():
    depth = DepthImage(21, 21, np.zeros((21, 21), dtype=np.uint16))
    detection = Detection2D(0, (5.0, 5.0, 10.0, 10.0), "desk", 0.7, WOOD)
    assert realize_box(detection, depth, INTR, Pose.identity(), 0) is None


def test_realize_box_material_override():
    depth = DepthImage(21, 21, np.full((21, 21), 1000, dtype=np.uint16))
    detection = Detection2D(0, (0.0, 0.0, 4.0, 4.0), "chair", 1.0)
    box = realize_box(
        detection, depth, INTR, Pose.identity(), 0, material=METAL
    )
    assert box.material is METAL


def test_realize_box_extends_to_the_floor():
    depth = DepthImage(21, 21, np.full((21, 21), 2000, dtype=np.uint16))
    detection = Detection2D(0, (5.0, 5.0, 10.0, 10.0), "desk", 0.7, WOOD)
    box = realize_box(
        detection, depth, INTR, Pose.identity(), 0, floor_height=0.5
    )
    np.testing.assert_allclose(box.lo, [-0.1, -0.1, 0.5])
    np.testing.assert_allclose(box.hi, [0.1, 0.1, 2.02])
    above = realize_box(
        detection, depth, INTR, Pose.identity(), 0, floor_height=3.0
    )
    np.testing.assert_allclose(above.lo, [-0.1, -0.1, 2.0])


def test_fuse_boxes_votes_by_confidence():
    boxes = [
        make_box([0, 0, 0], [1, 1, 1], WOOD, 0, confidence=0.9),
        make_box([0.1, 0, 0], [1.1, 1, 1], METAL, 1, confidence=0.3),
        make_box([0, 0.1, 0], [1, 1.1, 1], METAL, 2, confidence=0.3),
        make_box([5, 5, 5], [6, 6, 6], METAL, 3, source_frame=7),
    ]
    fused = fuse_boxes(boxes)
    assert [box.box_id for box in fused] == [0, 1]
    assert fused[0].material is WOOD
    np.testing.assert_allclose(fused[0].lo, [0, 0, 0])
    np.testing.assert_allclose(fused[0].hi, [1, 1, 1])
    assert fused[0].confidence == pytest.approx(0.5)
    assert fused[1].material is METAL
    assert fused[1].source_frame == 7


def test_fuse_boxes_tie_goes_to_smallest_material():
    boxes = [
        make_box([0, 0, 0], [1, 1, 1], WOOD, 0, confidence=0.5),
        make_box([0, 0, 0], [1, 1, 1], METAL, 1, confidence=0.5),
    ]
    assert fuse_boxes(boxes)[0].material is METAL


def test_fuse_boxes_counts_when_all_confidences_are_zero():
    boxes = [
        make_box([0, 0, 0], [1, 1, 1], WOOD, 0, confidence=0.0),
        make_box([0, 0, 0], [1, 1, 1], WOOD, 1, confidence=0.0),
        make_box([0, 0, 0], [1, 1, 1], METAL, 2, confidence=0.0),
    ]
    assert fuse_boxes(boxes)[0].material is WOOD


def test_fuse_boxes_chains_overlaps():
    boxes = [
        make_box([0.0, 0, 0], [1.0, 1, 1], box_id=0, object_label="a"),
        make_box([0.3, 0, 0], [1.3, 1, 1], box_id=1, object_label="b"),
        make_box([0.6, 0, 0], [1.6, 1, 1], box_id=2, object_label="b"),
    ]
    fused = fuse_boxes(boxes)
    assert len(fused) == 1
    assert fused[0].object_label == "b"
    np.testing.assert_allclose(fused[0].lo, [0.3, 0, 0])


def test_fuse_boxes_keeps_disjoint_boxes_apart():
    boxes = [
        make_box([0, 0, 0], [1, 1, 1], box_id=4),
        make_box([1, 0, 0], [2, 1, 1], box_id=2),
    ]
    fused = fuse_boxes(boxes)
    assert len(fused) == 2
    np.testing.assert_allclose(fused[0].lo, [1, 0, 0])


@pytest.mark.parametrize("threshold", [0.0, 1.5])
def test_fuse_boxes_threshold_range(threshold):
    with pytest.raises(InvalidInputError):
        fuse_boxes([], threshold)


@pytest.mark.perf
def test_segmentation_speed_on_large_cloud():
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.uniform(0.0, 5.0, (100_000, 3)))
    boxes = random_boxes(rng, 50, extent=5.0)
    timings = []
    for _ in range(3):
        started = time.perf_counter()
        segmentation = mscc_segment(
            cloud, (0.4, 0.2, 0.1, 0.05), boxes, workers=4
        )
        grid = voxelize(cloud, 0.05)
        anchors = anchor_clusters(
            segmentation, grid, associate_boxes(grid, boxes)
        )
        propagate_labels(segmentation, cloud, boxes, anchors=anchors)
        timings.append(time.perf_counter() - started)
    assert min(timings) <= 0.2
