from pathlib import Path
from typing import Any

import numpy as np
import pytest

from matmap.config import Config, RunConfig
from matmap.models import BBox3D, MaterialLabel, PointCloud
from matmap.pipeline import RunResult, run
from matmap.synthetic import make_fixture
from matmap.voxmap import default_palette

Config.PROGRESS = False


def make_box(
    lo: Any,
    hi: Any,
    material: MaterialLabel = MaterialLabel.WOOD,
    box_id: int = 0,
    **kwargs: Any,
) -> BBox3D:
    return BBox3D.from_bounds(lo, hi, material, box_id=box_id, **kwargs)


def random_boxes(
    rng: np.random.Generator, count: int, extent: float = 2.0
) -> list[BBox3D]:
    boxes = []
    for box_id in range(count):
        lo = rng.uniform(0.0, extent, 3)
        size = rng.uniform(0.05, extent / 2, 3)
        material = MaterialLabel(int(rng.integers(len(MaterialLabel))))
        boxes.append(make_box(lo, lo + size, material, box_id))
    return boxes


def random_cloud(
    rng: np.random.Generator, max_points: int = 500, extent: float = 2.0
) -> PointCloud:
    n = int(rng.integers(1, max_points + 1))
    return PointCloud(rng.uniform(0.0, extent, (n, 3)))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def palette():
    return default_palette()


@pytest.fixture(scope="session")
def conference_manifest(tmp_path_factory: pytest.TempPathFactory) -> Path:
    return make_fixture("conference", tmp_path_factory.mktemp("conference"))


@pytest.fixture(scope="session")
def conference_run(
    conference_manifest: Path, tmp_path_factory: pytest.TempPathFactory
) -> tuple[RunResult, Path]:
    output = tmp_path_factory.mktemp("conference_run")
    config = RunConfig.from_file(
        None, manifest=conference_manifest, output_dir=output
    )
    return run(config), output
