import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Union

from dotenv import load_dotenv

from matmap.constants import (
    CLASSIFIER_MODES,
    CONNECTIVITIES,
    DEFAULT_CONFIG_PATH,
    DEFAULT_CONNECTIVITY,
    DEFAULT_IOU_THRESHOLD,
    DEFAULT_KEYFRAME_INTERVAL,
    DEFAULT_LABEL_CUTOFF,
    DEFAULT_MAX_DEPTH,
    DEFAULT_MIN_DEPTH,
    DEFAULT_PALETTE_PATH,
    DEFAULT_SCALES,
    DEFAULT_STRIDE,
)
from matmap.exceptions import ConfigurationError

load_dotenv()


class Config:
    LOG_LEVEL = os.getenv("MATMAP_LOG_LEVEL", "WARNING")
    WORKERS = os.getenv("MATMAP_WORKERS", "1")
    PROGRESS = os.getenv("MATMAP_PROGRESS", "1") != "0"


PACKAGE_LOGGER = "matmap"


def worker_count(value: Union[int, str]) -> int:
    """
    Parse a thread count such as `MATMAP_WORKERS`.

    :raises ConfigurationError: unless it is a positive integer.
    """
    try:
        count = int(value)
    except (TypeError, ValueError) as exception:
        raise ConfigurationError(
            "workers", f"expected an integer, got {value!r}"
        ) from exception
    if count < 1:
        raise ConfigurationError("workers", "must be at least 1")
    return count


def configure_logging(level: Optional[Union[int, str]] = None) -> None:
    """
    Attach a single stderr handler to the package logger.

    :param level: logging level. Defaults to `Config.LOG_LEVEL`.
    """
    logger = logging.getLogger(PACKAGE_LOGGER)
    logger.setLevel(level or Config.LOG_LEVEL)
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(
            logging.Formatter("%(levelname)s %(name)s: %(message)s")
        )
        logger.addHandler(handler)


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run needs besides the recorded sequence."""

    manifest: Optional[Path] = None
    scales: tuple[float, ...] = DEFAULT_SCALES
    connectivity: int = DEFAULT_CONNECTIVITY
    stride: int = DEFAULT_STRIDE
    min_depth: float = DEFAULT_MIN_DEPTH
    max_depth: float = DEFAULT_MAX_DEPTH
    label_cutoff: float = DEFAULT_LABEL_CUTOFF
    palette: Path = DEFAULT_PALETTE_PATH
    classifier: str = CLASSIFIER_MODES[0]
    output_dir: Path = Path("out")
    keyframe_interval: int = DEFAULT_KEYFRAME_INTERVAL
    incremental: bool = False
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    color_threshold: Optional[float] = None
    seed: int = 0
    cafn_weights: Optional[Path] = None
    groundtruth: Optional[Path] = None
    origin: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))
    floor_height: Optional[float] = None
    workers: Optional[int] = None
    include_timings: bool = False

    @classmethod
    def from_file(
        cls, path: Optional[Path] = None, **overrides: Any
    ) -> "RunConfig":
        """
        Build a configuration from a JSON file and flag overrides.

        Keys missing from the file fall back to the shipped defaults.
        Overrides equal to `None` are ignored.

        :param path: JSON config file. Defaults to the shipped defaults.
        :param overrides: values taking precedence over the file.
        :return: validated configuration.
        """
        values: dict[str, Any] = _read_json_object(DEFAULT_CONFIG_PATH)
        if path is not None:
            values.update(_read_json_object(Path(path)))
        values.update({k: v for k, v in overrides.items() if v is not None})
        known = {item.name for item in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(
                ", ".join(sorted(unknown)), "unknown configuration keys"
            )
        return cls(**_coerce(values)).validated()

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Return a copy with the given non-`None` fields replaced."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **_coerce(changes)).validated()

    def validated(self) -> "RunConfig":
        """
        Check ranges and referenced files.

        Without an explicit `workers` the thread count comes from
        `MATMAP_WORKERS`.

        :raises ConfigurationError: on the first offending field.
        :return: the configuration with `workers` resolved.
        """
        if not self.scales:
            raise ConfigurationError("scales", "at least one scale required")
        if any(scale <= 0 for scale in self.scales):
            raise ConfigurationError("scales", "scales must be positive")
        if any(a <= b for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigurationError("scales", "must be strictly decreasing")
        if self.connectivity not in CONNECTIVITIES:
            raise ConfigurationError(
                "connectivity", f"must be one of {CONNECTIVITIES}"
            )
        if self.stride < 1:
            raise ConfigurationError("stride", "must be at least 1")
        if not 0 < self.min_depth < self.max_depth:
            raise ConfigurationError(
                "min_depth/max_depth", "need 0 < min_depth < max_depth"
            )
        if self.label_cutoff <= 0:
            raise ConfigurationError("label_cutoff", "must be positive")
        if self.keyframe_interval < 1:
            raise ConfigurationError("keyframe_interval", "must be >= 1")
        if not 0 < self.iou_threshold <= 1:
            raise ConfigurationError("iou_threshold", "must be in (0, 1]")
        if self.color_threshold is not None and self.color_threshold < 0:
            raise ConfigurationError("color_threshold", "must be >= 0")
        if self.classifier not in CLASSIFIER_MODES:
            raise ConfigurationError(
                "classifier", f"must be one of {CLASSIFIER_MODES}"
            )
        for name in ("manifest", "palette", "cafn_weights", "groundtruth"):
            value = getattr(self, name)
            if value is not None and not Path(value).is_file():
                raise ConfigurationError(name, f"file {value} does not exist")
        workers = worker_count(
            Config.WORKERS if self.workers is None else self.workers
        )
        if workers == self.workers:
            return self
        return replace(self, workers=workers)

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready representation with paths as strings."""
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, Path):
                data[key] = str(value)
            elif isinstance(value, tuple):
                data[key] = list(value)
        return data


def _read_json_object(path: Path) -> dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exception:
        raise ConfigurationError(str(path), str(exception)) from exception
    if not isinstance(data, dict):
        raise ConfigurationError(str(path), "expected a JSON object")
    return data


def _coerce(values: dict[str, Any]) -> dict[str, Any]:
    coerced = dict(values)
    for key in ("manifest", "palette", "output_dir", "cafn_weights"):
        if coerced.get(key) is not None:
            coerced[key] = Path(coerced[key])
    if coerced.get("groundtruth") is not None:
        coerced["groundtruth"] = Path(coerced["groundtruth"])
    try:
        if "scales" in coerced:
            coerced["scales"] = tuple(float(s) for s in coerced["scales"])
        if "origin" in coerced:
            origin = tuple(float(c) for c in coerced["origin"])
            if len(origin) != 3:
                raise ValueError("origin needs three coordinates")
            coerced["origin"] = origin
        for key in ("connectivity", "stride", "keyframe_interval", "seed"):
            if key in coerced:
                coerced[key] = int(coerced[key])
        for key in ("floor_height", "workers"):
            if coerced.get(key) is not None:
                kind = float if key == "floor_height" else int
                coerced[key] = kind(coerced[key])
        for key in ("min_depth", "max_depth", "label_cutoff", "iou_threshold"):
            if key in coerced:
                coerced[key] = float(coerced[key])
        if coerced.get("color_threshold") is not None:
            coerced["color_threshold"] = float(coerced["color_threshold"])
    except (TypeError, ValueError) as exception:
        raise ConfigurationError("config", str(exception)) from exception
    return coerced
