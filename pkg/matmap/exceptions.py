from typing import Any, Optional

from matmap.constants import (
    EXIT_CONFIG_ERROR,
    EXIT_PARSE_ERROR,
    EXIT_RUNTIME_ERROR,
)


class MatmapError(Exception):
    """Base class for every error raised by the package."""

    exit_code = EXIT_RUNTIME_ERROR


class ConfigurationError(MatmapError):
    """Exception raised if a configuration value is unusable."""

    exit_code = EXIT_CONFIG_ERROR

    def __init__(self, field: str, problem: str):
        self.field = field
        super().__init__(f"Invalid configuration for {field}: {problem}.")


class ParseError(MatmapError):
    """Exception raised if an input file cannot be parsed."""

    exit_code = EXIT_PARSE_ERROR

    def __init__(self, source: Any, error: Any, line: Optional[int] = None):
        self.source = source
        self.line = line
        location = f"{source}, line {line}" if line is not None else source
        super().__init__(f"Unable to parse {location} due to error: {error}")


class ManifestError(ParseError):
    """Sequence manifest is malformed or inconsistent."""


class DetectionsError(ParseError):
    """Detections file is malformed."""


class GroundTruthError(ParseError):
    """Ground truth file is malformed or unusable for evaluation."""


class PlyParseError(ParseError):
    """PLY file is malformed or truncated."""


class ImageError(ParseError):
    """PGM/PPM image cannot be decoded."""


class TensorFormatError(ParseError):
    """Flat binary tensor file is malformed."""


class InvalidInputError(MatmapError):
    """Exception raised if a value breaks an operation precondition."""

    def __init__(self, item: Any, problem: str):
        super().__init__(f"Invalid input {item}: {problem}.")


class ShapeError(MatmapError):
    """Exception raised if shapes of combined values do not match."""

    def __init__(self, expected: Any, actual: Any):
        super().__init__(f"Expected shape {expected}, got {actual}.")


class StateError(MatmapError):
    """Exception raised if an operation is called in the wrong state."""


class NoSupportError(MatmapError):
    """Exception raised if a box contains no cloud points."""

    def __init__(self, box_id: int):
        self.box_id = box_id
        super().__init__(f"Box {box_id} contains no points of the cloud.")


class DisjointPointSetsError(MatmapError):
    """Exception raised if prediction and ground truth share no points."""

    def __init__(self) -> None:
        super().__init__(
            "Prediction and ground truth do not reference the same points."
        )


class PipelineStageError(MatmapError):
    """Exception raised if any error occurs inside a pipeline stage."""

    def __init__(self, stage: str, error: Exception):
        self.stage = stage
        self.exit_code = getattr(error, "exit_code", EXIT_RUNTIME_ERROR)
        super().__init__(f"[{stage}] {error}")
