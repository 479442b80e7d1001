"""
Complementarity-aware fusion of RGB and depth features at toy scale.

One fusion level gates each modality with a sigmoid attention map,
multiplies them with the attention of the fused features and
normalizes the result:

    alpha = alpha_fuse / (alpha_rgb + alpha_depth - alpha_fuse)

Five levels form a cascade whose upsampled attention maps multiply into
one prediction map; an attention-pooled linear head turns it into a
material distribution.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

import numpy as np
from scipy.special import expit, softmax

from matmap.constants import (
    ATTENTION_DENOMINATOR_EPS,
    CASCADE_LEVELS,
    FINITE_DIFFERENCE_STEP,
    GRADIENT_CHECK_FLOOR,
    OTHER_PROBABILITY_THRESHOLD,
    TOY_CHANNELS,
    TOY_FEATURE_SIZE,
    TOY_LEARNING_RATE,
    TOY_MAX_TRAIN_STEPS,
)
from matmap.exceptions import (
    ConfigurationError,
    InvalidInputError,
    ShapeError,
    StateError,
    TensorFormatError,
)
from matmap.models import MaterialLabel

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
N_MATERIALS = len(MaterialLabel.classes())


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """A C x H x W real tensor."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError("(C, H, W) with positive sizes", data.shape)
        if not np.isfinite(data).all():
            raise InvalidInputError("feature map", "values must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def size(self) -> tuple[int, int]:
        return int(self.data.shape[1]), int(self.data.shape[2])


@dataclass(frozen=True, eq=False)
class ConvFilter:
    """A bank of 3x3 filters mapping C channels to one, plus a bias."""

    weight: np.ndarray
    bias: float = 0.0

    def __post_init__(self) -> None:
        weight = np.array(self.weight, dtype=np.float64)
        if weight.ndim != 3 or weight.shape[1:] != (3, 3):
            raise ShapeError("(C, 3, 3)", weight.shape)
        if not (np.isfinite(weight).all() and np.isfinite(self.bias)):
            raise InvalidInputError("filter", "values must be finite")
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", float(self.bias))

    @classmethod
    def zeros(cls, channels: int) -> "ConvFilter":
        return cls(np.zeros((channels, 3, 3)))


@dataclass(frozen=True, eq=False)
class FusionWeights:
    rgb: ConvFilter
    depth: ConvFilter
    fuse: ConvFilter

    @classmethod
    def zeros(cls, channels: int) -> "FusionWeights":
        return cls(*(ConvFilter.zeros(channels) for _ in range(3)))

    @classmethod
    def random(
        cls, rng: np.random.Generator, channels: int, scale: float = 0.5
    ) -> "FusionWeights":
        return cls(
            *(
                ConvFilter(
                    rng.normal(0.0, scale, (channels, 3, 3)),
                    float(rng.normal(0.0, scale)),
                )
                for _ in range(3)
            )
        )

    def swapped(self) -> "FusionWeights":
        """Weights for the same fusion with the modalities exchanged."""
        return FusionWeights(self.depth, self.rgb, self.fuse)

    def filters(self) -> tuple[ConvFilter, ConvFilter, ConvFilter]:
        return self.rgb, self.depth, self.fuse


@dataclass(frozen=True, eq=False)
class AttentionSet:
    """The four 1 x H x W attention maps of one fusion level."""

    alpha_rgb: np.ndarray
    alpha_depth: np.ndarray
    alpha_fuse: np.ndarray
    alpha: np.ndarray

    def violations(self, tolerance: float = 1e-12) -> int:
        """
        Count pixels breaking the attention bounds.

        Checked: `0 <= alpha_fuse <= alpha_rgb * alpha_depth` and
        `0 <= alpha <= min(alpha_rgb, alpha_depth) <= 1`.
        """
        product_bound = self.alpha_rgb * self.alpha_depth
        lowest = np.minimum(self.alpha_rgb, self.alpha_depth)
        broken = (
            (self.alpha_fuse < 0)
            | (self.alpha_fuse > product_bound + tolerance)
            | (self.alpha < 0)
            | (self.alpha > lowest + tolerance)
            | (lowest > 1)
        )
        return int(broken.sum())


@dataclass(frozen=True, eq=False)
class MaterialDistribution:
    """Probabilities over the ten material classes."""

    probabilities: np.ndarray

    def __post_init__(self) -> None:
        probabilities = np.array(self.probabilities, dtype=np.float64)
        if probabilities.shape != (N_MATERIALS,):
            raise ShapeError((N_MATERIALS,), probabilities.shape)
        if (probabilities < 0).any() or (probabilities > 1).any():
            raise InvalidInputError("distribution", "not in [0, 1]")
        if abs(probabilities.sum() - 1.0) > 1e-6:
            raise InvalidInputError("distribution", "does not sum to 1")
        object.__setattr__(self, "probabilities", probabilities)

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "MaterialDistribution":
        return cls(softmax(np.asarray(logits, dtype=np.float64)))

    @property
    def label(self) -> MaterialLabel:
        """Most likely class, `OTHER` when it is below one half."""
        best = int(self.probabilities.argmax())
        if self.probabilities[best] < OTHER_PROBABILITY_THRESHOLD:
            return MaterialLabel.OTHER
        return MaterialLabel(best)


@dataclass(frozen=True, eq=False)
class LinearHead:
    """Linear map from pooled fused features to ten logits."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        weight = np.array(self.weight, dtype=np.float64)
        bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if weight.ndim != 2 or weight.shape[0] != N_MATERIALS:
            raise ShapeError((N_MATERIALS, "C"), weight.shape)
        if bias.shape != (N_MATERIALS,):
            raise ShapeError((N_MATERIALS,), bias.shape)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @classmethod
    def random(
        cls, rng: np.random.Generator, channels: int, scale: float = 1.0
    ) -> "LinearHead":
        return cls(
            rng.normal(0.0, scale, (N_MATERIALS, channels)),
            rng.normal(0.0, scale, N_MATERIALS),
        )


def conv2d_3x3(f: FeatureMap, kernel: ConvFilter) -> np.ndarray:
    """
    Same-size 3x3 cross-correlation with zero padding, one output channel.

    :raises ShapeError: if the filter's channel count differs.
    :return: (1, H, W) array.
    """
    if kernel.weight.shape[0] != f.channels:
        raise ShapeError(kernel.weight.shape[0], f.channels)
    height, width = f.size
    padded = np.pad(f.data, ((0, 0), (1, 1), (1, 1)))
    out = np.full((height, width), kernel.bias)
    for di in range(3):
        for dj in range(3):
            window = padded[:, di : di + height, dj : dj + width]
            out += np.einsum("c,chw->hw", kernel.weight[:, di, dj], window)
    return out[None]


def conv2d_3x3_backward(
    f: FeatureMap, kernel: ConvFilter, grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
    """
    Gradients of `conv2d_3x3` for an upstream (1, H, W) gradient.

    :return: gradients w.r.t. the input, the weights and the bias.
    """
    height, width = f.size
    grad = np.asarray(grad).reshape(height, width)
    padded = np.pad(f.data, ((0, 0), (1, 1), (1, 1)))
    grad_padded = np.zeros_like(padded)
    grad_weight = np.zeros_like(kernel.weight)
    for di in range(3):
        for dj in range(3):
            window = padded[:, di : di + height, dj : dj + width]
            grad_weight[:, di, dj] = np.einsum("chw,hw->c", window, grad)
            grad_padded[:, di : di + height, dj : dj + width] += np.einsum(
                "c,hw->chw", kernel.weight[:, di, dj], grad
            )
    return grad_padded[:, 1:-1, 1:-1], grad_weight, float(grad.sum())


def modulate(inputs: FeatureMap, features: FeatureMap) -> FeatureMap:
    """Elementwise product of a level input and its backbone features."""
    if inputs.shape != features.shape:
        raise ShapeError(features.shape, inputs.shape)
    return FeatureMap(inputs.data * features.data)


@dataclass(frozen=True, eq=False)
class FuseGradients:
    f_rgb: np.ndarray
    f_depth: np.ndarray
    weights: tuple[tuple[np.ndarray, float], ...]

    def flat(self) -> np.ndarray:
        parts = [self.f_rgb.ravel(), self.f_depth.ravel()]
        for weight, bias in self.weights:
            parts.extend([weight.ravel(), np.array([bias])])
        return np.concatenate(parts)


@dataclass
class _Retained:
    f_rgb: FeatureMap
    f_depth: FeatureMap
    f_fuse: FeatureMap
    s_rgb: np.ndarray
    s_depth: np.ndarray
    s_fuse: np.ndarray
    alpha_fuse: np.ndarray
    denominator: np.ndarray


class FuseLevel:
    """One fusion module keeping what its backward pass needs."""

    def __init__(self, weights: FusionWeights):
        self.weights = weights
        self._retained: Optional[_Retained] = None

    def forward(
        self, f_rgb: FeatureMap, f_depth: FeatureMap
    ) -> tuple[FeatureMap, AttentionSet]:
        if f_rgb.shape != f_depth.shape:
            raise ShapeError(f_rgb.shape, f_depth.shape)
        f_fuse = FeatureMap(f_rgb.data * f_depth.data)
        s_rgb = expit(conv2d_3x3(f_rgb, self.weights.rgb))
        s_depth = expit(conv2d_3x3(f_depth, self.weights.depth))
        s_fuse = expit(conv2d_3x3(f_fuse, self.weights.fuse))
        alpha_fuse = s_rgb * s_depth * s_fuse
        denominator = s_rgb + s_depth - alpha_fuse
        guarded = denominator >= ATTENTION_DENOMINATOR_EPS
        alpha = np.zeros_like(alpha_fuse)
        np.divide(alpha_fuse, denominator, out=alpha, where=guarded)
        self._retained = _Retained(
            f_rgb,
            f_depth,
            f_fuse,
            s_rgb,
            s_depth,
            s_fuse,
            alpha_fuse,
            denominator,
        )
        return f_fuse, AttentionSet(s_rgb, s_depth, alpha_fuse, alpha)

    def backward(
        self,
        grad_alpha: np.ndarray,
        grad_fuse: Optional[np.ndarray] = None,
    ) -> FuseGradients:
        """
        Gradients of a scalar loss through the last forward pass.

        :param grad_alpha: dL/d alpha, (1, H, W).
        :param grad_fuse: optional dL/d f_fuse, (C, H, W).
        :raises StateError: if `forward` has not run.
        """
        kept = self._retained
        if kept is None:
            raise StateError("backward called before forward")
        grad_alpha = np.asarray(grad_alpha, dtype=np.float64).reshape(
            kept.s_rgb.shape
        )
        total = kept.s_rgb + kept.s_depth
        guarded = kept.denominator >= ATTENTION_DENOMINATOR_EPS
        inverse_sq = np.zeros_like(total)
        np.divide(1.0, kept.denominator**2, out=inverse_sq, where=guarded)
        grad_a = grad_alpha * total * inverse_sq
        grad_s_rgb = (
            -grad_alpha * kept.alpha_fuse * inverse_sq
            + grad_a * kept.s_depth * kept.s_fuse
        )
        grad_s_depth = (
            -grad_alpha * kept.alpha_fuse * inverse_sq
            + grad_a * kept.s_rgb * kept.s_fuse
        )
        grad_s_fuse = grad_a * kept.s_rgb * kept.s_depth
        grad_rgb, grad_w_rgb, grad_b_rgb = conv2d_3x3_backward(
            kept.f_rgb,
            self.weights.rgb,
            grad_s_rgb * kept.s_rgb * (1 - kept.s_rgb),
        )
        grad_depth, grad_w_depth, grad_b_depth = conv2d_3x3_backward(
            kept.f_depth,
            self.weights.depth,
            grad_s_depth * kept.s_depth * (1 - kept.s_depth),
        )
        grad_f_fuse, grad_w_fuse, grad_b_fuse = conv2d_3x3_backward(
            kept.f_fuse,
            self.weights.fuse,
            grad_s_fuse * kept.s_fuse * (1 - kept.s_fuse),
        )
        if grad_fuse is not None:
            grad_f_fuse = grad_f_fuse + np.asarray(grad_fuse).reshape(
                grad_f_fuse.shape
            )
        grad_rgb = grad_rgb + grad_f_fuse * kept.f_depth.data
        grad_depth = grad_depth + grad_f_fuse * kept.f_rgb.data
        return FuseGradients(
            grad_rgb,
            grad_depth,
            (
                (grad_w_rgb, grad_b_rgb),
                (grad_w_depth, grad_b_depth),
                (grad_w_fuse, grad_b_fuse),
            ),
        )


def fuse_level(
    f_rgb: FeatureMap, f_depth: FeatureMap, weights: FusionWeights
) -> tuple[FeatureMap, AttentionSet]:
    """Forward pass of one fusion level, see `FuseLevel`."""
    return FuseLevel(weights).forward(f_rgb, f_depth)


def resize_nearest(data: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of a (C, h, w) array to (C, H, W)."""
    _, height, width = data.shape
    rows = np.arange(size[0]) * height // size[0]
    cols = np.arange(size[1]) * width // size[1]
    return data[:, rows[:, None], cols[None, :]]


def combine_levels(
    alphas: Sequence[np.ndarray], size: tuple[int, int]
) -> np.ndarray:
    """Multiply the attention maps of all levels at one resolution."""
    prediction = np.ones((1, *size))
    for alpha in alphas:
        prediction = prediction * resize_nearest(alpha, size)
    return prediction


@dataclass(frozen=True, eq=False)
class CascadeResult:
    prediction: np.ndarray
    levels: tuple[tuple[FeatureMap, AttentionSet], ...]


def _check_levels(count: int, what: str) -> None:
    if count != CASCADE_LEVELS:
        raise ConfigurationError(
            what, f"expected {CASCADE_LEVELS} levels, got {count}"
        )


def cascade(
    levels: Sequence[tuple[FeatureMap, FeatureMap]],
    weights: Sequence[FusionWeights],
) -> CascadeResult:
    """
    Run the five fusion levels and combine their attention maps.

    Coarser maps are upsampled to the first level's resolution.

    :raises ConfigurationError: unless there are exactly five levels
     and five weight sets.
    """
    _check_levels(len(levels), "cascade levels")
    _check_levels(len(weights), "cascade weights")
    outputs = tuple(
        fuse_level(f_rgb, f_depth, level_weights)
        for (f_rgb, f_depth), level_weights in zip(levels, weights)
    )
    size = levels[0][0].size
    prediction = combine_levels([att.alpha for _, att in outputs], size)
    return CascadeResult(prediction, outputs)


def build_cascade_inputs(
    features_rgb: Sequence[FeatureMap],
    features_depth: Sequence[FeatureMap],
    inputs: Optional[tuple[FeatureMap, FeatureMap]] = None,
) -> list[tuple[FeatureMap, FeatureMap]]:
    """
    Modulate backbone features level by level.

    Level one multiplies the given inputs (all ones when omitted) with
    its features; every later level uses the previous level's modulated
    map, resized to its own resolution, as input.
    """
    _check_levels(len(features_rgb), "rgb features")
    _check_levels(len(features_depth), "depth features")
    if inputs is None:
        ones = FeatureMap(np.ones(features_rgb[0].shape))
        inputs = (ones, FeatureMap(np.ones(features_depth[0].shape)))
    levels = []
    current_rgb, current_depth = inputs
    for feature_rgb, feature_depth in zip(features_rgb, features_depth):
        input_rgb = FeatureMap(
            resize_nearest(current_rgb.data, feature_rgb.size)
        )
        input_depth = FeatureMap(
            resize_nearest(current_depth.data, feature_depth.size)
        )
        current_rgb = modulate(input_rgb, feature_rgb)
        current_depth = modulate(input_depth, feature_depth)
        levels.append((current_rgb, current_depth))
    return levels


def classify(
    prediction: np.ndarray, f_fuse: FeatureMap, head: LinearHead
) -> tuple[MaterialLabel, MaterialDistribution]:
    """
    Attention-pooled linear classification of fused features.

    :param prediction: (1, H, W) or (H, W) attention map.
    :param f_fuse: fused features at the same resolution.
    :param head: ten-way linear head.
    :raises ShapeError: on size or channel mismatch.
    """
    alpha = np.asarray(prediction, dtype=np.float64).reshape(-1)
    height, width = f_fuse.size
    if alpha.size != height * width:
        raise ShapeError((height, width), np.shape(prediction))
    if head.weight.shape[1] != f_fuse.channels:
        raise ShapeError(head.weight.shape[1], f_fuse.channels)
    mass = alpha.sum()
    flat = f_fuse.data.reshape(f_fuse.channels, -1)
    pooled = flat @ alpha / mass if mass > 0 else np.zeros(f_fuse.channels)
    distribution = MaterialDistribution.from_logits(
        head.weight @ pooled + head.bias
    )
    return distribution.label, distribution


# flat binary tensors: <u4 rank, <u4 dims..., <f4 data


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    header = struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def decode_tensors(
    payload: bytes, source: object = "tensor"
) -> list[np.ndarray]:
    """
    Split a buffer of back-to-back tensors.

    :raises TensorFormatError: on truncated headers or data.
    """
    tensors = []
    offset = 0
    while offset < len(payload):
        if offset + 4 > len(payload):
            raise TensorFormatError(source, f"truncated rank at {offset}")
        (rank,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        if offset + 4 * rank > len(payload):
            raise TensorFormatError(source, f"truncated shape at {offset}")
        shape = struct.unpack_from(f"<{rank}I", payload, offset)
        offset += 4 * rank
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 4 * count > len(payload):
            raise TensorFormatError(source, f"truncated data at {offset}")
        data = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        tensors.append(data.astype(np.float64).reshape(shape))
        offset += 4 * count
    return tensors


def save_tensors(path: PathLike, arrays: Sequence[np.ndarray]) -> None:
    Path(path).write_bytes(b"".join(encode_tensor(a) for a in arrays))


def load_tensors(path: PathLike) -> list[np.ndarray]:
    try:
        payload = Path(path).read_bytes()
    except OSError as exception:
        logger.exception("cannot read tensors from %s", path)
        raise TensorFormatError(path, exception) from exception
    return decode_tensors(payload, path)


@dataclass(frozen=True, eq=False)
class ToyModel:
    """Five fusion levels plus the head, all with the same channels."""

    levels: tuple[FusionWeights, ...]
    head: LinearHead

    def __post_init__(self) -> None:
        _check_levels(len(self.levels), "model levels")

    @property
    def channels(self) -> int:
        return int(self.head.weight.shape[1])

    @classmethod
    def seeded(cls, seed: int, channels: int = TOY_CHANNELS) -> "ToyModel":
        rng = np.random.default_rng(seed)
        levels = tuple(
            FusionWeights.random(rng, channels) for _ in range(CASCADE_LEVELS)
        )
        return cls(levels, LinearHead.random(rng, channels))

    def save(self, path: PathLike) -> None:
        arrays: list[np.ndarray] = []
        for weights in self.levels:
            for kernel in weights.filters():
                arrays.extend([kernel.weight, np.array([kernel.bias])])
        arrays.extend([self.head.weight, self.head.bias])
        save_tensors(path, arrays)

    @classmethod
    def load(cls, path: PathLike) -> "ToyModel":
        """
        Read a model written by `save`.

        :raises TensorFormatError: if tensor count or shapes are off.
        """
        arrays = load_tensors(path)
        expected = CASCADE_LEVELS * 6 + 2
        if len(arrays) != expected:
            raise TensorFormatError(
                path, f"expected {expected} tensors, got {len(arrays)}"
            )
        try:
            levels = []
            for level in range(CASCADE_LEVELS):
                chunk = arrays[level * 6 : level * 6 + 6]
                filters = [
                    ConvFilter(chunk[i], float(chunk[i + 1].reshape(-1)[0]))
                    for i in (0, 2, 4)
                ]
                levels.append(FusionWeights(*filters))
            return cls(tuple(levels), LinearHead(arrays[-2], arrays[-1]))
        except (ShapeError, InvalidInputError, IndexError) as exception:
            raise TensorFormatError(path, exception) from exception

    def predict(
        self,
        features_rgb: Sequence[FeatureMap],
        features_depth: Sequence[FeatureMap],
    ) -> tuple[MaterialLabel, MaterialDistribution]:
        levels = build_cascade_inputs(features_rgb, features_depth)
        result = cascade(levels, self.levels)
        f_fuse = result.levels[0][0]
        return classify(result.prediction, f_fuse, self.head)


class FeatureProvider(Protocol):
    def __call__(
        self, rgb: np.ndarray, depth: np.ndarray
    ) -> tuple[list[FeatureMap], list[FeatureMap]]: ...


def level_sizes(size: int = TOY_FEATURE_SIZE) -> list[int]:
    return [max(1, size >> level) for level in range(CASCADE_LEVELS)]


def _block_mean(data: np.ndarray, size: int) -> np.ndarray:
    channels, height, width = data.shape
    if height < size or width < size:
        data = resize_nearest(data, (max(height, size), max(width, size)))
        channels, height, width = data.shape
    rows = np.arange(height) * size // height
    cols = np.arange(width) * size // width
    pooled = np.zeros((channels, size, size))
    counts = np.zeros((size, size))
    np.add.at(pooled, (slice(None), rows[:, None], cols[None, :]), data)
    np.add.at(counts, (rows[:, None], cols[None, :]), 1)
    return pooled / np.maximum(counts, 1)


class CropFeatureProvider:
    """
    Hand-made pyramid features from an RGB crop and its depth crop.

    RGB levels are the block-averaged colors in [0, 1]; depth levels are
    the standardized depth and its two finite-difference slopes.
    """

    def __init__(self, size: int = TOY_FEATURE_SIZE):
        self.size = size

    def __call__(
        self, rgb: np.ndarray, depth: np.ndarray
    ) -> tuple[list[FeatureMap], list[FeatureMap]]:
        color = np.moveaxis(np.asarray(rgb, dtype=np.float64) / 255.0, 2, 0)
        meters = np.asarray(depth, dtype=np.float64)
        valid = meters > 0
        if valid.any():
            meters = np.where(valid, meters, meters[valid].mean())
            meters = (meters - meters.mean()) / (meters.std() + 1e-6)
        slope_x = np.zeros_like(meters)
        slope_y = np.zeros_like(meters)
        if min(meters.shape) > 1:
            slope_y, slope_x = np.gradient(meters)
        geometry = np.stack([meters, slope_x, slope_y])
        features_rgb, features_depth = [], []
        for size in level_sizes(self.size):
            features_rgb.append(FeatureMap(_block_mean(color, size)))
            features_depth.append(FeatureMap(_block_mean(geometry, size)))
        return features_rgb, features_depth


class SyntheticFeatureProvider:
    """Seeded random features; the images are ignored."""

    def __init__(
        self,
        seed: int,
        channels: int = TOY_CHANNELS,
        size: int = TOY_FEATURE_SIZE,
    ):
        self.rng = np.random.default_rng(seed)
        self.channels = channels
        self.size = size

    def __call__(
        self, rgb: np.ndarray, depth: np.ndarray
    ) -> tuple[list[FeatureMap], list[FeatureMap]]:
        sizes = level_sizes(self.size)
        return tuple(  # type: ignore
            [
                FeatureMap(self.rng.normal(size=(self.channels, s, s)))
                for s in sizes
            ]
            for _ in range(2)
        )


class FileFeatureProvider:
    """Features read from a tensor file: five RGB then five depth levels."""

    def __init__(self, path: PathLike):
        arrays = load_tensors(path)
        if len(arrays) != 2 * CASCADE_LEVELS:
            raise TensorFormatError(
                path, f"expected {2 * CASCADE_LEVELS} feature tensors"
            )
        try:
            maps = [FeatureMap(array) for array in arrays]
        except (ShapeError, InvalidInputError) as exception:
            raise TensorFormatError(path, exception) from exception
        self.features = (maps[:CASCADE_LEVELS], maps[CASCADE_LEVELS:])

    def __call__(
        self, rgb: np.ndarray, depth: np.ndarray
    ) -> tuple[list[FeatureMap], list[FeatureMap]]:
        return list(self.features[0]), list(self.features[1])


class ToyMaterialClassifier:
    """Classify detection crops with a toy model and a feature provider."""

    def __init__(
        self,
        model: ToyModel,
        provider: Optional[FeatureProvider] = None,
    ):
        self.model = model
        self.provider = provider or CropFeatureProvider()

    def __call__(
        self, rgb: np.ndarray, depth: np.ndarray
    ) -> tuple[MaterialLabel, MaterialDistribution]:
        features_rgb, features_depth = self.provider(rgb, depth)
        return self.model.predict(features_rgb, features_depth)


# gradient verification


@dataclass(frozen=True, eq=False)
class GradientReport:
    max_relative_error: float
    parameters: int
    worst: str


def _perturbable(
    f_rgb: np.ndarray, f_depth: np.ndarray, weights: FusionWeights
) -> list[tuple[str, np.ndarray]]:
    arrays = [("f_rgb", f_rgb), ("f_depth", f_depth)]
    for name, kernel in zip(("rgb", "depth", "fuse"), weights.filters()):
        arrays.append((f"w_{name}", kernel.weight))
        arrays.append((f"b_{name}", np.array([kernel.bias])))
    return arrays


def _rebuild(
    arrays: list[tuple[str, np.ndarray]]
) -> tuple[FeatureMap, FeatureMap, FusionWeights]:
    values = [array for _, array in arrays]
    filters = [
        ConvFilter(values[i], float(values[i + 1][0])) for i in (2, 4, 6)
    ]
    weights = FusionWeights(*filters)
    return FeatureMap(values[0]), FeatureMap(values[1]), weights


def gradient_check(
    f_rgb: FeatureMap,
    f_depth: FeatureMap,
    weights: FusionWeights,
    upstream: Optional[np.ndarray] = None,
    step: float = FINITE_DIFFERENCE_STEP,
) -> GradientReport:
    """
    Compare analytic fusion gradients with central differences.

    The loss is `sum(upstream * alpha)`, `mean(alpha)` by default. The
    relative error of an entry is `|a - n| / max(|a|, |n|, floor)`.
    """
    height, width = f_rgb.size
    if upstream is None:
        upstream = np.full((1, height, width), 1.0 / (height * width))
    level = FuseLevel(weights)
    level.forward(f_rgb, f_depth)
    analytic = level.backward(upstream).flat()

    arrays = [
        (name, array.astype(np.float64).copy())
        for name, array in _perturbable(f_rgb.data, f_depth.data, weights)
    ]

    def loss() -> float:
        a, b, w = _rebuild(arrays)
        return float((upstream * fuse_level(a, b, w)[1].alpha).sum())

    numeric = []
    names = []
    for name, array in arrays:
        flat = array.reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + step
            plus = loss()
            flat[index] = original - step
            minus = loss()
            flat[index] = original
            numeric.append((plus - minus) / (2 * step))
            names.append(f"{name}[{index}]")
    numeric_array = np.array(numeric)
    scale = np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric_array)),
        GRADIENT_CHECK_FLOOR,
    )
    errors = np.abs(analytic - numeric_array) / scale
    worst = int(errors.argmax())
    return GradientReport(float(errors[worst]), errors.size, names[worst])


# toy training


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)

    @property
    def improved(self) -> bool:
        return bool(self.losses) and self.losses[-1] < self.losses[0]


def blob_dataset(
    seed: int, channels: int = TOY_CHANNELS, size: int = TOY_FEATURE_SIZE
) -> tuple[FeatureMap, FeatureMap, np.ndarray]:
    """
    Two-class toy scene: a square blob on a background.

    Features are `+1` on the blob and `-1` off it, plus noise; the
    target attention is 1 on the blob.
    """
    rng = np.random.default_rng(seed)
    target = np.zeros((1, size, size))
    start = int(rng.integers(0, size // 2))
    target[:, start : start + size // 2, start : start + size // 2] = 1.0
    sign = 2 * target - 1

    def features() -> FeatureMap:
        noise = rng.normal(0.0, 0.1, (channels, size, size))
        return FeatureMap(sign + noise)

    return features(), features(), target


def train_toy(
    seed: int = 0,
    steps: int = TOY_MAX_TRAIN_STEPS,
    learning_rate: float = TOY_LEARNING_RATE,
    channels: int = TOY_CHANNELS,
    size: int = TOY_FEATURE_SIZE,
) -> tuple[FusionWeights, TrainReport]:
    """
    Fit one fusion level to a blob target by gradient descent.

    Loss is the mean squared error of `alpha` against the target.

    :raises InvalidInputError: for more than the allowed steps.
    :return: trained weights and the loss of every step.
    """
    if not 1 <= steps <= TOY_MAX_TRAIN_STEPS:
        raise InvalidInputError(
            steps, f"steps must be in [1, {TOY_MAX_TRAIN_STEPS}]"
        )
    f_rgb, f_depth, target = blob_dataset(seed, channels, size)
    weights = FusionWeights.zeros(channels)
    report = TrainReport()
    for _ in range(steps):
        level = FuseLevel(weights)
        _, attention = level.forward(f_rgb, f_depth)
        residual = attention.alpha - target
        report.losses.append(float((residual**2).mean()))
        gradients = level.backward(2.0 * residual / residual.size)
        weights = FusionWeights(
            *(
                ConvFilter(
                    kernel.weight - learning_rate * grad_weight,
                    kernel.bias - learning_rate * grad_bias,
                )
                for kernel, (grad_weight, grad_bias) in zip(
                    weights.filters(), gradients.weights
                )
            )
        )
    logger.debug(
        "toy training: loss %.6f -> %.6f", report.losses[0], report.losses[-1]
    )
    return weights, report


# demo


@dataclass(frozen=True, eq=False)
class FusionReport:
    alpha_min: float
    alpha_max: float
    alpha_mean: float
    violations: int
    gradient: GradientReport
    prediction_mean: float

    def render(self) -> str:
        status = "ok" if self.violations == 0 else "VIOLATED"
        return (
            f"alpha min {self.alpha_min:.9f}\n"
            f"alpha max {self.alpha_max:.9f}\n"
            f"alpha mean {self.alpha_mean:.9f}\n"
            f"attention bounds {status} ({self.violations} violations)\n"
            f"gradient check max relative error "
            f"{self.gradient.max_relative_error:.3e} "
            f"over {self.gradient.parameters} parameters\n"
            f"cascade prediction mean {self.prediction_mean:.9f}\n"
        )


def demo_fusion(
    seed: int,
    channels: int = 2,
    height: int = 4,
    width: int = 4,
    zero_weights: bool = False,
) -> FusionReport:
    """
    Exercise one fusion level and a cascade on seeded random tensors.

    :raises InvalidInputError: for shapes beyond 8 x 8.
    """
    if not (1 <= height <= 8 and 1 <= width <= 8 and channels >= 1):
        raise InvalidInputError(
            (channels, height, width), "shapes must be at most 8x8"
        )
    rng = np.random.default_rng(seed)
    shape = (channels, height, width)
    f_rgb = FeatureMap(rng.normal(size=shape))
    f_depth = FeatureMap(rng.normal(size=shape))
    make: Callable[[], FusionWeights] = (
        (lambda: FusionWeights.zeros(channels))
        if zero_weights
        else (lambda: FusionWeights.random(rng, channels))
    )
    weights = make()
    _, attention = fuse_level(f_rgb, f_depth, weights)
    report = gradient_check(f_rgb, f_depth, weights)
    levels = [
        (
            FeatureMap(resize_nearest(f_rgb.data, (s, s))),
            FeatureMap(resize_nearest(f_depth.data, (s, s))),
        )
        for s in level_sizes(max(height, width))
    ]
    result = cascade(levels, [weights] + [make() for _ in range(4)])
    return FusionReport(
        float(attention.alpha.min()),
        float(attention.alpha.max()),
        float(attention.alpha.mean()),
        attention.violations(),
        report,
        float(result.prediction.mean()),
    )
