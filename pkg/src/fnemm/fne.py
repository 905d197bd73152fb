"""Full-network image features: spatial pooling, train-set standardization,
ternary discretization.

The pipeline turns raw per-layer CNN activations into a fixed-length vector
over {-1, 0, 1}: each value says whether a feature is unusually high (+1),
unusually low (-1), or typical (0) relative to the training images.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .errors import (
    DimensionError,
    InsufficientDataError,
    ValidationError,
)

if TYPE_CHECKING:
    from .tensorio import ActivationSet

# Features whose train-set std is at or below this are treated as constant
# and standardized to 0.
STD_EPS = 1e-8

DEFAULT_THETA_POS = 0.15
DEFAULT_THETA_NEG = -0.25


def _as_f32(theta: float) -> float:
    # Thresholds are persisted as float32; quantize up front so a value
    # round-trips bit-exactly through the stats file.
    return float(np.float32(theta))


@dataclass
class FneConfig:
    """Discretization thresholds mapping z-values to {-1, 0, 1}."""

    theta_pos: float = DEFAULT_THETA_POS
    theta_neg: float = DEFAULT_THETA_NEG

    def __post_init__(self) -> None:
        self.theta_pos = _as_f32(self.theta_pos)
        self.theta_neg = _as_f32(self.theta_neg)
        if not (self.theta_neg < self.theta_pos):
            raise ValidationError(
                f"theta_neg ({self.theta_neg}) must be below theta_pos ({self.theta_pos})"
            )


@dataclass(eq=False)
class FneStats:
    """Per-feature population mean/std fitted on the training images."""

    mean: np.ndarray
    std: np.ndarray
    fitted_on: int

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if self.mean.ndim != 1 or self.std.ndim != 1:
            raise ValidationError("stats mean/std must be 1-D")
        if self.mean.shape != self.std.shape:
            raise DimensionError(
                f"mean has {self.mean.shape[0]} features, std has {self.std.shape[0]}"
            )
        if np.any(self.std < 0):
            raise ValidationError("std must be non-negative")
        if self.fitted_on < 2:
            raise ValidationError("stats must be fitted on at least 2 images")

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FneStats):
            return NotImplemented
        return (
            self.fitted_on == other.fitted_on
            and self.mean.tobytes() == other.mean.tobytes()
            and self.std.tobytes() == other.std.tobytes()
        )


@dataclass
class RawFeatureVector:
    """Pooled real-valued features for one image, in layer order."""

    values: np.ndarray
    image_id: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValidationError("feature vector must be 1-D")

    @property
    def d(self) -> int:
        return self.values.shape[0]


@dataclass
class FneVector:
    """Ternary image embedding; every entry is -1, 0, or 1."""

    values: np.ndarray
    image_id: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.int8)
        if self.values.ndim != 1:
            raise ValidationError("embedding must be 1-D")
        if not np.isin(self.values, (-1, 0, 1)).all():
            raise ValidationError("embedding entries must be in {-1, 0, 1}")

    @property
    def d(self) -> int:
        return self.values.shape[0]


def spatial_pool(acts: "ActivationSet") -> RawFeatureVector:
    """Reduce each conv channel to its spatial mean; pass fc units through.

    Features are concatenated in layer order, channels/units in index order,
    so the output length is the sum of conv channel counts and fc unit counts.
    """
    if not acts.layers:
        raise ValidationError(f"activation set {acts.image_id!r} has no layers")
    parts = []
    for layer in acts.layers:
        if layer.kind == "conv":
            parts.append(layer.values.mean(axis=(0, 1), dtype=np.float64))
        else:
            parts.append(layer.values.astype(np.float64))
    return RawFeatureVector(np.concatenate(parts), image_id=acts.image_id)


def fit_stats(train: Iterable[RawFeatureVector]) -> FneStats:
    """Fit per-feature population mean/std over a stream of feature vectors.

    Uses a single numerically stable (Welford) pass in float64; needs at
    least two vectors, all of the same length.
    """
    n = 0
    mean: np.ndarray | None = None
    m2: np.ndarray | None = None
    for raw in train:
        x = raw.values
        if mean is None:
            mean = np.zeros_like(x)
            m2 = np.zeros_like(x)
        elif x.shape != mean.shape:
            raise DimensionError(
                f"feature vector for {raw.image_id!r} has {x.shape[0]} entries, "
                f"expected {mean.shape[0]}"
            )
        n += 1
        delta = x - mean
        mean += delta / n
        m2 += delta * (x - mean)
    if n < 2:
        raise InsufficientDataError(f"need at least 2 training vectors, got {n}")
    assert mean is not None and m2 is not None
    return FneStats(mean=mean, std=np.sqrt(m2 / n), fitted_on=n)


def standardize(raw: RawFeatureVector, stats: FneStats) -> np.ndarray:
    """z-values of a feature vector under train-set stats.

    Constant features (std <= STD_EPS) map to 0: they carry no signal for
    any image, so they are never significant.
    """
    if raw.d != stats.d:
        raise DimensionError(f"vector has {raw.d} features, stats expect {stats.d}")
    mean = stats.mean.astype(np.float64)
    std = stats.std.astype(np.float64)
    live = std > STD_EPS
    z = np.zeros_like(raw.values)
    np.divide(raw.values - mean, std, out=z, where=live)
    z[~live] = 0.0
    return z


def discretize(z: np.ndarray, cfg: FneConfig, image_id: str = "") -> FneVector:
    """Map z-values to {-1, 0, 1}; values at a threshold map to 0."""
    z = np.asarray(z, dtype=np.float64)
    out = np.zeros(z.shape, dtype=np.int8)
    out[z > cfg.theta_pos] = 1
    out[z < cfg.theta_neg] = -1
    return FneVector(out, image_id=image_id)


def fne_embed(acts: "ActivationSet", stats: FneStats, cfg: FneConfig) -> FneVector:
    """Pool, standardize, and discretize one image's activations."""
    raw = spatial_pool(acts)
    return discretize(standardize(raw, stats), cfg, image_id=acts.image_id)
