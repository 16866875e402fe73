"""Channel/spatial normalization of conv feature maps and descriptor bags.

Both transforms divide by a max-magnitude statistic, so they are invariant
to positive rescaling of the input map and bounded to [-1, 1].  The
normalized per-position channel vectors are the local descriptors every
downstream encoder consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError, ShapeError
from .tensors import FeatureMap

PROVENANCES = ("raw", "channel_norm", "spatial_norm")

VARIANTS = ("channel", "spatial")

DEFAULT_EPSILON = 1e-12


@dataclass(frozen=True)
class DescriptorSet:
    """A bag of fixed-dimension local descriptors.

    ``descriptors`` is an (N, dim) float32 array; float32 matches the
    tensor container these sets serialize to, so the in-memory value and
    its file round-trip are identical.
    """

    dim: int
    descriptors: np.ndarray
    provenance: str = "raw"

    def __post_init__(self):
        if self.dim < 1:
            raise ParameterError("descriptor dim must be positive")
        if self.provenance not in PROVENANCES:
            raise ParameterError(f"unknown provenance '{self.provenance}'")
        arr = np.ascontiguousarray(self.descriptors, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[1] != self.dim:
            raise ShapeError(
                f"descriptors must be (N, {self.dim}), got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise DataError("descriptors contain non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "descriptors", arr)

    @property
    def count(self) -> int:
        return self.descriptors.shape[0]


def _check_epsilon(epsilon: float) -> None:
    if not epsilon > 0.0:
        raise ParameterError("epsilon must be positive")


def spatial_normalize(fmap: FeatureMap, epsilon: float = DEFAULT_EPSILON) -> FeatureMap:
    """Divide each channel plane by its own spatial max magnitude.

    Output values lie in [-1, 1]; all-zero channels stay zero thanks to
    the epsilon floor.
    """
    _check_epsilon(epsilon)
    data = fmap.data.astype(np.float64)
    denom = np.maximum(np.abs(data).max(axis=(0, 1)), epsilon)
    return FeatureMap(
        height=fmap.height,
        width=fmap.width,
        channels=fmap.channels,
        data=data / denom,
        nonnegative=fmap.nonnegative,
    )


def channel_normalize(fmap: FeatureMap, epsilon: float = DEFAULT_EPSILON) -> FeatureMap:
    """Divide each position's channel vector by its max-magnitude entry."""
    _check_epsilon(epsilon)
    data = fmap.data.astype(np.float64)
    denom = np.maximum(np.abs(data).max(axis=2, keepdims=True), epsilon)
    return FeatureMap(
        height=fmap.height,
        width=fmap.width,
        channels=fmap.channels,
        data=data / denom,
        nonnegative=fmap.nonnegative,
    )


def normalize_variant(
    fmap: FeatureMap, variant: str, epsilon: float = DEFAULT_EPSILON
) -> FeatureMap:
    """Apply one named normalization variant to a feature map."""
    if variant == "channel":
        return channel_normalize(fmap, epsilon)
    if variant == "spatial":
        return spatial_normalize(fmap, epsilon)
    raise ParameterError(f"unknown variant '{variant}'; choose from {VARIANTS}")


def variant_provenance(variant: str) -> str:
    """Descriptor provenance tag matching a normalization variant."""
    if variant not in VARIANTS:
        raise ParameterError(f"unknown variant '{variant}'; choose from {VARIANTS}")
    return f"{variant}_norm"


def extract_descriptors(fmap: FeatureMap, provenance: str = "raw") -> DescriptorSet:
    """Flatten a map into height*width descriptors in row-major position order."""
    flat = fmap.data.reshape(fmap.height * fmap.width, fmap.channels)
    return DescriptorSet(dim=fmap.channels, descriptors=flat, provenance=provenance)


def descriptors_to_map(ds: DescriptorSet) -> FeatureMap:
    """Pack a descriptor set into the rank-3 container (count, 1, dim)."""
    return FeatureMap(
        height=ds.count, width=1, channels=ds.dim, data=ds.descriptors
    )


def map_to_descriptors(fmap: FeatureMap, provenance: str = "raw") -> DescriptorSet:
    """Inverse of descriptors_to_map; requires width == 1."""
    if fmap.width != 1:
        raise ShapeError(f"descriptor container must have width 1, got {fmap.width}")
    return DescriptorSet(
        dim=fmap.channels,
        descriptors=fmap.data.reshape(fmap.height, fmap.channels),
        provenance=provenance,
    )
