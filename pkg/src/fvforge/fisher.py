"""Fisher vector encoding of descriptor bags and its post-normalizations.

One encoded vector holds, per mixture component, a first-order block and a
second-order block of the component's soft-assigned standardized
residuals, laid out [u_1, v_1, ..., u_K, v_K].  The 1/N averaging makes
the encoding invariant to duplicating the descriptor bag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gmm as gmm_mod
from .errors import DataError, ParameterError, ShapeError
from .normalize import DescriptorSet
from .tensors import GlobalVector

BLOCK_MODES = ("per_order", "per_gaussian")

_NORM_FLAGS = ("intra", "power", "l2")


@dataclass(frozen=True)
class FisherVector:
    """2*K*d encoding of a descriptor bag against a mixture model."""

    K: int
    d: int
    data: np.ndarray
    normalized: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.K < 1 or self.d < 1:
            raise ParameterError("K and d must be positive")
        arr = np.ascontiguousarray(self.data, dtype=np.float64).reshape(-1)
        if arr.size != 2 * self.K * self.d:
            raise ShapeError(
                f"data length {arr.size} != 2*K*d = {2 * self.K * self.d}"
            )
        if not np.all(np.isfinite(arr)):
            raise DataError("Fisher vector contains non-finite values")
        unknown = set(self.normalized) - set(_NORM_FLAGS)
        if unknown:
            raise ParameterError(f"unknown normalization flags {sorted(unknown)}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "normalized", frozenset(self.normalized))

    def block_u(self, k: int) -> np.ndarray:
        return self.data[2 * k * self.d : (2 * k + 1) * self.d]

    def block_v(self, k: int) -> np.ndarray:
        return self.data[(2 * k + 1) * self.d : (2 * k + 2) * self.d]


def encode_fv(model: gmm_mod.GmmModel, descriptors: DescriptorSet) -> FisherVector:
    """Encode a descriptor bag into an unnormalized Fisher vector.

    With responsibilities gamma and sigma_k = sqrt(var_k):

        u_k = 1/(N sqrt(pi_k))   * sum_x gamma_k(x) (x - mu_k) / sigma_k
        v_k = 1/(N sqrt(2 pi_k)) * sum_x gamma_k(x) [((x - mu_k)/sigma_k)^2 - 1]
    """
    if descriptors.count < 1:
        raise ParameterError("cannot encode an empty descriptor set")
    if descriptors.dim != model.dim:
        raise ShapeError(
            f"descriptor dim {descriptors.dim} != model dim {model.dim}"
        )
    x = descriptors.descriptors.astype(np.float64)
    n = x.shape[0]
    gamma = gmm_mod.responsibilities(model, descriptors).gamma
    sigma = np.sqrt(model.variances)

    out = np.empty(2 * model.K * model.dim, dtype=np.float64)
    for k in range(model.K):
        z = (x - model.means[k]) / sigma[k]
        gk = gamma[:, k]
        u = gk @ z / (n * np.sqrt(model.weights[k]))
        v = gk @ (z * z - 1.0) / (n * np.sqrt(2.0 * model.weights[k]))
        out[2 * k * model.dim : (2 * k + 1) * model.dim] = u
        out[(2 * k + 1) * model.dim : (2 * k + 2) * model.dim] = v
    return FisherVector(K=model.K, d=model.dim, data=out)


def intra_normalize(fv: FisherVector, block_mode: str = "per_order") -> FisherVector:
    """Independently l2-normalize each block of the Fisher vector.

    ``per_order`` treats every u_k and v_k (length d) as its own block;
    ``per_gaussian`` joins each component's pair into one length-2d
    block.  Zero blocks stay zero.
    """
    if "intra" in fv.normalized:
        raise ParameterError("intra normalization already applied")
    if block_mode not in BLOCK_MODES:
        raise ParameterError(f"unknown block_mode '{block_mode}'")
    block_len = fv.d if block_mode == "per_order" else 2 * fv.d
    blocks = fv.data.reshape(-1, block_len).copy()
    norms = np.linalg.norm(blocks, axis=1, keepdims=True)
    np.divide(blocks, norms, out=blocks, where=norms > 0.0)
    return FisherVector(
        K=fv.K, d=fv.d, data=blocks.reshape(-1),
        normalized=fv.normalized | {"intra"},
    )


def unit_norm(vec: np.ndarray, epsilon: float = 1e-12) -> np.ndarray:
    """vec / max(||vec||, epsilon); the zero vector maps to itself."""
    return vec / max(float(np.linalg.norm(vec)), epsilon)


def power_l2_normalize(vec):
    """Signed square root of every entry, then global l2 normalization.

    Accepts a FisherVector or a GlobalVector and returns the same type.
    """
    if isinstance(vec, FisherVector):
        data = np.sign(vec.data) * np.sqrt(np.abs(vec.data))
        return FisherVector(
            K=vec.K, d=vec.d, data=unit_norm(data),
            normalized=vec.normalized | {"power", "l2"},
        )
    if isinstance(vec, GlobalVector):
        data = vec.data.astype(np.float64)
        data = np.sign(data) * np.sqrt(np.abs(data))
        return GlobalVector(
            dim=vec.dim, data=unit_norm(data), source_tag=vec.source_tag
        )
    raise ParameterError(f"cannot power-l2 normalize {type(vec).__name__}")


def l2_normalize(vec: GlobalVector, epsilon: float = 1e-12) -> GlobalVector:
    """Plain l2 normalization for global representations; idempotent."""
    if not isinstance(vec, GlobalVector):
        raise ParameterError(f"l2_normalize expects a GlobalVector, got {type(vec).__name__}")
    return GlobalVector(
        dim=vec.dim,
        data=unit_norm(vec.data.astype(np.float64), epsilon),
        source_tag=vec.source_tag,
        nonnegative=vec.nonnegative,
    )


def concat_variant_fvs(channel_fv: FisherVector, spatial_fv: FisherVector) -> np.ndarray:
    """Join the two TDD-variant encodings of one image region.

    Both inputs must already be fully normalized; the channel variant
    comes first and the concatenation is l2-normalized once more.
    """
    for fv, name in ((channel_fv, "channel"), (spatial_fv, "spatial")):
        if "l2" not in fv.normalized:
            raise ParameterError(f"{name} Fisher vector is not normalized")
    return unit_norm(np.concatenate([channel_fv.data, spatial_fv.data]))
