"""Linear dimensionality reduction via covariance eigendecomposition.

Uses the maximum-likelihood (1/N) covariance so variance conventions line
up with the mixture model that consumes the projected descriptors.  No
whitening is applied; eigenvalues are stored with the model so it could
be added without refitting.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericError, ParameterError, ShapeError, ValidationError
from .normalize import DescriptorSet
from .tensors import (
    FeatureMap,
    GlobalVector,
    read_header,
    read_tensor,
    write_header,
    write_tensor,
)

ORTHONORMALITY_TOL = 1e-6

_HEADER_NAME = "pca.model"


@dataclass(frozen=True)
class PcaModel:
    input_dim: int
    output_dim: int
    mean: np.ndarray        # (input_dim,)
    basis: np.ndarray       # (output_dim, input_dim), orthonormal rows
    eigenvalues: np.ndarray  # (output_dim,), nonincreasing, >= 0

    def __post_init__(self):
        if not 1 <= self.output_dim <= self.input_dim:
            raise ParameterError("need 1 <= output_dim <= input_dim")
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        basis = np.ascontiguousarray(self.basis, dtype=np.float64)
        eig = np.ascontiguousarray(self.eigenvalues, dtype=np.float64)
        if mean.shape != (self.input_dim,):
            raise ShapeError(f"mean shape {mean.shape} != ({self.input_dim},)")
        if basis.shape != (self.output_dim, self.input_dim):
            raise ShapeError(
                f"basis shape {basis.shape} != ({self.output_dim}, {self.input_dim})"
            )
        if eig.shape != (self.output_dim,):
            raise ShapeError("eigenvalue count must equal output_dim")
        gram = basis @ basis.T
        if not np.allclose(gram, np.eye(self.output_dim), atol=ORTHONORMALITY_TOL):
            raise NumericError("basis rows are not orthonormal")
        if np.any(np.diff(eig) > 1e-12) or np.any(eig < -1e-12):
            raise NumericError("eigenvalues must be nonincreasing and nonnegative")
        for name, arr in (("mean", mean), ("basis", basis), ("eigenvalues", eig)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    # Deterministic sign convention: the largest-magnitude entry of each
    # row is made nonnegative, first index winning ties.
    out = basis.copy()
    for row in out:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return out


def fit_pca(descriptors: DescriptorSet, output_dim: int) -> PcaModel:
    """Fit mean + top-``output_dim`` principal axes of a descriptor bag."""
    n, d = descriptors.count, descriptors.dim
    if output_dim < 1 or output_dim > d:
        raise ParameterError(f"output_dim {output_dim} outside 1..{d}")
    if n < output_dim:
        raise ParameterError(f"{n} descriptors cannot support output_dim {output_dim}")
    x = descriptors.descriptors.astype(np.float64)
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    try:
        eigvals, eigvecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"covariance eigendecomposition failed: {exc}") from exc
    order = np.argsort(eigvals)[::-1][:output_dim]
    eigvals = np.clip(eigvals[order], 0.0, None)
    basis = _fix_signs(eigvecs[:, order].T)
    return PcaModel(
        input_dim=d, output_dim=output_dim,
        mean=mean, basis=basis, eigenvalues=eigvals,
    )


def project(model: PcaModel, descriptors: DescriptorSet) -> DescriptorSet:
    """Center and project a descriptor bag onto the model's basis."""
    if descriptors.dim != model.input_dim:
        raise ShapeError(
            f"descriptor dim {descriptors.dim} != model input_dim {model.input_dim}"
        )
    x = descriptors.descriptors.astype(np.float64)
    reduced = (x - model.mean) @ model.basis.T
    return DescriptorSet(
        dim=model.output_dim, descriptors=reduced, provenance=descriptors.provenance
    )


def save_pca(model: PcaModel, model_dir: str | Path) -> None:
    """Write mean/basis/eigenvalue tensors plus a header naming them."""
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(GlobalVector(model.input_dim, model.mean), model_dir / "mean.fvt")
    write_tensor(
        FeatureMap(model.output_dim, 1, model.input_dim, model.basis),
        model_dir / "basis.fvt",
    )
    write_tensor(
        GlobalVector(model.output_dim, model.eigenvalues),
        model_dir / "eigenvalues.fvt",
    )
    write_header(
        model_dir / _HEADER_NAME,
        {"mean": "mean.fvt", "basis": "basis.fvt", "eigenvalues": "eigenvalues.fvt"},
    )


def load_pca(model_dir: str | Path) -> PcaModel:
    """Load a serialized model; orthonormality is re-checked on load."""
    model_dir = Path(model_dir)
    header = read_header(model_dir / _HEADER_NAME)
    for key in ("mean", "basis", "eigenvalues"):
        if key not in header:
            raise ValidationError(f"PCA header missing '{key}'")
    mean = read_tensor(model_dir / header["mean"])
    basis = read_tensor(model_dir / header["basis"])
    eig = read_tensor(model_dir / header["eigenvalues"])
    if not isinstance(mean, GlobalVector) or not isinstance(basis, FeatureMap):
        raise ValidationError("PCA payload tensors have unexpected ranks")
    return PcaModel(
        input_dim=mean.dim,
        output_dim=basis.height,
        mean=mean.data,
        basis=basis.data.reshape(basis.height, basis.channels),
        eigenvalues=eig.data,
    )
