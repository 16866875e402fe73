"""Diagonal-covariance Gaussian mixtures fit by EM.

All density work happens in log space through a stable log-sum-exp; raw
densities are never multiplied.  Initialization is seeded k-means++
followed by a short k-means refinement, which makes the fit a pure
function of (data, K, seed, parameters).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    NumericError,
    ParameterError,
    ShapeError,
    ValidationError,
)
from .normalize import DescriptorSet
from .tensors import (
    FeatureMap,
    GlobalVector,
    read_header,
    read_tensor,
    write_header,
    write_tensor,
)

logger = logging.getLogger(__name__)

WEIGHT_SUM_TOL = 1e-9
DEFAULT_WEIGHT_FLOOR = 1e-6
DEFAULT_VARIANCE_FLOOR_FRAC = 1e-4
DEFAULT_MAX_FIT_POINTS = 500_000
KMEANS_REFINE_ITERS = 10
MONOTONICITY_TOL = 1e-10

_HEADER_NAME = "gmm.model"


def logsumexp(a: np.ndarray, axis: int | None = None) -> np.ndarray:
    """Stable log(sum(exp(a))) along ``axis``."""
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    out = np.log(np.sum(np.exp(a - amax), axis=axis, keepdims=True)) + amax
    return out if axis is None else np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class GmmModel:
    K: int
    dim: int
    weights: np.ndarray    # (K,), positive, sums to 1
    means: np.ndarray      # (K, dim)
    variances: np.ndarray  # (K, dim), strictly positive diagonals
    fit_trace: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.K < 1 or self.dim < 1:
            raise ParameterError("K and dim must be positive")
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        mu = np.ascontiguousarray(self.means, dtype=np.float64)
        var = np.ascontiguousarray(self.variances, dtype=np.float64)
        if w.shape != (self.K,):
            raise ShapeError(f"weights shape {w.shape} != ({self.K},)")
        if mu.shape != (self.K, self.dim) or var.shape != (self.K, self.dim):
            raise ShapeError("means/variances must be (K, dim)")
        if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL or np.any(w <= 0.0):
            raise NumericError("weights must be positive and sum to 1")
        if np.any(var <= 0.0):
            raise NumericError("variances must be strictly positive")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise NumericError("model parameters must be finite")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)


@dataclass(frozen=True)
class Responsibilities:
    N: int
    gamma: np.ndarray  # (N, K), rows sum to 1

    def __post_init__(self):
        g = np.ascontiguousarray(self.gamma, dtype=np.float64)
        if g.shape[0] != self.N:
            raise ShapeError("row count disagrees with N")
        if np.any(np.abs(g.sum(axis=1) - 1.0) > WEIGHT_SUM_TOL):
            raise NumericError("responsibility rows must sum to 1")
        g.flags.writeable = False
        object.__setattr__(self, "gamma", g)


def _log_density(x: np.ndarray, model_or_parts) -> np.ndarray:
    """Per-point, per-component log(pi_k * N(x; mu_k, var_k)), shape (N, K)."""
    weights, means, variances = model_or_parts
    # (x - mu)^2 / var expanded per component; K is small enough to loop.
    n = x.shape[0]
    k = means.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    log_norm = -0.5 * (
        means.shape[1] * np.log(2.0 * np.pi) + np.sum(np.log(variances), axis=1)
    )
    for j in range(k):
        diff = x - means[j]
        out[:, j] = log_norm[j] - 0.5 * np.sum(diff * diff / variances[j], axis=1)
    return out + np.log(weights)


def _as_f64(descriptors: DescriptorSet) -> np.ndarray:
    return descriptors.descriptors.astype(np.float64)


def _kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers[j] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))
    return centers


def _assign(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # argmin breaks ties toward the lowest component index.
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * x @ centers.T
        + np.sum(centers * centers, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def fit_gmm(
    descriptors: DescriptorSet,
    K: int,
    seed: int = 7,
    max_iters: int = 100,
    tol: float = 1e-5,
    *,
    weight_floor: float = DEFAULT_WEIGHT_FLOOR,
    variance_floor_frac: float = DEFAULT_VARIANCE_FLOOR_FRAC,
    max_points: int = DEFAULT_MAX_FIT_POINTS,
) -> GmmModel:
    """Fit a K-component diagonal mixture by EM.

    Stops when the per-point average log-likelihood improves by less than
    ``tol`` or after ``max_iters`` iterations, whichever comes first, and
    raises NumericError if that average ever decreases beyond float noise
    (the EM guarantee).  A component whose weight collapses below the
    floor is reset to a random data point with isotropic variance; the
    event is logged, not fatal.  Fits on more than ``max_points``
    descriptors use a seeded subsample.
    """
    if K < 1:
        raise ParameterError("K must be positive")
    if max_iters < 1:
        raise ParameterError("max_iters must be positive")
    if tol <= 0.0:
        raise ParameterError("tol must be positive")
    x = _as_f64(descriptors)
    if x.shape[0] < K:
        raise ParameterError(f"{x.shape[0]} descriptors < K={K}")
    rng = np.random.default_rng(seed)
    if x.shape[0] > max_points:
        keep = rng.choice(x.shape[0], size=max_points, replace=False)
        keep.sort()
        x = x[keep]
        logger.info("stage=gmm-subsample kept=%d of=%d", max_points, descriptors.count)
    n, d = x.shape

    global_var = x.var(axis=0)
    var_floor = np.maximum(variance_floor_frac * global_var, 1e-12)
    iso_var = np.maximum(np.full(d, global_var.mean()), var_floor)

    # k-means++ seeding plus a short Lloyd refinement.
    centers = _kmeans_plus_plus(x, K, rng)
    for _ in range(KMEANS_REFINE_ITERS):
        labels = _assign(x, centers)
        for j in range(K):
            mask = labels == j
            if mask.any():
                centers[j] = x[mask].mean(axis=0)
            else:
                centers[j] = x[rng.integers(n)]

    labels = _assign(x, centers)
    weights = np.empty(K)
    means = centers.copy()
    variances = np.empty((K, d))
    for j in range(K):
        mask = labels == j
        count = int(mask.sum())
        weights[j] = count / n
        if count:
            means[j] = x[mask].mean(axis=0)
            variances[j] = np.maximum(x[mask].var(axis=0), var_floor)
        else:
            means[j] = x[rng.integers(n)]
            variances[j] = iso_var
    weights = np.maximum(weights, weight_floor)
    weights /= weights.sum()

    trace: list[float] = []
    prev_avg = None
    check_monotone = True
    for iteration in range(max_iters):
        log_joint = _log_density(x, (weights, means, variances))
        log_norm = logsumexp(log_joint, axis=1)
        avg_ll = float(log_norm.mean())
        if not np.isfinite(avg_ll):
            raise NumericError("log-likelihood became non-finite during EM")
        if prev_avg is not None and check_monotone and avg_ll < prev_avg - MONOTONICITY_TOL:
            raise NumericError(
                f"EM log-likelihood decreased at iteration {iteration}: "
                f"{prev_avg:.12g} -> {avg_ll:.12g}"
            )
        trace.append(avg_ll)
        if prev_avg is not None and avg_ll - prev_avg < tol:
            break
        prev_avg = avg_ll

        gamma = np.exp(log_joint - log_norm[:, None])
        nk = gamma.sum(axis=0)
        new_weights = nk / n
        check_monotone = True
        for j in range(K):
            if new_weights[j] < weight_floor:
                # Collapsed component: restart it at a random data point.
                means[j] = x[rng.integers(n)]
                variances[j] = iso_var
                new_weights[j] = 1.0 / K
                check_monotone = False
                logger.warning(
                    "stage=gmm-reset component=%d iteration=%d", j, iteration
                )
            else:
                means[j] = gamma[:, j] @ x / nk[j]
                diff = x - means[j]
                variances[j] = np.maximum(
                    gamma[:, j] @ (diff * diff) / nk[j], var_floor
                )
        weights = np.maximum(new_weights, weight_floor)
        weights /= weights.sum()

    return GmmModel(
        K=K, dim=d, weights=weights, means=means, variances=variances,
        fit_trace=tuple(trace),
    )


def responsibilities(model: GmmModel, descriptors: DescriptorSet) -> Responsibilities:
    """Posterior component probabilities for each descriptor, via log-sum-exp."""
    if descriptors.dim != model.dim:
        raise ShapeError(f"descriptor dim {descriptors.dim} != model dim {model.dim}")
    x = _as_f64(descriptors)
    log_joint = _log_density(x, (model.weights, model.means, model.variances))
    gamma = np.exp(log_joint - logsumexp(log_joint, axis=1)[:, None])
    return Responsibilities(N=x.shape[0], gamma=gamma)


def log_likelihood(model: GmmModel, descriptors: DescriptorSet) -> float:
    """Total log-likelihood of a descriptor bag under the mixture."""
    if descriptors.dim != model.dim:
        raise ShapeError(f"descriptor dim {descriptors.dim} != model dim {model.dim}")
    x = _as_f64(descriptors)
    total = float(
        logsumexp(_log_density(x, (model.weights, model.means, model.variances)), axis=1).sum()
    )
    if not np.isfinite(total):
        raise NumericError("log-likelihood is not finite")
    return total


def save_gmm(model: GmmModel, model_dir: str | Path) -> None:
    """Write weights/means/variances tensors plus a header naming them."""
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(GlobalVector(model.K, model.weights), model_dir / "weights.fvt")
    write_tensor(FeatureMap(model.K, 1, model.dim, model.means), model_dir / "means.fvt")
    write_tensor(
        FeatureMap(model.K, 1, model.dim, model.variances), model_dir / "variances.fvt"
    )
    write_header(
        model_dir / _HEADER_NAME,
        {"weights": "weights.fvt", "means": "means.fvt", "variances": "variances.fvt"},
    )


def load_gmm(model_dir: str | Path) -> GmmModel:
    """Load a serialized mixture; float32 weights are renormalized to sum to 1."""
    model_dir = Path(model_dir)
    header = read_header(model_dir / _HEADER_NAME)
    for key in ("weights", "means", "variances"):
        if key not in header:
            raise ValidationError(f"GMM header missing '{key}'")
    weights = read_tensor(model_dir / header["weights"])
    means = read_tensor(model_dir / header["means"])
    variances = read_tensor(model_dir / header["variances"])
    if not isinstance(weights, GlobalVector) or not isinstance(means, FeatureMap):
        raise ValidationError("GMM payload tensors have unexpected ranks")
    w = weights.data.astype(np.float64)
    total = w.sum()
    if not total > 0.0:
        raise NumericError("serialized mixture weights do not sum to a positive value")
    return GmmModel(
        K=weights.dim,
        dim=means.channels,
        weights=w / total,
        means=means.data.reshape(means.height, means.channels),
        variances=variances.data.reshape(variances.height, variances.channels),
    )
