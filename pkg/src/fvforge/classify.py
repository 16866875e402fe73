"""One-vs-rest linear max-margin classifiers trained by dual coordinate descent.

Each class gets an independent binary SVM over the shared feature matrix:

    min_w  1/2 ||w||^2 + C * sum_i max(0, 1 - y_i * w . x_i)

with the bias folded in as an extra always-1 feature coordinate.  That
coordinate is regularized along with the rest — a deliberate
simplification that keeps the dual box-constrained with no equality
constraint.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError, ShapeError, ValidationError
from .tensors import (
    FeatureMap,
    GlobalVector,
    ScoreVector,
    read_header,
    read_tensor,
    write_header,
    write_tensor,
)

logger = logging.getLogger(__name__)

DEFAULT_C = 1.0
DEFAULT_MAX_EPOCHS = 1000
DEFAULT_TOL = 1e-4
NORM_WARN_FRACTION = 0.1

_HEADER_NAME = "svm.model"


@dataclass(frozen=True)
class LinearModel:
    """Weight matrix + biases for a bank of one-vs-rest linear scorers."""

    class_count: int
    feature_dim: int
    weights: np.ndarray
    biases: np.ndarray
    C: float = DEFAULT_C
    class_names: tuple[str, ...] = ()
    degenerate_classes: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.class_count < 1 or self.feature_dim < 1:
            raise ParameterError("class_count and feature_dim must be positive")
        if self.C <= 0.0 or not np.isfinite(self.C):
            raise ParameterError(f"C must be a positive real, got {self.C}")
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        b = np.ascontiguousarray(self.biases, dtype=np.float64).reshape(-1)
        if w.shape != (self.class_count, self.feature_dim):
            raise ShapeError(
                f"weights shape {w.shape} != "
                f"({self.class_count}, {self.feature_dim})"
            )
        if b.shape != (self.class_count,):
            raise ShapeError(f"biases shape {b.shape} != ({self.class_count},)")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise DataError("model parameters must be finite")
        if self.class_names and len(self.class_names) != self.class_count:
            raise ShapeError(
                f"{len(self.class_names)} class names for "
                f"{self.class_count} classes"
            )
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(
            self, "degenerate_classes", tuple(self.degenerate_classes)
        )


def _train_binary(
    x: np.ndarray,
    y: np.ndarray,
    C: float,
    rng: np.random.Generator,
    max_epochs: int,
    tol: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Dual coordinate descent for one binary l2-reg L1-hinge SVM.

    ``x`` already carries the constant-1 bias column.  Returns the
    primal weight vector (last coordinate is the bias) together with
    the dual variables, which stay inside [0, C] by construction.
    """
    n, dim = x.shape
    alpha = np.zeros(n)
    w = np.zeros(dim)
    sq_norms = np.einsum("ij,ij->i", x, x)

    for _ in range(max_epochs):
        order = rng.permutation(n)
        max_violation = 0.0
        for i in order:
            grad = y[i] * (x[i] @ w) - 1.0
            # Projected gradient: zero when the constraint set blocks descent.
            if alpha[i] <= 0.0:
                pg = min(grad, 0.0)
            elif alpha[i] >= C:
                pg = max(grad, 0.0)
            else:
                pg = grad
            if pg != 0.0:
                old = alpha[i]
                alpha[i] = min(max(old - grad / sq_norms[i], 0.0), C)
                w += (alpha[i] - old) * y[i] * x[i]
            max_violation = max(max_violation, abs(pg))
        if max_violation < tol:
            break
    return w, alpha


def train_ovr(
    features,
    labels,
    class_count: int,
    C: float = DEFAULT_C,
    seed: int = 7,
    max_epochs: int = DEFAULT_MAX_EPOCHS,
    tol: float = DEFAULT_TOL,
    class_names=(),
    threads: int = 1,
) -> LinearModel:
    """Train one binary classifier per class against all other classes.

    A class with no positive examples is trained as a constant
    always-negative scorer and reported in ``degenerate_classes``
    rather than raised.  Deterministic for a fixed seed regardless of
    thread count.
    """
    x = np.ascontiguousarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"features must be a nonempty 2-d array, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("features contain non-finite values")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"{y.shape[0]} labels for {x.shape[0]} features")
    if class_count < 1:
        raise ParameterError("class_count must be positive")
    if y.min() < 0 or y.max() >= class_count:
        raise ValidationError(
            f"labels must lie in [0, {class_count}), got "
            f"[{y.min()}, {y.max()}]"
        )
    if C <= 0.0:
        raise ParameterError(f"C must be positive, got {C}")
    if max_epochs < 1 or tol <= 0.0:
        raise ParameterError("max_epochs must be >= 1 and tol > 0")

    norms = np.linalg.norm(x, axis=1)
    off = np.abs(norms - 1.0) > NORM_WARN_FRACTION
    if np.any(off):
        logger.warning(
            "stage=train-svm event=norm-check off_unit=%d total=%d",
            int(off.sum()), x.shape[0],
        )

    n = x.shape[0]
    aug = np.hstack([x, np.ones((n, 1))])

    def one_class(k: int) -> tuple[np.ndarray, bool]:
        pos = y == k
        if not pos.any():
            return np.zeros(aug.shape[1]), True
        yk = np.where(pos, 1.0, -1.0)
        rng = np.random.default_rng([seed, k])
        w, _ = _train_binary(aug, yk, C, rng, max_epochs, tol)
        return w, False

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_class, range(class_count)))
    else:
        results = [one_class(k) for k in range(class_count)]

    w_aug = np.stack([w for w, _ in results])
    degenerate = tuple(k for k, (_, d) in enumerate(results) if d)
    if degenerate:
        logger.warning(
            "stage=train-svm event=degenerate classes=%s",
            ",".join(map(str, degenerate)),
        )
    return LinearModel(
        class_count=class_count,
        feature_dim=x.shape[1],
        weights=w_aug[:, :-1],
        biases=w_aug[:, -1],
        C=C,
        class_names=tuple(class_names),
        degenerate_classes=degenerate,
    )


def predict_scores(model: LinearModel, feature: np.ndarray) -> ScoreVector:
    """scores[k] = weights[k] . feature + biases[k]; no calibration."""
    f = np.ascontiguousarray(feature, dtype=np.float64).reshape(-1)
    if f.size != model.feature_dim:
        raise ShapeError(
            f"feature dim {f.size} != model dim {model.feature_dim}"
        )
    return ScoreVector(
        class_count=model.class_count, scores=model.weights @ f + model.biases
    )


def predict_matrix(model: LinearModel, features: np.ndarray) -> np.ndarray:
    """Score many features at once; rows of the result follow input rows."""
    x = np.ascontiguousarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.feature_dim:
        raise ShapeError(
            f"features shape {x.shape} incompatible with model dim "
            f"{model.feature_dim}"
        )
    if not np.all(np.isfinite(x)):
        raise DataError("features contain non-finite values")
    return x @ model.weights.T + model.biases


def primal_objective(model: LinearModel, features, labels) -> float:
    """1/2 sum_k ||w_k||^2 + C * total hinge loss across all classes."""
    x = np.ascontiguousarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    margins = predict_matrix(model, x)
    total = 0.5 * float(
        np.sum(model.weights * model.weights) + model.biases @ model.biases
    )
    for k in range(model.class_count):
        yk = np.where(y == k, 1.0, -1.0)
        total += model.C * float(np.maximum(0.0, 1.0 - yk * margins[:, k]).sum())
    return total


def save_svm(model: LinearModel, model_dir: str | Path) -> None:
    """Write weights/biases tensors plus a text header into a directory."""
    out = Path(model_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(
        FeatureMap(model.class_count, 1, model.feature_dim, model.weights),
        out / "weights.fvt",
    )
    write_tensor(
        GlobalVector(dim=model.class_count, data=model.biases),
        out / "biases.fvt",
    )
    fields = {
        "weights": "weights.fvt",
        "biases": "biases.fvt",
        "class_count": str(model.class_count),
        "feature_dim": str(model.feature_dim),
        "c": repr(model.C),
    }
    if model.class_names:
        fields["class_names"] = ",".join(model.class_names)
    if model.degenerate_classes:
        fields["degenerate"] = ",".join(map(str, model.degenerate_classes))
    write_header(out / _HEADER_NAME, fields)


def load_svm(model_dir: str | Path) -> LinearModel:
    """Inverse of save_svm; revalidates everything via the constructor."""
    src = Path(model_dir)
    fields = read_header(src / _HEADER_NAME)
    try:
        class_count = int(fields["class_count"])
        feature_dim = int(fields["feature_dim"])
        c_value = float(fields["c"])
    except KeyError as exc:
        raise ValidationError(f"model header missing key {exc}") from exc
    except ValueError as exc:
        raise ValidationError(f"bad model header value: {exc}") from exc
    names = tuple(fields["class_names"].split(",")) if "class_names" in fields else ()
    degenerate = (
        tuple(int(t) for t in fields["degenerate"].split(","))
        if "degenerate" in fields
        else ()
    )
    weights = read_tensor(src / fields.get("weights", "weights.fvt"))
    biases = read_tensor(src / fields.get("biases", "biases.fvt"))
    if not isinstance(weights, FeatureMap) or weights.width != 1:
        raise ValidationError("weights tensor must be rank-3 with width 1")
    if not isinstance(biases, GlobalVector):
        raise ValidationError("biases tensor must be rank-1")
    return LinearModel(
        class_count=class_count,
        feature_dim=feature_dim,
        weights=weights.data.reshape(class_count, feature_dim).astype(np.float64),
        biases=biases.data.astype(np.float64),
        C=c_value,
        class_names=names,
        degenerate_classes=degenerate,
    )
