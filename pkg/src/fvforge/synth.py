"""Seeded synthetic activation datasets for self-contained end-to-end runs.

No network is involved: each class gets Gaussian-parameterized fake
activations per stream — a softmax-like score vector biased toward the
true class, a global fully-connected vector around a class mean, and a
small conv map whose channel statistics depend on the class.  Every file
uses the package tensor format and a manifest ties them together with
train/test roles.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .tensors import (
    STREAMS,
    FeatureMap,
    GlobalVector,
    Manifest,
    ManifestEntry,
    load_manifest,
    write_manifest,
    write_tensor,
)

SCORE_LAYER = "prob"
GLOBAL_LAYER = "fc7"
CONV_LAYER = "conv5_3"

DEFAULT_FC_DIM = 32
DEFAULT_MAP_SIZE = 6
DEFAULT_MAP_CHANNELS = 16
DEFAULT_CLASS_SCALE = 2.0
DEFAULT_NOISE_SCALE = 0.5
DEFAULT_TEST_FRACTION = 0.25


@dataclass(frozen=True)
class SynthSpec:
    """Size and signal-strength knobs for one generated dataset."""

    classes: int = 10
    images_per_class: int = 20
    seed: int = 7
    views: int = 1
    test_fraction: float = DEFAULT_TEST_FRACTION
    fc_dim: int = DEFAULT_FC_DIM
    map_size: int = DEFAULT_MAP_SIZE
    map_channels: int = DEFAULT_MAP_CHANNELS
    class_scale: float = DEFAULT_CLASS_SCALE
    noise_scale: float = DEFAULT_NOISE_SCALE

    def __post_init__(self):
        if self.classes < 2:
            raise ParameterError("need at least 2 classes")
        if self.images_per_class < 2:
            raise ParameterError("need at least 2 images per class")
        if self.views < 1:
            raise ParameterError("views must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise ParameterError("test_fraction must lie in (0, 1)")
        if self.fc_dim < 1 or self.map_size < 1 or self.map_channels < 1:
            raise ParameterError("feature dimensions must be positive")
        if self.class_scale <= 0.0 or self.noise_scale < 0.0:
            raise ParameterError(
                "class_scale must be positive and noise_scale nonnegative"
            )

    @property
    def test_per_class(self) -> int:
        return max(1, round(self.images_per_class * self.test_fraction))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def generate_dataset(out_dir: str | Path, spec: SynthSpec | None = None) -> Manifest:
    """Write tensors + manifest under ``out_dir`` and return the manifest.

    Deterministic for a fixed spec: one generator seeded with
    ``spec.seed`` drives all sampling in a fixed order.
    """
    spec = spec or SynthSpec()
    out = Path(out_dir)
    tensor_dir = out / "tensors"
    tensor_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    class_names = [f"class{k:02d}" for k in range(spec.classes)]
    # Per-stream class prototypes; streams get independent draws so the
    # two carry complementary (not identical) signal.
    fc_means = {
        stream: spec.class_scale * rng.standard_normal((spec.classes, spec.fc_dim))
        for stream in STREAMS
    }
    conv_means = {
        stream: spec.class_scale
        * rng.standard_normal((spec.classes, spec.map_channels))
        for stream in STREAMS
    }

    entries = []
    test_start = spec.images_per_class - spec.test_per_class
    for k in range(spec.classes):
        for j in range(spec.images_per_class):
            image_id = f"{class_names[k]}_im{j:03d}"
            role = "test" if j >= test_start else "train"
            views = []
            for stream in STREAMS:
                for v in range(spec.views):
                    tag = f"{image_id}.{stream}.v{v}"
                    logits = spec.noise_scale * rng.standard_normal(spec.classes)
                    logits[k] += spec.class_scale
                    prob = GlobalVector(
                        dim=spec.classes,
                        data=_softmax(logits),
                        nonnegative=True,
                    )
                    prob_path = tensor_dir / f"{tag}.{SCORE_LAYER}.fvt"
                    write_tensor(prob, prob_path)
                    views.append((stream, SCORE_LAYER, prob_path))

                    fc = fc_means[stream][k] + spec.noise_scale * rng.standard_normal(
                        spec.fc_dim
                    )
                    fc_path = tensor_dir / f"{tag}.{GLOBAL_LAYER}.fvt"
                    write_tensor(
                        GlobalVector(dim=spec.fc_dim, data=fc), fc_path
                    )
                    views.append((stream, GLOBAL_LAYER, fc_path))

                    conv = conv_means[stream][k] + spec.noise_scale * (
                        rng.standard_normal(
                            (spec.map_size, spec.map_size, spec.map_channels)
                        )
                    )
                    conv_path = tensor_dir / f"{tag}.{CONV_LAYER}.fvt"
                    write_tensor(
                        FeatureMap(
                            height=spec.map_size,
                            width=spec.map_size,
                            channels=spec.map_channels,
                            data=conv,
                        ),
                        conv_path,
                    )
                    views.append((stream, CONV_LAYER, conv_path))
            entries.append(
                ManifestEntry(
                    image_id=image_id,
                    label=k,
                    views=tuple(views),
                    role=role,
                )
            )

    manifest = Manifest(
        class_names=tuple(class_names),
        entries=tuple(entries),
        path=out / "data.manifest",
    )
    write_manifest(manifest, out / "data.manifest")
    # Reload so the returned value is exactly what later stages will read.
    return load_manifest(out / "data.manifest")
