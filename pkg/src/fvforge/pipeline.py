"""End-to-end scenario runs: manifest + config in, evaluation report out.

Four run modes share one discipline: models are fit on train-role
entries only, every cross-stage handoff goes through the float32 file
dtype (models are serialized and reloaded before use), and all
randomness derives from config seeds — so a run's serialized outputs
are bit-reproducible and byte-identical to composing the equivalent
command-line steps by hand.

Outputs under the run directory: ``report.csv``, ``scores.csv`` for the
evaluated images, per-image feature tensors under ``features*/``, and
fitted models under ``models/``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .augment import sum_pool
from .classify import load_svm, predict_matrix, save_svm, train_ovr
from .config import PipelineConfig
from .errors import ParameterError, ShapeError, ValidationError
from .evaluation import EvalReport, evaluate, write_report_csv, write_scores_csv
from .fisher import (
    FisherVector,
    concat_variant_fvs,
    encode_fv,
    intra_normalize,
    l2_normalize,
    power_l2_normalize,
    unit_norm,
)
from .fusion import concat_features, fuse_scores
from .gmm import fit_gmm, load_gmm, save_gmm
from .normalize import (
    VARIANTS,
    DescriptorSet,
    extract_descriptors,
    normalize_variant,
    variant_provenance,
)
from .pca import fit_pca, load_pca, project, save_pca
from .tensors import (
    STREAMS,
    FeatureMap,
    GlobalVector,
    Manifest,
    ManifestEntry,
    ScoreVector,
    load_manifest,
    read_tensor,
    write_tensor,
)

logger = logging.getLogger(__name__)


def derived_seed(base: int, stream: str, variant: str) -> int:
    """Distinct per-(stream, variant) seed for local-encoding models."""
    return base * 4 + 2 * STREAMS.index(stream) + VARIANTS.index(variant)


def _map_ordered(fn, items, threads: int) -> list:
    """Apply fn over items preserving order, optionally on a thread pool."""
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _labels_of(entries) -> np.ndarray:
    unlabeled = [e.image_id for e in entries if e.label is None]
    if unlabeled:
        raise ValidationError(
            f"{len(unlabeled)} entries have no label (first: {unlabeled[0]})"
        )
    return np.asarray([e.label for e in entries], dtype=np.int64)


def _require_train(manifest: Manifest):
    train = manifest.split("train")
    if not train:
        raise ValidationError("manifest has no train-role entries")
    return train


def _load_views(entry: ManifestEntry, stream: str, layer: str, expect):
    paths = entry.paths_for(stream, layer)
    if not paths:
        raise ValidationError(
            f"image '{entry.image_id}' lists no {stream}:{layer} view files"
        )
    tensors = [read_tensor(p) for p in paths]
    for path, tensor in zip(paths, tensors):
        if not isinstance(tensor, expect):
            raise ValidationError(
                f"{path}: expected a {expect.__name__} for {stream}:{layer}"
            )
    return tensors


def _file_round(vec: np.ndarray) -> np.ndarray:
    """Round through the file dtype so memory and disk paths agree."""
    return vec.astype(np.float32).astype(np.float64)


def _write_features(features_dir: Path, entries, feature_fn, threads: int) -> None:
    """Compute one vector per entry and serialize each as a tensor file."""
    features_dir.mkdir(parents=True, exist_ok=True)

    def one(entry: ManifestEntry) -> None:
        vec = feature_fn(entry)
        write_tensor(
            GlobalVector(dim=vec.size, data=vec),
            features_dir / f"{entry.image_id}.fvt",
        )

    _map_ordered(one, list(entries), threads)


def _read_features(features_dir: Path, entries) -> np.ndarray:
    rows = []
    dim = None
    for entry in entries:
        tensor = read_tensor(features_dir / f"{entry.image_id}.fvt")
        if not isinstance(tensor, GlobalVector):
            raise ValidationError(
                f"feature file for '{entry.image_id}' is not rank-1"
            )
        if dim is None:
            dim = tensor.dim
        elif tensor.dim != dim:
            raise ShapeError(
                f"feature dim mismatch: '{entry.image_id}' has {tensor.dim}, "
                f"expected {dim}"
            )
        rows.append(tensor.data.astype(np.float64))
    return np.stack(rows)


def _train_predict_evaluate(
    manifest: Manifest,
    cfg: PipelineConfig,
    out: Path,
    features_dir: Path,
    threads: int,
    svm_dir_name: str = "svm",
) -> EvalReport:
    """Shared tail of every classifier scenario.

    The model is saved before the test split is touched, so a
    train-only manifest still leaves fitted models on disk.
    """
    train = _require_train(manifest)
    x_train = _read_features(features_dir, train)
    model = train_ovr(
        x_train,
        _labels_of(train),
        manifest.class_count,
        C=cfg.svm_c,
        seed=cfg.svm_seed,
        max_epochs=cfg.svm_max_epochs,
        tol=cfg.svm_tol,
        class_names=manifest.class_names,
        threads=threads,
    )
    svm_dir = out / "models" / svm_dir_name
    save_svm(model, svm_dir)
    model = load_svm(svm_dir)
    logger.info(
        "stage=train-svm classes=%d features=%d degenerate=%d",
        model.class_count, model.feature_dim, len(model.degenerate_classes),
    )

    test = manifest.split("test")
    if not test:
        raise ValidationError("manifest has no test-role entries to evaluate")
    matrix = predict_matrix(model, _read_features(features_dir, test))
    report = evaluate(
        matrix, _labels_of(test), cfg.integrator, manifest.class_names
    )
    write_scores_csv(out / "scores.csv", [e.image_id for e in test], matrix)
    write_report_csv(out / "report.csv", report)
    logger.info(
        "stage=evaluate images=%d map=%.6f top1=%.6f",
        len(test), report.map_score, report.top1_accuracy,
    )
    return report


def run_scenario1(
    manifest: Manifest, cfg: PipelineConfig, out_dir: str | Path, threads: int = 1
) -> EvalReport:
    """Score-level fusion of the streams' per-class score tensors.

    No training happens here; the test split is evaluated when present,
    otherwise every entry is.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = list(manifest.split("test") or manifest.entries)
    labels = _labels_of(entries)

    def score_one(entry: ManifestEntry) -> np.ndarray:
        per_stream = []
        for stream in STREAMS:
            pooled = sum_pool(
                _load_views(entry, stream, cfg.score_layer, GlobalVector)
            )
            if pooled.dim != manifest.class_count:
                raise ShapeError(
                    f"image '{entry.image_id}' {stream} scores have dim "
                    f"{pooled.dim}, manifest lists {manifest.class_count} classes"
                )
            per_stream.append(ScoreVector(pooled.dim, pooled.data))
        return fuse_scores(per_stream[0], per_stream[1], cfg.alpha).scores

    matrix = np.stack(_map_ordered(score_one, entries, threads))
    report = evaluate(matrix, labels, cfg.integrator, manifest.class_names)
    write_scores_csv(out / "scores.csv", [e.image_id for e in entries], matrix)
    write_report_csv(out / "report.csv", report)
    logger.info(
        "stage=evaluate images=%d map=%.6f top1=%.6f",
        len(entries), report.map_score, report.top1_accuracy,
    )
    return report


def _global_feature(entry: ManifestEntry, cfg: PipelineConfig) -> np.ndarray:
    """Sum-pool each stream's global vectors, unit-normalize, concatenate."""
    parts = []
    for stream in STREAMS:
        pooled = sum_pool(_load_views(entry, stream, cfg.global_layer, GlobalVector))
        parts.append(l2_normalize(pooled).data.astype(np.float64))
    fused = concat_features(parts[0], parts[1], cfg.beta).data
    return unit_norm(fused) if cfg.final_l2 else fused


def run_global(
    manifest: Manifest, cfg: PipelineConfig, out_dir: str | Path, threads: int = 1
) -> EvalReport:
    """Global-vector scenario; covers pre-trained and fine-tuned inputs alike."""
    out = Path(out_dir)
    features_dir = out / "features"
    _write_features(
        features_dir, manifest.entries, lambda e: _global_feature(e, cfg), threads
    )
    logger.info("stage=features kind=global images=%d", len(manifest.entries))
    return _train_predict_evaluate(manifest, cfg, out, features_dir, threads)


def _collect_descriptors(
    entries, stream: str, variant: str, cfg: PipelineConfig
) -> DescriptorSet:
    """All normalized descriptors of the given entries, in manifest order."""
    blocks = []
    dim = None
    for entry in entries:
        for fmap in _load_views(entry, stream, cfg.conv_layer, FeatureMap):
            normed = normalize_variant(fmap, variant)
            ds = extract_descriptors(normed, variant_provenance(variant))
            if dim is None:
                dim = ds.dim
            elif ds.dim != dim:
                raise ShapeError(
                    f"conv maps disagree on channel count: {ds.dim} vs {dim}"
                )
            blocks.append(ds.descriptors)
    return DescriptorSet(
        dim=dim,
        descriptors=np.vstack(blocks),
        provenance=variant_provenance(variant),
    )


def _fit_local_models(
    manifest: Manifest, cfg: PipelineConfig, models_dir: Path
) -> dict:
    """Fit + serialize + reload one PCA and one GMM per (stream, variant)."""
    train = _require_train(manifest)
    models = {}
    for stream in STREAMS:
        for variant in cfg.tdd_variants:
            descriptors = _collect_descriptors(train, stream, variant, cfg)
            pca_dir = models_dir / f"pca_{stream}_{variant}"
            pca_model = fit_pca(descriptors, cfg.pca_dim)
            save_pca(pca_model, pca_dir)
            pca_model = load_pca(pca_dir)
            logger.info(
                "stage=fit-pca stream=%s variant=%s descriptors=%d dim=%d",
                stream, variant, descriptors.count, cfg.pca_dim,
            )
            projected = project(pca_model, descriptors)
            gmm_dir = models_dir / f"gmm_{stream}_{variant}"
            gmm_model = fit_gmm(
                projected,
                cfg.gmm_components,
                seed=derived_seed(cfg.gmm_seed, stream, variant),
                max_iters=cfg.gmm_max_iterations,
                tol=cfg.gmm_tol,
            )
            save_gmm(gmm_model, gmm_dir)
            gmm_model = load_gmm(gmm_dir)
            logger.info(
                "stage=fit-gmm stream=%s variant=%s components=%d iterations=%d",
                stream, variant, cfg.gmm_components, len(gmm_model.fit_trace),
            )
            models[(stream, variant)] = (pca_model, gmm_model)
    return models


def _encode_views(
    entry: ManifestEntry,
    stream: str,
    variant: str,
    cfg: PipelineConfig,
    pca_model,
    gmm_model,
) -> FisherVector:
    """One fully normalized, file-rounded encoding per (image, stream, variant)."""
    fvs = []
    for fmap in _load_views(entry, stream, cfg.conv_layer, FeatureMap):
        normed = normalize_variant(fmap, variant)
        descriptors = extract_descriptors(normed, variant_provenance(variant))
        fvs.append(encode_fv(gmm_model, project(pca_model, descriptors)))
    if cfg.pooling_order == "pool_then_normalize":
        fv = power_l2_normalize(
            intra_normalize(sum_pool(fvs), cfg.intra_block_mode)
        )
    else:
        fv = sum_pool(
            [
                power_l2_normalize(intra_normalize(f, cfg.intra_block_mode))
                for f in fvs
            ]
        )
    return FisherVector(
        K=fv.K, d=fv.d, data=_file_round(fv.data), normalized=fv.normalized
    )


def _local_feature(
    entry: ManifestEntry, cfg: PipelineConfig, models: dict
) -> np.ndarray:
    """Per-stream variant encodings, variant concat, then stream concat."""
    stream_vecs = []
    for stream in STREAMS:
        encoded = {
            variant: _encode_views(entry, stream, variant, cfg, *models[(stream, variant)])
            for variant in cfg.tdd_variants
        }
        if len(encoded) == 2:
            vec = _file_round(
                concat_variant_fvs(encoded["channel"], encoded["spatial"])
            )
        else:
            (vec,) = (fv.data for fv in encoded.values())
        stream_vecs.append(vec)
    fused = concat_features(stream_vecs[0], stream_vecs[1], cfg.beta).data
    return unit_norm(fused) if cfg.final_l2 else fused


def run_local_fv(
    manifest: Manifest, cfg: PipelineConfig, out_dir: str | Path, threads: int = 1
) -> EvalReport:
    """Local-descriptor scenario: normalize, project, encode, pool, fuse."""
    out = Path(out_dir)
    models = _fit_local_models(manifest, cfg, out / "models")
    features_dir = out / "features"
    _write_features(
        features_dir,
        manifest.entries,
        lambda e: _local_feature(e, cfg, models),
        threads,
    )
    logger.info("stage=features kind=local images=%d", len(manifest.entries))
    return _train_predict_evaluate(manifest, cfg, out, features_dir, threads)


def run_layer_fusion(
    manifest: Manifest, cfg: PipelineConfig, out_dir: str | Path, threads: int = 1
) -> EvalReport:
    """Combine the global and local representations of the same images."""
    out = Path(out_dir)
    global_dir = out / "features_global"
    _write_features(
        global_dir, manifest.entries, lambda e: _global_feature(e, cfg), threads
    )
    logger.info("stage=features kind=global images=%d", len(manifest.entries))
    models = _fit_local_models(manifest, cfg, out / "models")
    local_dir = out / "features_local"
    _write_features(
        local_dir,
        manifest.entries,
        lambda e: _local_feature(e, cfg, models),
        threads,
    )
    logger.info("stage=features kind=local images=%d", len(manifest.entries))

    if cfg.layer_mode == "features":
        features_dir = out / "features"

        def combined(entry: ManifestEntry) -> np.ndarray:
            g = read_tensor(global_dir / f"{entry.image_id}.fvt")
            l = read_tensor(local_dir / f"{entry.image_id}.fvt")
            fused = concat_features(
                g.data.astype(np.float64),
                l.data.astype(np.float64),
                cfg.layer_weights,
            ).data
            return unit_norm(fused) if cfg.final_l2 else fused

        _write_features(features_dir, manifest.entries, combined, threads)
        return _train_predict_evaluate(manifest, cfg, out, features_dir, threads)

    # Score-level combination: one classifier bank per representation.
    train = _require_train(manifest)
    y_train = _labels_of(train)
    banks = {}
    for name, features_dir in (("global", global_dir), ("local", local_dir)):
        model = train_ovr(
            _read_features(features_dir, train),
            y_train,
            manifest.class_count,
            C=cfg.svm_c,
            seed=cfg.svm_seed,
            max_epochs=cfg.svm_max_epochs,
            tol=cfg.svm_tol,
            class_names=manifest.class_names,
            threads=threads,
        )
        svm_dir = out / "models" / f"svm_{name}"
        save_svm(model, svm_dir)
        banks[name] = (load_svm(svm_dir), features_dir)
        logger.info(
            "stage=train-svm bank=%s classes=%d features=%d degenerate=%d",
            name, model.class_count, model.feature_dim,
            len(model.degenerate_classes),
        )

    test = manifest.split("test")
    if not test:
        raise ValidationError("manifest has no test-role entries to evaluate")
    matrices = {
        name: predict_matrix(model, _read_features(features_dir, test))
        for name, (model, features_dir) in banks.items()
    }
    fused_matrix = (
        cfg.layer_weights.object_weight * matrices["global"]
        + cfg.layer_weights.scene_weight * matrices["local"]
    )
    report = evaluate(
        fused_matrix, _labels_of(test), cfg.integrator, manifest.class_names
    )
    write_scores_csv(out / "scores.csv", [e.image_id for e in test], fused_matrix)
    write_report_csv(out / "report.csv", report)
    logger.info(
        "stage=evaluate images=%d map=%.6f top1=%.6f",
        len(test), report.map_score, report.top1_accuracy,
    )
    return report


_RUNNERS = {
    "softmax_fusion": run_scenario1,
    "global_pretrained": run_global,
    "global_finetuned": run_global,
    "local_fv": run_local_fv,
    "layer_fusion": run_layer_fusion,
}


def run(
    manifest: Manifest | str | Path,
    cfg: PipelineConfig,
    out_dir: str | Path,
    threads: int = 1,
) -> EvalReport:
    """Dispatch to the configured scenario runner."""
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    if threads < 1:
        raise ParameterError("threads must be positive")
    runner = _RUNNERS[cfg.scenario]
    return runner(manifest, cfg, out_dir, threads)
