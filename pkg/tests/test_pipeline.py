"""Scenario runs checked against hand-composed equivalents on seeded data."""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np
import pytest

from fvforge.augment import sum_pool
from fvforge.config import PipelineConfig
from fvforge.errors import ParameterError, ShapeError, ValidationError
from fvforge.evaluation import evaluate, read_scores_csv
from fvforge.fisher import (
    FisherVector,
    concat_variant_fvs,
    encode_fv,
    intra_normalize,
    l2_normalize,
    power_l2_normalize,
    unit_norm,
)
from fvforge.fusion import FusionWeights, concat_features
from fvforge.gmm import load_gmm
from fvforge.normalize import extract_descriptors, normalize_variant, variant_provenance
from fvforge.pca import load_pca, project
from fvforge.pipeline import derived_seed, run
from fvforge.synth import SynthSpec, generate_dataset
from fvforge.tensors import STREAMS, Manifest, read_tensor

SPEC = SynthSpec(
    classes=4,
    images_per_class=8,
    seed=11,
    views=2,
    test_fraction=0.25,
    fc_dim=12,
    map_size=5,
    map_channels=10,
)


def make_cfg(**overrides) -> PipelineConfig:
    base = dict(scenario="local_fv", pca_dim=5, gmm_components=3, gmm_max_iterations=40)
    base.update(overrides)
    return PipelineConfig(**base)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return generate_dataset(tmp_path_factory.mktemp("synthdata"), SPEC)


@pytest.fixture(scope="module")
def local_run(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("local_run")
    report = run(dataset, make_cfg(), out)
    return out, report


def _file_bytes(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


def test_score_fusion_matches_manual_composition(dataset, tmp_path):
    cfg = make_cfg(scenario="softmax_fusion", alpha=FusionWeights(0.7, 1.3))
    report = run(dataset, cfg, tmp_path / "run")
    test_entries = dataset.split("test")
    rows = []
    for entry in test_entries:
        pooled = {
            stream: sum_pool(
                [read_tensor(p) for p in entry.paths_for(stream, "prob")]
            ).data.astype(np.float64)
            for stream in STREAMS
        }
        rows.append(0.7 * pooled["object"] + 1.3 * pooled["scene"])
    matrix = np.stack(rows)
    expected = evaluate(
        matrix, [e.label for e in test_entries], class_names=dataset.class_names
    )
    np.testing.assert_array_equal(report.per_class_ap, expected.per_class_ap)
    assert report.map_score == expected.map_score
    assert report.top1_accuracy == expected.top1_accuracy
    ids, written = read_scores_csv(tmp_path / "run" / "scores.csv")
    assert ids == [e.image_id for e in test_entries]
    np.testing.assert_array_equal(written, matrix)


def test_score_fusion_weight_projects_one_stream(dataset, tmp_path):
    cfg = make_cfg(scenario="softmax_fusion", alpha=FusionWeights(1.0, 0.0))
    run(dataset, cfg, tmp_path / "run")
    _, written = read_scores_csv(tmp_path / "run" / "scores.csv")
    rows = [
        sum_pool(
            [read_tensor(p) for p in e.paths_for("object", "prob")]
        ).data.astype(np.float64)
        for e in dataset.split("test")
    ]
    np.testing.assert_array_equal(written, np.stack(rows))


def test_score_fusion_falls_back_to_all_entries(dataset, tmp_path):
    all_train = Manifest(
        class_names=dataset.class_names,
        entries=tuple(replace(e, role="train") for e in dataset.entries),
    )
    cfg = make_cfg(scenario="softmax_fusion")
    run(all_train, cfg, tmp_path / "run")
    ids, _ = read_scores_csv(tmp_path / "run" / "scores.csv")
    assert len(ids) == len(dataset.entries)


def test_global_run_is_deterministic(dataset, tmp_path):
    cfg = make_cfg(scenario="global_pretrained")
    a, b = tmp_path / "a", tmp_path / "b"
    run(dataset, cfg, a)
    run(dataset, cfg, b)
    assert (a / "scores.csv").read_bytes() == (b / "scores.csv").read_bytes()
    assert (a / "report.csv").read_bytes() == (b / "report.csv").read_bytes()
    assert _file_bytes(a / "features") == _file_bytes(b / "features")


def test_global_features_are_unit_vectors(dataset, tmp_path):
    cfg = make_cfg(scenario="global_pretrained")
    run(dataset, cfg, tmp_path / "run")
    entry = dataset.entries[0]
    vec = read_tensor(tmp_path / "run" / "features" / f"{entry.image_id}.fvt")
    assert vec.dim == 2 * SPEC.fc_dim
    assert abs(np.linalg.norm(vec.data.astype(np.float64)) - 1.0) < 1e-6


def test_zero_scene_weight_blanks_the_scene_block(dataset, tmp_path):
    cfg = make_cfg(scenario="global_pretrained", beta=FusionWeights(1.0, 0.0))
    run(dataset, cfg, tmp_path / "run")
    entry = dataset.entries[0]
    vec = read_tensor(tmp_path / "run" / "features" / f"{entry.image_id}.fvt")
    data = vec.data.astype(np.float64)
    assert not data[SPEC.fc_dim :].any()
    pooled = sum_pool([read_tensor(p) for p in entry.paths_for("object", "fc7")])
    expected = l2_normalize(pooled).data.astype(np.float64)
    np.testing.assert_allclose(data[: SPEC.fc_dim], expected, atol=1e-6)


def test_local_feature_recomputable_from_saved_models(dataset, local_run):
    out, _ = local_run
    cfg = make_cfg()
    entry = dataset.split("test")[0]
    stream_vecs = []
    for stream in STREAMS:
        encoded = {}
        for variant in cfg.tdd_variants:
            pca = load_pca(out / "models" / f"pca_{stream}_{variant}")
            gmm = load_gmm(out / "models" / f"gmm_{stream}_{variant}")
            fvs = []
            for path in entry.paths_for(stream, cfg.conv_layer):
                normed = normalize_variant(read_tensor(path), variant)
                ds = extract_descriptors(normed, variant_provenance(variant))
                fvs.append(encode_fv(gmm, project(pca, ds)))
            fv = power_l2_normalize(intra_normalize(sum_pool(fvs), cfg.intra_block_mode))
            rounded = fv.data.astype(np.float32).astype(np.float64)
            encoded[variant] = FisherVector(fv.K, fv.d, rounded, normalized=fv.normalized)
        joined = concat_variant_fvs(encoded["channel"], encoded["spatial"])
        stream_vecs.append(joined.astype(np.float32).astype(np.float64))
    fused = concat_features(stream_vecs[0], stream_vecs[1], cfg.beta).data
    expected = unit_norm(fused).astype(np.float32)
    written = read_tensor(out / "features" / f"{entry.image_id}.fvt")
    np.testing.assert_array_equal(written.data, expected)


def test_local_run_separates_the_synthetic_classes(local_run):
    _, report = local_run
    assert report.map_score >= 0.9
    assert report.excluded_classes == ()


def test_models_never_see_test_entries(dataset, local_run, tmp_path):
    full_out, _ = local_run
    train_only = Manifest(
        class_names=dataset.class_names, entries=dataset.split("train")
    )
    with pytest.raises(ValidationError, match="no test-role"):
        run(train_only, make_cfg(), tmp_path / "trainonly")
    full_models = sorted(
        p.relative_to(full_out) for p in (full_out / "models").rglob("*") if p.is_file()
    )
    assert full_models
    for rel in full_models:
        assert (tmp_path / "trainonly" / rel).read_bytes() == (
            full_out / rel
        ).read_bytes()


def test_thread_count_does_not_change_outputs(dataset, local_run, tmp_path):
    serial_out, _ = local_run
    run(dataset, make_cfg(), tmp_path / "pooled", threads=3)
    assert (tmp_path / "pooled" / "scores.csv").read_bytes() == (
        serial_out / "scores.csv"
    ).read_bytes()
    assert _file_bytes(tmp_path / "pooled" / "features") == _file_bytes(
        serial_out / "features"
    )


def test_pooling_order_changes_multi_view_features(dataset, local_run, tmp_path):
    baseline_out, _ = local_run
    run(dataset, make_cfg(pooling_order="normalize_then_pool"), tmp_path / "alt")
    baseline = _file_bytes(baseline_out / "features")
    alt = _file_bytes(tmp_path / "alt" / "features")
    assert set(baseline) == set(alt)
    assert any(baseline[name] != alt[name] for name in baseline)


def test_single_variant_halves_the_local_feature(dataset, tmp_path):
    cfg = make_cfg(tdd_variants=("spatial",))
    run(dataset, cfg, tmp_path / "run")
    entry = dataset.entries[0]
    vec = read_tensor(tmp_path / "run" / "features" / f"{entry.image_id}.fvt")
    assert vec.dim == 2 * (2 * cfg.gmm_components * cfg.pca_dim)


def test_layer_fusion_concatenates_both_representations(dataset, tmp_path, caplog):
    cfg = make_cfg(scenario="layer_fusion")
    with caplog.at_level(logging.INFO, logger="fvforge.pipeline"):
        report = run(dataset, cfg, tmp_path / "run")
    assert report.map_score >= 0.9
    entry = dataset.entries[0]
    vec = read_tensor(tmp_path / "run" / "features" / f"{entry.image_id}.fvt")
    global_dim = 2 * SPEC.fc_dim
    local_dim = 2 * 2 * (2 * cfg.gmm_components * cfg.pca_dim)
    assert vec.dim == global_dim + local_dim
    messages = [rec.message for rec in caplog.records]
    for marker in ("stage=features", "stage=train-svm", "stage=evaluate"):
        assert any(marker in m for m in messages)


def test_layer_fusion_scores_with_zero_local_weight_matches_global(dataset, tmp_path):
    cfg_scores = make_cfg(
        scenario="layer_fusion",
        layer_mode="scores",
        layer_weights=FusionWeights(1.0, 0.0),
    )
    report_lf = run(dataset, cfg_scores, tmp_path / "lf")
    report_g = run(dataset, make_cfg(scenario="global_pretrained"), tmp_path / "g")
    _, fused = read_scores_csv(tmp_path / "lf" / "scores.csv")
    _, global_only = read_scores_csv(tmp_path / "g" / "scores.csv")
    np.testing.assert_array_equal(fused, global_only)
    assert report_lf.map_score == report_g.map_score
    assert report_lf.top1_accuracy == report_g.top1_accuracy
    assert (tmp_path / "lf" / "models" / "svm_local" / "svm.model").is_file()


def test_wrong_score_layer_dim_is_rejected(dataset, tmp_path):
    cfg = make_cfg(scenario="softmax_fusion", score_layer="fc7")
    with pytest.raises(ShapeError, match="classes"):
        run(dataset, cfg, tmp_path / "run")


def test_unlabeled_entries_are_rejected(dataset, tmp_path):
    entries = list(dataset.entries)
    victim = dataset.split("test")[0]
    entries[entries.index(victim)] = replace(victim, label=None)
    broken = Manifest(class_names=dataset.class_names, entries=tuple(entries))
    with pytest.raises(ValidationError, match="no label"):
        run(broken, make_cfg(scenario="softmax_fusion"), tmp_path / "run")


def test_missing_conv_views_are_named(dataset, tmp_path):
    entries = tuple(
        replace(e, views=tuple(v for v in e.views if v[1] != "conv5_3"))
        for e in dataset.entries
    )
    broken = Manifest(class_names=dataset.class_names, entries=entries)
    with pytest.raises(ValidationError, match="conv5_3"):
        run(broken, make_cfg(), tmp_path / "run")


def test_run_accepts_a_manifest_path_and_checks_threads(dataset, tmp_path):
    cfg = make_cfg(scenario="softmax_fusion")
    report = run(str(dataset.path), cfg, tmp_path / "run")
    assert 0.0 <= report.map_score <= 1.0
    with pytest.raises(ParameterError):
        run(dataset, cfg, tmp_path / "bad", threads=0)


def test_derived_seeds_are_distinct():
    seeds = {
        derived_seed(7, stream, variant)
        for stream in STREAMS
        for variant in ("channel", "spatial")
    }
    assert len(seeds) == 4
    assert derived_seed(8, "object", "channel") not in seeds
