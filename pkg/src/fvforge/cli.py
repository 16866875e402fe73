"""Command-line entry point: one multiplexer, twelve subcommands.

Exit codes: 0 success, 2 bad usage or parameters, 3 data/format
problems (including missing or unreadable files), 4 numeric failures.
Every subcommand writes outputs atomically and logs one ``key=value``
line per completed stage on standard error.  Randomized subcommands
default to seed 7 unless given ``--seed``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, pipeline
from .augment import plan_views, sum_pool
from .classify import load_svm, predict_matrix, save_svm, train_ovr
from .config import load_config
from .errors import FvForgeError, ParameterError, ValidationError
from .evaluation import (
    evaluate,
    read_scores_csv,
    write_report_csv,
    write_scores_csv,
)
from .fisher import FisherVector, encode_fv, intra_normalize, power_l2_normalize, unit_norm
from .fusion import FusionWeights, concat_features
from .gmm import fit_gmm, load_gmm, save_gmm
from .normalize import (
    VARIANTS,
    DescriptorSet,
    descriptors_to_map,
    extract_descriptors,
    normalize_variant,
    variant_provenance,
)
from .pca import fit_pca, load_pca, project, save_pca
from .synth import SynthSpec, generate_dataset
from .tensors import (
    ROLES,
    FeatureMap,
    GlobalVector,
    atomic_write_text,
    load_manifest,
    read_tensor,
    write_tensor,
)

logger = logging.getLogger("fvforge")

_NORM_TOKENS = ("none", "intra", "power", "l2")


def _parse_ints(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(t.strip()) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise ParameterError(f"bad integer list '{text}'") from exc
    if not values:
        raise ParameterError(f"empty integer list '{text}'")
    return values


def _parse_weights(text: str) -> FusionWeights:
    parts = [t.strip() for t in text.split(",") if t.strip()]
    if len(parts) != 2:
        raise ParameterError(f"weights must be two comma-separated reals, got '{text}'")
    try:
        return FusionWeights(float(parts[0]), float(parts[1]))
    except ValueError as exc:
        raise ParameterError(f"bad weights '{text}'") from exc


def _read_descriptors(path: str) -> DescriptorSet:
    tensor = read_tensor(path)
    if not isinstance(tensor, FeatureMap):
        raise ValidationError(f"{path}: descriptor input must be a rank-3 tensor")
    return extract_descriptors(tensor)


def _read_vector(path: str) -> GlobalVector:
    tensor = read_tensor(path)
    if not isinstance(tensor, GlobalVector):
        raise ValidationError(f"{path}: expected a rank-1 tensor")
    return tensor


# ---------------------------------------------------------------- commands


def _cmd_plan_views(args) -> int:
    views = plan_views(
        image_width=args.width,
        image_height=args.height,
        scales=_parse_ints(args.scales),
        crop_size=args.crop,
        include_flips=not args.no_flips,
    )
    lines = ["scale,crop_x,crop_y,crop_size,flip"]
    for v in views.views:
        lines.append(
            f"{v.scale_smallest_side},{v.crop_x},{v.crop_y},"
            f"{v.crop_size},{int(v.flipped)}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    logger.info("stage=plan-views views=%d", len(views.views))
    return 0


def _suffixed(path: str, tag: str) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}.{tag}{p.suffix}" if p.suffix else f"{p.name}.{tag}")


def _cmd_tdd(args) -> int:
    fmap = read_tensor(args.infile)
    if not isinstance(fmap, FeatureMap):
        raise ValidationError(f"{args.infile}: tdd input must be a rank-3 tensor")
    modes = VARIANTS if args.mode == "both" else (args.mode,)
    for mode in modes:
        normed = normalize_variant(fmap, mode)
        container = descriptors_to_map(
            extract_descriptors(normed, variant_provenance(mode))
        )
        out = _suffixed(args.out, mode) if args.mode == "both" else Path(args.out)
        write_tensor(container, out)
        logger.info(
            "stage=tdd mode=%s descriptors=%d out=%s",
            mode, container.height, out,
        )
    return 0


def _stack_descriptor_files(paths) -> DescriptorSet:
    sets = [_read_descriptors(p) for p in paths]
    dim = sets[0].dim
    for path, ds in zip(paths, sets):
        if ds.dim != dim:
            raise ValidationError(
                f"{path}: descriptor dim {ds.dim} != {dim} of first input"
            )
    return DescriptorSet(
        dim=dim,
        descriptors=np.vstack([s.descriptors for s in sets]),
        provenance=sets[0].provenance,
    )


def _cmd_fit_pca(args) -> int:
    descriptors = _stack_descriptor_files(args.inputs)
    model = fit_pca(descriptors, args.dim)
    save_pca(model, args.out)
    logger.info(
        "stage=fit-pca descriptors=%d in_dim=%d out_dim=%d out=%s",
        descriptors.count, model.input_dim, model.output_dim, args.out,
    )
    return 0


def _cmd_apply_pca(args) -> int:
    model = load_pca(args.model)
    projected = project(model, _read_descriptors(args.infile))
    write_tensor(descriptors_to_map(projected), args.out)
    logger.info(
        "stage=apply-pca descriptors=%d dim=%d out=%s",
        projected.count, projected.dim, args.out,
    )
    return 0


def _cmd_fit_gmm(args) -> int:
    descriptors = _stack_descriptor_files(args.inputs)
    model = fit_gmm(
        descriptors,
        args.k,
        seed=args.seed,
        max_iters=args.max_iters,
        tol=args.tol,
    )
    save_gmm(model, args.out)
    logger.info(
        "stage=fit-gmm components=%d descriptors=%d iterations=%d out=%s",
        args.k, descriptors.count, len(model.fit_trace), args.out,
    )
    return 0


def _apply_norms(fv: FisherVector, tokens: tuple[str, ...], intra_mode: str) -> FisherVector:
    for token in tokens:
        if token == "intra":
            fv = intra_normalize(fv, intra_mode)
        elif token == "power":
            fv = power_l2_normalize(fv)
        elif token == "l2":
            fv = FisherVector(
                K=fv.K, d=fv.d, data=unit_norm(fv.data),
                normalized=fv.normalized | {"l2"},
            )
    return fv


def _cmd_encode_fv(args) -> int:
    tokens = tuple(t.strip() for t in args.norm.split(",") if t.strip())
    for token in tokens:
        if token not in _NORM_TOKENS:
            raise ParameterError(
                f"unknown --norm token '{token}'; choose from {_NORM_TOKENS}"
            )
    if "none" in tokens and len(tokens) > 1:
        raise ParameterError("--norm none cannot be combined with other tokens")
    effective = () if tokens == ("none",) else tokens

    model = load_gmm(args.gmm)
    fvs = [encode_fv(model, _read_descriptors(p)) for p in args.inputs]
    if args.pooling_order == "pool_then_normalize":
        fv = _apply_norms(sum_pool(fvs), effective, args.intra_mode)
    else:
        fv = sum_pool([_apply_norms(f, effective, args.intra_mode) for f in fvs])
    write_tensor(GlobalVector(dim=fv.data.size, data=fv.data), args.out)
    logger.info(
        "stage=encode-fv views=%d k=%d dim=%d out=%s",
        len(fvs), fv.K, fv.data.size, args.out,
    )
    return 0


def _cmd_fuse(args) -> int:
    weights = _parse_weights(args.alpha)
    first = _read_vector(args.inputs[0])
    second = _read_vector(args.inputs[1])
    if args.mode == "scores":
        if first.dim != second.dim:
            raise ValidationError(
                f"score tensors disagree on dim: {first.dim} vs {second.dim}"
            )
        fused = (
            weights.object_weight * first.data.astype(np.float64)
            + weights.scene_weight * second.data.astype(np.float64)
        )
    else:
        fused = concat_features(
            first.data.astype(np.float64),
            second.data.astype(np.float64),
            weights,
        ).data
        if args.l2:
            fused = unit_norm(fused)
    write_tensor(GlobalVector(dim=fused.size, data=fused), args.out)
    logger.info("stage=fuse mode=%s dim=%d out=%s", args.mode, fused.size, args.out)
    return 0


def _entries_for_role(manifest, role: str):
    entries = manifest.entries if role == "all" else manifest.split(role)
    if not entries:
        raise ValidationError(f"manifest has no {role} entries")
    return entries


def _feature_matrix(features_dir: str, entries) -> np.ndarray:
    rows = []
    for entry in entries:
        vec = _read_vector(str(Path(features_dir) / f"{entry.image_id}.fvt"))
        rows.append(vec.data.astype(np.float64))
    lengths = {r.size for r in rows}
    if len(lengths) != 1:
        raise ValidationError(f"feature files disagree on dim: {sorted(lengths)}")
    return np.stack(rows)


def _cmd_train_svm(args) -> int:
    manifest = load_manifest(args.manifest)
    entries = _entries_for_role(manifest, "train")
    labels = [e.label for e in entries]
    if any(label is None for label in labels):
        raise ValidationError("training entries must all carry labels")
    features = _feature_matrix(args.features, entries)
    model = train_ovr(
        features,
        labels,
        manifest.class_count,
        C=args.c,
        seed=args.seed,
        max_epochs=args.max_epochs,
        tol=args.tol,
        class_names=manifest.class_names,
        threads=args.threads,
    )
    save_svm(model, args.out)
    logger.info(
        "stage=train-svm classes=%d features=%d degenerate=%d out=%s",
        model.class_count, model.feature_dim,
        len(model.degenerate_classes), args.out,
    )
    return 0


def _cmd_predict(args) -> int:
    manifest = load_manifest(args.manifest)
    model = load_svm(args.model)
    entries = _entries_for_role(manifest, args.role)
    matrix = predict_matrix(model, _feature_matrix(args.infile, entries))
    write_scores_csv(args.out, [e.image_id for e in entries], matrix)
    logger.info(
        "stage=predict images=%d classes=%d out=%s",
        len(entries), model.class_count, args.out,
    )
    return 0


def _cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    ids, matrix = read_scores_csv(args.scores)
    if matrix.shape[1] != manifest.class_count:
        raise ValidationError(
            f"scores list {matrix.shape[1]} classes, manifest has "
            f"{manifest.class_count}"
        )
    by_id = {e.image_id: e for e in manifest.entries}
    labels = []
    for image_id in ids:
        entry = by_id.get(image_id)
        if entry is None:
            raise ValidationError(f"image '{image_id}' not present in manifest")
        if entry.label is None:
            raise ValidationError(f"image '{image_id}' has no label to evaluate")
        labels.append(entry.label)
    report = evaluate(matrix, labels, args.integrator, manifest.class_names)
    if args.out:
        write_report_csv(args.out, report)
    sys.stdout.write(f"mAP={report.map_score!r} top1={report.top1_accuracy!r}\n")
    logger.info(
        "stage=evaluate images=%d map=%.6f top1=%.6f",
        len(ids), report.map_score, report.top1_accuracy,
    )
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    manifest = load_manifest(args.manifest)
    report = pipeline.run(manifest, cfg, args.out, threads=args.threads)
    sys.stdout.write(f"mAP={report.map_score!r} top1={report.top1_accuracy!r}\n")
    return 0


def _cmd_synth(args) -> int:
    spec = SynthSpec(
        classes=args.classes,
        images_per_class=args.images_per_class,
        seed=args.seed,
        views=args.views,
        test_fraction=args.test_fraction,
        fc_dim=args.fc_dim,
        map_size=args.map_size,
        map_channels=args.map_channels,
        class_scale=args.class_scale,
        noise_scale=args.noise_scale,
    )
    manifest = generate_dataset(args.out, spec)
    logger.info(
        "stage=synth classes=%d images=%d out=%s",
        manifest.class_count, len(manifest.entries), args.out,
    )
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fvforge",
        description=(
            "Activation-tensor recognition pipeline: view pooling, "
            "descriptor normalization, Fisher-vector encoding, two-stream "
            "fusion, linear classification, and AP/mAP evaluation."
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "--threads",
        type=int,
        default=max(1, os.cpu_count() or 1),
        help="worker bound for parallel stages (default: machine parallelism)",
    )
    parser.add_argument(
        "--log-level",
        default="info",
        choices=("debug", "info", "warning", "error"),
        help="stderr logging threshold",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan-views", help="emit crop/flip/scale view geometry as CSV")
    p.add_argument("--width", type=int, required=True, help="source image width")
    p.add_argument("--height", type=int, required=True, help="source image height")
    p.add_argument("--scales", default="256,384,512", help="smallest-side sizes")
    p.add_argument("--crop", type=int, default=224, help="square crop side")
    p.add_argument("--no-flips", action="store_true", help="skip mirrored views")
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.set_defaults(func=_cmd_plan_views)

    p = sub.add_parser(
        "tdd", help="normalize a conv map and write its descriptor container"
    )
    p.add_argument("--in", dest="infile", required=True, help="rank-3 tensor file")
    p.add_argument("--mode", choices=VARIANTS + ("both",), required=True)
    p.add_argument("--out", required=True, help="descriptor tensor (count x 1 x dim)")
    p.set_defaults(func=_cmd_tdd)

    p = sub.add_parser("fit-pca", help="fit a projection on descriptor files")
    p.add_argument("--dim", type=int, required=True, help="output dimensionality")
    p.add_argument("--out", required=True, help="model directory")
    p.add_argument("inputs", nargs="+", help="descriptor tensor files")
    p.set_defaults(func=_cmd_fit_pca)

    p = sub.add_parser("apply-pca", help="project one descriptor file")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_apply_pca)

    p = sub.add_parser("fit-gmm", help="fit a diagonal mixture on descriptor files")
    p.add_argument("--k", type=int, required=True, help="component count")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--out", required=True, help="model directory")
    p.add_argument("inputs", nargs="+", help="descriptor tensor files")
    p.set_defaults(func=_cmd_fit_gmm)

    p = sub.add_parser(
        "encode-fv", help="encode descriptor files of one image, pooling views"
    )
    p.add_argument("--gmm", required=True, help="mixture model directory")
    p.add_argument("--norm", default="intra,power", help="comma list: none,intra,power,l2")
    p.add_argument("--intra-mode", default="per_order", choices=("per_order", "per_gaussian"))
    p.add_argument(
        "--pooling-order",
        default="pool_then_normalize",
        choices=("pool_then_normalize", "normalize_then_pool"),
    )
    p.add_argument("--out", required=True, help="rank-1 tensor file")
    p.add_argument("inputs", nargs="+", help="projected descriptor files (views)")
    p.set_defaults(func=_cmd_encode_fv)

    p = sub.add_parser("fuse", help="combine two streams' scores or features")
    p.add_argument("--mode", choices=("scores", "features"), required=True)
    p.add_argument("--alpha", default="1,1", help="object,scene weights")
    p.add_argument("--l2", action="store_true", help="unit-normalize fused features")
    p.add_argument("--out", required=True)
    p.add_argument("inputs", nargs=2, help="object tensor, scene tensor")
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("train-svm", help="train one-vs-rest linear classifiers")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True, help="directory of <image_id>.fvt")
    p.add_argument("--c", type=float, default=1.0, help="loss/regularizer trade-off")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--max-epochs", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", required=True, help="model directory")
    p.set_defaults(func=_cmd_train_svm)

    p = sub.add_parser("predict", help="score features with a trained model")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--in", dest="infile", required=True, help="features directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--role", default="test", choices=ROLES + ("all",))
    p.add_argument("--out", required=True, help="scores CSV")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="AP/mAP/top-1 from a scores CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--integrator", default="step", choices=("step", "trapezoid"))
    p.add_argument("--out", help="report CSV path")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("run", help="run a configured scenario end to end")
    p.add_argument("--config", help="INI config; defaults used when omitted")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--images-per-class", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--views", type=int, default=1)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--fc-dim", type=int, default=32)
    p.add_argument("--map-size", type=int, default=6)
    p.add_argument("--map-channels", type=int, default=16)
    p.add_argument("--class-scale", type=float, default=2.0)
    p.add_argument("--noise-scale", type=float, default=0.5)
    p.set_defaults(func=_cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, args.log_level.upper()),
        format="%(message)s",
    )
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except FvForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
