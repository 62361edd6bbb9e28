"""Command-line front end: synth, train, eval, predict, bench.

Exit codes: 0 success, 2 usage errors (argparse, missing input files),
3 domain errors (invalid topology, corrupt files, degenerate training).
Every command that takes --out writes a run_manifest.json next to its
outputs; with a fixed --seed all artifacts except the manifest timestamps
are byte-reproducible.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import (
    BackboneConfig,
    BackboneWeights,
    builtin_config,
    fuse_stereo,
    init_weights,
    load_config,
    load_weights,
    multi_fm_length,
    save_config,
    save_weights,
)
from .dataio import (
    ALL_LABELS,
    Manifest,
    VectorDataset,
    decode_image,
    load_manifest,
    load_vectors,
    resize_image,
    save_vectors,
    synth_stereo_images,
    synth_vectors,
)
from .errors import DareError
from .layers import HeadConfig
from .metrics import (
    box_stats,
    cross_validate,
    report,
    tally,
    tree_trainer,
    write_box_csv,
    write_report_csv,
)
from .treeclf import (
    TrainConfig,
    builtin_topology,
    load_topology,
    load_tree_archive,
    predict,
    predict_batch,
    save_tree_archive,
    train_tree,
)


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                        started: str, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "flags": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "seed": getattr(args, "seed", None),
        "tool_version": __version__,
        "started_at": started,
        "finished_at": _utcnow(),
        "outputs": sorted(outputs),
    }
    with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolve_topology(name_or_path: str):
    path = Path(name_or_path)
    if path.exists():
        return load_topology(path)
    return builtin_topology(name_or_path)


def _resolve_backbone(name_or_path: str) -> BackboneConfig:
    path = Path(name_or_path)
    if path.exists():
        return load_config(path)
    return builtin_config(name_or_path)


def _head_config(args: argparse.Namespace) -> HeadConfig:
    widths = tuple(int(w) for w in args.hidden.split(",") if w.strip()) \
        if args.hidden else ()
    return HeadConfig(hidden_widths=widths, dropout_rate=args.dropout)


def _train_config(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(lr=args.lr, momentum=args.momentum,
                       batch_size=args.batch_size, epochs=args.epochs,
                       seed=args.seed)


def _extract_features(manifest: Manifest, base_dir: Path, cfg: BackboneConfig,
                      weights: BackboneWeights) -> VectorDataset:
    """Decode, resize, extract, and fuse every stereo pair in a manifest."""
    present = {s.label for s in manifest.samples}
    label_names = [name for name in ALL_LABELS if name in present]
    index_of = {name: i for i, name in enumerate(label_names)}
    features = np.empty((len(manifest.samples), multi_fm_length(cfg)))
    labels = np.empty(len(manifest.samples), dtype=np.int64)
    for i, sample in enumerate(manifest.samples):
        left = resize_image(decode_image(base_dir / sample.left), cfg.input_size)
        right = resize_image(decode_image(base_dir / sample.right), cfg.input_size)
        features[i] = fuse_stereo(left, right, cfg, weights)
        labels[i] = index_of[sample.label]
    return VectorDataset(features, labels, label_names)


def _load_dataset(args: argparse.Namespace):
    """Returns (VectorDataset, backbone cfg or None, backbone weights or None)."""
    data_path = Path(args.data)
    if not data_path.exists():
        raise FileNotFoundError(f"dataset not found: {data_path}")
    if args.mode == "fmv":
        return load_vectors(data_path), None, None
    cfg = _resolve_backbone(args.backbone)
    if args.backbone_weights:
        weights = load_weights(cfg, args.backbone_weights)
    else:
        weights = init_weights(cfg, args.backbone_seed)
    manifest = load_manifest(data_path, check_files=True)
    return _extract_features(manifest, data_path.parent, cfg, weights), cfg, weights


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    started = _utcnow()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: list[str] = []
    if args.mode == "fmv":
        ds = synth_vectors(args.classes, args.per_class, args.dim,
                           args.margin, args.seed, noise=args.noise)
        target = out_dir / "dataset.dfmv"
        save_vectors(ds, target)
        outputs.append(str(target))
        print(f"wrote {target} ({len(ds)} samples, dim {ds.dim})")
    else:
        manifest_path = synth_stereo_images(args.classes, args.per_class,
                                            args.side, args.seed, out_dir)
        outputs.append(str(manifest_path))
        print(f"wrote {manifest_path} ({args.classes * args.per_class} stereo pairs)")
    _write_run_manifest(out_dir, "synth", args, started, outputs)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    started = _utcnow()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    ds, backbone_cfg, backbone_weights = _load_dataset(args)
    topology = _resolve_topology(args.topology)
    cfg = _train_config(args)
    head_cfg = _head_config(args)
    tree = train_tree(topology, ds, cfg, head_cfg, jobs=args.jobs)

    extra = {"mode": args.mode,
             "backbone": backbone_cfg.name if backbone_cfg else None}
    save_tree_archive(out_dir, tree, cfg, head_cfg, ds.label_names, extra)
    if backbone_cfg is not None:
        save_config(backbone_cfg, out_dir / "backbone.json")
        save_weights(backbone_cfg, backbone_weights, out_dir / "backbone.weights")

    losses_path = out_dir / "losses.csv"
    with open(losses_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "epoch", "mean_loss"])
        for node_id, losses in tree.loss_history.items():
            for epoch, loss in enumerate(losses):
                writer.writerow([node_id, epoch, f"{loss:.12f}"])

    outputs = [str(p) for p in sorted(out_dir.rglob("*")) if p.is_file()
               and p.name != "run_manifest.json"]
    _write_run_manifest(out_dir, "train", args, started, outputs)
    print(f"trained {len(tree.heads)} nodes -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _emit_reports(rep, label_names, out_dir: Path) -> list[str]:
    metrics_path = out_dir / "metrics.csv"
    write_report_csv(rep, label_names, metrics_path)
    box_path = out_dir / "boxstats.csv"
    write_box_csv({"bacc": box_stats(rep.bacc), "f1": box_stats(rep.f1)}, box_path)
    print(f"CCR {rep.ccr_percent:.2f}")
    print(f"macro-F1 {rep.macro_f1:.4f}")
    return [str(metrics_path), str(box_path)]


def cmd_eval(args: argparse.Namespace) -> int:
    started = _utcnow()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    ds, _, _ = _load_dataset(args)
    n_classes = len(ds.label_names)

    if args.stub_constant is not None:
        stub = int(args.stub_constant)

        def trainer(train_ds, fold_seed):
            return lambda feats: np.full(feats.shape[0], stub, dtype=np.int64)

        result = cross_validate(ds, args.kfold or 2, args.seed, trainer)
        rep = result.aggregate
    elif args.kfold:
        topology = _resolve_topology(args.topology)
        trainer = tree_trainer(topology, _train_config(args), _head_config(args),
                               jobs=args.jobs)
        result = cross_validate(ds, args.kfold, args.seed, trainer, jobs=1)
        rep = result.aggregate
    elif args.archive:
        tree, manifest = load_tree_archive(args.archive)
        index_of = {name: i for i, name in enumerate(ds.label_names)}
        leaves = predict_batch(tree, ds.features)
        missing = {leaf for leaf in leaves if leaf not in index_of}
        if missing:
            raise DareError(f"archive predicts labels outside the dataset: {sorted(missing)}")
        pred = np.asarray([index_of[leaf] for leaf in leaves], dtype=np.int64)
        rep = report(tally(ds.labels, pred, n_classes))
    else:
        raise DareError("eval needs --kfold, --archive, or --stub-constant")

    outputs = _emit_reports(rep, ds.label_names, out_dir)
    _write_run_manifest(out_dir, "eval", args, started, outputs)
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def cmd_predict(args: argparse.Namespace) -> int:
    for flag, value in (("--left", args.left), ("--right", args.right)):
        if not Path(value).exists():
            print(f"error: {flag} file not found: {value}", file=sys.stderr)
            return 2
    archive = Path(args.archive)
    tree, manifest = load_tree_archive(archive)
    backbone_path = archive / "backbone.json"
    if not backbone_path.exists():
        raise DareError(
            "archive has no backbone (trained on fused vectors); predict needs images")
    cfg = load_config(backbone_path)
    weights = load_weights(cfg, archive / "backbone.weights")

    left = resize_image(decode_image(args.left), cfg.input_size)
    right = resize_image(decode_image(args.right), cfg.input_size)
    fused = fuse_stereo(left, right, cfg, weights)
    result = predict(tree, fused)
    root_probs = ",".join(f"{p:.6f}" for p in result.node_probs[0])
    print(f"{result.leaf}\t{'>'.join(result.path)}\t{root_probs}")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args: argparse.Namespace) -> int:
    if args.reps < 1:
        raise DareError("--reps must be >= 1")
    if args.reps == 1:
        print("warning: percentiles are degenerate with --reps 1", file=sys.stderr)
    archive = Path(args.archive)
    tree, _ = load_tree_archive(archive)
    cfg = load_config(archive / "backbone.json")
    weights = load_weights(cfg, archive / "backbone.weights")
    manifest_path = Path(args.data)
    manifest = load_manifest(manifest_path, check_files=True)
    if not manifest.samples:
        raise DareError("benchmark manifest has no samples")
    base = manifest_path.parent

    stages = {"decode": [], "resize": [], "extract": [], "route": []}
    totals = []
    for rep_idx in range(args.reps):
        sample = manifest.samples[rep_idx % len(manifest.samples)]
        t0 = time.perf_counter()
        left_img = decode_image(base / sample.left)
        right_img = decode_image(base / sample.right)
        t1 = time.perf_counter()
        left = resize_image(left_img, cfg.input_size)
        right = resize_image(right_img, cfg.input_size)
        t2 = time.perf_counter()
        fused = fuse_stereo(left, right, cfg, weights)
        t3 = time.perf_counter()
        predict(tree, fused)
        t4 = time.perf_counter()
        stages["decode"].append((t1 - t0) * 1e3)
        stages["resize"].append((t2 - t1) * 1e3)
        stages["extract"].append((t3 - t2) * 1e3)
        stages["route"].append((t4 - t3) * 1e3)
        totals.append((t4 - t0) * 1e3)

    def med_p95(values: list[float]) -> tuple[float, float]:
        return (statistics.median(values),
                float(np.percentile(np.asarray(values), 95, method="linear")))

    print(f"reps {args.reps}  pairs {len(manifest.samples)}")
    lines = []
    for name in ("decode", "resize", "extract", "route"):
        med, p95 = med_p95(stages[name])
        lines.append(f"stage {name:<8} median {med:9.3f} ms  p95 {p95:9.3f} ms")
    med, p95 = med_p95(totals)
    lines.append(f"total per pair   median {med:9.3f} ms  p95 {p95:9.3f} ms")
    print("\n".join(lines))

    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        started = _utcnow()
        report_path = out_dir / "bench.txt"
        report_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        _write_run_manifest(out_dir, "bench", args, started, [str(report_path)])
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=0.001,
                   help="initial learning rate (default 0.001)")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--hidden", default="4096,4096",
                   help="comma-separated hidden widths per node head")
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel node trainings; does not change results")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True,
                   help=".dfmv file (fmv mode) or manifest.csv (images mode)")
    p.add_argument("--mode", choices=("fmv", "images"), default="fmv")
    p.add_argument("--backbone", default="mininet",
                   help="backbone name or config path (images mode)")
    p.add_argument("--backbone-weights", default=None,
                   help="weight file; omit for seeded random filters")
    p.add_argument("--backbone-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dare",
        description="Stereo-pair gesture recognition: synthesize, train, "
                    "evaluate, predict, benchmark.")
    parser.add_argument("--version", action="version", version=f"dare {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--mode", choices=("fmv", "images"), default="fmv")
    p.add_argument("--dim", type=int, default=16, help="fused vector width (fmv)")
    p.add_argument("--margin", type=float, default=4.0,
                   help="minimum distance between class centroids (fmv)")
    p.add_argument("--noise", type=float, default=0.35,
                   help="cluster noise scale (fmv)")
    p.add_argument("--side", type=int, default=32, help="image side (images)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the classifier tree")
    _add_data_flags(p)
    p.add_argument("--topology", default="dare20",
                   help="topology name (dare20, mini2) or file path")
    _add_train_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="k-fold cross-validation or holdout scoring")
    _add_data_flags(p)
    p.add_argument("--topology", default="dare20")
    _add_train_flags(p)
    p.add_argument("--kfold", type=int, default=None)
    p.add_argument("--archive", default=None,
                   help="trained archive for holdout scoring")
    p.add_argument("--stub-constant", type=int, default=None,
                   help="harness aid: score a constant-prediction stub instead")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one stereo pair")
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--archive", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bench", help="per-stage prediction latency")
    p.add_argument("--archive", required=True)
    p.add_argument("--data", required=True, help="manifest.csv of stereo pairs")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DareError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
