"""Command line entry point: ``denrescov <command> ...``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
Relative ``--out`` paths resolve under ``$DENRESCOV_OUTPUT_ROOT`` when set.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .datasets import RECIPES, DatasetManifest, SplitPlan, class_counts, compose_dataset, monte_carlo_split
from .errors import ConfigError, DenResCovError, InputError
from .fusion import HEATMAP_LAYERS, FusionModelConfig, build_model, forward, load_model, save_model
from .heatmaps import circle_check, extract_heatmaps, load_annotations, render_overlay
from .metrics import format_confusion, format_summary
from .preprocess import DENOISE_METHODS, AugmentationSpec, load_image, prepare_image
from .seeding import derive_seed
from .training import (
    ImageCache,
    TrainConfig,
    cross_validate,
    evaluate_manifest,
    fit,
    load_train_config,
    majority_factory,
    save_train_config,
)
from .weights import WeightArchive, convert_torchvision, load_pretrained_dir

OUTPUT_ROOT_ENV = "DENRESCOV_OUTPUT_ROOT"
log = logging.getLogger("denrescov")


@dataclass
class RunConfig:
    """Everything needed to reproduce a cross-validation run."""

    dataset: str = "DXR4"
    manifest: str | None = None
    folds: int = 4
    train_fraction: float = 0.7
    stratify: bool = False
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    output_dir: str = "runs"
    seed: int = 0

    def seeds(self) -> dict[str, int]:
        return {name: derive_seed(self.seed, name) for name in ("compose", "split", "train")}

    def model_config(self) -> FusionModelConfig:
        return FusionModelConfig.from_dict(self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "seed": self.seeds()["train"]})

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text) -> "RunConfig":
        d = json.loads(text)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)


def out_path(value) -> Path:
    path = Path(value)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


# ------------------------------------------------------------------ args


def _model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--architecture", choices=("fusion", "resnet50", "densenet121"), default="fusion")
    g.add_argument("--input-size", type=int, default=224)
    g.add_argument("--scale", default="1", help="backbone channel scale, e.g. 1/8 for tiny mode")
    g.add_argument("--fusion-mode", choices=("concat_channels", "project_add"), default="concat_channels")
    g.add_argument("--conv-block-channels", type=int, default=512)
    g.add_argument("--head-hidden", type=int, default=512)
    g.add_argument("--pretrained-dir", help="directory with resnet50/ and densenet121/ weight archives")


def _train_args(p):
    g = p.add_argument_group("training")
    g.add_argument("--train-config", help="train_config.json; flags below are ignored when given")
    g.add_argument("--epochs", type=int, default=30)
    g.add_argument("--lr", type=float, default=0.001)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--l2", type=float, default=1e-4)
    g.add_argument("--no-augment", action="store_true")
    g.add_argument("--zca", action="store_true", help="enable per-batch ZCA whitening")
    g.add_argument("--freeze-backbones", action="store_true")
    g.add_argument("--denoise", choices=DENOISE_METHODS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="denrescov", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="compose a DXR dataset manifest from source cohorts")
    p.add_argument("--dataset", required=True, choices=sorted(RECIPES))
    for src in ("source1", "source2", "source3"):
        p.add_argument(f"--{src}", help=f"directory of the {src} cohort (one subdirectory per class)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="manifest CSV path")

    p = sub.add_parser("split", help="write Monte Carlo train/test fold files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--stratify", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a model on a manifest (or one fold of it)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split-dir")
    p.add_argument("--fold", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model directory")
    _model_args(p)
    _train_args(p)

    p = sub.add_parser("evaluate", help="metrics report for a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split-dir")
    p.add_argument("--fold", type=int, default=1)
    p.add_argument("--part", choices=("train", "test"), default="test")
    p.add_argument("--denoise", choices=DENOISE_METHODS)
    p.add_argument("--out", help="report.json path")

    p = sub.add_parser("infer", help="class probabilities for one image")
    p.add_argument("--model", required=True)
    p.add_argument("image")
    p.add_argument("--denoise", choices=DENOISE_METHODS)

    p = sub.add_parser("heatmap", help="layer heatmaps, overlays and circle checks for one image")
    p.add_argument("--model", required=True)
    p.add_argument("image")
    p.add_argument("--image-id")
    p.add_argument("--layers", nargs="+", default=list(HEATMAP_LAYERS))
    p.add_argument("--check", help="annotations.json with circles to test")
    p.add_argument("--check-layer", default="global_concat")
    p.add_argument("--out", help="directory for <image_id>.<layer>.png overlays")
    p.add_argument("--denoise", choices=DENOISE_METHODS)

    p = sub.add_parser("crossval", help="Monte Carlo cross-validation with a fold summary table")
    p.add_argument("--manifest")
    p.add_argument("--config", help="run.json (RunConfig); replaces the flags below")
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--stratify", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--stub", choices=("constant",), help="replace the network by a deterministic stub")
    p.add_argument("--save-models", action="store_true")
    p.add_argument("--out", default="crossval")
    _model_args(p)
    _train_args(p)

    p = sub.add_parser("convert-weights", help="torchvision ImageNet checkpoint -> weight archive")
    p.add_argument("--kind", required=True, choices=("resnet50", "densenet121"))
    p.add_argument("--checkpoint", required=True, help=".pth state dict")
    p.add_argument("--out", required=True)
    return parser


# ------------------------------------------------------------- helpers


def _scale(text) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"invalid --scale {text!r}") from None


def model_config_from_args(args, classes) -> FusionModelConfig:
    return FusionModelConfig(
        backbone_scale=_scale(args.scale),
        input_size=args.input_size,
        num_classes=len(classes),
        fusion_mode=args.fusion_mode,
        conv_block_channels=args.conv_block_channels,
        head_hidden=args.head_hidden,
        pretrained=bool(args.pretrained_dir),
        l2_coefficient=args.l2,
        architecture=args.architecture,
        classes=list(classes),
    )


def train_config_from_args(args, seed) -> TrainConfig:
    if args.train_config:
        config = load_train_config(args.train_config)
        return config
    aug = AugmentationSpec.identity() if args.no_augment else AugmentationSpec()
    if args.zca:
        aug = AugmentationSpec(aug.rotation_degrees, aug.width_shift_px, aug.height_shift_px, True)
    return TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        epochs=args.epochs,
        batch_size=args.batch_size,
        l2_coefficient=args.l2,
        seed=seed,
        augmentation=aug,
        freeze_backbones=args.freeze_backbones,
    )


def _select(manifest, split_dir, fold, part):
    if not split_dir:
        return manifest
    plan = SplitPlan.read(split_dir)
    if not 1 <= fold <= len(plan.folds):
        raise ConfigError(f"fold {fold} not in 1..{len(plan.folds)}")
    train, test = plan.folds[fold - 1]
    return manifest.subset(train if part == "train" else test)


def _prepare_single(model, path, denoise):
    return prepare_image(load_image(path), model.input_size, denoise)


# ------------------------------------------------------------- commands


def cmd_prepare(args):
    sources = {s: getattr(args, s) for s in ("source1", "source2", "source3")}
    manifest = compose_dataset(args.dataset, sources, args.seed)
    path = manifest.write(out_path(args.out))
    counts = class_counts(manifest)
    print(f"{manifest.name}: {len(manifest)} samples " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"wrote {path}")


def cmd_split(args):
    manifest = DatasetManifest.read(args.manifest)
    plan = monte_carlo_split(manifest, args.folds, args.train_fraction, args.seed, args.stratify)
    files = plan.write(out_path(args.out))
    for k, (train, test) in enumerate(plan.folds, start=1):
        print(f"fold {k}: {len(train)} train / {len(test)} test")
    print(f"wrote {len(files)} files to {out_path(args.out)}")


def cmd_train(args):
    manifest = DatasetManifest.read(args.manifest)
    model_config = model_config_from_args(args, manifest.classes)
    train_config = train_config_from_args(args, derive_seed(args.seed, "train"))
    subset = _select(manifest, args.split_dir, args.fold, "train")
    torch.manual_seed(derive_seed(args.seed, "init"))
    model = build_model(model_config)
    if args.pretrained_dir:
        n = load_pretrained_dir(model, args.pretrained_dir)
        log.info("loaded %d pretrained tensors", n)
    cache = ImageCache(model_config.input_size, args.denoise)
    _, history = fit(model, subset, train_config, cache)
    out = out_path(args.out)
    save_model(model, out)
    history.write(out / "history.csv")
    save_train_config(train_config, out / "train_config.json")
    print(f"final loss {history.loss[-1]:.4f}, train accuracy {100 * history.accuracy[-1]:.1f}%")
    print(f"saved model to {out}")


def cmd_evaluate(args):
    model = load_model(args.model)
    manifest = DatasetManifest.read(args.manifest, classes=model.config.classes)
    subset = _select(manifest, args.split_dir, args.fold, args.part)
    report = evaluate_manifest(model, subset, ImageCache(model.input_size, args.denoise))
    if args.out:
        report.write(out_path(args.out))
    h = report.headline
    print(f"accuracy  {100 * report.accuracy:.1f}")
    for key in ("recall", "precision", "auc_roc", "f1"):
        print(f"{key:<9} {100 * h[key]:.1f}")
    print(format_confusion(report.confusion, report.classes), end="")


def cmd_infer(args):
    model = load_model(args.model)
    probs = forward(model, _prepare_single(model, args.image, args.denoise)[None])[0]
    classes = model.config.classes or [str(i) for i in range(model.num_classes)]
    for i in np.argsort(-probs, kind="stable"):
        print(f"{classes[i]}: {probs[i]:.6f}")


def cmd_heatmap(args):
    model = load_model(args.model)
    annotations = load_annotations(args.check) if args.check else None
    if args.check_layer not in HEATMAP_LAYERS:
        raise ConfigError(f"unknown --check-layer {args.check_layer!r}")
    image_id = args.image_id or Path(args.image).stem
    image = _prepare_single(model, args.image, args.denoise)
    layers = list(dict.fromkeys(args.layers + ([args.check_layer] if annotations is not None else [])))
    stack = extract_heatmaps(model, image, layers, image_id)
    if args.out:
        out = out_path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name in args.layers:
            render_overlay(image, stack[name], out / f"{image_id}.{name}.png")
        print(f"wrote {len(args.layers)} overlays to {out}")
    if annotations is not None:
        circles = annotations.get(image_id, [])
        if not circles:
            print(f"no annotations for {image_id}")
        for c in circles:
            res = circle_check(stack[args.check_layer], c)
            status = "detected" if res["detected"] else "not detected"
            print(f"{image_id} circle ({c.cx:g},{c.cy:g},r={c.r:g}) {c.label}: {status} (mean {res['mean_inside']:.3f})")


def cmd_crossval(args):
    if args.config:
        run = RunConfig.from_json(Path(args.config).read_text())
        if not run.manifest:
            raise ConfigError("run config needs a manifest path")
        manifest = DatasetManifest.read(run.manifest)
        model_config = run.model_config()
        train_config = run.train_config()
        folds, fraction, stratify = run.folds, run.train_fraction, run.stratify
        split_seed = run.seeds()["split"]
        out = out_path(run.output_dir)
    else:
        if not args.manifest:
            raise ConfigError("crossval needs --manifest or --config")
        manifest = DatasetManifest.read(args.manifest)
        model_config = model_config_from_args(args, manifest.classes)
        run = RunConfig(
            dataset=manifest.name, manifest=str(args.manifest), folds=args.folds,
            train_fraction=args.train_fraction, stratify=args.stratify,
            model=model_config.to_dict(), output_dir=str(args.out), seed=args.seed,
        )
        train_config = train_config_from_args(args, run.seeds()["train"])
        run.train = {k: v for k, v in train_config.to_dict().items() if k != "seed"}
        folds, fraction, stratify = args.folds, args.train_fraction, args.stratify
        split_seed = run.seeds()["split"]
        out = out_path(args.out)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    plan = monte_carlo_split(manifest, folds, fraction, split_seed, stratify)
    factory = majority_factory if args.stub == "constant" else None
    denoise = getattr(args, "denoise", None)
    cache = ImageCache(model_config.input_size, denoise)
    results, summary = cross_validate(manifest, plan, model_config, train_config, factory, cache, jobs=args.jobs)

    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(run.to_json())
    plan.write(out / "splits")
    for r in results:
        fold_dir = out / f"fold{r.fold}"
        fold_dir.mkdir(exist_ok=True)
        r.report.write(fold_dir / "report.json")
        r.history.write(fold_dir / "history.csv")
        if args.save_models and args.stub is None:
            save_model(r.model, fold_dir / "model")
    (out / "confusion_combined.json").write_text(
        json.dumps({"classes": summary.classes, "confusion": summary.combined_confusion.tolist()}) + "\n"
    )
    table = format_summary(summary, f"{manifest.name}: {len(results)} Monte Carlo folds")
    table += "\nCombined confusion matrix (rows = target, columns = predicted)\n"
    table += format_confusion(summary.combined_confusion, summary.classes)
    (out / "summary.txt").write_text(table)
    (out / "summary.json").write_text(
        json.dumps({"rows": summary.rows, "mean": summary.mean, "sd": summary.sd}, indent=1) + "\n"
    )
    print(table, end="")


def cmd_convert_weights(args):
    try:
        state = torch.load(args.checkpoint, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise InputError(f"checkpoint not found: {args.checkpoint}") from None
    archive = convert_torchvision(state, args.kind)
    path = archive.save(out_path(args.out))
    print(f"wrote {len(archive)} tensors to {path}")


COMMANDS = {
    "prepare": cmd_prepare,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "infer": cmd_infer,
    "heatmap": cmd_heatmap,
    "crossval": cmd_crossval,
    "convert-weights": cmd_convert_weights,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except DenResCovError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
