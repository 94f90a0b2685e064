"""Command-line entry points: ``mammomil <command> [flags]``.

Every hyperparameter has a flag. Values resolve as explicit flag > ``--config``
JSON file > effective config already saved in the run directory > profile
default, and the resolved flat dictionary is written back to
``<run>/config.json`` so that later commands on the same run agree.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from .data import DatasetError, load_manifest
from .experiment import PROFILES, ExperimentConfig, bag_rng
from .locnet import load_locnet, locnet_forward, save_locnet
from .metrics import (
    classification_report,
    froc_curve,
    match_boxes,
    precision_recall,
    write_report,
)
from .mil import ConvBlock, classify_bag, load_mil, prediction_to_json, save_mil
from .patches import build_bag, load_bag, save_bag
from .phantom import PhantomConfig, generate_dataset
from .postprocess import detect, detections_to_json
from .preprocess import load_preprocessed, preprocess_sample, save_preprocessed
from .runtime import set_deterministic
from .training import (
    LeakageError,
    check_no_leakage,
    dense_patch_bags,
    split_folds,
    train_stage1,
    train_stage2,
    write_loss_csv,
)

log = logging.getLogger("mammomil")


class CLIError(Exception):
    """A user-facing failure: printed to stderr, exit status 1."""


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    text = str(text).strip()
    return tuple(int(v) for v in text.split(",")) if text else ()


# (flag dest, parser, config section or None for top level, field, help)
HYPERPARAMETERS = [
    ("s1_epochs", int, "stage1", "epochs", "Stage-1 epochs"),
    ("s1_batch_size", int, "stage1", "batch_size", "Stage-1 images per update"),
    ("s1_updates_per_epoch", int, "stage1", "updates_per_epoch", "Stage-1 updates per epoch"),
    ("s1_lr", float, "stage1", "learning_rate", "Stage-1 learning rate"),
    ("s1_weight_decay", float, "stage1", "weight_decay", "Stage-1 weight decay"),
    ("s1_momentum", float, "stage1", "momentum", "Stage-1 SGD momentum (0 = plain SGD)"),
    ("s1_lr_decay_factor", float, "stage1", "lr_decay_factor", "Stage-1 learning-rate decay factor"),
    ("s1_lr_decay_epochs", _ints, "stage1", "lr_decay_epochs", "Stage-1 decay epochs, comma separated"),
    ("depth", int, "locnet", "depth", "localizer encoder depth"),
    ("base_filters", int, "locnet", "base_filters", "localizer filters at full resolution"),
    ("input_downsample", int, "locnet", "input_downsample", "localizer internal downsampling factor"),
    ("wce_weight", float, "loss", "wce_weight", "weight of the WCE term"),
    ("dice_weight", float, "loss", "dice_weight", "weight of the soft Dice term"),
    ("pos_weight", float, "loss", "positive_class_weight", "WCE positive-class weight"),
    ("dice_smooth", float, "loss", "dice_smooth", "soft Dice smoothing constant"),
    ("flips", bool, "augmentation", "enable_flips", "random flips in Stage-1 augmentation"),
    ("max_translate", float, "augmentation", "max_translate_frac", "translation range (fraction)"),
    ("max_scale", float, "augmentation", "max_scale_frac", "scaling range (fraction)"),
    ("max_rotation", float, "augmentation", "max_rotation_deg", "rotation range (degrees)"),
    ("binarize_threshold", float, "postprocess", "binarize_threshold", "softmap threshold"),
    ("closing_radius", int, "postprocess", "closing_radius", "closing disk radius (pixels)"),
    ("min_component_area", int, "postprocess", "min_component_area", "smallest kept component"),
    ("s2_epochs", int, "stage2", "epochs", "Stage-2 epochs"),
    ("s2_lr", float, "stage2", "learning_rate", "Stage-2 learning rate"),
    ("s2_weight_decay", float, "stage2", "weight_decay", "Stage-2 weight decay"),
    ("s2_momentum", float, "stage2", "momentum", "Stage-2 SGD momentum"),
    ("s2_lr_decay_factor", float, "stage2", "lr_decay_factor", "Stage-2 learning-rate decay factor"),
    ("s2_lr_decay_epochs", _ints, "stage2", "lr_decay_epochs", "Stage-2 decay epochs, comma separated"),
    ("oversample_ratio", float, "stage2", "oversample_ratio", "malignant presentations per benign image"),
    ("flip_augment", bool, "stage2", "flip_augment", "random bag flips in Stage 2"),
    ("encoder_filters", _ints, "encoder", None, "patch-encoder filters per conv block"),
    ("encoder_pool", _ints, "encoder", None, "1/0 per conv block: follow it with 2x2 max-pool"),
    ("embedding_dim", int, "encoder", "embedding_dim", "patch feature size"),
    ("attention", str, "encoder", "attention", "attention scorer: linear or gated"),
    ("encoder_padding", str, "encoder", "padding", "patch-encoder padding: same or valid"),
    ("k_folds", int, None, "k_folds", "number of subject-level folds"),
    ("decision_threshold", float, None, "decision_threshold", "probability threshold for Sens/Spec"),
    ("dense_stride", int, None, "dense_stride", "window stride of the Stage-2-alone ablation"),
]
_BY_DEST = {h[0]: h for h in HYPERPARAMETERS}
SETTINGS = ("profile", "seed")


def _profile_values(cfg: ExperimentConfig) -> dict:
    out = {}
    for dest, _, section, fld, _ in HYPERPARAMETERS:
        obj = cfg if section is None else getattr(cfg, section)
        if dest == "encoder_filters":
            out[dest] = [b.filters for b in obj.conv_blocks]
        elif dest == "encoder_pool":
            out[dest] = [int(b.pool) for b in obj.conv_blocks]
        else:
            v = getattr(obj, fld)
            out[dest] = list(v) if isinstance(v, tuple) else v
    return out


def _build_config(values: dict) -> ExperimentConfig:
    cfg = PROFILES[values["profile"]]
    sections: dict[str, dict] = {}
    top = {}
    for dest, parse, section, fld, _ in HYPERPARAMETERS:
        if fld is None:
            continue
        v = values[dest]
        v = tuple(v) if isinstance(v, list) else v
        if section is None:
            top[fld] = v
        else:
            sections.setdefault(section, {})[fld] = v
    filters, pools = _ints(values["encoder_filters"]), _ints(values["encoder_pool"])
    if len(filters) != len(pools):
        raise CLIError("--encoder-filters and --encoder-pool need the same number of entries")
    blocks = tuple(ConvBlock(f, pool=bool(p)) for f, p in zip(filters, pools))
    sections["encoder"]["conv_blocks"] = blocks
    try:
        return replace(cfg, **top, **{s: replace(getattr(cfg, s), **kw) for s, kw in sections.items()})
    except (ValueError, TypeError) as e:
        raise CLIError(f"invalid configuration: {e}") from e


def resolve_config(args) -> tuple[ExperimentConfig, dict]:
    """Merge profile, saved run config, ``--config`` file and flags; returns (config, flat values)."""
    layers = []
    run_cfg = Path(args.run) / "config.json" if getattr(args, "run", None) else None
    if run_cfg is not None and run_cfg.is_file():
        layers.append(json.loads(run_cfg.read_text()))
    if args.config:
        try:
            layers.append(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise CLIError(f"cannot read config file {args.config}: {e}") from e
    cli = {k: v for k, v in vars(args).items() if (k in _BY_DEST or k in SETTINGS) and v is not None}
    layers.append(cli)

    profile = "full"
    for layer in layers:
        profile = layer.get("profile", profile)
    if profile not in PROFILES:
        raise CLIError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    values = {"profile": profile, "seed": 0, **_profile_values(PROFILES[profile])}
    for layer in layers:
        unknown = set(layer) - set(values)
        if unknown:
            raise CLIError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for k, v in layer.items():
            parse = _BY_DEST[k][1] if k in _BY_DEST else None
            if parse is _ints:
                v = list(_ints(v))
            values[k] = v
    return _build_config(values), values


def _write_effective(run: Path, values: dict) -> None:
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(json.dumps(values, indent=2, sort_keys=True))


# ---------------------------------------------------------------- helpers


def _manifest(args):
    try:
        return load_manifest(args.data)
    except (DatasetError, FileNotFoundError) as e:
        raise CLIError(str(e)) from e


def _setup(args, values: dict) -> None:
    if args.deterministic:
        set_deterministic(True, values["seed"])
    elif args.jobs:
        torch.set_num_threads(args.jobs)


def _folds(manifest, cfg: ExperimentConfig, seed: int):
    return split_folds(manifest.samples, cfg.k_folds, np.random.default_rng(seed))


def _fold(args, manifest, cfg, values):
    if not 0 <= args.fold < cfg.k_folds:
        raise CLIError(f"--fold {args.fold} out of range: k={cfg.k_folds} allows 0..{cfg.k_folds - 1}")
    folds = _folds(manifest, cfg, values["seed"])
    return folds, folds[args.fold]


def _fold_dir(args, fold_id: int) -> Path:
    d = Path(args.run) / f"fold{fold_id}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _preprocessed(args, manifest, ids=None) -> dict:
    """Preprocessed samples from the run cache when present, else computed on the fly."""
    cache = Path(args.run) / "preprocessed"
    wanted = [r for r in manifest.samples if ids is None or r.image_id in ids]
    out = {}
    for r in wanted:
        p = cache / f"{r.image_id}.npz"
        out[r.image_id] = load_preprocessed(p) if p.is_file() else preprocess_sample(r.load())
    return out


def _require(path: Path, what: str, hint: str) -> Path:
    if not path.is_file():
        raise CLIError(f"missing {what} ({path}); {hint}")
    return path


def _load_stage1(fold_dir: Path, fold):
    _require(fold_dir / "stage1.pt", "Stage-1 checkpoint", "run `mammomil train-stage1` for this fold")
    ckpt = load_locnet(fold_dir / "stage1")
    check_no_leakage(ckpt.provenance, fold)
    return ckpt


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> None:
    if args.n_images < 1:
        raise CLIError("--n-images must be >= 1")
    try:
        m = generate_dataset(PhantomConfig(rng_seed=args.seed), args.n_images, args.malignant_frac,
                             args.subjects, args.out, seed=args.seed)
    except ValueError as e:
        raise CLIError(str(e)) from e
    n_mal = sum(r.label for r in m.samples)
    print(f"wrote {len(m)} images ({n_mal} malignant, {args.subjects} subjects) to {args.out}")


def cmd_preprocess(args) -> None:
    cfg, values = resolve_config(args)
    manifest = _manifest(args)
    cache = Path(args.run) / "preprocessed"
    cache.mkdir(parents=True, exist_ok=True)
    for r in manifest.samples:
        save_preprocessed(preprocess_sample(r.load()), cache / f"{r.image_id}.npz")
    _write_effective(Path(args.run), values)
    print(f"preprocessed {len(manifest)} images into {cache}")


def cmd_train_stage1(args) -> None:
    cfg, values = resolve_config(args)
    _setup(args, values)
    manifest = _manifest(args)
    folds, fold = _fold(args, manifest, cfg, values)
    train_ids = fold.train_ids(manifest.samples)
    pre = _preprocessed(args, manifest, set(train_ids))
    result = train_stage1([pre[i] for i in train_ids], cfg.stage1, cfg.locnet, cfg.loss,
                          cfg.augmentation, seed=values["seed"], fold=fold)
    d = _fold_dir(args, fold.fold_id)
    _write_effective(Path(args.run), values)
    (d / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
    (d / "folds.json").write_text(json.dumps([f.to_json() for f in folds], indent=1))
    save_locnet(d / "stage1", result.model, cfg.loss,
                {"provenance": result.provenance, "schedule": asdict(cfg.stage1), "selection": "final-epoch"})
    write_loss_csv(d / "stage1_loss.csv", result.loss_log)
    print(f"stage 1 fold {fold.fold_id}: final epoch loss {result.epoch_losses()[-1]:.4f} "
          f"({result.seconds:.0f}s) -> {d / 'stage1.pt'}")


def cmd_detect(args) -> None:
    cfg, values = resolve_config(args)
    _setup(args, values)
    manifest = _manifest(args)
    _, fold = _fold(args, manifest, cfg, values)
    d = _fold_dir(args, fold.fold_id)
    model = _load_stage1(d, fold).model
    pre = _preprocessed(args, manifest)
    records = [detections_to_json(i, detect(locnet_forward(s.image, model), cfg.postprocess), cfg.postprocess)
               for i, s in pre.items()]
    (d / "detections.json").write_text(json.dumps(records, indent=1))
    print(f"detected {sum(len(r['boxes']) for r in records)} boxes in {len(records)} images")


def _read_detections(d: Path) -> dict:
    from .data import BoundingBox
    path = _require(d / "detections.json", "detections", "run `mammomil detect` for this fold")
    return {r["image_id"]: [BoundingBox.from_dict(b) for b in r["boxes"]] for r in json.loads(path.read_text())}


def cmd_extract_patches(args) -> None:
    cfg, values = resolve_config(args)
    manifest = _manifest(args)
    _, fold = _fold(args, manifest, cfg, values)
    d = _fold_dir(args, fold.fold_id)
    ckpt = _load_stage1(d, fold)
    boxes = _read_detections(d)
    pre = _preprocessed(args, manifest)
    bag_dir = d / "bags"
    for i, s in pre.items():
        save_bag(build_bag(s, boxes.get(i, []), bag_rng(values["seed"], i)), bag_dir)
    (bag_dir / "provenance.json").write_text(json.dumps(ckpt.provenance, indent=1))
    print(f"wrote {len(pre)} bags to {bag_dir}")


def _load_bags(d: Path, ids, fold) -> dict:
    bag_dir = d / "bags"
    prov = bag_dir / "provenance.json"
    if not prov.is_file():
        raise CLIError(f"missing bag cache in {bag_dir}; run `mammomil extract-patches` for this fold, "
                       "or pass --dense for the Stage-2-alone ablation")
    check_no_leakage(json.loads(prov.read_text()), fold)
    try:
        return {i: load_bag(bag_dir, i) for i in ids}
    except FileNotFoundError as e:
        raise CLIError(str(e)) from e


def cmd_train_stage2(args) -> None:
    cfg, values = resolve_config(args)
    _setup(args, values)
    manifest = _manifest(args)
    _, fold = _fold(args, manifest, cfg, values)
    d = _fold_dir(args, fold.fold_id)
    train_ids = fold.train_ids(manifest.samples)
    subjects = {r.image_id: r.subject_id for r in manifest.samples}
    if args.dense:
        pre = _preprocessed(args, manifest, set(train_ids))
        bags = {i: dense_patch_bags(pre[i], cfg.dense_stride) for i in train_ids}
        stage1_prov, name = None, "stage2_dense"
    else:
        if not (d / "stage1.pt").is_file():
            raise CLIError(f"no Stage-1 checkpoint in {d}; run `mammomil train-stage1` first "
                           "or pass --dense for the Stage-2-alone ablation")
        stage1_prov = _load_stage1(d, fold).provenance
        bags = _load_bags(d, train_ids, fold)
        name = "stage2"
    result = train_stage2(bags, train_ids, cfg.stage2, cfg.encoder, seed=values["seed"], fold=fold,
                          stage1_provenance=stage1_prov, subjects=subjects)
    _write_effective(Path(args.run), values)
    save_mil(d / name, result.model, {"provenance": result.provenance, "schedule": asdict(cfg.stage2)})
    write_loss_csv(d / f"{name}_loss.csv", result.loss_log)
    print(f"{name} fold {fold.fold_id}: final epoch loss {result.epoch_losses()[-1]:.4f} "
          f"({result.seconds:.0f}s) -> {d / (name + '.pt')}")


def cmd_eval(args) -> None:
    cfg, values = resolve_config(args)
    _setup(args, values)
    manifest = _manifest(args)
    folds = _folds(manifest, cfg, values["seed"])
    wanted = list(range(cfg.k_folds)) if args.folds is None else list(_ints(args.folds))
    bad = [k for k in wanted if not 0 <= k < cfg.k_folds]
    if bad:
        raise CLIError(f"folds out of range for k={cfg.k_folds}: {bad}")
    name = "stage2_dense" if args.dense else "stage2"
    run = Path(args.run)
    needed = [name] if args.dense else ["stage1", name]
    missing = sorted({k for k in wanted for n in needed if not (run / f"fold{k}" / f"{n}.pt").is_file()})
    if missing:
        raise CLIError(f"missing {' / '.join(needed)} checkpoints for fold(s) {missing}")

    labels = manifest.labels()
    pre = _preprocessed(args, manifest)
    fold_preds, roc_rows, froc_rows, detection, predictions = [], [], [], {}, []
    for k in wanted:
        fold, d = folds[k], run / f"fold{k}"
        test_ids = fold.test_ids(manifest.samples)
        mil = load_mil(d / name)
        check_no_leakage(mil.provenance, fold)
        if args.dense:
            bags = {i: dense_patch_bags(pre[i], cfg.dense_stride) for i in test_ids}
            boxes = {i: [] for i in test_ids}
        else:
            loc = _load_stage1(d, fold).model
            softmaps = {i: locnet_forward(pre[i].image, loc) for i in test_ids}
            boxes = {i: detect(softmaps[i], cfg.postprocess) for i in test_ids}
            results = [match_boxes(boxes[i], pre[i].gt_boxes) for i in test_ids]
            p, r = precision_recall(results, average=args.pr_average)
            detection[k] = {"precision": p, "recall": r}
            froc_rows.append((k, froc_curve([softmaps[i] for i in test_ids],
                                            [pre[i].gt_boxes for i in test_ids], cfg.froc_thresholds)))
            bags = {i: build_bag(pre[i], boxes[i], bag_rng(values["seed"], i)) for i in test_ids}
        outs = {i: classify_bag(bags[i], mil.model) for i in test_ids}
        predictions += [prediction_to_json(i, outs[i], boxes[i]) for i in test_ids]
        fold_preds.append(([outs[i].probability for i in test_ids], [labels[i] for i in test_ids]))

    report = classification_report(fold_preds, cfg.decision_threshold)
    for k, f in zip(wanted, report.folds):
        roc_rows.append((k, f.roc))
    body = {"arm": "dense" if args.dense else "two_stage", "folds_evaluated": wanted, **report.to_json()}
    if detection:
        body["detection"] = {str(k): v for k, v in detection.items()}
        for key in ("precision", "recall"):
            v = np.array([x[key] for x in detection.values()])
            body["detection"][f"mean_{key}"] = float(v.mean())
            body["detection"][f"std_{key}"] = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    out = run / ("eval_dense" if args.dense else "eval")
    write_report(out, body, roc_rows, froc_rows or None)
    (out / "predictions.json").write_text(json.dumps(predictions, indent=1))
    _write_effective(run, values)
    _plot_dir(out)
    m, s = report.mean, report.std
    print("  ".join(f"{n} {m[n]:.3f}±{s[n]:.3f}" for n in ("auc", "sensitivity", "specificity",
                                                            "balanced_accuracy")))
    print(f"report written to {out / 'report.json'}")


def _plot_dir(out: Path) -> list[Path]:
    """Render roc.png / froc.png from the CSVs in an evaluation directory."""
    import csv

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for stem, xcol, ycol, xlabel, ylabel in (
        ("roc", "fpr", "tpr", "false positive rate", "true positive rate"),
        ("froc", "avg_fp_pixels_per_image", "tp_pixel_fraction", "FP pixels per image", "TP pixel fraction"),
    ):
        path = out / f"{stem}.csv"
        if not path.is_file():
            continue
        curves: dict[str, list] = {}
        with path.open() as fh:
            for row in csv.DictReader(fh):
                curves.setdefault(row["fold"], []).append((float(row[xcol]), float(row[ycol])))
        fig, ax = plt.subplots(figsize=(4.5, 4))
        for fold, pts in curves.items():
            pts = sorted(pts)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", label=f"fold {fold}")
        if stem == "froc":
            ax.set_xscale("symlog")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / f"{stem}.png", dpi=120)
        plt.close(fig)
        written.append(out / f"{stem}.png")
    return written


def _plot_losses(run: Path) -> list[Path]:
    import csv

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for stem in ("stage1_loss", "stage2_loss", "stage2_dense_loss"):
        files = sorted(run.glob(f"fold*/{stem}.csv"))
        if not files:
            continue
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for f in files:
            with f.open() as fh:
                rows = list(csv.DictReader(fh))
            ax.plot([int(r["epoch"]) for r in rows], [float(r["mean_loss"]) for r in rows], label=f.parent.name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        ax.set_title(stem.replace("_", " "))
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(run / f"{stem}.png", dpi=120)
        plt.close(fig)
        written.append(run / f"{stem}.png")
    return written


def cmd_plot(args) -> None:
    run = Path(args.run)
    if not run.is_dir():
        raise CLIError(f"no run directory {run}")
    written = _plot_losses(run)
    for out in (run / "eval", run / "eval_dense"):
        if out.is_dir():
            written += _plot_dir(out)
    if not written:
        raise CLIError(f"nothing to plot in {run}; run `mammomil eval` or a training command first")
    for p in written:
        print(p)


# ---------------------------------------------------------------- parser


def _add_common(p: argparse.ArgumentParser, fold: bool = True, data: bool = True) -> None:
    if data:
        p.add_argument("--data", required=True, help="dataset root holding annotations.json and images/")
    p.add_argument("--run", required=True, help="run directory, e.g. runs/exp1")
    if fold:
        p.add_argument("--fold", type=int, required=True, help="fold index 0..k-1")
    p.add_argument("--seed", type=int, default=None, help="global seed (folds, init, sampling)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible mode")
    p.add_argument("--jobs", type=int, default=None, help="torch threads when not deterministic")
    p.add_argument("--config", default=None, help="JSON file of flag values (keys as flag names with _)")
    p.add_argument("--profile", choices=sorted(PROFILES), default=None,
                   help="base hyperparameters: full (default) or desk")
    g = p.add_argument_group("hyperparameters")
    for dest, parse, _, _, help_ in HYPERPARAMETERS:
        flag = "--" + dest.replace("_", "-")
        if parse is bool:
            g.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=None, help=help_)
        else:
            g.add_argument(flag, dest=dest, type=str if parse is _ints else parse, default=None, help=help_)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mammomil", description="Two-stage mammogram mass classification")
    parser.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=200)
    p.add_argument("--malignant-frac", type=float, default=0.25)
    p.add_argument("--subjects", type=int, default=70)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="crop, resize and whiten every image into the run cache")
    _add_common(p, fold=False)
    p.set_defaults(func=cmd_preprocess)

    for name, func, text in (
        ("train-stage1", cmd_train_stage1, "train the localizer on one fold"),
        ("detect", cmd_detect, "softmaps and boxes for every image with a fold's localizer"),
        ("extract-patches", cmd_extract_patches, "cache the patch bags of a fold's detections"),
        ("train-stage2", cmd_train_stage2, "train the attention MIL classifier on one fold"),
    ):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        if name == "train-stage2":
            p.add_argument("--dense", action="store_true", help="train on dense stride windows instead")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate trained folds: JSON/CSV report and plots")
    _add_common(p, fold=False)
    p.add_argument("--folds", default=None, help="comma-separated fold subset (default: all)")
    p.add_argument("--dense", action="store_true", help="evaluate the Stage-2-alone ablation")
    p.add_argument("--pr-average", choices=("micro", "macro"), default="micro")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="render loss, ROC and FROC figures of a run")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (CLIError, LeakageError, DatasetError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"mammomil {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
