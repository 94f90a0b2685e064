"""End-to-end fold experiment: Stage 1 -> detections -> bags -> Stage 2 -> metrics."""

from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .data import DatasetManifest, load_manifest
from .locnet import LocLossConfig, LocNetConfig, locnet_forward, save_locnet
from .metrics import (
    FrocPoint,
    classification_report,
    froc_curve,
    match_boxes,
    precision_recall,
    write_report,
)
from .mil import ConvBlock, PatchEncoderConfig, classify_bag, prediction_to_json, save_mil
from .patches import build_bag
from .postprocess import PostprocessConfig, detect, detections_to_json
from .preprocess import AugmentationConfig, preprocess_sample
from .runtime import set_deterministic
from .training import (
    Stage1Schedule,
    Stage2Schedule,
    check_no_leakage,
    dense_patch_bags,
    split_folds,
    train_stage1,
    train_stage2,
    write_loss_csv,
)

log = logging.getLogger(__name__)

__all__ = ["DESK", "FULL", "PROFILES", "ExperimentConfig", "bag_rng", "preprocess_manifest", "run_fold"]


@dataclass(frozen=True)
class ExperimentConfig:
    stage1: Stage1Schedule = Stage1Schedule()
    stage2: Stage2Schedule = Stage2Schedule()
    locnet: LocNetConfig = LocNetConfig()
    loss: LocLossConfig = LocLossConfig()
    postprocess: PostprocessConfig = PostprocessConfig()
    encoder: PatchEncoderConfig = PatchEncoderConfig()
    augmentation: AugmentationConfig = AugmentationConfig()
    k_folds: int = 5
    decision_threshold: float = 0.5
    dense_stride: int = 8
    froc_thresholds: tuple[float, ...] = tuple(np.round(np.linspace(0.05, 0.95, 19), 2).tolist())

    def to_json(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, PatchEncoderConfig):
                d[f.name] = v.to_json()
            elif hasattr(v, "__dataclass_fields__"):
                d[f.name] = asdict(v)
            else:
                d[f.name] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_json(cls, d: dict) -> ExperimentConfig:
        types = {
            "stage1": Stage1Schedule, "stage2": Stage2Schedule, "locnet": LocNetConfig,
            "loss": LocLossConfig, "postprocess": PostprocessConfig,
            "encoder": PatchEncoderConfig, "augmentation": AugmentationConfig,
        }
        kw = {}
        for k, v in d.items():
            if k in types:
                kw[k] = types[k](**v)
            elif k == "froc_thresholds":
                kw[k] = tuple(v)
            else:
                kw[k] = v
        return cls(**kw)

    def updated(self, **overrides) -> ExperimentConfig:
        return replace(self, **overrides)


FULL = ExperimentConfig()

# CPU-affordable profile: reduced schedules, a localizer that runs at quarter
# resolution internally, and a narrow unpadded patch encoder whose dense
# windows can be encoded in one pass over the image. The short Stage-1
# schedule needs a larger step, and milder rotation keeps the hull-of-corners
# box targets close to the masses they enclose.
DESK = ExperimentConfig(
    stage1=Stage1Schedule(epochs=30, batch_size=8, updates_per_epoch=36, learning_rate=0.03,
                          lr_decay_epochs=(20, 25)),
    stage2=Stage2Schedule(epochs=20, learning_rate=0.001, lr_decay_epochs=(10,)),
    locnet=LocNetConfig(depth=3, base_filters=8, input_downsample=4),
    encoder=PatchEncoderConfig(
        conv_blocks=(ConvBlock(8), ConvBlock(16), ConvBlock(32), ConvBlock(32, pool=False)),
        padding="valid",
    ),
    augmentation=AugmentationConfig(max_rotation_deg=10.0),
)

PROFILES = {"full": FULL, "desk": DESK}


def bag_rng(seed: int, image_id: str) -> np.random.Generator:
    """Per-image generator for fallback patch sampling, independent of processing order."""
    return np.random.default_rng([seed, 3, zlib.crc32(image_id.encode())])


def preprocess_manifest(manifest: DatasetManifest, image_ids=None) -> dict:
    wanted = None if image_ids is None else set(image_ids)
    return {r.image_id: preprocess_sample(r.load()) for r in manifest.samples
            if wanted is None or r.image_id in wanted}


def _predict(model, bags: dict, ids: list[str]) -> dict:
    return {i: classify_bag(bags[i], model) for i in ids}


def _classification_block(outputs: dict, labels: dict, ids: list[str], threshold: float) -> dict:
    probs = [outputs[i].probability for i in ids]
    y = [labels[i] for i in ids]
    rep = classification_report([(probs, y)], threshold)
    f = rep.folds[0]
    return {
        "auc": f.auc,
        "sensitivity": f.sensitivity,
        "specificity": f.specificity,
        "balanced_accuracy": f.balanced_accuracy,
        "roc": [list(p) for p in f.roc],
        "probabilities": {i: outputs[i].probability for i in ids},
    }


def run_fold(
    data,
    fold_id: int = 0,
    cfg: ExperimentConfig = DESK,
    seed: int = 0,
    run_dir: str | Path | None = None,
    dense: bool = False,
    two_stage: bool = True,
    deterministic: bool = True,
    preprocessed: dict | None = None,
) -> dict:
    """Train and evaluate both stages on one subject-level fold.

    Returns a JSON-ready report. Wall-clock timings live under ``"timing"``
    and are the only nondeterministic entries.
    """
    if deterministic:
        set_deterministic(True, seed)
    manifest = data if isinstance(data, DatasetManifest) else load_manifest(data)
    folds = split_folds(manifest.samples, cfg.k_folds, np.random.default_rng(seed))
    if not 0 <= fold_id < cfg.k_folds:
        raise ValueError(f"fold {fold_id} out of range for k={cfg.k_folds}")
    fold = folds[fold_id]
    train_ids = fold.train_ids(manifest.samples)
    test_ids = fold.test_ids(manifest.samples)
    labels = manifest.labels()
    subjects = {r.image_id: r.subject_id for r in manifest.samples}
    timing = {}

    t = time.perf_counter()
    pre = preprocessed if preprocessed is not None else preprocess_manifest(manifest)
    timing["preprocess"] = time.perf_counter() - t

    report: dict = {"fold_id": fold_id, "seed": seed, "config": cfg.to_json(), "fold": fold.to_json(),
                    "n_train": len(train_ids), "n_test": len(test_ids)}
    fold_dir = None
    if run_dir is not None:
        fold_dir = Path(run_dir) / f"fold{fold_id}"
        fold_dir.mkdir(parents=True, exist_ok=True)
        (fold_dir / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
        (fold_dir / "folds.json").write_text(json.dumps([f.to_json() for f in folds], indent=1))

    if two_stage:
        stage1 = train_stage1([pre[i] for i in train_ids], cfg.stage1, cfg.locnet, cfg.loss,
                              cfg.augmentation, seed=seed, fold=fold)
        timing["stage1_train"] = stage1.seconds
        report["stage1_final_loss"] = stage1.epoch_losses()[-1]
        check_no_leakage(stage1.provenance, fold)

        t = time.perf_counter()
        boxes, softmaps = {}, {}
        for i in train_ids + test_ids:
            sm = locnet_forward(pre[i].image, stage1.model)
            boxes[i] = detect(sm, cfg.postprocess)
            if i in test_ids:
                softmaps[i] = sm
        results = [match_boxes(boxes[i], pre[i].gt_boxes) for i in test_ids]
        prec, rec = precision_recall(results)
        report["detection"] = {
            "precision": prec, "recall": rec,
            "tp": sum(r.tp for r in results), "fp": sum(r.fp for r in results),
            "fn": sum(r.fn for r in results),
        }
        froc = froc_curve([softmaps[i] for i in test_ids], [pre[i].gt_boxes for i in test_ids],
                          cfg.froc_thresholds)
        report["froc"] = [asdict(p) for p in froc]
        bags = {i: build_bag(pre[i], boxes[i], bag_rng(seed, i)) for i in train_ids + test_ids}
        timing["detect_and_bag"] = time.perf_counter() - t

        stage2 = train_stage2(bags, train_ids, cfg.stage2, cfg.encoder, seed=seed, fold=fold,
                              stage1_provenance=stage1.provenance, subjects=subjects)
        timing["stage2_train"] = stage2.seconds
        outputs = _predict(stage2.model, bags, test_ids)
        report["two_stage"] = _classification_block(outputs, labels, test_ids, cfg.decision_threshold)

        if fold_dir is not None:
            save_locnet(fold_dir / "stage1", stage1.model, cfg.loss,
                        {"provenance": stage1.provenance, "schedule": asdict(cfg.stage1)})
            save_mil(fold_dir / "stage2", stage2.model, {"provenance": stage2.provenance,
                                                         "schedule": asdict(cfg.stage2)})
            write_loss_csv(fold_dir / "stage1_loss.csv", stage1.loss_log)
            write_loss_csv(fold_dir / "stage2_loss.csv", stage2.loss_log)
            (fold_dir / "detections.json").write_text(json.dumps(
                [detections_to_json(i, boxes[i], cfg.postprocess) for i in test_ids], indent=1))
            (fold_dir / "predictions.json").write_text(json.dumps(
                [prediction_to_json(i, outputs[i], boxes[i]) for i in test_ids], indent=1))

    if dense:
        t = time.perf_counter()
        dbags = {i: dense_patch_bags(pre[i], cfg.dense_stride) for i in train_ids + test_ids}
        dense_model = train_stage2(dbags, train_ids, cfg.stage2, cfg.encoder, seed=seed, fold=fold,
                                   subjects=subjects)
        outputs = _predict(dense_model.model, dbags, test_ids)
        report["dense"] = _classification_block(outputs, labels, test_ids, cfg.decision_threshold)
        report["dense"]["mean_bag_size"] = float(np.mean([dbags[i].n for i in train_ids + test_ids]))
        timing["dense_total"] = time.perf_counter() - t
        if fold_dir is not None:
            save_mil(fold_dir / "stage2_dense", dense_model.model,
                     {"provenance": dense_model.provenance, "schedule": asdict(cfg.stage2)})
            write_loss_csv(fold_dir / "stage2_dense_loss.csv", dense_model.loss_log)

    report["timing"] = timing
    if fold_dir is not None:
        metrics = {k: v for k, v in report.items() if k != "timing"}
        roc = [(fold_id, report[a]["roc"]) for a in ("two_stage",) if a in report]
        froc = [(fold_id, [FrocPoint(**p) for p in report["froc"]])] if "froc" in report else None
        write_report(fold_dir, metrics, roc_points=roc or None, froc_points=froc)
        (fold_dir / "timing.json").write_text(json.dumps(timing, indent=2))
    return report

