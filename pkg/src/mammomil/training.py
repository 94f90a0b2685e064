"""Training loops for both stages, subject-level stratified folds, dense-window bags."""

from __future__ import annotations

import csv
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import PatchBag
from .locnet import LocLossConfig, LocNet, LocNetConfig, boxes_to_mask, composite_loss
from .mil import MILNet, PatchEncoderConfig, bag_bce_loss, oversample_schedule
from .patches import PATCH_SIZE, DenseBag
from .preprocess import AugmentationConfig, PreprocessedSample, augment

log = logging.getLogger(__name__)

__all__ = [
    "FoldSplit",
    "LeakageError",
    "Stage1Schedule",
    "Stage2Schedule",
    "TrainResult",
    "check_no_leakage",
    "dense_patch_bags",
    "flip_bag",
    "split_folds",
    "train_stage1",
    "train_stage2",
    "write_loss_csv",
]


class LeakageError(RuntimeError):
    """A model trained with a fold's test subjects was used for that fold."""


@dataclass(frozen=True)
class _Schedule:
    epochs: int
    learning_rate: float = 0.001
    weight_decay: float = 0.0005
    momentum: float = 0.9
    lr_decay_factor: float = 0.1
    lr_decay_epochs: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        d = self.lr_decay_epochs
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if any(b <= a for a, b in zip(d, d[1:])) or any(e >= self.epochs or e < 1 for e in d):
            raise ValueError(f"decay epochs {d} must be strictly increasing and < epochs={self.epochs}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate during 1-indexed ``epoch``; decays apply after each listed epoch."""
        n = sum(1 for e in self.lr_decay_epochs if epoch > e)
        return self.learning_rate * self.lr_decay_factor ** n


@dataclass(frozen=True)
class Stage1Schedule(_Schedule):
    epochs: int = 300
    batch_size: int = 8
    updates_per_epoch: int = 36
    lr_decay_epochs: tuple[int, ...] = (50, 200, 250)


@dataclass(frozen=True)
class Stage2Schedule(_Schedule):
    epochs: int = 100
    lr_decay_epochs: tuple[int, ...] = (50,)
    oversample_ratio: float = 1.0
    flip_augment: bool = True


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train_subjects: frozenset[str]
    test_subjects: frozenset[str]
    class_counts: dict = field(default_factory=dict, compare=False)

    def train_ids(self, samples) -> list[str]:
        return [s.image_id for s in samples if s.subject_id in self.train_subjects]

    def test_ids(self, samples) -> list[str]:
        return [s.image_id for s in samples if s.subject_id in self.test_subjects]

    def to_json(self) -> dict:
        return {
            "fold_id": self.fold_id,
            "train_subjects": sorted(self.train_subjects),
            "test_subjects": sorted(self.test_subjects),
            "class_counts": self.class_counts,
        }


def split_folds(samples, k: int = 5, rng: np.random.Generator | None = None) -> list[FoldSplit]:
    """Subject-level stratified k-fold partition.

    Subjects are stratified by their maximum image label and shuffled, then
    dealt largest first into the fold holding the fewest images of the
    subject's stratum (ties: fewer images overall, then a random fold order).
    Because subjects carry unequal image counts, a local search then moves or
    swaps subjects while that lowers the squared gap between each fold's
    malignant count and its share of the global proportion (plus a weak
    fold-size penalty). No fold is ever emptied.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    per_subject: dict[str, list[int]] = defaultdict(list)
    for s in samples:
        per_subject[s.subject_id].append(int(s.label))
    subjects = sorted(per_subject)
    if len(subjects) < k:
        raise ValueError(f"{len(subjects)} subjects cannot fill {k} folds")

    malignant = np.zeros(k)
    benign = np.zeros(k)
    images = np.zeros(k)
    tie = rng.permutation(k)
    fold_of: dict[str, int] = {}
    for stratum in (1, 0):
        group = [sid for sid in subjects if max(per_subject[sid]) == stratum]
        group = [group[i] for i in rng.permutation(len(group))]
        group.sort(key=lambda sid: -len(per_subject[sid]))
        for sid in group:
            load = malignant if stratum == 1 else benign
            f = min(range(k), key=lambda j: (load[j], images[j], tie[j]))
            fold_of[sid] = f
            malignant[f] += sum(per_subject[sid])
            benign[f] += len(per_subject[sid]) - sum(per_subject[sid])
            images[f] += len(per_subject[sid])
    _refine_folds(fold_of, per_subject, malignant, images)

    folds = []
    all_subjects = frozenset(subjects)
    for f in range(k):
        test = frozenset(sid for sid in subjects if fold_of[sid] == f)
        labels = [y for sid in test for y in per_subject[sid]]
        counts = {"test_images": len(labels), "test_malignant": int(sum(labels)),
                  "test_subjects": len(test)}
        folds.append(FoldSplit(f, all_subjects - test, test, counts))
    return folds


def _refine_folds(fold_of: dict, per_subject: dict, malignant: np.ndarray, images: np.ndarray,
                  size_weight: float = 0.01) -> None:
    """First-improvement moves and pairwise swaps; updates the arguments in place."""
    k = len(images)
    p = malignant.sum() / images.sum()
    target = images.sum() / k
    items = [(sid, sum(per_subject[sid]), len(per_subject[sid])) for sid in sorted(fold_of)]

    def cost(m, n):
        return (m - p * n) ** 2 + size_weight * (n - target) ** 2

    def delta(fa, fb, dm, dn):
        # moving (dm, dn) from fold fa to fold fb
        before = cost(malignant[fa], images[fa]) + cost(malignant[fb], images[fb])
        after = cost(malignant[fa] - dm, images[fa] - dn) + cost(malignant[fb] + dm, images[fb] + dn)
        return after - before

    def apply(fa, fb, dm, dn):
        malignant[fa] -= dm
        images[fa] -= dn
        malignant[fb] += dm
        images[fb] += dn

    improved = True
    while improved:
        improved = False
        for a, (sa, ma, na) in enumerate(items):
            for fb in range(k):
                fa = fold_of[sa]
                if fb != fa and images[fa] > na and delta(fa, fb, ma, na) < -1e-9:
                    apply(fa, fb, ma, na)
                    fold_of[sa] = fb
                    improved = True
            for sb, mb, nb in items[a + 1:]:
                fa, fb = fold_of[sa], fold_of[sb]
                if fa == fb or (ma, na) == (mb, nb):
                    continue
                if delta(fa, fb, ma - mb, na - nb) < -1e-9:
                    apply(fa, fb, ma - mb, na - nb)
                    fold_of[sa], fold_of[sb] = fb, fa
                    improved = True


def check_no_leakage(provenance: dict, fold: FoldSplit) -> None:
    """Raise :class:`LeakageError` unless the checkpoint was trained on ``fold``'s training split."""
    if provenance.get("fold_id") != fold.fold_id:
        raise LeakageError(
            f"checkpoint trained for fold {provenance.get('fold_id')!r}, used for fold {fold.fold_id}"
        )
    overlap = set(provenance.get("train_subjects", ())) & fold.test_subjects
    if overlap:
        raise LeakageError(f"checkpoint saw test subjects of fold {fold.fold_id}: {sorted(overlap)[:5]}")


@dataclass
class TrainResult:
    model: torch.nn.Module
    loss_log: list[dict]
    provenance: dict
    seconds: float = 0.0

    def epoch_losses(self) -> list[float]:
        by_epoch = defaultdict(list)
        for row in self.loss_log:
            by_epoch[row["epoch"]].append(row["loss"])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def _provenance(fold: FoldSplit | None, samples, seed: int, stage: str) -> dict:
    return {
        "stage": stage,
        "fold_id": None if fold is None else fold.fold_id,
        "train_subjects": sorted({s.subject_id for s in samples}),
        "train_image_ids": sorted(s.image_id for s in samples),
        "seed": seed,
    }


def _sgd(model, schedule: _Schedule) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=schedule.learning_rate,
                           momentum=schedule.momentum, weight_decay=schedule.weight_decay)


def train_stage1(
    train_samples: list[PreprocessedSample],
    schedule: Stage1Schedule = Stage1Schedule(),
    net_cfg: LocNetConfig = LocNetConfig(),
    loss_cfg: LocLossConfig = LocLossConfig(),
    aug_cfg: AugmentationConfig = AugmentationConfig(),
    seed: int = 0,
    fold: FoldSplit | None = None,
) -> TrainResult:
    """``epochs * updates_per_epoch`` SGD steps on batches drawn uniformly with replacement."""
    if not train_samples:
        raise ValueError("empty training set")
    if fold is not None:
        leaked = {s.subject_id for s in train_samples} & fold.test_subjects
        if leaked:
            raise LeakageError(f"stage-1 training set holds test subjects {sorted(leaked)[:5]}")
    torch.manual_seed(seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    model = LocNet(net_cfg)
    model.train()
    opt = _sgd(model, schedule)
    shape = net_cfg.input_shape
    log_rows = []
    t0 = time.perf_counter()
    for epoch in range(1, schedule.epochs + 1):
        lr = schedule.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        for update in range(schedule.updates_per_epoch):
            idx = rng.integers(0, len(train_samples), size=schedule.batch_size)
            batch = [augment(train_samples[i], aug_cfg, rng) for i in idx]
            x = torch.from_numpy(np.stack([b.image for b in batch]).astype(np.float32))[:, None]
            y = torch.from_numpy(np.stack([boxes_to_mask(b.gt_boxes, shape) for b in batch])
                                 .astype(np.float32))[:, None]
            loss = composite_loss(model(x), y, loss_cfg)
            opt.zero_grad()
            loss.backward()
            opt.step()
            log_rows.append({"epoch": epoch, "update": update, "lr": lr, "loss": loss.item()})
        if epoch == 1 or epoch % 5 == 0 or epoch == schedule.epochs:
            log.info("stage1 epoch %d loss %.4f", epoch,
                     np.mean([r["loss"] for r in log_rows[-schedule.updates_per_epoch:]]))
    model.eval()
    return TrainResult(model, log_rows, _provenance(fold, train_samples, seed, "stage1"),
                       time.perf_counter() - t0)


def flip_bag(bag, flip_x: bool, flip_y: bool):
    """Mirror every instance of a bag; dense bags mirror the image and window grid instead."""
    if not (flip_x or flip_y):
        return bag
    if isinstance(bag, DenseBag):
        h, w = bag.image.shape
        image = bag.image[::-1 if flip_y else 1, ::-1 if flip_x else 1]
        o = bag.origins.copy()
        if flip_x:
            o[:, 0] = w - bag.size - o[:, 0]
        if flip_y:
            o[:, 1] = h - bag.size - o[:, 1]
        return DenseBag(np.ascontiguousarray(image), o, bag.label, bag.image_id, bag.size)
    p = bag.patches
    p = p[:, ::-1 if flip_y else 1, ::-1 if flip_x else 1]
    return PatchBag(np.ascontiguousarray(p), bag.label, bag.image_id, bag.source_boxes, bag.origins)


def train_stage2(
    bags: dict,
    train_ids: list[str],
    schedule: Stage2Schedule = Stage2Schedule(),
    encoder_cfg: PatchEncoderConfig = PatchEncoderConfig(),
    seed: int = 0,
    fold: FoldSplit | None = None,
    stage1_provenance: dict | None = None,
    subjects: dict[str, str] | None = None,
) -> TrainResult:
    """One SGD update per image presentation; each batch is the full bag of one image.

    Malignant images are oversampled every epoch and every presentation gets
    a fresh random flip. When ``stage1_provenance`` is given, the bags must
    come from a localizer trained on this fold's training split. ``subjects``
    maps image ids to subject ids for the checkpoint provenance.
    """
    missing = [i for i in train_ids if i not in bags]
    if missing:
        raise KeyError(f"bag cache is missing image(s): {', '.join(missing[:10])}")
    if fold is not None and stage1_provenance is not None:
        check_no_leakage(stage1_provenance, fold)
    subjects = subjects or {}
    if fold is not None:
        leaked = {subjects.get(i) for i in train_ids} & fold.test_subjects
        if leaked:
            raise LeakageError(f"stage-2 training set holds test subjects {sorted(leaked)[:5]}")
    torch.manual_seed(seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    model = MILNet(encoder_cfg)
    model.train()
    opt = _sgd(model, schedule)
    items = [(i, bags[i].label) for i in train_ids]
    log_rows = []
    t0 = time.perf_counter()
    for epoch in range(1, schedule.epochs + 1):
        lr = schedule.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        if len({y for _, y in items}) == 2:
            order = oversample_schedule(items, schedule.oversample_ratio, rng)
        else:
            order = [items[j][0] for j in rng.permutation(len(items))]
        for update, image_id in enumerate(order):
            bag = bags[image_id]
            fx, fy = (rng.random(2) < 0.5) & schedule.flip_augment
            out = model.forward_bag(flip_bag(bag, bool(fx), bool(fy)))
            loss = bag_bce_loss(out["probability"], bag.label)
            opt.zero_grad()
            loss.backward()
            opt.step()
            log_rows.append({"epoch": epoch, "update": update, "lr": lr, "loss": loss.item(),
                             "image_id": image_id})
        log.info("stage2 epoch %d loss %.4f", epoch,
                 np.mean([r["loss"] for r in log_rows[-len(order):]]))
    model.eval()
    prov = {
        "stage": "stage2",
        "fold_id": None if fold is None else fold.fold_id,
        "train_subjects": sorted({subjects[i] for i in train_ids if i in subjects}),
        "train_image_ids": sorted(train_ids),
        "seed": seed,
    }
    return TrainResult(model, log_rows, prov, time.perf_counter() - t0)


def dense_patch_bags(sample: PreprocessedSample, stride: int = 8, size: int = PATCH_SIZE) -> DenseBag:
    """Every size x size window on a ``stride`` grid whose center lies in the breast foreground."""
    h, w = sample.image.shape
    ys = np.arange(0, h - size + 1, stride)
    xs = np.arange(0, w - size + 1, stride)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    origins = np.stack([gx.ravel(), gy.ravel()], axis=1)
    if sample.foreground is not None:
        keep = sample.foreground[origins[:, 1] + size // 2, origins[:, 0] + size // 2]
        if keep.any():
            origins = origins[keep]
    return DenseBag(sample.image, origins, sample.label, sample.image_id, size)


def write_loss_csv(path: str | Path, rows: list[dict]) -> None:
    """One row per epoch: learning rate, number of updates and mean loss."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    by_epoch = defaultdict(list)
    lrs = {}
    for row in rows:
        by_epoch[row["epoch"]].append(row["loss"])
        lrs[row["epoch"]] = row["lr"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "updates", "mean_loss"])
        for e in sorted(by_epoch):
            w.writerow([e, lrs[e], len(by_epoch[e]), float(np.mean(by_epoch[e]))])
