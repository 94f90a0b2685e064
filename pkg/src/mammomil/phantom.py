"""Mammogram-like phantoms with exact ground truth.

A phantom is a half-ellipse of textured "tissue" against a dark background,
with an optional bright label marker in a free corner. Benign masses are
smooth ellipses; malignant masses have a sinusoidally perturbed (spiculated)
margin. Diffuse Gaussian blobs of mass-like brightness act as fibro-glandular
distractors and never carry a GT box.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import (
    IMAGES_DIR,
    BoundingBox,
    DatasetManifest,
    MammogramSample,
    load_manifest,
    save_image,
)

__all__ = ["PhantomConfig", "PhantomInfo", "generate_dataset", "generate_phantom", "render_phantom"]


@dataclass(frozen=True)
class PhantomConfig:
    image_size: tuple[int, int] = (640, 320)
    background_level: float = 0.03
    noise_sigma: float = 0.012
    tissue_level: tuple[float, float] = (0.34, 0.44)
    texture_amplitude: float = 0.05
    texture_sigma: float = 14.0
    mass_radius: tuple[float, float] = (14.0, 24.0)
    mass_contrast: tuple[float, float] = (0.20, 0.26)
    spiculation_amplitude: tuple[float, float] = (0.2, 0.4)
    spiculation_lobes: tuple[int, int] = (5, 9)
    # probabilities of 0, 1, 2 benign masses in a benign image
    benign_mass_probs: tuple[float, float, float] = (0.4, 0.4, 0.2)
    # probability that a malignant image also holds one benign mass
    extra_benign_prob: float = 0.3
    distractors: tuple[int, int] = (1, 3)
    distractor_sigma: tuple[float, float] = (7.0, 12.0)
    distractor_contrast: tuple[float, float] = (0.18, 0.26)
    label_marker: bool = True
    rng_seed: int = 0


@dataclass
class PhantomInfo:
    breast_mask: np.ndarray
    mass_masks: list[np.ndarray] = field(default_factory=list)
    mass_styles: list[str] = field(default_factory=list)
    distractor_centers: list[tuple[float, float]] = field(default_factory=list)


def _mass_mask(shape, cx, cy, radius, aspect, angle, amplitude=0.0, lobes=0, phase=0.0) -> np.ndarray:
    h, w = shape
    reach = int(np.ceil(radius * (1 + amplitude) / min(aspect, 1.0))) + 2
    y0, y1 = max(0, int(cy) - reach), min(h, int(cy) + reach + 1)
    x0, x1 = max(0, int(cx) - reach), min(w, int(cx) + reach + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy)
    v = (-s * dx + c * dy) / aspect
    r = np.hypot(u, v)
    theta = np.arctan2(v, u)
    boundary = radius * (1.0 + amplitude * np.sin(lobes * theta + phase))
    mask = np.zeros(shape, dtype=bool)
    mask[y0:y1, x0:x1] = r <= boundary
    return mask


def _breast(shape, rng) -> tuple[np.ndarray, np.ndarray]:
    """Breast mask and normalized radius (0 at the chest wall center, 1 at the skin line)."""
    h, w = shape
    ax = rng.uniform(0.8, 0.95) * w
    ay = rng.uniform(0.38, 0.46) * h
    cy = rng.uniform(0.46, 0.54) * h
    yy, xx = np.mgrid[0:h, 0:w]
    rho = np.hypot((xx + 0.5) / ax, (yy + 0.5 - cy) / ay)
    return rho <= 1.0, rho


def _place(rng, breast_rho, taken, radius, max_rho=0.72, tries=200):
    h, w = breast_rho.shape
    margin = radius * 1.5
    for _ in range(tries):
        cx = rng.uniform(margin, w - margin)
        cy = rng.uniform(margin, h - margin)
        if breast_rho[int(cy), int(cx)] > max_rho:
            continue
        if all(np.hypot(cx - ox, cy - oy) > radius + orad + 12 for ox, oy, orad in taken):
            return cx, cy
    return None


def render_phantom(cfg: PhantomConfig, label: int, rng: np.random.Generator,
                   image_id: str = "phantom", subject_id: str = "subject",
                   view: str | None = None, n_benign: int | None = None,
                   mirror: bool = False) -> tuple[MammogramSample, PhantomInfo]:
    """Render one phantom and return it together with its construction masks."""
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    shape = tuple(cfg.image_size)
    h, w = shape
    breast, rho = _breast(shape, rng)

    noise = ndimage.gaussian_filter(rng.standard_normal(shape), cfg.texture_sigma)
    noise /= np.abs(noise).max() + 1e-12
    tissue = rng.uniform(*cfg.tissue_level) + cfg.texture_amplitude * noise
    tissue = tissue * (1.0 - 0.3 * np.clip(rho, 0, 1) ** 6)
    image = np.where(breast, tissue, cfg.background_level)

    if n_benign is None:
        if label == 1:
            n_benign = int(rng.random() < cfg.extra_benign_prob)
        else:
            n_benign = int(rng.choice(3, p=np.asarray(cfg.benign_mass_probs)))
    styles = ["malignant"] * label + ["benign"] * n_benign

    info = PhantomInfo(breast_mask=breast)
    taken: list[tuple[float, float, float]] = []
    for style in styles:
        radius = rng.uniform(*cfg.mass_radius)
        amp = rng.uniform(*cfg.spiculation_amplitude) if style == "malignant" else 0.0
        lobes = int(rng.integers(cfg.spiculation_lobes[0], cfg.spiculation_lobes[1] + 1))
        aspect = rng.uniform(0.7, 1.0)
        angle, phase = rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
        reach = radius * (1 + amp) / aspect
        spot = _place(rng, rho, taken, reach, tries=1000 if style == "malignant" else 200)
        if spot is None:
            if style == "malignant":
                raise RuntimeError("could not place the malignant mass")
            continue
        cx, cy = spot
        taken.append((cx, cy, reach))
        mask = _mass_mask(shape, cx, cy, radius, aspect, angle,
                          amp if style == "malignant" else 0.0, lobes if style == "malignant" else 0, phase)
        mask &= breast
        if not mask.any():
            continue
        contrast = rng.uniform(*cfg.mass_contrast)
        image = image + contrast * mask
        info.mass_masks.append(mask)
        info.mass_styles.append(style)

    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1))):
        sigma = rng.uniform(*cfg.distractor_sigma)
        spot = _place(rng, rho, taken, 2.0 * sigma, max_rho=0.8)
        if spot is None:
            continue
        cx, cy = spot
        taken.append((cx, cy, 2.0 * sigma))
        blob = np.exp(-((xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2) / (2 * sigma ** 2))
        image = image + rng.uniform(*cfg.distractor_contrast) * blob * breast
        info.distractor_centers.append((cx, cy))

    image = image + cfg.noise_sigma * rng.standard_normal(shape)

    if cfg.label_marker:
        mh, mw = 28, 14
        my, mx = 12, w - mw - 8
        if not breast[my:my + mh, mx - 4:mx + mw].any():
            image[my:my + mh, mx:mx + mw] = 0.9

    image = np.clip(image, 0.0, 1.0)
    boxes = []
    for m in info.mass_masks:
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        boxes.append(BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1))

    if mirror:
        image = image[:, ::-1].copy()
        info.breast_mask = info.breast_mask[:, ::-1].copy()
        info.mass_masks = [m[:, ::-1].copy() for m in info.mass_masks]
        info.distractor_centers = [(w - x, y) for x, y in info.distractor_centers]
        boxes = [BoundingBox(w - b.x_max, b.y_min, w - b.x_min, b.y_max) for b in boxes]

    sample = MammogramSample(image=image, subject_id=subject_id, image_id=image_id,
                             label=label, gt_boxes=boxes, view=view)
    return sample, info


def generate_phantom(cfg: PhantomConfig, label: int, rng: np.random.Generator | None = None,
                     **kwargs) -> MammogramSample:
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    return render_phantom(cfg, label, rng, **kwargs)[0]


def _subject_sizes(n_images: int, n_subjects: int, rng) -> list[int]:
    lo = 2 if n_images >= 2 * n_subjects else 1
    sizes = np.full(n_subjects, lo)
    remaining = n_images - lo * n_subjects
    cap = 4
    while remaining > 0:
        open_ = np.flatnonzero(sizes < cap)
        if len(open_) == 0:
            cap += 1
            continue
        sizes[rng.choice(open_)] += 1
        remaining -= 1
    return sizes.tolist()


def generate_dataset(cfg: PhantomConfig, n_images: int, malignant_fraction: float,
                     n_subjects: int, out_dir: str | Path, seed: int | None = None) -> DatasetManifest:
    """Render ``n_images`` phantoms grouped into subjects and write the dataset layout.

    Subjects hold 2-4 images (alternating CC/MLO views of one side) whenever
    ``2 * n_subjects <= n_images <= 4 * n_subjects``. Malignant images are
    packed subject by subject, so at most one subject mixes labels.
    """
    if not 1 <= n_subjects <= n_images:
        raise ValueError("need 1 <= n_subjects <= n_images")
    if not 0.0 <= malignant_fraction <= 1.0:
        raise ValueError("malignant_fraction must lie in [0, 1]")
    seed = cfg.rng_seed if seed is None else seed
    root = Path(out_dir)
    (root / IMAGES_DIR).mkdir(parents=True, exist_ok=True)

    plan_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    sizes = _subject_sizes(n_images, n_subjects, plan_rng)
    n_malignant = int(round(malignant_fraction * n_images))
    labels_by_subject = []
    budget = n_malignant
    for s in plan_rng.permutation(n_subjects):
        take = min(budget, sizes[s])
        budget -= take
        labels_by_subject.append((int(s), [1] * take + [0] * (sizes[s] - take)))
    labels_by_subject.sort()

    image_seeds = np.random.SeedSequence([seed, 1]).spawn(n_images)
    records = []
    k = 0
    for s, labels in labels_by_subject:
        mirror = bool(plan_rng.random() < 0.5)
        for j, label in enumerate(labels):
            image_id = f"img{k:04d}"
            subject_id = f"subj{s:03d}"
            view = ("CC", "MLO")[j % 2]
            sample, _ = render_phantom(cfg, label, np.random.default_rng(image_seeds[k]),
                                       image_id=image_id, subject_id=subject_id,
                                       view=view, mirror=mirror)
            save_image(root / IMAGES_DIR / f"{image_id}.png", sample.image)
            records.append({
                "image_id": image_id,
                "subject_id": subject_id,
                "label": label,
                "view": view,
                "boxes": [b.to_dict() for b in sample.gt_boxes],
            })
            k += 1

    (root / "annotations.json").write_text(json.dumps(records, indent=1))
    return load_manifest(root)
