"""Breast cropping, resizing to the working frame, whitening and augmentation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import cv2
import numpy as np
from scipy import ndimage

from .data import BoundingBox, MammogramSample

log = logging.getLogger(__name__)

WORKING_SHAPE = (640, 320)  # (H, W)
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)

__all__ = [
    "AugmentationConfig",
    "CropRecord",
    "DegenerateHistogramError",
    "PreprocessedSample",
    "WORKING_SHAPE",
    "augment",
    "crop_breast",
    "otsu_threshold",
    "preprocess_sample",
    "load_preprocessed",
    "resize_to_working",
    "save_preprocessed",
    "whiten",
]


class DegenerateHistogramError(ValueError):
    pass


@dataclass(frozen=True)
class CropRecord:
    """Crop rectangle in original pixels plus the resize factors applied after it."""

    x0: int
    y0: int
    x1: int
    y1: int
    scale_x: float = 1.0
    scale_y: float = 1.0
    full_image: bool = False


@dataclass(eq=False)
class PreprocessedSample:
    image: np.ndarray
    gt_boxes: list[BoundingBox]
    crop_record: CropRecord
    label: int
    subject_id: str
    image_id: str
    foreground: np.ndarray | None = None
    whitened: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape


@dataclass(frozen=True)
class AugmentationConfig:
    enable_flips: bool = True
    max_translate_frac: float = 0.2
    max_scale_frac: float = 0.2
    max_rotation_deg: float = 30.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if min(self.max_translate_frac, self.max_scale_frac, self.max_rotation_deg) < 0:
            raise ValueError("augmentation ranges must be nonnegative")

    @classmethod
    def disabled(cls) -> AugmentationConfig:
        return cls(enable_flips=False, max_translate_frac=0.0, max_scale_frac=0.0, max_rotation_deg=0.0)


def _between_class_variance(counts: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Between-class variance for every split k = 1..bins-1 (class 0 = bins < k)."""
    p = counts / counts.sum()
    w0 = np.cumsum(p)[:-1]
    m0 = np.cumsum(p * centers)[:-1]
    mu_t = m0[-1] + p[-1] * centers[-1]
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        var = (mu_t * w0 - m0) ** 2 / (w0 * w1)
    return np.where((w0 > 0) & (w1 > 0), var, 0.0)


def otsu_threshold(image: np.ndarray, bins: int = 256) -> float:
    """Otsu threshold of an image in [0, 1].

    Returns the histogram bin edge maximizing the between-class variance;
    pixels ``>= threshold`` form the foreground class.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ValueError("empty image")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    counts, edges = np.histogram(image, bins=bins, range=(0.0, 1.0))
    centers = 0.5 * (edges[:-1] + edges[1:])
    var = _between_class_variance(counts.astype(np.float64), centers)
    if not np.any(var > 0):
        raise DegenerateHistogramError("degenerate histogram")
    k = int(np.argmax(var)) + 1
    return float(edges[k])


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return mask
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def _tight_rect(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _intersect_and_shift(boxes, x0, y0, x1, y1, image_id) -> list[BoundingBox]:
    out = []
    for b in boxes:
        bx0, by0 = max(b.x_min, x0), max(b.y_min, y0)
        bx1, by1 = min(b.x_max, x1), min(b.y_max, y1)
        if bx0 >= bx1 or by0 >= by1:
            log.warning("%s: GT box %s dropped by the breast crop", image_id, b.as_tuple())
            continue
        out.append(BoundingBox(bx0 - x0, by0 - y0, bx1 - x0, by1 - y0))
    return out


def crop_breast(sample: MammogramSample, bins: int = 256) -> PreprocessedSample:
    """Tight crop around the largest connected region above the Otsu threshold."""
    image = np.asarray(sample.image, dtype=np.float64)
    h, w = image.shape
    try:
        t = otsu_threshold(image, bins)
        fg = _largest_component(image >= t)
        x0, y0, x1, y1 = _tight_rect(fg)
        full = False
    except DegenerateHistogramError:
        log.warning("%s: degenerate histogram, using the full image as crop", sample.image_id)
        fg = np.ones_like(image, dtype=bool)
        x0, y0, x1, y1 = 0, 0, w, h
        full = True
    return PreprocessedSample(
        image=image[y0:y1, x0:x1].copy(),
        gt_boxes=_intersect_and_shift(sample.gt_boxes, x0, y0, x1, y1, sample.image_id),
        crop_record=CropRecord(x0, y0, x1, y1, full_image=full),
        label=sample.label,
        subject_id=sample.subject_id,
        image_id=sample.image_id,
        foreground=fg[y0:y1, x0:x1].copy(),
    )


def _scale_box(b: BoundingBox, h: int, w: int, nh: int, nw: int) -> BoundingBox:
    # exact integer floor/ceil of coordinate * new / old
    x0 = (b.x_min * nw) // w
    y0 = (b.y_min * nh) // h
    x1 = -((-b.x_max * nw) // w)
    y1 = -((-b.y_max * nh) // h)
    return BoundingBox(x0, y0, min(x1, nw), min(y1, nh))


def resize_to_working(sample: PreprocessedSample, shape: tuple[int, int] = WORKING_SHAPE) -> PreprocessedSample:
    """Bilinear resize to ``shape``; boxes are scaled and rounded outward."""
    nh, nw = shape
    h, w = sample.image.shape
    if (h, w) == (nh, nw):
        image = sample.image.astype(np.float32)
        fg = sample.foreground
    else:
        image = cv2.resize(sample.image.astype(np.float32), (nw, nh), interpolation=cv2.INTER_LINEAR)
        fg = None
        if sample.foreground is not None:
            fg = cv2.resize(sample.foreground.astype(np.uint8), (nw, nh),
                            interpolation=cv2.INTER_NEAREST).astype(bool)
    rec = replace(sample.crop_record, scale_x=nw / w, scale_y=nh / h)
    boxes = [_scale_box(b, h, w, nh, nw) for b in sample.gt_boxes]
    return replace(sample, image=image, gt_boxes=boxes, crop_record=rec, foreground=fg)


def whiten(image: np.ndarray) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    std = x.std()
    if not std > 0:
        raise ValueError("cannot whiten an image with zero variance")
    return (x - x.mean()) / std


def _whiten_sample(sample: PreprocessedSample) -> PreprocessedSample:
    return replace(sample, image=whiten(sample.image).astype(np.float32), whitened=True)


def preprocess_sample(sample: MammogramSample, shape: tuple[int, int] = WORKING_SHAPE) -> PreprocessedSample:
    """Deterministic evaluation-time preprocessing: crop, resize, whiten."""
    return _whiten_sample(resize_to_working(crop_breast(sample), shape))


def _affine_matrix(h, w, flip_x, flip_y, angle_deg, scale, tx, ty) -> np.ndarray:
    """3x3 map in continuous coordinates (pixel i spans [i, i+1))."""
    fx = np.array([[-1.0, 0, w], [0, 1, 0], [0, 0, 1]]) if flip_x else np.eye(3)
    fy = np.array([[1.0, 0, 0], [0, -1, h], [0, 0, 1]]) if flip_y else np.eye(3)
    cx, cy = w / 2.0, h / 2.0
    th = math.radians(angle_deg)
    c, s = math.cos(th) * scale, math.sin(th) * scale
    to_origin = np.array([[1.0, 0, -cx], [0, 1, -cy], [0, 0, 1]])
    rot_scale = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    back = np.array([[1.0, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1]])
    return back @ rot_scale @ to_origin @ fy @ fx


def _transform_box(b: BoundingBox, m: np.ndarray, h: int, w: int, min_area: int) -> BoundingBox | None:
    corners = np.array([[b.x_min, b.y_min, 1], [b.x_max, b.y_min, 1],
                        [b.x_min, b.y_max, 1], [b.x_max, b.y_max, 1]], dtype=np.float64)
    pts = corners @ m.T
    # round away tiny float error before floor/ceil
    pts = np.round(pts[:, :2], 9)
    x0 = max(0, math.floor(pts[:, 0].min()))
    y0 = max(0, math.floor(pts[:, 1].min()))
    x1 = min(w, math.ceil(pts[:, 0].max()))
    y1 = min(h, math.ceil(pts[:, 1].max()))
    if x1 <= x0 or y1 <= y0 or (x1 - x0) * (y1 - y0) < min_area:
        return None
    return BoundingBox(x0, y0, x1, y1)


def augment(
    sample: PreprocessedSample,
    cfg: AugmentationConfig,
    rng: np.random.Generator,
    min_box_area: int = 4,
) -> PreprocessedSample:
    """Random flips followed by one composed rotate/scale/translate warp.

    Every random draw is made regardless of the config so that the stream of
    ``rng`` stays aligned across configs.
    """
    h, w = sample.image.shape
    flip_x = bool(rng.random() < 0.5) and cfg.enable_flips
    flip_y = bool(rng.random() < 0.5) and cfg.enable_flips
    angle = rng.uniform(-1.0, 1.0) * cfg.max_rotation_deg
    scale = 1.0 + rng.uniform(-1.0, 1.0) * cfg.max_scale_frac
    tx = rng.uniform(-1.0, 1.0) * cfg.max_translate_frac * w
    ty = rng.uniform(-1.0, 1.0) * cfg.max_translate_frac * h

    m = _affine_matrix(h, w, flip_x, flip_y, angle, scale, tx, ty)
    if np.allclose(m, np.eye(3), rtol=0, atol=1e-12):
        return replace(sample, gt_boxes=list(sample.gt_boxes))

    # cv2 works on pixel indices whose centers sit at i + 0.5 in continuous coords
    shift = np.array([[1.0, 0, 0.5], [0, 1, 0.5], [0, 0, 1]])
    m_idx = np.linalg.inv(shift) @ m @ shift
    src = np.asarray(sample.image, dtype=np.float32)
    fill = float(src.min())
    image = cv2.warpAffine(src, m_idx[:2], (w, h), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=fill)
    fg = None
    if sample.foreground is not None:
        fg = cv2.warpAffine(sample.foreground.astype(np.uint8), m_idx[:2], (w, h),
                            flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT,
                            borderValue=0).astype(bool)
    boxes = [tb for b in sample.gt_boxes if (tb := _transform_box(b, m, h, w, min_box_area)) is not None]
    out = replace(sample, image=image, gt_boxes=boxes, foreground=fg)
    return _whiten_sample(out) if np.std(out.image) > 0 else out


def save_preprocessed(sample: PreprocessedSample, path) -> None:
    """Store one preprocessed sample as a compressed ``.npz`` archive."""
    boxes = np.array([b.as_tuple() for b in sample.gt_boxes], dtype=np.int64).reshape(-1, 4)
    fg = sample.foreground if sample.foreground is not None else np.zeros((0, 0), dtype=bool)
    c = sample.crop_record
    np.savez_compressed(
        path,
        image=sample.image,
        foreground=fg,
        boxes=boxes,
        crop=np.array([c.x0, c.y0, c.x1, c.y1], dtype=np.int64),
        scale=np.array([c.scale_x, c.scale_y]),
        full_image=np.array(c.full_image),
        label=np.array(sample.label),
        ids=np.array([sample.subject_id, sample.image_id]),
        whitened=np.array(sample.whitened),
    )


def load_preprocessed(path) -> PreprocessedSample:
    with np.load(path) as z:
        fg = z["foreground"]
        x0, y0, x1, y1 = (int(v) for v in z["crop"])
        crop = CropRecord(x0, y0, x1, y1, float(z["scale"][0]), float(z["scale"][1]), bool(z["full_image"]))
        return PreprocessedSample(
            image=z["image"],
            gt_boxes=[BoundingBox(*(int(v) for v in row)) for row in z["boxes"]],
            crop_record=crop,
            label=int(z["label"]),
            subject_id=str(z["ids"][0]),
            image_id=str(z["ids"][1]),
            foreground=fg if fg.size else None,
            whitened=bool(z["whitened"]),
        )
