"""Softmap to bounding boxes: threshold, morphological closing, 8-connected components."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .data import BoundingBox, SoftMap

__all__ = [
    "PostprocessConfig",
    "binarize",
    "components_to_boxes",
    "config_hash",
    "connected_components",
    "detect",
    "detections_to_json",
    "disk",
    "morph_close",
]

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class PostprocessConfig:
    binarize_threshold: float = 0.5
    closing_radius: int = 3
    min_component_area: int = 25

    def __post_init__(self) -> None:
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ValueError("binarize_threshold must lie in (0, 1)")
        if self.closing_radius < 0 or self.min_component_area < 0:
            raise ValueError("closing_radius and min_component_area must be >= 0")


def _probs(softmap) -> np.ndarray:
    return softmap.probs if isinstance(softmap, SoftMap) else np.asarray(softmap)


def binarize(softmap, threshold: float = 0.5) -> np.ndarray:
    return _probs(softmap) >= threshold


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def morph_close(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilation then erosion by a disk; the frame is treated as surrounded by background."""
    mask = np.asarray(mask, dtype=bool)
    if radius <= 0:
        return mask.copy()
    se = disk(radius)
    padded = np.pad(mask, radius)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(padded, se), se)
    return closed[radius:-radius, radius:-radius]


def connected_components(mask: np.ndarray, min_area: int = 0) -> list[np.ndarray]:
    """8-connected components as ``(k, 2)`` arrays of (row, col), in raster order.

    Components with fewer than ``min_area`` pixels are discarded.
    """
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    order = np.argsort(labels.ravel(), kind="stable")
    sorted_labels = labels.ravel()[order]
    bounds = np.searchsorted(sorted_labels, np.arange(1, n + 2))
    w = labels.shape[1]
    comps = []
    for i in range(n):
        flat = order[bounds[i]:bounds[i + 1]]
        if len(flat) < min_area:
            continue
        comps.append(np.stack([flat // w, flat % w], axis=1))
    return comps


def components_to_boxes(components: list[np.ndarray]) -> list[BoundingBox]:
    boxes = []
    for pix in components:
        pix = np.asarray(pix)
        if len(pix) == 0:
            raise ValueError("empty component")
        rows, cols = pix[:, 0], pix[:, 1]
        boxes.append(BoundingBox(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1))
    return boxes


def detect(softmap, cfg: PostprocessConfig = PostprocessConfig()) -> list[BoundingBox]:
    mask = binarize(softmap, cfg.binarize_threshold)
    mask = morph_close(mask, cfg.closing_radius)
    return components_to_boxes(connected_components(mask, cfg.min_component_area))


def config_hash(cfg) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def detections_to_json(image_id: str, boxes: list[BoundingBox], cfg: PostprocessConfig) -> dict:
    return {
        "image_id": image_id,
        "boxes": [b.to_dict() for b in boxes],
        "threshold": cfg.binarize_threshold,
        "config_hash": config_hash(cfg),
    }
