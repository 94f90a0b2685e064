"""Stage-2 bag construction: five windows per detected box, bright-region fallback."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import BoundingBox, PatchBag
from .preprocess import PreprocessedSample

__all__ = [
    "PATCH_SIZE",
    "box_patch_centers",
    "build_bag",
    "clamp_window",
    "fallback_bright_patches",
    "load_bag",
    "patches_from_box",
    "save_bag",
]

PATCH_SIZE = 64
PATCHES_PER_BOX = 5


def clamp_window(cx: int, cy: int, shape: tuple[int, int], size: int = PATCH_SIZE) -> tuple[int, int]:
    """Top-left (x, y) of a size x size window centered at (cx, cy), shifted into the frame."""
    h, w = shape
    if h < size or w < size:
        raise ValueError(f"frame {shape} smaller than patch size {size}")
    x = min(max(cx - size // 2, 0), w - size)
    y = min(max(cy - size // 2, 0), h - size)
    return int(x), int(y)


def box_patch_centers(box: BoundingBox) -> list[tuple[int, int]]:
    """Center, then top-left, top-right, bottom-left, bottom-right corners."""
    cx = (box.x_min + box.x_max) // 2
    cy = (box.y_min + box.y_max) // 2
    return [
        (cx, cy),
        (box.x_min, box.y_min),
        (box.x_max, box.y_min),
        (box.x_min, box.y_max),
        (box.x_max, box.y_max),
    ]


def _crop(image: np.ndarray, origins, size: int) -> np.ndarray:
    return np.stack([image[y:y + size, x:x + size] for x, y in origins]).astype(np.float32)


def patches_from_box(image: np.ndarray, box: BoundingBox, size: int = PATCH_SIZE,
                     return_origins: bool = False):
    image = np.asarray(image)
    origins = [clamp_window(cx, cy, image.shape, size) for cx, cy in box_patch_centers(box)]
    patches = list(_crop(image, origins, size))
    return (patches, origins) if return_origins else patches


def fallback_bright_patches(image: np.ndarray, k: int = PATCHES_PER_BOX,
                            rng: np.random.Generator | None = None, size: int = PATCH_SIZE,
                            percentile: float = 90.0, return_origins: bool = False):
    """Patches centered on random pixels brighter than the image's 90th percentile."""
    image = np.asarray(image)
    rng = np.random.default_rng(0) if rng is None else rng
    candidates = np.flatnonzero(image.ravel() > np.percentile(image, percentile))
    if len(candidates) == 0:
        candidates = np.arange(image.size)
    picks = rng.choice(candidates, size=k, replace=len(candidates) < k)
    w = image.shape[1]
    origins = [clamp_window(int(p % w), int(p // w), image.shape, size) for p in picks]
    patches = list(_crop(image, origins, size))
    return (patches, origins) if return_origins else patches


def _hull(origins, size: int) -> BoundingBox:
    o = np.asarray(origins)
    return BoundingBox(int(o[:, 0].min()), int(o[:, 1].min()),
                       int(o[:, 0].max()) + size, int(o[:, 1].max()) + size)


def build_bag(sample: PreprocessedSample, boxes: list[BoundingBox],
              rng: np.random.Generator | None = None, size: int = PATCH_SIZE) -> PatchBag:
    """Bag of 5 patches per box, or 5 bright-region patches when there are no boxes.

    For the fallback bag ``source_boxes`` holds the hull of the sampled windows.
    """
    image = sample.image
    if boxes:
        patches, origins = [], []
        for b in boxes:
            p, o = patches_from_box(image, b, size, return_origins=True)
            patches.extend(p)
            origins.extend(o)
        sources = list(boxes)
    else:
        patches, origins = fallback_bright_patches(image, PATCHES_PER_BOX, rng, size, return_origins=True)
        sources = [_hull(origins, size)]
    return PatchBag(patches=np.stack(patches), label=sample.label, image_id=sample.image_id,
                    source_boxes=sources, origins=np.asarray(origins))


def save_bag(bag: PatchBag, directory: str | Path) -> Path:
    """Cache a bag as ``<image_id>.bin`` (float32, C order) plus a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = directory / f"{bag.image_id}.bin"
    np.ascontiguousarray(bag.patches, dtype="<f4").tofile(blob)
    meta = {
        "image_id": bag.image_id,
        "n": bag.n,
        "label": bag.label,
        "patch_shape": list(bag.patches.shape[1:]),
        "dtype": "float32-le",
        "source_boxes": [b.to_dict() for b in bag.source_boxes],
        "origins": None if bag.origins is None else bag.origins.tolist(),
    }
    (directory / f"{bag.image_id}.json").write_text(json.dumps(meta))
    return blob


def load_bag(directory: str | Path, image_id: str) -> PatchBag:
    directory = Path(directory)
    meta_path = directory / f"{image_id}.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"no cached bag for image_id {image_id!r} in {directory}")
    meta = json.loads(meta_path.read_text())
    patches = np.fromfile(directory / f"{image_id}.bin", dtype="<f4")
    patches = patches.reshape(meta["n"], *meta["patch_shape"])
    return PatchBag(
        patches=patches,
        label=meta["label"],
        image_id=meta["image_id"],
        source_boxes=[BoundingBox.from_dict(b) for b in meta["source_boxes"]],
        origins=None if meta["origins"] is None else np.asarray(meta["origins"]),
    )


class DenseBag:
    """All windows of one image on a regular grid, materialized lazily.

    Holding the image plus window origins keeps a 2,000-patch bag at the
    size of a single image; ``patches`` crops the windows on access.
    """

    def __init__(self, image: np.ndarray, origins: np.ndarray, label: int, image_id: str,
                 size: int = PATCH_SIZE):
        self.image = np.asarray(image, dtype=np.float32)
        self.origins = np.asarray(origins, dtype=np.int64).reshape(-1, 2)
        self.label = int(label)
        self.image_id = image_id
        self.size = size
        self.source_boxes: list[BoundingBox] = []

    def __len__(self) -> int:
        return len(self.origins)

    @property
    def n(self) -> int:
        return len(self.origins)

    @property
    def patches(self) -> np.ndarray:
        return _crop(self.image, self.origins, self.size)

    def to_patch_bag(self) -> PatchBag:
        return PatchBag(self.patches, self.label, self.image_id, origins=self.origins)
