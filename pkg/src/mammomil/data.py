"""Domain types, dataset ingestion and manifest serialization.

Dataset layout on disk::

    root/images/<image_id>.png      8- or 16-bit grayscale
    root/annotations.json           list of {image_id, subject_id, label, view, boxes}

Boxes use half-open pixel coordinates with the origin at the top-left,
``x`` along columns and ``y`` along rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "BoundingBox",
    "DatasetError",
    "DatasetManifest",
    "MammogramSample",
    "PatchBag",
    "SampleRecord",
    "SoftMap",
    "ValidationError",
    "box_area",
    "load_image",
    "load_manifest",
    "save_image",
    "save_manifest",
]

ANNOTATIONS_FILE = "annotations.json"
IMAGES_DIR = "images"


class DatasetError(Exception):
    """Raised when a dataset directory cannot be ingested."""


class ValidationError(DatasetError, ValueError):
    """A value violates a domain invariant (bad box, bad label, ...)."""


@dataclass(frozen=True, order=True)
class BoundingBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        for name in ("x_min", "y_min", "x_max", "y_max"):
            value = getattr(self, name)
            if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, np.integer)):
                raise ValidationError(f"box coordinate {name}={value!r} is not an integer")
            object.__setattr__(self, name, int(value))
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValidationError(f"box {self.as_tuple()} has nonpositive area")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_dict(self) -> dict[str, int]:
        return {"x_min": self.x_min, "y_min": self.y_min, "x_max": self.x_max, "y_max": self.y_max}

    @classmethod
    def from_dict(cls, d: dict) -> BoundingBox:
        return cls(int(d["x_min"]), int(d["y_min"]), int(d["x_max"]), int(d["y_max"]))

    def inside(self, height: int, width: int) -> bool:
        """True when the box lies fully inside a ``height x width`` frame."""
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height


def box_area(b: BoundingBox) -> int:
    return (b.x_max - b.x_min) * (b.y_max - b.y_min)


def _check_label(label) -> int:
    if label not in (0, 1) or isinstance(label, float):
        raise ValidationError(f"label must be 0 or 1, got {label!r}")
    return int(label)


@dataclass(eq=False)
class MammogramSample:
    """One grayscale image with its image-level label and GT mass boxes."""

    image: np.ndarray
    subject_id: str
    image_id: str
    label: int
    gt_boxes: list[BoundingBox] = field(default_factory=list)
    view: str | None = None

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image)
        if self.image.ndim != 2 or self.image.shape[0] == 0 or self.image.shape[1] == 0:
            raise ValidationError(f"{self.image_id}: image must be a nonempty 2D array")
        self.label = _check_label(self.label)
        h, w = self.image.shape
        for b in self.gt_boxes:
            if not b.inside(h, w):
                raise ValidationError(f"{self.image_id}: box {b.as_tuple()} outside {h}x{w} image")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape


@dataclass
class SoftMap:
    probs: np.ndarray

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs)
        if self.probs.ndim != 2:
            raise ValidationError("softmap must be 2D")
        if self.probs.size and (self.probs.min() < 0 or self.probs.max() > 1):
            raise ValidationError("softmap values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape


@dataclass(eq=False)
class PatchBag:
    """Variable-size bag of 64x64 patches extracted from one image.

    ``origins`` holds the (x, y) top-left corner of every patch window in the
    working frame so attention weights can be mapped back to image regions.
    """

    patches: np.ndarray
    label: int
    image_id: str
    source_boxes: list[BoundingBox] = field(default_factory=list)
    origins: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.patches = np.asarray(self.patches, dtype=np.float32)
        if self.patches.ndim != 3 or len(self.patches) == 0:
            raise ValidationError(f"{self.image_id}: bag must hold N >= 1 patches")
        self.label = _check_label(self.label)
        if self.origins is not None:
            self.origins = np.asarray(self.origins, dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def n(self) -> int:
        return len(self.patches)


@dataclass(frozen=True)
class SampleRecord:
    """Manifest entry; ``load()`` reads the pixels on demand."""

    image_id: str
    subject_id: str
    label: int
    boxes: tuple[BoundingBox, ...]
    view: str | None
    path: Path
    height: int
    width: int

    def load(self) -> MammogramSample:
        return MammogramSample(
            image=load_image(self.path),
            subject_id=self.subject_id,
            image_id=self.image_id,
            label=self.label,
            gt_boxes=list(self.boxes),
            view=self.view,
        )

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "subject_id": self.subject_id,
            "label": self.label,
            "view": self.view,
            "boxes": [b.to_dict() for b in self.boxes],
        }


@dataclass
class DatasetManifest:
    samples: list[SampleRecord]
    root_path: str

    def __post_init__(self) -> None:
        seen = set()
        for s in self.samples:
            if s.image_id in seen:
                raise ValidationError(f"duplicate image_id {s.image_id!r}")
            seen.add(s.image_id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_id(self) -> dict[str, SampleRecord]:
        return {s.image_id: s for s in self.samples}

    def labels(self) -> dict[str, int]:
        return {s.image_id: s.label for s in self.samples}


def load_image(path: str | Path) -> np.ndarray:
    """Read a grayscale image and scale it linearly into [0, 1] by its format max."""
    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I;16B", "I;16L", "I", "1"):
            im = im.convert("L")
        arr = np.asarray(im)
    if arr.dtype == np.bool_:
        return arr.astype(np.float64)
    if np.issubdtype(arr.dtype, np.integer):
        if arr.dtype == np.int32:
            # PIL's "I" mode is used for 16-bit PNGs on some platforms
            return np.clip(arr, 0, 65535).astype(np.float64) / 65535.0
        return arr.astype(np.float64) / np.iinfo(arr.dtype).max
    return np.clip(arr.astype(np.float64), 0.0, 1.0)


def save_image(path: str | Path, image: np.ndarray, bit_depth: int = 16) -> None:
    """Write an image in [0, 1] as an 8- or 16-bit grayscale PNG."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if bit_depth == 16:
        arr = np.round(image * 65535).astype(np.uint16)
    elif bit_depth == 8:
        arr = np.round(image * 255).astype(np.uint8)
    else:
        raise ValueError(f"unsupported bit depth {bit_depth}")
    Image.fromarray(arr).save(path)


def _parse_entry(i: int, entry, root: Path) -> tuple[dict, Path]:
    if not isinstance(entry, dict):
        raise DatasetError(f"annotation entry #{i} is not an object")
    try:
        image_id = str(entry["image_id"])
        subject_id = str(entry["subject_id"])
        label = entry["label"]
        boxes_raw = entry.get("boxes", [])
    except KeyError as exc:
        raise DatasetError(f"annotation entry #{i} is missing field {exc.args[0]!r}") from None
    if not isinstance(boxes_raw, list):
        raise DatasetError(f"annotation entry {image_id!r}: 'boxes' must be a list")
    try:
        label = _check_label(label)
        boxes = tuple(BoundingBox.from_dict(b) for b in boxes_raw)
    except ValidationError as exc:
        raise ValidationError(f"annotation entry {image_id!r}: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"annotation entry {image_id!r}: malformed box ({exc})") from None
    view = entry.get("view")
    fields = dict(image_id=image_id, subject_id=subject_id, label=label, boxes=boxes,
                  view=None if view is None else str(view))
    return fields, root / IMAGES_DIR / f"{image_id}.png"


def load_manifest(root_path: str | Path) -> DatasetManifest:
    """Parse ``annotations.json`` under ``root_path`` and validate every entry.

    Image headers are read to validate boxes against the image bounds; the
    pixel data itself is loaded lazily through :meth:`SampleRecord.load`.
    """
    root = Path(root_path)
    ann_path = root / ANNOTATIONS_FILE
    if not ann_path.is_file():
        raise DatasetError(f"{ann_path} not found")
    try:
        entries = json.loads(ann_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{ann_path}: invalid JSON ({exc})") from None
    if not isinstance(entries, list):
        raise DatasetError(f"{ann_path}: expected a list of records")

    parsed = [_parse_entry(i, e, root) for i, e in enumerate(entries)]
    missing = [f["image_id"] for f, path in parsed if not path.is_file()]
    if missing:
        raise DatasetError(f"missing image files for image_id(s): {', '.join(missing)}")

    records = []
    for fields, path in parsed:
        with Image.open(path) as im:
            width, height = im.size
        for b in fields["boxes"]:
            if not b.inside(height, width):
                raise ValidationError(
                    f"annotation entry {fields['image_id']!r}: box {b.as_tuple()} "
                    f"outside {height}x{width} image"
                )
        records.append(SampleRecord(path=path, height=height, width=width, **fields))
    return DatasetManifest(samples=records, root_path=str(root))


def save_manifest(manifest: DatasetManifest, root_path: str | Path | None = None) -> Path:
    """Write ``annotations.json`` for the manifest; returns its path."""
    root = Path(root_path if root_path is not None else manifest.root_path)
    root.mkdir(parents=True, exist_ok=True)
    out = root / ANNOTATIONS_FILE
    out.write_text(json.dumps([s.to_json() for s in manifest.samples], indent=1))
    return out
