import numpy as np
import pytest

from mammomil.data import BoundingBox
from mammomil.patches import (
    box_patch_centers,
    build_bag,
    clamp_window,
    fallback_bright_patches,
    load_bag,
    patches_from_box,
    save_bag,
)
from mammomil.preprocess import CropRecord, PreprocessedSample
from mammomil.training import dense_patch_bags


def _sample(image, fg=None, label=1):
    h, w = image.shape
    return PreprocessedSample(np.asarray(image, np.float32), [], CropRecord(0, 0, w, h), label, "s", "img",
                              foreground=fg)


def test_patch_centers():
    assert box_patch_centers(BoundingBox(100, 100, 200, 200)) == [
        (150, 150), (100, 100), (200, 100), (100, 200), (200, 200)]


def test_corner_box_clamps_to_origin():
    img = np.random.default_rng(0).random((640, 320))
    patches, origins = patches_from_box(img, BoundingBox(0, 0, 40, 40), return_origins=True)
    assert origins[1] == (0, 0)
    assert all(p.shape == (64, 64) for p in patches)
    assert np.array_equal(patches[1], img[:64, :64].astype(np.float32))


def test_tiny_box_patches_valid():
    img = np.random.default_rng(0).random((640, 320))
    patches, origins = patches_from_box(img, BoundingBox(10, 10, 12, 12), return_origins=True)
    assert len(patches) == 5 and all(p.shape == (64, 64) for p in patches)
    assert all(0 <= x <= 320 - 64 and 0 <= y <= 640 - 64 for x, y in origins)


def test_clamp_window_far_corner():
    assert clamp_window(320, 640, (640, 320)) == (256, 576)
    with pytest.raises(ValueError):
        clamp_window(0, 0, (32, 32))


def test_fallback_bright_square():
    img = np.zeros((640, 320))
    img[300:364, 100:164] = 1.0
    _, origins = fallback_bright_patches(img, 5, np.random.default_rng(1), return_origins=True)
    for x, y in origins:
        cx, cy = x + 32, y + 32
        assert 100 <= cx < 164 and 300 <= cy < 364


def test_fallback_deterministic_and_constant_image():
    img = np.random.default_rng(0).random((128, 96))
    a = fallback_bright_patches(img, 5, np.random.default_rng(3))
    b = fallback_bright_patches(img, 5, np.random.default_rng(3))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    flat = fallback_bright_patches(np.full((128, 96), 0.5), 5, np.random.default_rng(3))
    assert len(flat) == 5 and all(p.shape == (64, 64) for p in flat)


def test_build_bag_counts():
    img = np.random.default_rng(0).random((640, 320))
    boxes = [BoundingBox(10, 10, 50, 50), BoundingBox(200, 300, 260, 380), BoundingBox(300, 600, 320, 640)]
    bag = build_bag(_sample(img), boxes)
    assert bag.n == 15 and bag.patches.shape == (15, 64, 64)
    assert bag.source_boxes == boxes
    assert all(0 <= x <= 256 and 0 <= y <= 576 for x, y in bag.origins)
    for p, (x, y) in zip(bag.patches, bag.origins):
        assert np.array_equal(p, img[y:y + 64, x:x + 64].astype(np.float32))
    empty = build_bag(_sample(img), [], np.random.default_rng(0))
    assert empty.n == 5 and len(empty.source_boxes) == 1


def test_bag_cache_round_trip(tmp_path):
    img = np.random.default_rng(0).random((640, 320))
    bag = build_bag(_sample(img), [BoundingBox(10, 10, 50, 50)])
    save_bag(bag, tmp_path)
    back = load_bag(tmp_path, "img")
    assert np.array_equal(back.patches, bag.patches) and back.source_boxes == bag.source_boxes
    assert np.array_equal(back.origins, bag.origins)
    with pytest.raises(FileNotFoundError):
        load_bag(tmp_path, "nope")


def test_dense_count_full_foreground():
    s = _sample(np.zeros((640, 320)), fg=np.ones((640, 320), bool))
    bag = dense_patch_bags(s, 8)
    enumerated = [(x, y) for y in range(0, 640 - 64 + 1, 8) for x in range(0, 320 - 64 + 1, 8)]
    assert bag.n == len(enumerated) == 2409
    assert sorted(map(tuple, bag.origins.tolist())) == sorted(enumerated)


def test_dense_degenerate_stride_and_frame():
    s = _sample(np.zeros((64, 64)), fg=np.ones((64, 64), bool))
    assert dense_patch_bags(s, 64).n == 1
    s = _sample(np.random.default_rng(0).random((200, 150)))
    bag = dense_patch_bags(s, 8)
    assert np.all(bag.origins >= 0)
    assert np.all(bag.origins[:, 0] + 64 <= 150) and np.all(bag.origins[:, 1] + 64 <= 200)
    assert bag.patches.shape == (bag.n, 64, 64)


def test_dense_keeps_foreground_centres():
    fg = np.zeros((640, 320), bool)
    fg[:, :160] = True
    bag = dense_patch_bags(_sample(np.zeros((640, 320)), fg=fg), 8)
    assert np.all(bag.origins[:, 0] + 32 < 160)
