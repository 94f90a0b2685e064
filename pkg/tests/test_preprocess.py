import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import otsu_brute, otsu_variances, outward_scaled_box
from mammomil.data import BoundingBox, MammogramSample
from mammomil.phantom import PhantomConfig, render_phantom
from mammomil.preprocess import (
    AugmentationConfig,
    CropRecord,
    DegenerateHistogramError,
    PreprocessedSample,
    augment,
    crop_breast,
    load_preprocessed,
    otsu_threshold,
    preprocess_sample,
    resize_to_working,
    save_preprocessed,
    whiten,
)

# outward-rounded corners of (37, 101, 250, 433) scaled from 959x481 to 640x320,
# computed once with exact rational arithmetic
RESIZED_959 = (24, 67, 167, 289)


def _pre(image, boxes=(), fg=None):
    h, w = image.shape
    return PreprocessedSample(np.asarray(image, np.float32), list(boxes), CropRecord(0, 0, w, h),
                              0, "s", "i", foreground=fg)


def test_otsu_two_constant_regions():
    img = np.zeros((20, 20))
    img[:, 10:] = 0.8
    t = otsu_threshold(img)
    assert 0.0 < t <= 0.8
    assert np.all((img >= t) == (img == 0.8))


def test_otsu_two_gaussian_modes_matches_exhaustive(rng):
    img = np.concatenate([rng.normal(0.1, 0.04, 3000), rng.normal(0.7, 0.06, 2000)]).clip(0, 1)
    img = img.reshape(50, 100)
    t = otsu_threshold(img)
    var = otsu_variances(img)
    k = int(round(t * 256))
    assert var[k - 1] >= max(var) * (1 - 1e-12)
    assert t == pytest.approx(otsu_brute(img), abs=1 / 256 + 1e-12)
    assert 0.1 < t < 0.7


def test_otsu_constant_image():
    with pytest.raises(DegenerateHistogramError):
        otsu_threshold(np.full((8, 8), 0.3))


def test_crop_bright_half_plane():
    img = np.zeros((30, 40))
    img[:, 25:] = 0.9
    box = BoundingBox(27, 3, 30, 9)
    out = crop_breast(MammogramSample(img, "s", "i", 1, [box]))
    c = out.crop_record
    assert (c.x0, c.y0, c.x1, c.y1) == (25, 0, 40, 30)
    assert out.gt_boxes == [BoundingBox(2, 3, 5, 9)]
    assert out.image.shape == (30, 15)


def test_crop_constant_image_falls_back_to_full_frame():
    out = crop_breast(MammogramSample(np.full((10, 12), 0.4), "s", "i", 0))
    assert out.crop_record.full_image
    assert out.image.shape == (10, 12)


def test_crop_covers_phantom_foreground():
    cfg = PhantomConfig()
    for seed in range(5):
        sample, info = render_phantom(cfg, seed % 2, np.random.default_rng(seed))
        c = crop_breast(sample).crop_record
        inside = info.breast_mask[c.y0:c.y1, c.x0:c.x1].sum()
        assert inside / info.breast_mask.sum() >= 0.99


def test_resize_exact_halving():
    s = resize_to_working(_pre(np.random.default_rng(0).random((1280, 640)), [BoundingBox(100, 200, 300, 400)]))
    assert s.image.shape == (640, 320)
    assert (s.crop_record.scale_x, s.crop_record.scale_y) == (0.5, 0.5)
    assert s.gt_boxes == [BoundingBox(50, 100, 150, 200)]


def test_resize_identity():
    img = np.random.default_rng(0).random((640, 320))
    box = BoundingBox(3, 4, 50, 60)
    s = resize_to_working(_pre(img, [box]))
    assert np.array_equal(s.image, img.astype(np.float32))
    assert s.gt_boxes == [box]


def test_resize_outward_rounding_959():
    box = (37, 101, 250, 433)
    assert outward_scaled_box(box, (959, 481), (640, 320)) == RESIZED_959
    s = resize_to_working(_pre(np.zeros((959, 481)), [BoundingBox(*box)]))
    assert s.gt_boxes[0].as_tuple() == RESIZED_959


@given(st.integers(65, 1500), st.integers(33, 900), st.data())
def test_resize_matches_rational_oracle(h, w, data):
    x0 = data.draw(st.integers(0, w - 1))
    y0 = data.draw(st.integers(0, h - 1))
    x1 = data.draw(st.integers(x0 + 1, w))
    y1 = data.draw(st.integers(y0 + 1, h))
    from mammomil.preprocess import _scale_box

    got = _scale_box(BoundingBox(x0, y0, x1, y1), h, w, 640, 320).as_tuple()
    assert got == outward_scaled_box((x0, y0, x1, y1), (h, w), (640, 320))


def test_whiten():
    x = np.random.default_rng(3).random((30, 20)) * 7 + 2
    z = whiten(x)
    assert abs(z.mean()) < 1e-12 and abs(z.std() - 1) < 1e-12
    assert np.allclose(whiten(z), z, atol=1e-12)
    assert np.allclose(whiten(np.array([0.0, 2.0])), [-1.0, 1.0])
    with pytest.raises(ValueError):
        whiten(np.ones(5))


def test_preprocess_sample_shape_and_stats():
    sample, _ = render_phantom(PhantomConfig(), 1, np.random.default_rng(2))
    out = preprocess_sample(sample)
    assert out.image.shape == (640, 320) and out.whitened
    assert abs(float(out.image.mean())) < 1e-4 and abs(float(out.image.std()) - 1) < 1e-4
    assert all(b.inside(640, 320) for b in out.gt_boxes)


def test_augment_null_is_identity():
    img = np.random.default_rng(0).random((64, 32)).astype(np.float32)
    s = _pre(img, [BoundingBox(2, 3, 10, 20)])
    out = augment(s, AugmentationConfig.disabled(), np.random.default_rng(5))
    assert np.array_equal(out.image, s.image)
    assert out.gt_boxes == s.gt_boxes


def test_augment_horizontal_flip_mirrors_boxes():
    cfg = AugmentationConfig(enable_flips=True, max_translate_frac=0, max_scale_frac=0, max_rotation_deg=0)
    img = np.random.default_rng(0).random((64, 32)).astype(np.float32)
    box = BoundingBox(2, 3, 10, 20)
    for seed in range(20):
        r = np.random.default_rng(seed)
        fx, fy = r.random() < 0.5, r.random() < 0.5
        if fx and not fy:
            break
    out = augment(_pre(img, [box]), cfg, np.random.default_rng(seed))
    assert out.gt_boxes == [BoundingBox(32 - 10, 3, 32 - 2, 20)]
    assert np.allclose(out.image, whiten(img[:, ::-1]), atol=1e-5)


def test_augment_deterministic_for_seed():
    sample, _ = render_phantom(PhantomConfig(), 1, np.random.default_rng(4))
    s = preprocess_sample(sample)
    a = augment(s, AugmentationConfig(), np.random.default_rng(9))
    b = augment(s, AugmentationConfig(), np.random.default_rng(9))
    assert np.array_equal(a.image, b.image) and a.gt_boxes == b.gt_boxes
    assert all(x.inside(640, 320) for x in a.gt_boxes)


def test_preprocessed_round_trip(tmp_path):
    sample, _ = render_phantom(PhantomConfig(), 1, np.random.default_rng(6))
    s = preprocess_sample(sample)
    save_preprocessed(s, tmp_path / "p.npz")
    back = load_preprocessed(tmp_path / "p.npz")
    assert np.array_equal(back.image, s.image) and np.array_equal(back.foreground, s.foreground)
    assert back.gt_boxes == s.gt_boxes and back.crop_record == s.crop_record
    assert (back.label, back.subject_id, back.image_id, back.whitened) == (s.label, s.subject_id, s.image_id, True)
