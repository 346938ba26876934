import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from mavnet import data as D
from mavnet.data import (AugmentationConfig, LabeledImage, MAV_PALETTE, PENSTOCK_PALETTE, augment,
                         clahe, clahe_luts, generate_synthetic, sample_rng)


def flat_histogram_image(tile=16, grid=8, seed=0):
    """Every tile holds each of the 256 levels exactly once."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(grid):
        rows.append(np.concatenate([rng.permutation(256).reshape(tile, tile) for _ in range(grid)], axis=1))
    return np.concatenate(rows, axis=0).astype(np.uint8)


def histogram_equalize(plane):
    """Textbook global equalization: round(cdf * 255 / N)."""
    hist = np.bincount(plane.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    lut = np.rint(cdf * 255.0 / plane.size).astype(np.uint8)
    return lut[plane]


# -- CLAHE ---------------------------------------------------------------------

def test_clahe_flat_histogram_is_identity():
    img = flat_histogram_image()
    out = clahe(img)
    assert np.abs(out.astype(int) - img).max() <= 1


def test_clahe_constant_image_stays_constant():
    # a single-level tile is clipped, so the level moves, but every pixel moves alike
    for v in (0, 64, 200):
        out = clahe(np.full((64, 64), v, np.uint8))
        assert len(np.unique(out)) == 1


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_clahe_infinite_clip_single_tile_is_equalization(seed):
    rng = np.random.default_rng(seed)
    img = np.clip(rng.normal(90, 30, (40, 56)), 0, 255).astype(np.uint8)
    assert np.array_equal(clahe(img, clip_limit=float("inf"), tile_grid=1), histogram_equalize(img))


def test_clahe_two_level_contrast_not_reduced():
    # stripes, so every tile holds both levels
    img = np.full((256, 256), 100, np.uint8)
    img[:, ::4] = 110
    img[:, 1::4] = 110
    img[100:180, 50:120] = 110
    out = clahe(img).astype(int)
    assert out[img == 110].min() - out[img == 100].max() >= 10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1.0, 2.0, 4.0, float("inf")]), st.integers(1, 8))
def test_clahe_luts_monotone(seed, clip, grid):
    img = np.random.default_rng(seed).integers(0, 256, (48, 64)).astype(np.uint8)
    luts, _ = clahe_luts(img, clip, grid)
    assert np.all(np.diff(luts.astype(int), axis=-1) >= 0)
    out = clahe(img, clip, grid)
    assert out.shape == img.shape and out.dtype == np.uint8


def test_clahe_non_divisible_sizes():
    img = np.random.default_rng(3).integers(0, 256, (50, 61)).astype(np.uint8)
    assert clahe(img).shape == (50, 61)


def test_clahe_errors():
    with pytest.raises(ValueError, match="smaller than"):
        clahe(np.zeros((4, 4), np.uint8))
    with pytest.raises(ValueError):
        clahe(np.zeros((16, 16), np.uint8), clip_limit=0.5)
    with pytest.raises(ValueError):
        clahe(np.zeros((16, 16), np.float32))


def test_clahe_close_to_opencv():
    cv2 = pytest.importorskip("cv2")
    rng = np.random.default_rng(4)
    img = np.clip(rng.normal(120, 25, (128, 160)), 0, 255).astype(np.uint8)
    ref = cv2.createCLAHE(clipLimit=2.0, tileGridSize=(8, 8)).apply(img)
    assert np.abs(clahe(img).astype(int) - ref).max() <= 1


# -- augmentation --------------------------------------------------------------

def sample(seed=0, size=32, c=3):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, (size, size))
    return LabeledImage(rng.random((c, size, size)).astype(np.float32), labels, "s")


def test_identity_config_is_bitwise():
    s = sample()
    out = augment(s, AugmentationConfig.identity(), sample_rng(0, 1))
    assert np.array_equal(out.image, s.image) and np.array_equal(out.labels, s.labels)


def test_identity_photometric_parameters():
    s = sample()
    cfg = AugmentationConfig(rotation=False, crop_pad=False, gamma_range=(1.0, 1.0),
                             brightness_range=0.0, color_range=(1.0, 1.0))
    out = augment(s, cfg, sample_rng(0, 2))
    assert np.array_equal(out.image, s.image)


def test_rotate_90_l_mask():
    labels = np.zeros((7, 7), np.int64)
    labels[1:6, 2] = 1
    labels[5, 2:5] = 1
    image = labels[None].astype(np.float32)
    # counter-clockwise: new[r, c] = old[c, n-1-r]
    expect = np.array([[labels[c, 6 - r] for c in range(7)] for r in range(7)])
    img, lab = D.rotate(image, labels, 90.0)
    assert np.array_equal(lab, expect)
    assert np.array_equal(lab, np.rot90(labels))
    assert np.allclose(img[0], expect)


def test_shift_fills_ignore():
    s = sample()
    img, lab = D.shift(s.image, s.labels, 3, -2)
    assert np.array_equal(lab[:-3, 2:], s.labels[3:, :-2])
    assert np.all(lab[-3:] == 255) and np.all(lab[:, :2] == 255)
    assert np.all(img[:, -3:] == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 3))
def test_augment_properties(seed, c):
    s = sample(seed % 1000, 24, c)
    cfg = AugmentationConfig(seed=seed)
    a = augment(s, cfg, sample_rng(seed, 7))
    b = augment(s, cfg, sample_rng(seed, 7))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)
    assert a.image.shape == s.image.shape and a.labels.shape == s.labels.shape
    assert set(np.unique(a.labels)) <= {0, 1, 255}
    assert a.image.min() >= 0 and a.image.max() <= 1 and a.image.dtype == np.float32


def test_toggling_one_transform_keeps_other_draws():
    s = sample(5)
    full = augment(s, AugmentationConfig(rotation=False, gamma=False, brightness=False, color=False),
                   sample_rng(1, 1))
    more = augment(s, AugmentationConfig(gamma=False, brightness=False, color=False, max_rotation_deg=0.0),
                   sample_rng(1, 1))
    assert np.array_equal(full.labels, more.labels)


def test_augmentation_config_round_trip():
    cfg = AugmentationConfig(max_rotation_deg=5.0, seed=3)
    assert AugmentationConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        AugmentationConfig(max_rotation_deg=float("nan"))


# -- synthetic data ------------------------------------------------------------

def test_synthetic_deterministic():
    a = generate_synthetic(3, 5)
    b = generate_synthetic(3, 5)
    assert all(x.image.tobytes() == y.image.tobytes() and x.labels.tobytes() == y.labels.tobytes()
               for x, y in zip(a, b))
    c = generate_synthetic(4, 5)
    assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, c))


def test_synthetic_imbalance_ratio():
    samples = generate_synthetic(0, 200)
    fg = sum(int((s.labels > 0).sum()) for s in samples)
    bg = sum(int((s.labels == 0).sum()) for s in samples)
    assert 50 <= bg / fg <= 300


@pytest.mark.parametrize("num_classes", [2, 4])
def test_synthetic_mask_consistency(num_classes):
    for s in generate_synthetic(1, 20, num_classes=num_classes):
        inside = np.zeros(s.labels.shape, bool)
        for shp in s.shapes:
            inside |= D.shape_mask(shp, s.labels.shape[0])
        assert np.all(inside[s.labels > 0])
        assert set(np.unique(s.labels)) <= set(range(num_classes))
        assert s.image.shape == (3, 64, 64) and s.image.dtype == np.float32
        assert np.array_equal(D.from_uint8(D.to_uint8(s.image)), s.image)


def test_synthetic_four_classes_present():
    seen = set()
    for s in generate_synthetic(2, 10, num_classes=4):
        seen |= set(np.unique(s.labels).tolist())
    assert seen == {0, 1, 2, 3}


def test_synthetic_errors():
    with pytest.raises(ValueError):
        generate_synthetic(0, 1, size=16)
    with pytest.raises(ValueError):
        generate_synthetic(0, 1, num_classes=3)


# -- files and manifests -------------------------------------------------------

@pytest.mark.parametrize("num_classes,palette", [(2, MAV_PALETTE), (4, PENSTOCK_PALETTE)])
def test_dataset_round_trip(tmp_path, num_classes, palette):
    samples = generate_synthetic(5, 4, num_classes=num_classes)
    samples[0].labels[:3, :3] = palette.ignore_index
    mpath = D.save_dataset(samples, tmp_path, palette, "test")
    loaded = D.load_samples(D.load_manifest(mpath))
    assert len(loaded) == 4
    for a, b in zip(samples, loaded):
        assert a.image.tobytes() == b.image.tobytes()
        assert np.array_equal(a.labels, b.labels)


def test_empty_manifest(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"split": "test", "palette": "mav", "clahe": False, "samples": []}))
    assert D.load_samples(D.load_manifest(p)) == []


def test_bad_label_color_names_file_and_pixel(tmp_path):
    samples = generate_synthetic(6, 1)
    mpath = D.save_dataset(samples, tmp_path, MAV_PALETTE, "train")
    lp = tmp_path / "labels" / "train_00000.png"
    rgb = np.array(Image.open(lp).convert("RGB"))
    rgb[4, 7] = (10, 20, 30)
    Image.fromarray(rgb).save(lp)
    with pytest.raises(ValueError, match=r"train_00000\.png.*row 4, col 7.*\(10, 20, 30\)"):
        D.load_samples(D.load_manifest(mpath))


def test_missing_file_and_size_mismatch(tmp_path):
    mpath = D.save_dataset(generate_synthetic(7, 1), tmp_path, MAV_PALETTE, "train")
    doc = json.loads(mpath.read_text())
    doc["samples"][0]["image"] = "images/nope.png"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(FileNotFoundError, match="nope.png"):
        D.load_manifest(bad)
    Image.new("RGB", (32, 32)).save(tmp_path / "images" / "train_00000.png")
    with pytest.raises(ValueError, match="32x32"):
        D.load_samples(D.load_manifest(mpath))


def test_region_mask_and_clahe_flags(tmp_path):
    samples = generate_synthetic(8, 2)
    mpath = D.save_dataset(samples, tmp_path, MAV_PALETTE, "val")
    region = np.zeros((64, 64), np.uint8)
    region[:, :40] = 255
    Image.fromarray(region).save(tmp_path / "region.png")
    doc = json.loads(mpath.read_text())
    doc.update(mask="region.png", clahe=True)
    mpath.write_text(json.dumps(doc))
    loaded = D.load_samples(D.load_manifest(mpath))
    for s, orig in zip(loaded, samples):
        assert np.all(s.labels[:, 40:] == MAV_PALETTE.ignore_index)
        assert np.all(s.image[:, :, 40:] == 0)
        assert np.array_equal(s.labels[:, :40], orig.labels[:, :40])
        expect = D.clahe_image(orig.image)[:, :, :40]
        assert np.array_equal(s.image[:, :, :40], expect)


def test_disjoint_splits(tmp_path):
    a = D.load_manifest(D.save_dataset(generate_synthetic(9, 2), tmp_path, MAV_PALETTE, "train"))
    b = D.DatasetManifest("test", MAV_PALETTE, list(a.samples[:1]))
    with pytest.raises(ValueError, match="both"):
        D.check_disjoint([a, b])
    D.check_disjoint([a])


def test_palette_validation_and_presets():
    with pytest.raises(ValueError):
        D.ClassPalette(("a", "b"), ((1, 1, 1), (1, 1, 1)))
    with pytest.raises(ValueError):
        D.ClassPalette(("a", "b"), ((1, 1, 1), (2, 2, 2)), ignore_index=1)
    assert D.ClassPalette.from_dict(PENSTOCK_PALETTE.to_dict()) == PENSTOCK_PALETTE
    assert D.ClassPalette.from_dict("mav") is MAV_PALETTE
    assert PENSTOCK_PALETTE.names == ("background", "corrosion", "rivet", "water")
    rgb = MAV_PALETTE.colorize(np.array([[0, 1, 255]]))
    assert rgb.tolist() == [[[128, 128, 128], [255, 255, 255], [0, 0, 0]]]


def test_pgm_images_read(tmp_path):
    plane = np.random.default_rng(0).integers(0, 256, (8, 9)).astype(np.uint8)
    Image.fromarray(plane, "L").save(tmp_path / "x.pgm")
    img = D.read_image(tmp_path / "x.pgm")
    assert img.shape == (1, 8, 9) and np.array_equal(D.to_uint8(img)[0], plane)
