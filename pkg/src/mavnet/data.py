"""Images, labels, preprocessing, augmentation and the synthetic dataset.

Images live in memory as float32 arrays of shape (c, h, w) scaled to [0, 1];
labels as int64 (h, w) class-id maps where ``palette.ignore_index`` marks
pixels excluded from loss and metrics. On disk, images are 8-bit PNG or PGM
and labels are indexed PNGs whose palette colors identify the classes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

IGNORE_INDEX = 255


# ---------------------------------------------------------------------------
# palettes

@dataclass(frozen=True)
class ClassPalette:
    names: tuple
    colors: tuple
    ignore_index: int = IGNORE_INDEX
    ignore_color: tuple = (128, 128, 128)

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "colors", tuple(tuple(int(v) for v in c) for c in self.colors))
        object.__setattr__(self, "ignore_color", tuple(int(v) for v in self.ignore_color))
        if len(self.names) != len(self.colors):
            raise ValueError("one color per class name is required")
        every = list(self.colors) + [self.ignore_color]
        if len(set(every)) != len(every):
            raise ValueError("palette colors must be unique")
        if 0 <= self.ignore_index < len(self.names):
            raise ValueError(f"ignore id {self.ignore_index} collides with a class id")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def color_to_id(self) -> dict:
        table = {c: k for k, c in enumerate(self.colors)}
        table[self.ignore_color] = self.ignore_index
        return table

    def colorize(self, labels: np.ndarray) -> np.ndarray:
        """(h, w, 3) uint8 rendering of a label map."""
        lut = np.zeros((256, 3), np.uint8)
        lut[:] = self.ignore_color
        lut[: self.num_classes] = self.colors
        return lut[np.asarray(labels, dtype=np.int64) & 0xFF]

    def to_dict(self) -> dict:
        return {
            "classes": [{"name": n, "color": list(c)} for n, c in zip(self.names, self.colors)],
            "ignore": {"id": self.ignore_index, "color": list(self.ignore_color)},
        }

    @classmethod
    def from_dict(cls, doc) -> "ClassPalette":
        if isinstance(doc, str):
            if doc not in PRESETS:
                raise ValueError(f"unknown palette preset {doc!r}; choose from {sorted(PRESETS)}")
            return PRESETS[doc]
        ignore = doc.get("ignore", {})
        return cls(tuple(c["name"] for c in doc["classes"]),
                   tuple(tuple(c["color"]) for c in doc["classes"]),
                   int(ignore.get("id", IGNORE_INDEX)),
                   tuple(ignore.get("color", (128, 128, 128))))


MAV_PALETTE = ClassPalette(("background", "mav"), ((128, 128, 128), (255, 255, 255)),
                           ignore_color=(0, 0, 0))
PENSTOCK_PALETTE = ClassPalette(
    ("background", "corrosion", "rivet", "water"),
    ((173, 216, 230), (255, 105, 180), (0, 0, 139), (0, 160, 0)),
    ignore_color=(128, 128, 128),
)
PRESETS = {"mav": MAV_PALETTE, "penstock": PENSTOCK_PALETTE}


def palette_for(num_classes: int) -> ClassPalette:
    if num_classes == 2:
        return MAV_PALETTE
    if num_classes == 4:
        return PENSTOCK_PALETTE
    raise ValueError(f"no preset palette for {num_classes} classes")


@dataclass
class LabeledImage:
    image: np.ndarray   # (c, h, w) float32 in [0, 1]
    labels: np.ndarray  # (h, w) int64
    source: str = ""
    shapes: list = field(default_factory=list)

    def __post_init__(self):
        if self.image.ndim != 3 or self.labels.ndim != 2 or self.image.shape[1:] != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.labels.shape} sizes differ")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / np.float32(255)


# ---------------------------------------------------------------------------
# CLAHE

def _clip_histogram(hist: np.ndarray, limit: int) -> np.ndarray:
    # single pass: clip, spread the excess evenly, then hand out the remainder
    excess = int(np.maximum(hist - limit, 0).sum())
    hist = np.minimum(hist, limit)
    bins = hist.size
    hist += excess // bins
    residual = excess % bins
    if residual:
        step = max(bins // residual, 1)
        idx = np.arange(0, bins, step)[:residual]
        hist[idx] += 1
    return hist


def clahe_luts(plane: np.ndarray, clip_limit=2.0, tile_grid=8):
    """Per-tile 256-entry lookup tables, shape (grid_y, grid_x, 256), plus tile size (th, tw)."""
    plane = np.asarray(plane)
    if plane.ndim != 2 or plane.dtype != np.uint8:
        raise ValueError("CLAHE works on a single 8-bit plane")
    gy, gx = (tile_grid, tile_grid) if np.isscalar(tile_grid) else tile_grid
    if gy < 1 or gx < 1:
        raise ValueError("tile grid must be >= 1")
    if clip_limit < 1:
        raise ValueError("clip limit must be >= 1")
    h, w = plane.shape
    if h < gy or w < gx:
        raise ValueError(f"image {h}x{w} is smaller than the {gy}x{gx} tile grid")
    ph, pw = (-h) % gy, (-w) % gx
    if ph or pw:
        plane = np.pad(plane, ((0, ph), (0, pw)), mode="reflect" if min(h, w) > max(ph, pw) else "edge")
    th, tw = plane.shape[0] // gy, plane.shape[1] // gx
    area = th * tw
    limit = None if math.isinf(clip_limit) else max(int(clip_limit * area / 256), 1)
    tiles = plane.reshape(gy, th, gx, tw).transpose(0, 2, 1, 3).reshape(gy, gx, area)
    luts = np.empty((gy, gx, 256), np.uint8)
    for i in range(gy):
        for j in range(gx):
            hist = np.bincount(tiles[i, j], minlength=256).astype(np.int64)
            if limit is not None:
                hist = _clip_histogram(hist, limit)
            cdf = np.cumsum(hist)
            luts[i, j] = np.clip(np.rint(cdf * (255.0 / area)), 0, 255)
    return luts, (th, tw)


def clahe(plane: np.ndarray, clip_limit=2.0, tile_grid=8) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of an 8-bit plane.

    Tile mappings are blended bilinearly between the four surrounding tile
    centres; pixels outside the outermost centres use the nearest tiles.
    """
    luts, (th, tw) = clahe_luts(plane, clip_limit, tile_grid)
    gy, gx = luts.shape[:2]
    h, w = plane.shape

    def axis(n, size, tiles):
        f = np.arange(n) / size - 0.5
        lo = np.floor(f).astype(int)
        a = f - lo
        return np.clip(lo, 0, tiles - 1), np.clip(lo + 1, 0, tiles - 1), a

    y1, y2, ya = axis(h, th, gy)
    x1, x2, xa = axis(w, tw, gx)
    v = plane.astype(np.int64)
    ya, xa = ya[:, None], xa[None, :]
    top = luts[y1[:, None], x1[None, :], v] * (1 - xa) + luts[y1[:, None], x2[None, :], v] * xa
    bot = luts[y2[:, None], x1[None, :], v] * (1 - xa) + luts[y2[:, None], x2[None, :], v] * xa
    out = top * (1 - ya) + bot * ya
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def clahe_image(image: np.ndarray, clip_limit=2.0, tile_grid=8) -> np.ndarray:
    """CLAHE on every channel of a (c, h, w) [0, 1] image."""
    planes = [clahe(to_uint8(ch), clip_limit, tile_grid) for ch in image]
    return from_uint8(np.stack(planes))


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentationConfig:
    rotation: bool = True
    max_rotation_deg: float = 15.0
    crop_pad: bool = True
    max_shift_px: int = 8
    gamma: bool = True
    gamma_range: tuple = (0.7, 1.4)
    brightness: bool = True
    brightness_range: float = 0.1
    color: bool = True
    color_range: tuple = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        vals = [self.max_rotation_deg, self.max_shift_px, self.brightness_range,
                *self.gamma_range, *self.color_range]
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("augmentation ranges must be finite")
        if self.gamma_range[0] <= 0 or self.color_range[0] < 0:
            raise ValueError("gamma exponents must be positive and color scales non-negative")

    @classmethod
    def identity(cls, seed=0) -> "AugmentationConfig":
        return cls(False, 0.0, False, 0, False, (1.0, 1.0), False, 0.0, False, (1.0, 1.0), seed)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, doc):
        doc = {k: (tuple(v) if isinstance(v, list) else v) for k, v in doc.items()}
        return cls(**doc)


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream per (seed, keys...), so results never depend on worker count."""
    return np.random.default_rng([int(seed), *map(int, keys)])


def rotate(image, labels, degrees: float, ignore_index=IGNORE_INDEX):
    """Rotate counter-clockwise about the centre: bilinear for the image, nearest for labels."""
    c, h, w = image.shape
    t = math.radians(degrees)
    cos, sin = round(math.cos(t), 12), round(math.sin(t), 12)
    cr, cc = (h - 1) / 2, (w - 1) / 2
    dr = np.arange(h)[:, None] - cr
    dc = np.arange(w)[None, :] - cc
    sr = cr + cos * dr + sin * dc
    sc = cc - sin * dr + cos * dc

    nr, nc = np.rint(sr).astype(int), np.rint(sc).astype(int)
    inside = (nr >= 0) & (nr < h) & (nc >= 0) & (nc < w)
    out_labels = np.full_like(labels, ignore_index)
    out_labels[inside] = labels[nr[inside], nc[inside]]

    r0, c0 = np.floor(sr).astype(int), np.floor(sc).astype(int)
    fr, fc = (sr - r0).astype(np.float32), (sc - c0).astype(np.float32)
    out = np.zeros_like(image)
    for di, wr in ((0, 1 - fr), (1, fr)):
        for dj, wc in ((0, 1 - fc), (1, fc)):
            rr, cc_ = r0 + di, c0 + dj
            ok = (rr >= 0) & (rr < h) & (cc_ >= 0) & (cc_ < w)
            vals = np.zeros_like(image)
            vals[:, ok] = image[:, rr[ok], cc_[ok]]
            out += vals * (wr * wc)
    return out, out_labels


def shift(image, labels, dy: int, dx: int, ignore_index=IGNORE_INDEX):
    """Pad-then-crop translation: out[r, c] = in[r + dy, c + dx]; new pixels are 0 / ignore."""
    c, h, w = image.shape
    out = np.zeros_like(image)
    out_labels = np.full_like(labels, ignore_index)
    rs, re = max(0, -dy), min(h, h - dy)
    cs, ce = max(0, -dx), min(w, w - dx)
    if rs < re and cs < ce:
        out[:, rs:re, cs:ce] = image[:, rs + dy:re + dy, cs + dx:ce + dx]
        out_labels[rs:re, cs:ce] = labels[rs + dy:re + dy, cs + dx:ce + dx]
    return out, out_labels


def augment(sample: LabeledImage, cfg: AugmentationConfig, rng: np.random.Generator,
            ignore_index=IGNORE_INDEX) -> LabeledImage:
    """Apply the enabled transforms; geometric ones hit image and mask alike."""
    # every parameter is drawn regardless of the flags, so toggling one
    # transform never changes the draws of the others
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    dy, dx = rng.integers(-cfg.max_shift_px, cfg.max_shift_px + 1, size=2)
    g = rng.uniform(*cfg.gamma_range)
    b = rng.uniform(-cfg.brightness_range, cfg.brightness_range)
    scales = rng.uniform(*cfg.color_range, size=sample.image.shape[0]).astype(np.float32)

    image, labels = sample.image, sample.labels
    if cfg.rotation and angle != 0:
        image, labels = rotate(image, labels, angle, ignore_index)
    if cfg.crop_pad and (dy or dx):
        image, labels = shift(image, labels, int(dy), int(dx), ignore_index)
    photometric = False
    if cfg.gamma:
        image = image ** np.float32(g)
        photometric = True
    if cfg.brightness:
        image = image + np.float32(b)
        photometric = True
    if cfg.color:
        image = image * scales[:, None, None]
        photometric = True
    if photometric:
        image = np.clip(image, 0, 1)
    image = np.ascontiguousarray(image, dtype=np.float32)
    return LabeledImage(image, labels, sample.source, sample.shapes)


# ---------------------------------------------------------------------------
# synthetic data

def _value_noise(rng, size, octaves=(4, 8, 16)):
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    for cells in octaves:
        grid = rng.random((cells + 1, cells + 1))
        pos = np.linspace(0, cells, size)
        i = np.minimum(pos.astype(int), cells - 1)
        f = pos - i
        f = f * f * (3 - 2 * f)  # smoothstep
        gi = grid[i][:, i] * (1 - f)[None, :] + grid[i][:, i + 1] * f[None, :]
        gj = grid[i + 1][:, i] * (1 - f)[None, :] + grid[i + 1][:, i + 1] * f[None, :]
        out += amp * (gi * (1 - f)[:, None] + gj * f[:, None])
        total += amp
        amp /= 2
    return out / total


def shape_mask(shape: dict, size: int) -> np.ndarray:
    """Pixel-centre membership mask of a generated shape."""
    r = np.arange(size)[:, None]
    c = np.arange(size)[None, :]
    kind = shape["kind"]
    if kind in ("ellipse", "circle"):
        cy, cx, ry, rx, t = shape["cy"], shape["cx"], shape["ry"], shape["rx"], shape.get("angle", 0.0)
        dy, dx = r - cy, c - cx
        u = dy * math.cos(t) + dx * math.sin(t)
        v = -dy * math.sin(t) + dx * math.cos(t)
        return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
    if kind in ("rect", "streak"):
        return ((r >= shape["top"]) & (r < shape["top"] + shape["height"])
                & (c >= shape["left"]) & (c < shape["left"] + shape["width"]))
    raise ValueError(f"unknown shape kind {kind!r}")


def _target_shape(rng, size, area, cls):
    if rng.random() < 0.5:
        ry = math.sqrt(area / math.pi) * rng.uniform(0.7, 1.4)
        rx = area / (math.pi * ry)
        m = math.ceil(max(ry, rx)) + 1
        return {"kind": "ellipse", "class": cls, "cy": rng.uniform(m, size - 1 - m),
                "cx": rng.uniform(m, size - 1 - m), "ry": ry, "rx": rx,
                "angle": rng.uniform(0, math.pi)}
    hgt = max(2, int(round(math.sqrt(area) * rng.uniform(0.7, 1.4))))
    wid = max(2, int(round(area / hgt)))
    return {"kind": "rect", "class": cls, "top": int(rng.integers(1, size - hgt - 1)),
            "left": int(rng.integers(1, size - wid - 1)), "height": hgt, "width": wid}


def generate_sample(seed: int, index: int, size=64, num_classes=2, channels=3,
                    target_fraction=0.01) -> LabeledImage:
    rng = sample_rng(seed, index)
    base = 0.15 + 0.4 * _value_noise(rng, size)
    tint = rng.uniform(0.85, 1.15, size=channels)
    image = base[None] * tint[:, None, None]
    labels = np.zeros((size, size), np.int64)
    shapes = []
    area = target_fraction * size * size * rng.uniform(0.6, 1.4)
    if num_classes == 2:
        shapes.append(_target_shape(rng, size, area, 1))
    elif num_classes == 4:
        shapes.append(_target_shape(rng, size, 2.5 * area, 1))
        for _ in range(int(rng.integers(2, 5))):
            rr = rng.uniform(1.2, 2.2)
            shapes.append({"kind": "circle", "class": 2, "cy": rng.uniform(3, size - 4),
                           "cx": rng.uniform(3, size - 4), "ry": rr, "rx": rr, "angle": 0.0})
        length = int(rng.integers(size // 4, size // 2))
        shapes.append({"kind": "streak", "class": 3, "top": int(rng.integers(1, size - length - 1)),
                       "left": int(rng.integers(1, size - 4)), "height": length,
                       "width": int(rng.integers(2, 4))})
    else:
        raise ValueError("num_classes must be 2 or 4")
    for shp in shapes:
        m = shape_mask(shp, size)
        level = rng.uniform(0.75, 0.95)
        color = level * rng.uniform(0.9, 1.1, size=channels)
        image[:, m] = color[:, None]
        labels[m] = shp["class"]
    image += rng.normal(0, 0.02, size=image.shape)
    image = from_uint8(to_uint8(image))
    return LabeledImage(image, labels, f"synthetic:{seed}:{index}", shapes)


def generate_synthetic(seed: int, count: int, size=64, num_classes=2, channels=3,
                       target_fraction=0.01) -> list:
    """Bright targets over smooth noisy backgrounds, with exact masks; deterministic per seed."""
    if size < 32:
        raise ValueError("synthetic images must be at least 32 pixels wide")
    if num_classes not in (2, 4):
        raise ValueError("num_classes must be 2 or 4")
    return [generate_sample(seed, i, size, num_classes, channels, target_fraction) for i in range(count)]


# ---------------------------------------------------------------------------
# files

def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.mode in ("L", "P", "1") or im.mode.startswith("I"):
            raw = np.asarray(im.convert("L"))[None]
        else:
            raw = np.asarray(im.convert("RGB")).transpose(2, 0, 1)
    return from_uint8(np.ascontiguousarray(raw))


def write_image(path, image: np.ndarray):
    raw = to_uint8(image)
    mode_img = Image.fromarray(raw[0], "L") if raw.shape[0] == 1 else Image.fromarray(raw.transpose(1, 2, 0), "RGB")
    mode_img.save(path)


def write_labels(path, labels: np.ndarray, palette: ClassPalette):
    """Indexed PNG: pixel value = class id, palette entry = class color."""
    im = Image.fromarray(np.asarray(labels, dtype=np.uint8), "P")
    pal = [0] * 768
    for k, c in enumerate(palette.colors):
        pal[3 * k:3 * k + 3] = c
    pal[3 * palette.ignore_index:3 * palette.ignore_index + 3] = palette.ignore_color
    im.putpalette(pal)
    im.save(path)


def read_labels(path, palette: ClassPalette) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"label image not found: {path}")
    with Image.open(path) as im:
        if im.mode == "P":
            idx = np.asarray(im)
            pal = np.asarray(im.getpalette() or [], dtype=np.int64).reshape(-1, 3)
            rgb = pal[idx]
        else:
            rgb = np.asarray(im.convert("RGB")).astype(np.int64)
    key = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
    table = {(r << 16) | (g << 8) | b: k for (r, g, b), k in palette.color_to_id().items()}
    labels = np.full(key.shape, -1, np.int64)
    for code, k in table.items():
        labels[key == code] = k
    if (labels < 0).any():
        r, c = (int(v) for v in np.argwhere(labels < 0)[0])
        raise ValueError(f"{path}: pixel (row {r}, col {c}) has color {tuple(int(v) for v in rgb[r, c])} "
                         "that is not in the palette")
    return labels


@dataclass
class DatasetManifest:
    split: str
    palette: ClassPalette
    samples: list  # (image path, label path)
    clahe: bool = False
    mask: Optional[Path] = None
    path: Optional[Path] = None

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        root = path.parent
        resolve = lambda p: (root / p) if not Path(p).is_absolute() else Path(p)  # noqa: E731
        samples = [(resolve(s["image"]), resolve(s["label"])) for s in doc.get("samples", [])]
        mask = resolve(doc["mask"]) if doc.get("mask") else None
        for p in [x for pair in samples for x in pair] + ([mask] if mask else []):
            if not p.exists():
                raise FileNotFoundError(f"{path}: referenced file not found: {p}")
        return cls(doc.get("split", "train"), ClassPalette.from_dict(doc.get("palette", "mav")),
                   samples, bool(doc.get("clahe", False)), mask, path)

    def to_dict(self, relative_to=None) -> dict:
        rel = lambda p: str(Path(p).relative_to(relative_to)) if relative_to else str(p)  # noqa: E731
        doc = {"split": self.split, "palette": self.palette.to_dict(), "clahe": self.clahe,
               "samples": [{"image": rel(i), "label": rel(l)} for i, l in self.samples]}
        if self.mask:
            doc["mask"] = rel(self.mask)
        return doc


def load_manifest(path) -> DatasetManifest:
    return DatasetManifest.load(path)


def check_disjoint(manifests: Sequence[DatasetManifest]):
    seen = {}
    for m in manifests:
        for img, _ in m.samples:
            key = Path(img).resolve()
            if key in seen and seen[key] != m.split:
                raise ValueError(f"{img} appears in both {seen[key]!r} and {m.split!r} splits")
            seen[key] = m.split


def load_sample(image_path, label_path, palette: ClassPalette, use_clahe=False,
                mask: Optional[np.ndarray] = None) -> LabeledImage:
    image = read_image(image_path)
    labels = read_labels(label_path, palette)
    if image.shape[1:] != labels.shape:
        raise ValueError(f"{image_path} is {image.shape[1]}x{image.shape[2]} but "
                         f"{label_path} is {labels.shape[0]}x{labels.shape[1]}")
    if use_clahe:
        image = clahe_image(image)
    if mask is not None:
        if mask.shape != labels.shape:
            raise ValueError(f"region mask {mask.shape} does not match {label_path} {labels.shape}")
        image = image * mask[None]
        labels = np.where(mask, labels, palette.ignore_index)
    return LabeledImage(image, labels, str(image_path))


def load_samples(manifest: DatasetManifest) -> list:
    mask = None
    if manifest.mask is not None:
        with Image.open(manifest.mask) as im:
            mask = np.asarray(im.convert("L")) > 0
    return [load_sample(i, l, manifest.palette, manifest.clahe, mask) for i, l in manifest.samples]


def save_dataset(samples: Sequence[LabeledImage], out_dir, palette: ClassPalette, split="train",
                 manifest_name=None) -> Path:
    """Write images/labels and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    pairs = []
    for k, s in enumerate(samples):
        ip = out_dir / "images" / f"{split}_{k:05d}.png"
        lp = out_dir / "labels" / f"{split}_{k:05d}.png"
        write_image(ip, s.image)
        write_labels(lp, s.labels, palette)
        pairs.append((ip, lp))
    manifest = DatasetManifest(split, palette, pairs)
    mpath = out_dir / (manifest_name or f"manifest_{split}.json")
    mpath.write_text(json.dumps(manifest.to_dict(relative_to=out_dir), indent=2) + "\n", encoding="utf-8")
    return mpath


def batches(samples: Sequence[LabeledImage]):
    """Stack samples into ((n, c, h, w) float32, (n, h, w) int64)."""
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.labels for s in samples]))
