"""Synthetic snowy images: ``snow = R * M + clean * (1 - M)`` with procedural flakes and streaks.

Images here are float numpy arrays shaped (C, H, W) in [0, 1].
"""
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import parse_kv, coerce_fields
from .errors import InvalidInputError

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}
SPLITS = ("train", "val", "test")


@dataclass
class SnowMaskSpec:
    flake_density: float = 3.0  # flakes per 1000 px
    flake_radius_range: tuple = (0.8, 6.0)
    streak_count_range: tuple = (0, 6)
    streak_length_range: tuple = (6.0, 20.0)
    streak_angle_range: tuple = (60.0, 120.0)  # degrees from the x axis
    streak_width: float = 0.8
    opacity_range: tuple = (0.6, 1.0)
    blur_sigma_range: tuple = (0.0, 2.0)
    chroma_jitter: float = 0.08
    flake_count: int = None  # overrides the density-driven Poisson draw
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (list, tuple)):
                v = tuple(v)
                setattr(self, f.name, v)
                if len(v) != 2 or v[0] > v[1]:
                    raise InvalidInputError(f"{f.name} must be an ordered (min, max) pair")
        lo, hi = self.opacity_range
        if not (0 < lo <= hi <= 1):
            raise InvalidInputError("opacities must lie in (0, 1]")
        if self.flake_density < 0 or self.streak_count_range[0] < 0:
            raise InvalidInputError("densities and counts must be non-negative")
        if self.flake_radius_range[0] <= 0 or self.blur_sigma_range[0] < 0:
            raise InvalidInputError("radii must be positive and blur non-negative")

    def to_kv(self):
        lines = []
        for k, v in asdict(self).items():
            v = ",".join(str(x) for x in v) if isinstance(v, tuple) else v
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text):
        return cls(**coerce_fields(cls, parse_kv(text)))


@dataclass
class SynthSample:
    snow: np.ndarray
    clean: np.ndarray
    mask: np.ndarray
    chroma: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        size = self.clean.shape[-2:]
        for a in (self.snow, self.mask) + ((self.chroma,) if self.chroma is not None else ()):
            if a.shape[-2:] != size:
                raise InvalidInputError("snow, clean, mask (and chroma) must share a spatial size")


def _stamp_max(canvas, patch, top, left):
    """``canvas = max(canvas, patch)`` for a patch placed at (top, left), clipped to the canvas."""
    h, w = canvas.shape
    ph, pw = patch.shape
    t0, l0 = max(top, 0), max(left, 0)
    t1, l1 = min(top + ph, h), min(left + pw, w)
    if t0 >= t1 or l0 >= l1:
        return
    sub = patch[t0 - top:t1 - top, l0 - left:l1 - left]
    np.maximum(canvas[t0:t1, l0:l1], sub, out=canvas[t0:t1, l0:l1])


def _flake(radius, sigma, opacity, cy, cx):
    """Disc patch of value ``opacity`` (optionally blurred) and its top-left placement."""
    pad = int(math.ceil(radius + 3 * sigma)) + 1
    iy, ix = int(math.floor(cy)), int(math.floor(cx))
    yy, xx = np.mgrid[iy - pad:iy + pad + 1, ix - pad:ix + pad + 1]
    disc = (((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2) <= radius ** 2).astype(np.float64)
    if sigma > 0:
        disc = ndimage.gaussian_filter(disc, sigma, mode="constant")
    return opacity * disc, iy - pad, ix - pad


def _streak(length, angle_deg, width, sigma, opacity, cy, cx):
    """Anti-aliased line segment patch centred at (cy, cx)."""
    theta = math.radians(angle_deg)
    dy, dx = math.sin(theta), math.cos(theta)
    half = length / 2
    pad = int(math.ceil(half + width + 3 * sigma)) + 1
    iy, ix = int(math.floor(cy)), int(math.floor(cx))
    yy, xx = np.mgrid[iy - pad:iy + pad + 1, ix - pad:ix + pad + 1]
    py, px = yy + 0.5 - cy, xx + 0.5 - cx
    t = np.clip(py * dy + px * dx, -half, half)
    dist = np.hypot(py - t * dy, px - t * dx)
    line = np.clip(1.0 + width / 2 - dist, 0.0, 1.0)
    if sigma > 0:
        line = ndimage.gaussian_filter(line, sigma, mode="constant")
    return opacity * line, iy - pad, ix - pad


def gen_snow_mask(height, width, spec, rng):
    """Alpha mask (1, H, W) in [0, 1]: flakes and streaks combined by per-pixel max."""
    if height < 32 or width < 32:
        raise InvalidInputError("mask dimensions must be >= 32")
    canvas = np.zeros((height, width), dtype=np.float64)
    if spec.flake_count is not None:
        n_flakes = spec.flake_count
    else:
        n_flakes = rng.poisson(spec.flake_density * height * width / 1000.0) if spec.flake_density > 0 else 0
    for _ in range(n_flakes):
        patch, top, left = _flake(
            rng.uniform(*spec.flake_radius_range),
            rng.uniform(*spec.blur_sigma_range),
            rng.uniform(*spec.opacity_range),
            rng.uniform(0, height), rng.uniform(0, width))
        _stamp_max(canvas, patch, top, left)
    lo, hi = spec.streak_count_range
    n_streaks = int(rng.integers(int(lo), int(hi) + 1))
    for _ in range(n_streaks):
        patch, top, left = _streak(
            rng.uniform(*spec.streak_length_range),
            rng.uniform(*spec.streak_angle_range),
            spec.streak_width,
            rng.uniform(*spec.blur_sigma_range),
            rng.uniform(*spec.opacity_range),
            rng.uniform(0, height), rng.uniform(0, width))
        _stamp_max(canvas, patch, top, left)
    return np.clip(canvas, 0.0, 1.0)[None].astype(np.float32)


def chromatic_map(height, width, rng, jitter=0.08):
    """Near-white (3, H, W) map: 1 plus a smooth per-channel offset in [-jitter, 0]."""
    coarse = rng.uniform(-1.0, 0.0, size=(3, 4, 4))
    field_ = np.stack([
        ndimage.zoom(c, (height / 4, width / 4), order=1, mode="nearest", grid_mode=True)
        for c in coarse])
    field_ = np.clip(field_[:, :height, :width], -1.0, 0.0)
    return (1.0 + jitter * field_).astype(np.float32)


def composite(clean, mask, chroma):
    """``chroma * mask + clean * (1 - mask)`` clamped to [0, 1]; the mask broadcasts over channels."""
    clean, mask, chroma = (np.asarray(a, dtype=np.float32) for a in (clean, mask, chroma))
    if mask.ndim != 3 or mask.shape[0] != 1:
        raise InvalidInputError("mask must be (1, H, W)")
    if clean.shape != chroma.shape or clean.shape[-2:] != mask.shape[-2:]:
        raise InvalidInputError(
            f"incompatible shapes: clean {clean.shape}, mask {mask.shape}, chroma {chroma.shape}")
    return np.clip(chroma * mask + clean * (1.0 - mask), 0.0, 1.0)


def procedural_clean(height, width, rng):
    """Smooth colour gradient background with a few flat shapes and mild texture."""
    yy, xx = np.mgrid[0:height, 0:width] / np.array([max(height - 1, 1), max(width - 1, 1)])[:, None, None]
    c0, c1, c2 = rng.uniform(0.05, 0.85, size=(3, 3))
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * yy + (c2 - c0)[:, None, None] * xx * 0.5
    for _ in range(int(rng.integers(3, 8))):
        color = rng.uniform(0.0, 0.9, size=3)[:, None, None]
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.3) * min(height, width)
            region = (yy * (height - 1) - cy) ** 2 + (xx * (width - 1) - cx) ** 2 <= r ** 2
        else:
            hh, ww = rng.uniform(0.1, 0.4, size=2) * np.array([height, width])
            region = (np.abs(yy * (height - 1) - cy) <= hh / 2) & (np.abs(xx * (width - 1) - cx) <= ww / 2)
        img = np.where(region[None], color, img)
    texture = ndimage.gaussian_filter(rng.normal(0, 0.03, size=(height, width)), 1.0)
    return np.clip(img + texture[None], 0.0, 1.0).astype(np.float32)


def entry_rngs(entry_seed):
    """Independent generators for (clean, mask, chroma) of one entry."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(entry_seed).spawn(3)]


def entry_seed(master_seed, index):
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, dtype=np.uint64)[0])


def synthesize(clean, spec, seed):
    """Build one SynthSample from a clean image and an entry seed."""
    _, mask_rng, chroma_rng = entry_rngs(seed)
    h, w = clean.shape[-2:]
    mask = gen_snow_mask(h, w, spec, mask_rng)
    chroma = chromatic_map(h, w, chroma_rng, spec.chroma_jitter)
    return SynthSample(composite(clean, mask, chroma), clean, mask, chroma, {"seed": seed})


# ---------------------------------------------------------------------------
# image files and manifests

def load_image(path, channels=3):
    img = Image.open(path)
    img = img.convert("L" if channels == 1 else "RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return np.ascontiguousarray(np.clip(arr, 0.0, 1.0))


def to_uint8(img):
    return (np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _quantized(img):
    return to_uint8(img).astype(np.float32) / 255.0


def save_image(path, img):
    arr = to_uint8(img)
    arr = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(path)


@dataclass
class ManifestEntry:
    clean: str
    snow: str
    mask: str
    seed: int


@dataclass
class DatasetManifest:
    root: Path
    entries: list
    split: str = "train"
    format_version: int = MANIFEST_VERSION

    def __len__(self):
        return len(self.entries)

    def to_text(self):
        lines = [f"#version {self.format_version}"]
        lines += [f"{e.clean} {e.snow} {e.mask} {e.seed}" for e in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path=None):
        path = Path(path) if path else Path(self.root) / f"{self.split}.txt"
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path, split=None):
        path = Path(path)
        lines = path.read_text().splitlines()
        if not lines or not lines[0].startswith("#version"):
            raise InvalidInputError(f"{path}: missing '#version' header")
        version = int(lines[0].split()[1])
        if version != MANIFEST_VERSION:
            raise InvalidInputError(f"{path}: unsupported manifest version {version}")
        entries = []
        for line in lines[1:]:
            if not line.strip() or line.startswith("#"):
                continue
            clean, snow, mask, seed = line.split()
            entries.append(ManifestEntry(clean, snow, mask, int(seed)))
        man = cls(path.parent, entries, split or path.stem, version)
        man.validate()
        return man

    def validate(self):
        seeds = [e.seed for e in self.entries]
        if len(set(seeds)) != len(seeds):
            raise InvalidInputError("manifest seeds must be unique")
        for e in self.entries:
            for name in (e.clean, e.snow, e.mask):
                if not (Path(self.root) / name).is_file():
                    raise InvalidInputError(f"manifest references missing file {name}")

    def load_sample(self, i):
        e = self.entries[i]
        root = Path(self.root)
        clean = load_image(root / e.clean)
        return SynthSample(load_image(root / e.snow), clean, load_image(root / e.mask, channels=1),
                           meta={"seed": e.seed, "index": i})


def split_counts(n, fractions=(0.8, 0.1, 0.1)):
    """Floor the non-train splits; the remainder goes to train."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise InvalidInputError("split fractions must be three non-negative numbers summing to 1")
    n_val = int(math.floor(n * fractions[1] + 1e-9))
    n_test = int(math.floor(n * fractions[2] + 1e-9))
    return n - n_val - n_test, n_val, n_test


def _list_images(clean_dir):
    clean_dir = Path(clean_dir)
    if not clean_dir.is_dir():
        raise InvalidInputError(f"{clean_dir} is not a directory")
    files = sorted(p for p in clean_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise InvalidInputError(f"no images found in {clean_dir}")
    return files


def make_dataset(out_dir, spec=None, n_samples=10, split_fractions=(0.8, 0.1, 0.1),
                 clean_dir=None, size=96, master_seed=None):
    """Write snow/clean/mask PNG triplets and one manifest per split.

    Clean images come from ``clean_dir`` (cycled, center-cropped to ``size``
    when larger) or, if None, are generated procedurally. Unreadable source
    files are skipped with a warning. Returns ``{split: DatasetManifest}``.
    """
    spec = spec or SnowMaskSpec()
    master_seed = spec.seed if master_seed is None else master_seed
    out = Path(out_dir)
    for sub in ("clean", "snow", "mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    sources = None
    if clean_dir is not None:
        sources = []
        skipped = 0
        for p in _list_images(clean_dir):
            try:
                sources.append(load_image(p))
            except Exception:  # unreadable / corrupt files are skipped
                skipped += 1
        if skipped:
            log.warning("skipped %d unreadable image(s) in %s", skipped, clean_dir)
        if not sources:
            raise InvalidInputError(f"no readable images in {clean_dir}")

    entries = []
    for i in range(n_samples):
        seed = entry_seed(master_seed, i)
        clean_rng = entry_rngs(seed)[0]
        if sources is None:
            clean = procedural_clean(size, size, clean_rng)
        else:
            clean = _fit(sources[i % len(sources)], size)
        sample = synthesize(_quantized(clean), spec, seed)
        # composite from the 8-bit mask so the stored triplet satisfies the model up to
        # the rounding of the snow image alone
        mask = _quantized(sample.mask)
        sample = SynthSample(composite(sample.clean, mask, sample.chroma), sample.clean, mask,
                             sample.chroma, sample.meta)
        name = f"{i:06d}.png"
        save_image(out / "clean" / name, sample.clean)
        save_image(out / "snow" / name, sample.snow)
        save_image(out / "mask" / name, sample.mask)
        entries.append(ManifestEntry(f"clean/{name}", f"snow/{name}", f"mask/{name}", seed))

    n_train, n_val, _ = split_counts(n_samples, split_fractions)
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n_samples)}
    manifests = {}
    for split, (a, b) in bounds.items():
        man = DatasetManifest(out, entries[a:b], split)
        man.save()
        manifests[split] = man
    (out / "spec.txt").write_text(spec.to_kv())
    return manifests


def _fit(img, size):
    """Center-crop to ``size`` when large enough; otherwise keep the image and crop to a multiple of 8."""
    h, w = img.shape[-2:]
    if h >= size and w >= size:
        top, left = (h - size) // 2, (w - size) // 2
        return img[:, top:top + size, left:left + size]
    return img[:, : h - h % 8, : w - w % 8]


def regenerate_chroma(seed, height, width, spec=None):
    """Rebuild the chromatic map of a stored entry from its seed."""
    spec = spec or SnowMaskSpec()
    return chromatic_map(height, width, entry_rngs(seed)[2], spec.chroma_jitter)


# ---------------------------------------------------------------------------
# cropping and augmentation

def _apply_window(sample, top, left, size, flip_h=False, flip_v=False):
    def cut(a):
        if a is None:
            return None
        a = a[:, top:top + size, left:left + size]
        if flip_h:
            a = a[:, :, ::-1]
        if flip_v:
            a = a[:, ::-1, :]
        return np.ascontiguousarray(a)

    meta = dict(sample.meta, crop=(top, left, size), flip=(flip_h, flip_v))
    return SynthSample(cut(sample.snow), cut(sample.clean), cut(sample.mask), cut(sample.chroma), meta)


def random_crop_flip(sample, size, rng):
    """Same random window and random horizontal / vertical flips for every plane."""
    h, w = sample.clean.shape[-2:]
    if size > h or size > w:
        raise InvalidInputError(f"crop {size} larger than image {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    flip_h, flip_v = bool(rng.random() < 0.5), bool(rng.random() < 0.5)
    return _apply_window(sample, top, left, size, flip_h, flip_v)


def center_crop(sample, size):
    h, w = sample.clean.shape[-2:]
    if size > h or size > w:
        raise InvalidInputError(f"crop {size} larger than image {h}x{w}")
    return _apply_window(sample, (h - size) // 2, (w - size) // 2, size)
