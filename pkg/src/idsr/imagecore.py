"""Pixel containers, colour conversion, image I/O and synthetic rain.

Images are plain numpy arrays of floats, shaped ``(H, W)`` for grayscale or
``(H, W, 3)`` for RGB, nominally in [0, 1]. Arithmetic never clamps; values
are clamped and quantized only when written to disk.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw, UnidentifiedImageError
from scipy import ndimage

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
SUPPORTED_SUFFIXES = {".png", ".pgm", ".ppm", ".pnm"}


class ImageIOError(ValueError):
    """Unsupported format or unreadable/corrupt image file."""


def channels(img: np.ndarray) -> int:
    return 1 if img.ndim == 2 else img.shape[2]


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise ValueError(f"expected (H, W) or (H, W, 1|3) image, got shape {img.shape}")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite samples")
    return img


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """BT.601 luminance of an RGB image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"to_grayscale needs a 3-channel image, got shape {img.shape}")
    return img @ LUMA_WEIGHTS


def as_gray(img: np.ndarray) -> np.ndarray:
    """Luminance for RGB input, the image itself for grayscale."""
    img = check_image(img)
    return img if img.ndim == 2 else to_grayscale(img)


def subtract_rain(x: np.ndarray, r_est: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    r_est = np.asarray(r_est, dtype=np.float64)
    if x.shape != r_est.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {r_est.shape}")
    return x - r_est


# ---------------------------------------------------------------- file I/O


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise ImageIOError(f"unsupported image format: {path.suffix!r}")
    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I", "F"):
                raise ImageIOError(f"{path}: only 8-bit images are supported (mode {im.mode})")
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageIOError(f"cannot decode {path}: {exc}") from exc
    return arr / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 8-bit codes."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in SUPPORTED_SUFFIXES:
        raise ImageIOError(f"unsupported image format: {path.suffix!r}")
    img = check_image(img)
    if suffix == ".pgm" and img.ndim == 3:
        raise ImageIOError("PGM holds grayscale only")
    codes = quantize(img)
    mode = "L" if codes.ndim == 2 else "RGB"
    fmt = "PNG" if suffix == ".png" else "PPM"
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(codes, mode=mode).save(path, format=fmt)


# ---------------------------------------------------------------- rain


@dataclass(frozen=True)
class RainConfig:
    streak_count: int = 120
    angle_deg: tuple[float, float] = (-75.0, 8.0)  # (mean, jitter)
    length_px: tuple[float, float] = (10.0, 30.0)
    width_px: tuple[float, float] = (1.0, 1.8)
    intensity: tuple[float, float] = (0.25, 0.5)
    blur_sigma: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.streak_count < 0:
            raise ValueError("streak_count must be >= 0")
        for name in ("length_px", "width_px", "intensity"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
        lo, hi = self.intensity
        if lo < 0 or hi > 1:
            raise ValueError("intensity range must lie in [0, 1]")
        if self.angle_deg[1] < 0 or self.blur_sigma < 0 or self.width_px[0] <= 0:
            raise ValueError("angle jitter, blur_sigma must be >= 0 and widths > 0")


def _segment_coverage(h: int, w: int, p0, p1, width: float):
    """Anti-aliased coverage of a thick segment, restricted to its bounding box."""
    pad = width + 1.0
    y0 = max(int(math.floor(min(p0[0], p1[0]) - pad)), 0)
    y1 = min(int(math.ceil(max(p0[0], p1[0]) + pad)) + 1, h)
    x0 = max(int(math.floor(min(p0[1], p1[1]) - pad)), 0)
    x1 = min(int(math.ceil(max(p0[1], p1[1]) + pad)) + 1, w)
    if y0 >= y1 or x0 >= x1:
        return None
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    d = np.array(p1, dtype=np.float64) - np.array(p0, dtype=np.float64)
    seg_len2 = float(d @ d)
    if seg_len2 == 0:
        t = np.zeros_like(yy)
    else:
        t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / seg_len2, 0.0, 1.0)
    dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
    cov = np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)
    return (slice(y0, y1), slice(x0, x1)), cov


def rain_layer(height: int, width: int, cfg: RainConfig) -> np.ndarray:
    """Render a non-negative grayscale streak layer."""
    rng = np.random.default_rng(cfg.seed)
    layer = np.zeros((height, width))
    for _ in range(cfg.streak_count):
        cy = rng.uniform(0, height)
        cx = rng.uniform(0, width)
        angle = math.radians(cfg.angle_deg[0] + rng.uniform(-1.0, 1.0) * cfg.angle_deg[1])
        length = rng.uniform(*cfg.length_px)
        thick = rng.uniform(*cfg.width_px)
        amp = rng.uniform(*cfg.intensity)
        dy, dx = math.sin(angle) * length / 2, math.cos(angle) * length / 2
        hit = _segment_coverage(height, width, (cy - dy, cx - dx), (cy + dy, cx + dx), thick)
        if hit is None:
            continue
        box, cov = hit
        np.maximum(layer[box], amp * cov, out=layer[box])
    if cfg.blur_sigma > 0 and cfg.streak_count > 0:
        layer = ndimage.gaussian_filter(layer, cfg.blur_sigma, mode="nearest", truncate=3.0)
        np.maximum(layer, 0.0, out=layer)
    return layer


def synth_rain(clean: np.ndarray, cfg: RainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Add streaks to ``clean``; returns ``(rainy, rain_layer)``.

    The layer has the same channel count as ``clean``. ``rainy`` is clamped
    to [0, 1], so the additive model only inverts exactly where no sample
    saturates.
    """
    clean = check_image(clean)
    h, w = clean.shape[:2]
    layer = rain_layer(h, w, cfg)
    if clean.ndim == 3:
        layer = np.repeat(layer[:, :, None], clean.shape[2], axis=2)
    rainy = np.clip(clean + layer, 0.0, 1.0)
    return rainy, layer


# ---------------------------------------------------------------- scenes


def synth_scene(size: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural RGB scene with blobs, shapes and edges (desk-scale clean images)."""
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / float(size)
    base = rng.uniform(0.15, 0.55, size=3)
    tilt = rng.uniform(-0.2, 0.2, size=(2, 3))
    img = base + yy[..., None] * tilt[0] + xx[..., None] * tilt[1]

    canvas = PILImage.new("RGB", (w, h), (0, 0, 0))
    mask = PILImage.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    mdraw = ImageDraw.Draw(mask)
    for _ in range(int(rng.integers(6, 12))):
        colour = tuple(int(c) for c in rng.integers(0, 256, size=3))
        x0, y0 = rng.uniform(-0.1, 0.9, size=2) * size
        sw, sh = rng.uniform(0.08, 0.4, size=2) * size
        box = [x0, y0, x0 + sw, y0 + sh]
        if rng.random() < 0.5:
            draw.rectangle(box, fill=colour)
            mdraw.rectangle(box, fill=255)
        else:
            draw.ellipse(box, fill=colour)
            mdraw.ellipse(box, fill=255)
    shapes = np.asarray(canvas, dtype=np.float64) / 255.0
    alpha = np.asarray(mask, dtype=np.float64)[..., None] / 255.0
    img = img * (1 - 0.8 * alpha) + 0.8 * alpha * shapes

    n_blobs = int(rng.integers(40, 60) * (size / 128) ** 2) + 4
    for _ in range(n_blobs):
        s = rng.uniform(1.5, 4.5)
        cy, cx = rng.uniform(0, size, size=2)
        amp = rng.choice([-1.0, 1.0]) * rng.uniform(0.2, 0.45) * rng.uniform(0.7, 1.0, size=3)
        img += amp * np.exp(-((yy * size - cy) ** 2 + (xx * size - cx) ** 2) / (2 * s * s))[..., None]

    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.0)
    img += 0.04 * texture[..., None]
    img = ndimage.gaussian_filter(img, (0.6, 0.6, 0), mode="nearest")
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------- datasets


@dataclass
class PairDataset:
    """Aligned rainy/clean pairs, lazily loaded and cached in memory."""

    pairs: list[tuple[str, str]]
    patch_size: int = 128
    seed: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dir(cls, root, patch_size: int = 128, seed: int = 0) -> "PairDataset":
        """Pair ``root/rainy/*`` with ``root/clean/*`` by file name."""
        root = Path(root)
        rainy_dir, clean_dir = root / "rainy", root / "clean"
        if not rainy_dir.is_dir() or not clean_dir.is_dir():
            raise FileNotFoundError(f"{root} needs rainy/ and clean/ subdirectories")
        names = sorted(p.name for p in rainy_dir.iterdir() if p.suffix.lower() in SUPPORTED_SUFFIXES)
        missing = [n for n in names if not (clean_dir / n).exists()]
        if missing:
            raise ValueError(f"clean/ lacks counterparts for: {', '.join(missing)}")
        pairs = [(str(rainy_dir / n), str(clean_dir / n)) for n in names]
        return cls(pairs=pairs, patch_size=patch_size, seed=seed)

    @classmethod
    def from_arrays(cls, rainy: list, clean: list, patch_size: int = 128, seed: int = 0) -> "PairDataset":
        ds = cls(pairs=[(f"<mem:{i}:rainy>", f"<mem:{i}:clean>") for i in range(len(rainy))],
                 patch_size=patch_size, seed=seed)
        for i, (r, c) in enumerate(zip(rainy, clean)):
            r, c = check_image(r), check_image(c)
            ds._validate_pair(r, c)
            ds._cache[i] = (r, c)
        return ds

    def __len__(self) -> int:
        return len(self.pairs)

    def _validate_pair(self, r: np.ndarray, c: np.ndarray) -> None:
        if r.shape != c.shape:
            raise ValueError(f"pair dimension mismatch: {r.shape} vs {c.shape}")
        if self.patch_size > min(r.shape[:2]):
            raise ValueError(f"patch {self.patch_size} larger than image {r.shape[:2]}")

    def get(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        if i not in self._cache:
            r = load_image(self.pairs[i][0])
            c = load_image(self.pairs[i][1])
            self._validate_pair(r, c)
            self._cache[i] = (r, c)
        r, c = self._cache[i]
        self._validate_pair(r, c)
        return r, c


def synth_pairs(n: int, size: int = 128, seed: int = 0, rain: RainConfig = RainConfig()):
    """``n`` (name, rainy, clean) triples; scene and rain seeds derive from ``seed``.

    Images are quantized to 8 bits so in-memory pairs equal their saved PNGs.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        clean = quantize(synth_scene(size, rng)) / 255.0
        rainy, _ = synth_rain(clean, replace(rain, seed=int(rng.integers(2**31))))
        out.append((f"{i:04d}.png", quantize(rainy) / 255.0, clean))
    return out


def write_pairs(pairs, root) -> Path:
    """Save triples from :func:`synth_pairs` under ``root/rainy`` and ``root/clean``."""
    root = Path(root)
    for name, rainy, clean in pairs:
        save_image(rainy, root / "rainy" / name)
        save_image(clean, root / "clean" / name)
    return root


def sample_patches(ds: PairDataset, batch: int, rng: np.random.Generator | None = None,
                   patch: int | None = None):
    """Draw ``batch`` aligned (rainy, clean) crops.

    Returns a list of ``(rainy_patch, clean_patch)``. Pass a persistent ``rng``
    to continue a sequence; otherwise a fresh one seeded from ``ds.seed`` is used.
    ``patch`` overrides the dataset's patch size.
    """
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(ds.seed) if rng is None else rng
    p = ds.patch_size if patch is None else patch
    out = []
    for _ in range(batch):
        i = int(rng.integers(len(ds)))
        r, c = ds.get(i)
        h, w = r.shape[:2]
        if p > min(h, w):
            raise ValueError(f"patch {p} larger than image {(h, w)}")
        y = int(rng.integers(h - p + 1))
        x = int(rng.integers(w - p + 1))
        out.append((r[y:y + p, x:x + p], c[y:y + p, x:x + p]))
    return out
