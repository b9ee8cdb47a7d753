"""SIFT on a single-resolution five-level Gaussian stack.

Detection runs on the DoG stack; orientation and description read Sobel
gradients of the Gaussian level nearest to each keypoint's scale. The two
stacks may come from different images (detection from one restoration,
description from another).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from .imagecore import as_gray, quantize
from .scalespace import (GAUSSIAN_SCALES, DoGStack, GradientField, ScaleStack, build_dog,
                         build_scale_stack, sobel_gradients)

ORI_BINS = 36
DESC_CELLS = 4
DESC_BINS = 8
DESC_MAGNIFICATION = 2.0
DESC_CLAMP = 0.2


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    response: float
    orientation: float = 0.0


@dataclass(frozen=True)
class SiftParams:
    contrast_threshold: float = 0.03
    edge_ratio: float = 10.0
    ratio: float = 0.75
    peak_ratio: float = 0.8
    gate_px: float = 2.0
    gate_scale: float = 1.5
    scales: tuple[float, ...] = GAUSSIAN_SCALES


@dataclass
class MatchSet:
    matches: list[tuple[int, int, float]] = field(default_factory=list)
    inlier_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self):
        self.inlier_mask = np.asarray(self.inlier_mask, dtype=bool)
        if self.inlier_mask.size == 0 and self.matches:
            self.inlier_mask = np.ones(len(self.matches), dtype=bool)

    def __len__(self) -> int:
        return len(self.matches)

    @property
    def inliers(self) -> list[tuple[int, int, float]]:
        return [m for m, ok in zip(self.matches, self.inlier_mask) if ok]


# ---------------------------------------------------------------- detection


def _dog_level_scales(dog: DoGStack) -> np.ndarray:
    """Each DoG level stands for the geometric mean of its two Gaussian scales."""
    return np.array([math.sqrt(a * b) for a, b in dog.scale_pairs])


def _extremum_mask(D: np.ndarray, prefilter: float) -> np.ndarray:
    """Strict 3x3 spatial x adjacent-level extrema of a (L, H, W) stack.

    Boundary levels are compared against their single existing scale
    neighbour.
    """
    n, h, w = D.shape
    pad = np.pad(D, ((1, 1), (1, 1), (1, 1)), mode="constant", constant_values=np.nan)
    is_max = np.abs(D) > prefilter
    is_min = is_max.copy()
    for ds in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if ds == dy == dx == 0:
                    continue
                nb = pad[1 + ds:1 + ds + n, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
                missing = np.isnan(nb)
                is_max &= missing | (D > nb)
                is_min &= missing | (D < nb)
    mask = is_max | is_min
    mask[:, 0, :] = mask[:, -1, :] = False
    mask[:, :, 0] = mask[:, :, -1] = False
    return mask


def detect(dog: DoGStack, contrast_threshold: float = 0.03, edge_ratio: float = 10.0) -> list[Keypoint]:
    """Scale-space extrema with one quadratic refinement step.

    Candidates with an interpolated offset beyond one sample are discarded as
    unstable; low-contrast and edge-like responses are rejected.
    """
    D = np.asarray(dog.diffs, dtype=np.float64)
    n, h, w = D.shape
    level_scales = _dog_level_scales(dog)
    lo_scale = dog.scale_pairs[0][0]
    hi_scale = dog.scale_pairs[-1][1]
    step = level_scales[1] / level_scales[0] if n > 1 else math.sqrt(2)
    edge_limit = (edge_ratio + 1.0) ** 2 / edge_ratio
    out: list[Keypoint] = []
    for s, r, c in zip(*np.nonzero(_extremum_mask(D, 0.5 * contrast_threshold))):
        v = D[s, r, c]
        dxx = D[s, r, c + 1] - 2 * v + D[s, r, c - 1]
        dyy = D[s, r + 1, c] - 2 * v + D[s, r - 1, c]
        dxy = 0.25 * (D[s, r + 1, c + 1] - D[s, r + 1, c - 1] - D[s, r - 1, c + 1] + D[s, r - 1, c - 1])
        gx = 0.5 * (D[s, r, c + 1] - D[s, r, c - 1])
        gy = 0.5 * (D[s, r + 1, c] - D[s, r - 1, c])
        if 0 < s < n - 1:
            gs = 0.5 * (D[s + 1, r, c] - D[s - 1, r, c])
            dss = D[s + 1, r, c] - 2 * v + D[s - 1, r, c]
            dxs = 0.25 * (D[s + 1, r, c + 1] - D[s + 1, r, c - 1] - D[s - 1, r, c + 1] + D[s - 1, r, c - 1])
            dys = 0.25 * (D[s + 1, r + 1, c] - D[s + 1, r - 1, c] - D[s - 1, r + 1, c] + D[s - 1, r - 1, c])
            H = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
            g = np.array([gx, gy, gs])
        else:
            H = np.array([[dxx, dxy], [dxy, dyy]])
            g = np.array([gx, gy])
        try:
            offset = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            continue
        if np.any(np.abs(offset) > 1.0):
            continue
        contrast = v + 0.5 * float(g @ offset)
        if abs(contrast) < contrast_threshold:
            continue
        det = dxx * dyy - dxy * dxy
        if det <= 0 or (dxx + dyy) ** 2 / det >= edge_limit:
            continue
        ds = offset[2] if offset.size == 3 else 0.0
        scale = float(np.clip(level_scales[s] * step**ds, lo_scale, hi_scale))
        x = float(np.clip(c + offset[0], 0, w - 1))
        y = float(np.clip(r + offset[1], 0, h - 1))
        out.append(Keypoint(x, y, scale, float(contrast)))
    out.sort(key=lambda k: (k.y, k.x, k.scale))
    return out


# ---------------------------------------------------------------- orientation


def stack_gradients(stack: ScaleStack) -> list[GradientField]:
    return [sobel_gradients(level) for level in stack.levels]


def _window(kp: Keypoint, radius: int, shape) -> tuple[slice, slice] | None:
    h, w = shape
    cx, cy = int(round(kp.x)), int(round(kp.y))
    if cx - radius < 0 or cy - radius < 0 or cx + radius >= w or cy + radius >= h:
        return None
    return slice(cy - radius, cy + radius + 1), slice(cx - radius, cx + radius + 1)


def orientation_histogram(kp: Keypoint, grad: GradientField) -> np.ndarray | None:
    sigma = 1.5 * kp.scale
    radius = int(round(3 * sigma))
    win = _window(kp, radius, grad.magnitude.shape)
    if win is None:
        return None
    ys, xs = np.mgrid[win[0], win[1]]
    weight = np.exp(-((xs - kp.x) ** 2 + (ys - kp.y) ** 2) / (2 * sigma * sigma))
    bins = np.round(grad.orientation[win] * ORI_BINS / (2 * np.pi)).astype(int) % ORI_BINS
    hist = np.bincount(bins.ravel(), weights=(weight * grad.magnitude[win]).ravel(), minlength=ORI_BINS)
    # circular [1 4 6 4 1] smoothing
    return sum(c * np.roll(hist, k) for k, c in zip(range(-2, 3), (1, 4, 6, 4, 1))) / 16.0


def assign_orientation(kp: Keypoint, stack: ScaleStack, grads: list[GradientField] | None = None,
                       peak_ratio: float = 0.8) -> list[Keypoint]:
    """One keypoint per histogram peak reaching ``peak_ratio`` of the maximum."""
    grads = stack_gradients(stack) if grads is None else grads
    hist = orientation_histogram(kp, grads[stack.nearest_level(kp.scale)])
    if hist is None or hist.max() <= 0:
        return []
    left, right = np.roll(hist, 1), np.roll(hist, -1)
    peaks = np.nonzero((hist > left) & (hist > right) & (hist >= peak_ratio * hist.max()))[0]
    out = []
    for b in peaks:
        l, c, r = left[b], hist[b], right[b]
        denom = l - 2 * c + r
        shift = 0.5 * (l - r) / denom if denom != 0 else 0.0
        angle = ((b + shift) * 2 * np.pi / ORI_BINS) % (2 * np.pi)
        out.append(replace(kp, orientation=float(angle)))
    return out


# ---------------------------------------------------------------- description


def descriptor_radius(scale: float) -> int:
    cell = DESC_MAGNIFICATION * scale
    return int(math.ceil(cell * math.sqrt(2) * (DESC_CELLS + 1) / 2))


def describe(kp: Keypoint, stack: ScaleStack, grads: list[GradientField] | None = None) -> np.ndarray | None:
    """128-d histogram of rotated, Gaussian-weighted gradients; ``None`` off-image."""
    grads = stack_gradients(stack) if grads is None else grads
    grad = grads[stack.nearest_level(kp.scale)]
    radius = descriptor_radius(kp.scale)
    win = _window(kp, radius, grad.magnitude.shape)
    if win is None:
        return None
    d = DESC_CELLS
    cell = DESC_MAGNIFICATION * kp.scale
    ys, xs = np.mgrid[win[0], win[1]]
    dx, dy = xs - kp.x, ys - kp.y
    cos_t, sin_t = math.cos(kp.orientation), math.sin(kp.orientation)
    x_rot = (cos_t * dx + sin_t * dy) / cell
    y_rot = (-sin_t * dx + cos_t * dy) / cell
    rbin = y_rot + d / 2 - 0.5
    cbin = x_rot + d / 2 - 0.5
    keep = (rbin > -1) & (rbin < d) & (cbin > -1) & (cbin < d)
    weight = np.exp(-(x_rot**2 + y_rot**2) / (2 * (d / 2) ** 2)) * grad.magnitude[win]
    obin = ((grad.orientation[win] - kp.orientation) % (2 * np.pi)) * DESC_BINS / (2 * np.pi)

    rbin, cbin, obin, weight = rbin[keep], cbin[keep], obin[keep], weight[keep]
    r0, c0, o0 = np.floor(rbin).astype(int), np.floor(cbin).astype(int), np.floor(obin).astype(int)
    fr, fc, fo = rbin - r0, cbin - c0, obin - o0
    hist = np.zeros((d + 2, d + 2, DESC_BINS))
    for ir, wr in ((0, 1 - fr), (1, fr)):
        for ic, wc in ((0, 1 - fc), (1, fc)):
            for io, wo in ((0, 1 - fo), (1, fo)):
                np.add.at(hist, (r0 + ir + 1, c0 + ic + 1, (o0 + io) % DESC_BINS), weight * wr * wc * wo)
    vec = hist[1:d + 1, 1:d + 1].ravel()
    norm = np.linalg.norm(vec)
    if norm <= 1e-12:
        return None
    vec = np.minimum(vec / norm, DESC_CLAMP)
    return vec / np.linalg.norm(vec)


# ---------------------------------------------------------------- pipeline


def extract(image: np.ndarray, desc_image: np.ndarray | None = None,
            params: SiftParams = SiftParams()) -> tuple[list[Keypoint], np.ndarray]:
    """Detect on ``image`` and describe on ``desc_image`` (defaults to ``image``).

    Keypoints whose windows leave the image are dropped, so the returned
    keypoints and descriptor rows correspond one to one.
    """
    det_stack = build_scale_stack(as_gray(image), params.scales)
    desc_stack = det_stack if desc_image is None else build_scale_stack(as_gray(desc_image), params.scales)
    grads = stack_gradients(desc_stack)
    kps, descs = [], []
    for kp in detect(build_dog(det_stack), params.contrast_threshold, params.edge_ratio):
        for okp in assign_orientation(kp, desc_stack, grads, params.peak_ratio):
            vec = describe(okp, desc_stack, grads)
            if vec is not None:
                kps.append(okp)
                descs.append(vec)
    order = sorted(range(len(kps)), key=lambda i: (kps[i].y, kps[i].x, kps[i].scale, kps[i].orientation))
    kps = [kps[i] for i in order]
    descs = np.array([descs[i] for i in order]).reshape(len(kps), DESC_CELLS * DESC_CELLS * DESC_BINS)
    return kps, descs


def match(a: np.ndarray, b: np.ndarray, ratio: float = 0.75) -> MatchSet:
    """Nearest-neighbour ratio test, made one-to-one by keeping the closest claim."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    if len(b) < 2 or len(a) == 0:
        return MatchSet()
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    dist = np.sqrt(np.maximum(d2, 0.0))
    order = np.argsort(dist, axis=1, kind="stable")[:, :2]
    rows = np.arange(len(a))
    d1, dn = dist[rows, order[:, 0]], dist[rows, order[:, 1]]
    best: dict[int, tuple[float, int]] = {}
    for i in np.nonzero(d1 < ratio * dn)[0]:
        j = int(order[i, 0])
        if j not in best or d1[i] < best[j][0]:
            best[j] = (float(d1[i]), int(i))
    matches = sorted((i, j, dd) for j, (dd, i) in best.items())
    return MatchSet(matches)


# ---------------------------------------------------------------- geometry


def _fit_model(model: str, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares transform as a 2x3 matrix mapping src -> dst."""
    if model == "translation":
        t = (dst - src).mean(axis=0)
        return np.array([[1.0, 0.0, t[0]], [0.0, 1.0, t[1]]])
    if model == "similarity":
        n = len(src)
        A = np.zeros((2 * n, 4))
        A[0::2] = np.column_stack([src[:, 0], -src[:, 1], np.ones(n), np.zeros(n)])
        A[1::2] = np.column_stack([src[:, 1], src[:, 0], np.zeros(n), np.ones(n)])
        p, *_ = np.linalg.lstsq(A, dst.reshape(-1), rcond=None)
        a, b, tx, ty = p
        return np.array([[a, -b, tx], [b, a, ty]])
    raise ValueError(f"unknown model {model!r}")


MIN_SAMPLES = {"translation": 1, "similarity": 2}


def verify_ransac(ms: MatchSet, kps_a: list[Keypoint], kps_b: list[Keypoint], model: str = "similarity",
                  tol_px: float = 3.0, iters: int = 500, seed: int = 0) -> MatchSet:
    """Mark matches consistent with the best RANSAC model (refit on its inliers)."""
    if model not in MIN_SAMPLES:
        raise ValueError(f"unknown model {model!r}")
    k = MIN_SAMPLES[model]
    n = len(ms.matches)
    if n < k:
        return MatchSet(list(ms.matches), np.zeros(n, dtype=bool))
    src = np.array([[kps_a[i].x, kps_a[i].y] for i, _, _ in ms.matches])
    dst = np.array([[kps_b[j].x, kps_b[j].y] for _, j, _ in ms.matches])

    def inliers_of(M):
        proj = src @ M[:, :2].T + M[:, 2]
        return np.hypot(*(proj - dst).T) <= tol_px

    rng = np.random.default_rng(seed)
    best = np.zeros(n, dtype=bool)
    for _ in range(iters):
        idx = rng.choice(n, size=k, replace=False)
        if k == 2 and np.allclose(src[idx[0]], src[idx[1]]):
            continue
        mask = inliers_of(_fit_model(model, src[idx], dst[idx]))
        if mask.sum() > best.sum():
            best = mask
    if best.sum() >= k:
        refined = inliers_of(_fit_model(model, src[best], dst[best]))
        if refined.sum() >= best.sum():
            best = refined
    return MatchSet(list(ms.matches), best)


def identity_gate(ms: MatchSet, kps_a: list[Keypoint], kps_b: list[Keypoint],
                  max_px: float = 2.0, max_scale_ratio: float = 1.5) -> MatchSet:
    """Keep matches consistent with the identity transform (same scene, same framing)."""
    mask = []
    for i, j, _ in ms.matches:
        a, b = kps_a[i], kps_b[j]
        close = math.hypot(a.x - b.x, a.y - b.y) <= max_px
        r = a.scale / b.scale
        mask.append(close and 1.0 / max_scale_ratio <= r <= max_scale_ratio)
    return MatchSet(list(ms.matches), np.array(mask, dtype=bool))


@dataclass
class Recovery:
    count: int
    matches: MatchSet
    n_derained: int
    n_clean: int

    @property
    def gate_pass_rate(self) -> float:
        """Share of ratio-test matches that also pass the geometric gate (accuracy proxy)."""
        return self.count / len(self.matches) if len(self.matches) else 0.0


def recovered_keypoints(derained: np.ndarray, clean: np.ndarray, params: SiftParams = SiftParams(),
                        derained_desc: np.ndarray | None = None, clean_features=None) -> Recovery:
    """Clean-image keypoints re-found in the derained image.

    ``derained`` drives detection; ``derained_desc`` (if given) supplies the
    Gaussian stack used for orientation and description. ``clean_features``
    lets callers reuse an ``extract`` result for the clean image.
    """
    if np.shape(derained)[:2] != np.shape(clean)[:2]:
        raise ValueError("derained and clean images differ in size")
    kd, dd = extract(derained, derained_desc, params)
    kc, dc = extract(clean, None, params) if clean_features is None else clean_features
    ms = identity_gate(match(dd, dc, params.ratio), kd, kc, params.gate_px, params.gate_scale)
    return Recovery(int(ms.inlier_mask.sum()), ms, len(kd), len(kc))


# ---------------------------------------------------------------- I/O


def features_to_json(kps: list[Keypoint], descs: np.ndarray) -> str:
    doc = {
        "keypoints": [{k: float(v) for k, v in asdict(kp).items()} for kp in kps],
        "descriptors": [[float(v) for v in row] for row in np.asarray(descs)],
    }
    return json.dumps(doc)


def features_from_json(text: str) -> tuple[list[Keypoint], np.ndarray]:
    doc = json.loads(text)
    kps = [Keypoint(**k) for k in doc["keypoints"]]
    descs = np.array(doc["descriptors"], dtype=np.float64).reshape(len(kps), -1)
    return kps, descs


def render_matches(img_a: np.ndarray, img_b: np.ndarray, kps_a, kps_b, ms: MatchSet, path) -> None:
    """Side-by-side PNG with match lines: inliers green, rejected matches red."""
    def rgb(img):
        img = np.asarray(img, dtype=np.float64)
        return np.repeat(img[..., None], 3, axis=2) if img.ndim == 2 else img

    a, b = quantize(rgb(img_a)), quantize(rgb(img_b))
    h = max(a.shape[0], b.shape[0])
    canvas = np.zeros((h, a.shape[1] + b.shape[1], 3), dtype=np.uint8)
    canvas[:a.shape[0], :a.shape[1]] = a
    canvas[:b.shape[0], a.shape[1]:] = b
    im = PILImage.fromarray(canvas, mode="RGB")
    draw = ImageDraw.Draw(im)
    off = a.shape[1]
    for (i, j, _), ok in zip(ms.matches, ms.inlier_mask):
        pa, pb = kps_a[i], kps_b[j]
        draw.line([(pa.x, pa.y), (pb.x + off, pb.y)], fill=(0, 255, 0) if ok else (255, 0, 0), width=1)
    for kp in kps_a:
        draw.ellipse([kp.x - 1.5, kp.y - 1.5, kp.x + 1.5, kp.y + 1.5], outline=(255, 255, 0))
    for kp in kps_b:
        draw.ellipse([kp.x + off - 1.5, kp.y - 1.5, kp.x + off + 1.5, kp.y + 1.5], outline=(255, 255, 0))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    im.save(path, format="PNG")
