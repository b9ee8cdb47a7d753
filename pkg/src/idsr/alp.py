"""Polynomial scale-space response model built on a four-kernel LoG basis.

The LoG kernel at any scale in ``[xi_1, xi_4]`` is approximated by a linear
combination of the kernels at four fixed scales, with weights that are cubic
polynomials of scale. Convolving an image with the basis then yields, per
pixel, a cubic in scale (the scale-space response, SSR) whose stationary
points locate interest points.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

DEFAULT_XI = (1.6, 2.2627, 3.2, 4.5255)
DEFAULT_GRID_SIZE = 33
FIT_TOLERANCE = 0.06
LAWSON_ITERATIONS = 200


def log_kernel(xi: float, half_width: int) -> np.ndarray:
    """Scale-normalized LoG ``xi^2 * laplacian(G_xi)`` on ``[-w, w]^2``, made zero-mean."""
    if not xi > 0:
        raise ValueError(f"xi must be positive, got {xi}")
    w = int(half_width)
    t = np.arange(-w, w + 1, dtype=np.float64)
    r2 = t[:, None] ** 2 + t[None, :] ** 2
    s2 = xi * xi
    k = (r2 - 2.0 * s2) / (2.0 * math.pi * s2 * s2) * np.exp(-r2 / (2.0 * s2))
    return k - k.mean()


@dataclass(frozen=True)
class AlpBasis:
    xi: tuple[float, ...]
    half_width: int
    kernels: np.ndarray  # (K, 2w+1, 2w+1)
    cubic: np.ndarray  # (K, 4): a_k, b_k, c_k, d_k (highest power first)
    fit_grid: np.ndarray
    fit_residual: float

    def gamma(self, xi) -> np.ndarray:
        """Cubic weights gamma_k(xi); shape (K,) or (len(xi), K)."""
        xi = np.asarray(xi, dtype=np.float64)
        powers = np.stack([xi**3, xi**2, xi, np.ones_like(xi)], axis=-1)
        return powers @ self.cubic.T

    def reconstruct(self, xi: float) -> np.ndarray:
        return np.tensordot(self.gamma(xi), self.kernels, axes=1)

    def eta_kernels(self) -> np.ndarray:
        """Kernels producing eta_3, eta_2, eta_1, eta_0 directly (in that order)."""
        return np.tensordot(self.cubic.T, self.kernels, axes=1)

    def to_dict(self) -> dict:
        return {
            "xi": [float(x) for x in self.xi],
            "half_width": int(self.half_width),
            "cubic": [[float(v) for v in row] for row in self.cubic],
            "fit_grid": [float(g) for g in self.fit_grid],
            "fit_residual": float(self.fit_residual),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "AlpBasis":
        xi = tuple(float(x) for x in d["xi"])
        w = int(d["half_width"])
        kernels = np.stack([log_kernel(x, w) for x in xi])
        return cls(xi, w, kernels, np.asarray(d["cubic"], dtype=np.float64),
                   np.asarray(d["fit_grid"], dtype=np.float64), float(d["fit_residual"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "AlpBasis":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _fit_cubic_kernel_metric(B, gammas, powers, target_norms, weights=None):
    """Cubic coefficients minimizing sum_g w_g ||B (C p_g - gamma_g)||^2 / ||h_g||^2.

    Since ``B gamma_g`` is the projection of ``h_g``, this is the weighted sum
    of squared relative reconstruction errors of the kernels themselves.
    """
    k, n = B.shape[1], powers.shape[0]
    weights = np.ones(n) if weights is None else weights
    L = np.linalg.cholesky(B.T @ B).T  # ||B x|| == ||L x||
    rows, rhs = [], []
    for g in range(n):
        s = np.sqrt(weights[g]) / target_norms[g]
        rows.append(s * np.kron(L, powers[g][None, :]))
        rhs.append(s * (L @ gammas[:, g]))
    coef, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
    return coef.reshape(k, 4)


def _relative_errors(B, cubic, powers, targets):
    recon = B @ (powers @ cubic.T).T
    return np.linalg.norm(recon - targets, axis=0) / np.linalg.norm(targets, axis=0)


def _fit_cubic_minimax(B, gammas, powers, targets):
    """Lawson reweighting of the kernel-metric fit towards the worst-case optimum."""
    norms = np.linalg.norm(targets, axis=0)
    weights = np.full(powers.shape[0], 1.0 / powers.shape[0])
    best, best_err = None, np.inf
    for _ in range(LAWSON_ITERATIONS):
        cubic = _fit_cubic_kernel_metric(B, gammas, powers, norms, weights)
        err = _relative_errors(B, cubic, powers, targets)
        if err.max() < best_err:
            best, best_err = cubic, err.max()
        weights = weights * err
        weights /= weights.sum()
    return best


def fit_basis(xi=DEFAULT_XI, half_width: int | None = None, grid=None,
              tolerance: float = FIT_TOLERANCE, method: str = "minimax") -> AlpBasis:
    """Fit the cubic weight functions in two stages.

    First every grid kernel is projected onto the span of the basis kernels.
    Then the weight trajectories are fit by cubics in scale:

    * ``"minimax"`` (default): kernel-metric least squares, reweighted until
      the worst relative kernel error over the grid is (near) minimal.
    * ``"kernel"``: plain least squares on the relative kernel errors.
    * ``"gamma"``: each trajectory fit on its own, ignoring how the kernels
      mix; cheapest and the least accurate.

    With the default scales and grid the worst-case error cannot go below
    about 5.6% for any cubic weights, so the default tolerance is 0.06.
    """
    xi = tuple(float(x) for x in xi)
    if len(xi) != 4 or any(b <= a for a, b in zip(xi, xi[1:])):
        raise ValueError(f"need four strictly increasing scales, got {xi}")
    w = int(math.ceil(3.0 * xi[-1])) if half_width is None else int(half_width)
    grid = np.linspace(xi[0], xi[-1], DEFAULT_GRID_SIZE) if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty fit grid")
    if grid.size < 16 or grid.min() < xi[0] - 1e-12 or grid.max() > xi[-1] + 1e-12:
        raise ValueError("fit grid must hold >= 16 samples inside [xi_1, xi_4]")

    kernels = np.stack([log_kernel(x, w) for x in xi])
    B = kernels.reshape(len(xi), -1).T
    sv = np.linalg.svd(B, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise ValueError("basis kernels are (numerically) linearly dependent")

    targets = np.stack([log_kernel(g, w).ravel() for g in grid], axis=1)
    gammas, *_ = np.linalg.lstsq(B, targets, rcond=None)  # (K, G)
    powers = np.stack([grid**3, grid**2, grid, np.ones_like(grid)], axis=1)
    if method == "gamma":
        cubic = np.stack([np.polyfit(grid, gammas[k], 3) for k in range(len(xi))])
    elif method == "kernel":
        cubic = _fit_cubic_kernel_metric(B, gammas, powers, np.linalg.norm(targets, axis=0))
    elif method == "minimax":
        cubic = _fit_cubic_minimax(B, gammas, powers, targets)
    else:
        raise ValueError(f"unknown fit method {method!r}")

    residual = float(_relative_errors(B, cubic, powers, targets).max())
    if residual > tolerance:
        raise ValueError(f"basis fit residual {residual:.4f} exceeds tolerance {tolerance}")
    return AlpBasis(xi, w, kernels, cubic, grid, residual)


@dataclass(frozen=True)
class EtaMaps:
    eta0: np.ndarray
    eta1: np.ndarray
    eta2: np.ndarray
    eta3: np.ndarray

    def ssr(self, xi) -> np.ndarray:
        """Scale-space response polynomial evaluated at ``xi`` everywhere."""
        return ((self.eta3 * xi + self.eta2) * xi + self.eta1) * xi + self.eta0

    def stacked(self) -> np.ndarray:
        return np.stack([self.eta0, self.eta1, self.eta2, self.eta3])


def basis_responses(img: np.ndarray, basis: AlpBasis) -> np.ndarray:
    """``img`` filtered by each basis kernel (replicate padding), shape (K, H, W)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("ALP operations need a grayscale image")
    return np.stack([ndimage.correlate(img, k, mode="nearest") for k in basis.kernels])


def eta_maps(img: np.ndarray, basis: AlpBasis) -> EtaMaps:
    L = basis_responses(img, basis)
    e3, e2, e1, e0 = np.tensordot(basis.cubic.T, L, axes=1)
    return EtaMaps(eta0=e0, eta1=e1, eta2=e2, eta3=e3)


def _stationary_points(e3, e2, e1):
    """Roots of 3 e3 x^2 + 2 e2 x + e1, elementwise; NaN where absent."""
    a = 3.0 * np.asarray(e3, dtype=np.float64)
    b = 2.0 * np.asarray(e2, dtype=np.float64)
    c = np.asarray(e1, dtype=np.float64)
    r1 = np.full(np.broadcast(a, b, c).shape, np.nan)
    r2 = r1.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        lin = (a == 0) & (b != 0)
        r1 = np.where(lin, -c / b, r1)
        disc = b * b - 4.0 * a * c
        quad = (a != 0) & (disc >= 0)
        q = -0.5 * (b + np.copysign(np.sqrt(np.where(quad, disc, 0.0)), b))
        r1 = np.where(quad, q / a, r1)
        r2 = np.where(quad & (q != 0), c / q, r2)
        # b == 0 and c == 0 gives q == 0: a double root at zero
        r2 = np.where(quad & (q == 0), 0.0, r2)
    return r1, r2


def extremum_scale_map(eta: EtaMaps, xi_range: tuple[float, float]):
    """Vectorized extremum scale and SSR response; NaN where no root survives."""
    lo, hi = xi_range
    r1, r2 = _stationary_points(eta.eta3, eta.eta2, eta.eta1)
    best_xi = np.full(r1.shape, np.nan)
    best_resp = np.full(r1.shape, np.nan)
    for r in (r1, r2):
        ok = np.isfinite(r) & (r >= lo) & (r <= hi)
        resp = np.where(ok, eta.ssr(np.where(ok, r, 0.0)), np.nan)
        better = ok & (~np.isfinite(best_resp) | (np.abs(resp) > np.abs(np.nan_to_num(best_resp))))
        best_xi = np.where(better, r, best_xi)
        best_resp = np.where(better, resp, best_resp)
    return best_xi, best_resp


def extremum_scale(eta: EtaMaps, u: int, v: int, xi_range=(DEFAULT_XI[0], DEFAULT_XI[-1])):
    """``(xi_star, response)`` at pixel (row u, column v), or ``None``."""
    h, w = eta.eta0.shape
    if not (0 <= u < h and 0 <= v < w):
        raise IndexError(f"pixel ({u}, {v}) outside {h}x{w}")
    point = EtaMaps(*(np.asarray(m[u, v]) for m in (eta.eta0, eta.eta1, eta.eta2, eta.eta3)))
    xi, resp = extremum_scale_map(point, xi_range)
    if not np.isfinite(xi):
        return None
    return float(xi), float(resp)


@dataclass(frozen=True)
class AlpKeypoint:
    u: int  # row
    v: int  # column
    xi_star: float
    response: float


def _edge_like(mag: np.ndarray, edge_ratio: float) -> np.ndarray:
    """Principal-curvature test on the response magnitude: True on ridges and saddles."""
    p = np.pad(mag, 1, mode="edge")
    c = p[1:-1, 1:-1]
    dxx = p[1:-1, 2:] + p[1:-1, :-2] - 2 * c
    dyy = p[2:, 1:-1] + p[:-2, 1:-1] - 2 * c
    dxy = (p[2:, 2:] - p[2:, :-2] - p[:-2, 2:] + p[:-2, :-2]) / 4.0
    tr, det = dxx + dyy, dxx * dyy - dxy * dxy
    return (det <= 0) | (tr * tr * edge_ratio >= (edge_ratio + 1) ** 2 * det)


def alp_detect(img: np.ndarray, basis: AlpBasis, response_threshold: float = 0.02,
               edge_ratio: float = 10.0) -> list[AlpKeypoint]:
    """Pixels whose SSR extremum is strong and a strict 8-neighbourhood maximum of |response|.

    Peaks lying on ridges of |response| (curvature ratio above ``edge_ratio``)
    are dropped; these are the discretized rings around blobs.
    """
    eta = eta_maps(img, basis)
    xi, resp = extremum_scale_map(eta, (basis.xi[0], basis.xi[-1]))
    valid = np.isfinite(xi)
    # keep only magnitude peaks: curvature of the SSR opposes the response sign
    curv = 6.0 * eta.eta3 * np.nan_to_num(xi) + 2.0 * eta.eta2
    valid &= np.nan_to_num(resp) * curv < 0
    mag = np.where(valid, np.abs(np.nan_to_num(resp)), 0.0)
    valid &= mag >= response_threshold
    if not valid.any():
        return []
    padded = np.pad(mag, 1, mode="constant")
    h, w = mag.shape
    is_peak = valid.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            is_peak &= mag > padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    is_peak[0, :] = is_peak[-1, :] = False
    is_peak[:, 0] = is_peak[:, -1] = False
    is_peak &= ~_edge_like(mag, edge_ratio)
    return [AlpKeypoint(int(u), int(v), float(xi[u, v]), float(resp[u, v])) for u, v in zip(*np.nonzero(is_peak))]


def alp_loss(clean: np.ndarray, derained: np.ndarray, basis: AlpBasis, include_eta0: bool = False) -> float:
    """Mean over pixels of sum_j |eta_j(clean) - eta_j(derained)|, j = 1..3 (0..3 optionally)."""
    clean = np.asarray(clean, dtype=np.float64)
    derained = np.asarray(derained, dtype=np.float64)
    if clean.shape != derained.shape:
        raise ValueError(f"dimension mismatch: {clean.shape} vs {derained.shape}")
    a = eta_maps(clean, basis).stacked()
    b = eta_maps(derained, basis).stacked()
    terms = slice(0, 4) if include_eta0 else slice(1, 4)
    return float(np.abs(a[terms] - b[terms]).sum() / clean.size)
