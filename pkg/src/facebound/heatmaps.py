"""Boundary/landmark heatmap rasterization and heatmap decoding.

Heatmap pixel ``(x, y)`` lives at ``data[c, y, x]``; pixel centres sit on
integer coordinates.  Landmarks handed to the rasterizers must already be in
heatmap resolution (divide crop coordinates by ``stride``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.spatial import cKDTree

from .schemas import AnnotationSchema

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RasterizerConfig:
    sigma_boundary: float = 1.0
    sigma_landmark: float = 1.5
    distance_cutoff: float = 3.0
    interpolation_samples_per_segment: int = 10

    def __post_init__(self):
        if self.sigma_boundary <= 0 or self.sigma_landmark <= 0:
            raise ValueError("sigmas must be positive")
        if self.distance_cutoff < 1:
            raise ValueError("distance_cutoff must be >= 1 (in multiples of sigma)")
        if self.interpolation_samples_per_segment < 1:
            raise ValueError("interpolation_samples_per_segment must be >= 1")


@dataclass
class HeatmapStack:
    data: np.ndarray  # (C, H, W) float in [0, 1]
    stride: int = 4
    kind: str = "landmark"  # "boundary" or "landmark"
    clamped: bool = False  # some landmark fell outside the map and was clamped

    @property
    def shape(self):
        return self.data.shape


def _clamp_points(points: np.ndarray, size: tuple[int, int]) -> tuple[np.ndarray, bool]:
    h, w = size
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    clipped = np.empty_like(pts)
    clipped[:, 0] = np.clip(pts[:, 0], 0, w - 1)
    clipped[:, 1] = np.clip(pts[:, 1], 0, h - 1)
    was_clamped = bool(np.any(clipped != pts))
    if was_clamped:
        log.debug("clamped %d landmark(s) into the %dx%d heatmap", int(np.any(clipped != pts, axis=1).sum()), h, w)
    return clipped, was_clamped


def interpolate_curve(points: np.ndarray, samples_per_segment: int = 10) -> np.ndarray:
    """Piecewise-linear resampling of an ordered polyline.

    Each segment contributes ``samples_per_segment`` evenly spaced points
    starting at its first vertex; the final vertex is appended once.  A single
    point comes back unchanged.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        return pts.copy()
    t = np.arange(samples_per_segment, dtype=np.float64) / samples_per_segment
    a, b = pts[:-1], pts[1:]
    seg = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    return np.concatenate([seg.reshape(-1, 2), pts[-1:]], axis=0)


def pixel_grid(size: tuple[int, int]) -> np.ndarray:
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def curve_distance_map(samples: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Euclidean distance from every pixel centre to the nearest curve sample."""
    dist, _ = cKDTree(samples).query(pixel_grid(size), k=1)
    return dist.reshape(size)


def rasterize_boundaries(
    landmarks: np.ndarray,
    schema: AnnotationSchema,
    cfg: RasterizerConfig = RasterizerConfig(),
    size: tuple[int, int] = (64, 64),
    stride: int = 4,
) -> HeatmapStack:
    pts, clamped = _clamp_points(landmarks, size)
    if len(pts) != schema.num_landmarks:
        raise ValueError(f"schema {schema.name} expects {schema.num_landmarks} landmarks, got {len(pts)}")
    sigma = cfg.sigma_boundary
    cutoff = cfg.distance_cutoff * sigma
    K = schema.num_boundaries
    out = np.zeros((K, *size), dtype=np.float64)
    for c, idx in enumerate(schema.boundary_membership):
        if not idx:
            continue
        samples = interpolate_curve(pts[list(idx)], cfg.interpolation_samples_per_segment)
        d = curve_distance_map(samples, size)
        g = np.exp(-(d**2) / (2 * sigma**2))
        g[d > cutoff] = 0.0
        out[c] = g
    out[K - 1] = out[: K - 1].max(axis=0)
    return HeatmapStack(out, stride=stride, kind="boundary", clamped=clamped)


def rasterize_landmarks(
    landmarks: np.ndarray,
    cfg: RasterizerConfig = RasterizerConfig(),
    size: tuple[int, int] = (64, 64),
    stride: int = 4,
) -> HeatmapStack:
    pts, clamped = _clamp_points(landmarks, size)
    h, w = size
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    s2 = 2 * cfg.sigma_landmark**2
    # separable gaussian: exp(-(dx^2 + dy^2)/2s^2) = gx * gy
    gx = np.exp(-((xs[None, :] - pts[:, :1]) ** 2) / s2)
    gy = np.exp(-((ys[None, :] - pts[:, 1:]) ** 2) / s2)
    out = gy[:, :, None] * gx[:, None, :]
    return HeatmapStack(out, stride=stride, kind="landmark", clamped=clamped)


def decode_heatmaps(heatmaps, stride: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Argmax + quarter-pixel decode of ``(..., L, H, W)`` heatmaps.

    Returns ``(coords, confident)`` where coords is ``(..., L, 2)`` in input
    (crop) resolution and ``confident`` is False for channels that are
    identically zero; those decode to the map centre.
    """
    if isinstance(heatmaps, HeatmapStack):
        if heatmaps.kind != "landmark":
            raise ValueError("decode_heatmaps expects a landmark heatmap stack")
        stride = heatmaps.stride
        heatmaps = heatmaps.data
    hm = np.asarray(heatmaps, dtype=np.float64)
    *lead, H, W = hm.shape
    flat = hm.reshape(-1, H, W)
    n = flat.shape[0]
    idx = flat.reshape(n, -1).argmax(axis=1)
    py, px = np.divmod(idx, W)
    coords = np.stack([px, py], axis=1).astype(np.float64)

    rows = np.arange(n)
    left = flat[rows, py, np.clip(px - 1, 0, W - 1)]
    right = flat[rows, py, np.clip(px + 1, 0, W - 1)]
    up = flat[rows, np.clip(py - 1, 0, H - 1), px]
    down = flat[rows, np.clip(py + 1, 0, H - 1), px]
    inner_x = (px > 0) & (px < W - 1)
    inner_y = (py > 0) & (py < H - 1)
    coords[:, 0] += np.where(inner_x, 0.25 * np.sign(right - left), 0.0)
    coords[:, 1] += np.where(inner_y, 0.25 * np.sign(down - up), 0.0)

    confident = flat.reshape(n, -1).max(axis=1) > 0
    coords[~confident] = (W / 2, H / 2)
    coords *= stride
    return coords.reshape(*lead, 2), confident.reshape(*lead) if lead else confident


def heatmap_grid(data: np.ndarray, cols: int = 8, pad: int = 1) -> np.ndarray:
    """Tile a ``(C, H, W)`` stack into one 8-bit image (value 1.0 -> 255, linear)."""
    C, H, W = data.shape
    rows = -(-C // cols)
    grid = np.zeros((rows * (H + pad) + pad, cols * (W + pad) + pad), dtype=np.uint8)
    vals = np.clip(np.rint(np.asarray(data, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    for c in range(C):
        r, q = divmod(c, cols)
        y0, x0 = pad + r * (H + pad), pad + q * (W + pad)
        grid[y0 : y0 + H, x0 : x0 + W] = vals[c]
    return grid


def dump_heatmap_grid(stack: HeatmapStack, out_dir: str | Path, stem: str, cols: int = 8) -> Path:
    """Write ``<stem>_<kind>_grid.png`` into ``out_dir`` and return its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{stem}_{stack.kind}_grid.png"
    cv2.imwrite(str(path), heatmap_grid(stack.data, cols=cols))
    return path
