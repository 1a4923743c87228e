"""Annotation loading, face cropping, augmentation and target generation.

Two annotation formats are accepted (see ``docs/formats.md``):

* whitespace records: ``image x y w h x0 y0 ... x{L-1} y{L-1} [tags]``
* JSON lines: ``{"image": ..., "bbox": [x, y, w, h], "landmarks": [[x, y], ...], "subset": [...]}``

Image paths are resolved relative to the annotation file's directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
from torch.utils.data import Dataset

from .heatmaps import HeatmapStack, RasterizerConfig, rasterize_boundaries, rasterize_landmarks
from .schemas import AnnotationSchema, flip_landmarks
from .scbe_net import IMAGENET_MEAN, IMAGENET_STD

CROP_SIZE = 256
HEATMAP_SIZE = 64
STRIDE = CROP_SIZE // HEATMAP_SIZE


class AnnotationError(ValueError):
    """Malformed annotation record."""


@dataclass
class FaceSample:
    image_path: Path
    bbox: tuple[float, float, float, float]
    landmarks: np.ndarray  # (L, 2), original image coordinates
    subset: tuple[str, ...] = ()
    source: str = ""
    image: np.ndarray | None = field(default=None, repr=False)

    def load_image(self) -> np.ndarray:
        if self.image is None:
            img = cv2.imread(str(self.image_path), cv2.IMREAD_COLOR)
            if img is None:
                raise FileNotFoundError(f"cannot read image {self.image_path}")
            self.image = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
        return self.image


def _parse_whitespace(line: str, L: int) -> tuple[str, list[float], np.ndarray, tuple[str, ...]]:
    parts = line.split()
    n = 1 + 4 + 2 * L
    if len(parts) not in (n, n + 1):
        raise AnnotationError(f"expected {n} or {n + 1} fields (image, bbox, {L} points, optional tags), got {len(parts)}")
    vals = [float(v) for v in parts[1:n]]
    tags = tuple(t for t in parts[n].split(",") if t) if len(parts) == n + 1 else ()
    return parts[0], vals[:4], np.asarray(vals[4:], dtype=np.float64).reshape(L, 2), tags


def _parse_json(line: str, L: int):
    rec = json.loads(line)
    pts = np.asarray(rec["landmarks"], dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 2)
    if pts.shape != (L, 2):
        raise AnnotationError(f"expected {L} landmarks, got {pts.shape[0] if pts.ndim == 2 else pts.size}")
    tags = rec.get("subset") or ()
    if isinstance(tags, str):
        tags = tuple(t for t in tags.split(",") if t)
    bbox = [float(v) for v in rec["bbox"]]
    if len(bbox) != 4:
        raise AnnotationError("bbox must have 4 numbers")
    return str(rec["image"]), bbox, pts, tuple(tags)


def load_annotations(path: str | Path, schema: AnnotationSchema) -> list[FaceSample]:
    path = Path(path)
    root = path.parent
    samples = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            if line.startswith("{"):
                img, bbox, pts, tags = _parse_json(line, schema.num_landmarks)
            else:
                img, bbox, pts, tags = _parse_whitespace(line, schema.num_landmarks)
        except (ValueError, KeyError, TypeError) as exc:
            raise AnnotationError(f"{path}:{lineno}: {exc}") from None
        if bbox[2] <= 0 or bbox[3] <= 0:
            raise AnnotationError(f"{path}:{lineno}: bbox width and height must be positive")
        img_path = Path(img)
        if not img_path.is_absolute():
            img_path = root / img_path
        samples.append(FaceSample(img_path, tuple(bbox), pts, tags, source=f"{path.name}:{lineno}"))
    return samples


def write_annotations(path: str | Path, samples: list[FaceSample], relative_to: str | Path | None = None) -> None:
    """Write whitespace-format records; floats use ``repr`` so they round-trip exactly."""
    root = Path(relative_to) if relative_to is not None else Path(path).parent
    lines = []
    for s in samples:
        img = Path(s.image_path)
        try:
            img = img.relative_to(root)
        except ValueError:
            pass
        fields = [img.as_posix(), *(repr(float(v)) for v in s.bbox)]
        fields += [repr(float(v)) for v in np.asarray(s.landmarks).ravel()]
        if s.subset:
            fields.append(",".join(s.subset))
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


# -- geometry ----------------------------------------------------------------


def apply_affine(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts @ matrix[:, :2].T + matrix[:, 2]


def invert_affine(matrix: np.ndarray) -> np.ndarray:
    full = np.vstack([matrix, [0.0, 0.0, 1.0]])
    return np.linalg.inv(full)[:2]


def compose_affine(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Matrix of ``outer(inner(p))``."""
    a = np.vstack([outer, [0.0, 0.0, 1.0]])
    b = np.vstack([inner, [0.0, 0.0, 1.0]])
    return (a @ b)[:2]


def crop_transform(bbox, out_size: int = CROP_SIZE, margin: float = 0.0) -> np.ndarray:
    """Similarity mapping the (margin-expanded) bbox onto an ``out_size`` square.

    The longer bbox side fills the crop and the bbox centre lands on the crop
    centre; for a square bbox the top-left corner maps to the origin.
    """
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate bbox {bbox}")
    side = max(w, h) * (1.0 + margin)
    scale = out_size / side
    cx, cy = x + w / 2.0, y + h / 2.0
    tx = out_size / 2.0 - scale * cx
    ty = out_size / 2.0 - scale * cy
    return np.array([[scale, 0.0, tx], [0.0, scale, ty]])


def crop_and_resize(sample: FaceSample, out_size: int = CROP_SIZE, margin: float = 0.0):
    """Returns ``(crop_image_uint8, crop_landmarks, transform)``.

    ``transform`` maps original image coordinates to crop coordinates; use
    ``invert_affine`` to map predictions back.
    """
    m = crop_transform(sample.bbox, out_size, margin)
    img = sample.load_image()
    crop = cv2.warpAffine(img, m, (out_size, out_size), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT)
    return crop, apply_affine(m, sample.landmarks), m


def normalize_image(img: np.ndarray) -> torch.Tensor:
    """uint8 HxWx3 RGB -> float32 3xHxW, ImageNet mean/std normalized."""
    x = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).float() / 255.0
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return (x - mean) / std


# -- augmentation ------------------------------------------------------------


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    rotation_range: float = 60.0  # degrees, symmetric
    scale_range: float = 0.25  # +/- fraction
    coarse_dropout_prob: float = 0.5
    dropout_side: tuple[float, float] = (0.1, 0.3)  # fraction of crop side
    brightness_jitter: bool = True
    brightness_range: tuple[float, float] = (0.6, 1.4)
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_prob", "coarse_dropout_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.rotation_range < 0 or not 0 <= self.scale_range < 1:
            raise ValueError("rotation_range must be >= 0 and scale_range in [0, 1)")

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentConfig":
        return cls(flip_prob=0.0, rotation_range=0.0, scale_range=0.0, coarse_dropout_prob=0.0, brightness_jitter=False, seed=seed)


@dataclass
class Augmentation:
    """Record of one sampled augmentation."""

    matrix: np.ndarray  # 2x3 image warp, crop -> augmented crop (mirror included)
    rotation: np.ndarray  # 2x3 rotation/scale part, before the mirror
    flipped: bool
    angle: float
    scale: float
    dropout_rect: tuple[int, int, int, int] | None
    brightness: float
    width: int = CROP_SIZE

    def apply_to_landmarks(self, landmarks: np.ndarray, schema: AnnotationSchema) -> np.ndarray:
        pts = apply_affine(self.rotation, landmarks)
        if self.flipped:
            pts = flip_landmarks(pts, self.width, schema)
        return pts


def similarity_about(center: tuple[float, float], angle_deg: float, scale: float, flip_width: int | None = None) -> np.ndarray:
    """Rotation (counter-clockwise on screen) and scaling about ``center``, optionally followed by a mirror."""
    a = math.radians(angle_deg)
    cos, sin = scale * math.cos(a), scale * math.sin(a)
    cx, cy = center
    m = np.array([[cos, sin, cx - cos * cx - sin * cy], [-sin, cos, cy + sin * cx - cos * cy]])
    if flip_width is not None:
        mirror = np.array([[-1.0, 0.0, flip_width - 1.0], [0.0, 1.0, 0.0]])
        m = compose_affine(mirror, m)
    return m


def sample_augmentation(cfg: AugmentConfig, rng: np.random.Generator, size: int = CROP_SIZE) -> Augmentation:
    flipped = bool(rng.random() < cfg.flip_prob)
    angle = float(rng.uniform(-cfg.rotation_range, cfg.rotation_range)) if cfg.rotation_range else 0.0
    scale = float(rng.uniform(1 - cfg.scale_range, 1 + cfg.scale_range)) if cfg.scale_range else 1.0
    rect = None
    if rng.random() < cfg.coarse_dropout_prob:
        lo, hi = cfg.dropout_side
        rw = int(round(rng.uniform(lo, hi) * size))
        rh = int(round(rng.uniform(lo, hi) * size))
        rx = int(rng.integers(0, size - rw + 1))
        ry = int(rng.integers(0, size - rh + 1))
        rect = (rx, ry, rw, rh)
    bright = float(rng.uniform(*cfg.brightness_range)) if cfg.brightness_jitter else 1.0
    c = (size - 1) / 2.0
    rot = similarity_about((c, c), angle, scale)
    m = similarity_about((c, c), angle, scale, flip_width=size if flipped else None)
    return Augmentation(m, rot, flipped, angle, scale, rect, bright, width=size)


def apply_augmentation(image: np.ndarray, landmarks: np.ndarray, aug: Augmentation, schema: AnnotationSchema):
    h, w = image.shape[:2]
    out = image
    if not np.array_equal(aug.matrix, np.array([[1.0, 0, 0], [0, 1.0, 0]])):
        out = cv2.warpAffine(image, aug.matrix, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT)
    if aug.brightness != 1.0:
        out = np.clip(out.astype(np.float32) * aug.brightness, 0, 255).astype(np.uint8)
    if aug.dropout_rect is not None:
        if out is image:
            out = image.copy()
        x, y, rw, rh = aug.dropout_rect
        out[y : y + rh, x : x + rw] = 0
    return out, aug.apply_to_landmarks(landmarks, schema)


def augment(image, landmarks, cfg: AugmentConfig, rng: np.random.Generator, schema: AnnotationSchema):
    """Sample and apply one augmentation; returns ``(image, landmarks, record)``."""
    aug = sample_augmentation(cfg, rng, size=image.shape[0])
    img, pts = apply_augmentation(image, landmarks, aug, schema)
    return img, pts, aug


# -- targets -----------------------------------------------------------------


def make_targets(
    landmarks: np.ndarray,
    schema: AnnotationSchema,
    cfg: RasterizerConfig = RasterizerConfig(),
    stride: int = STRIDE,
    size: int = HEATMAP_SIZE,
) -> tuple[HeatmapStack, HeatmapStack]:
    pts = np.asarray(landmarks, dtype=np.float64) / stride
    return (
        rasterize_boundaries(pts, schema, cfg, (size, size), stride),
        rasterize_landmarks(pts, cfg, (size, size), stride),
    )


class FaceDataset(Dataset):
    """Crop -> (augment) -> normalize -> targets.

    With augmentation on, item ``idx`` at epoch ``e`` draws from
    ``default_rng([seed, e, idx])`` so results do not depend on worker layout.
    """

    def __init__(
        self,
        samples: list[FaceSample],
        schema: AnnotationSchema,
        augment_cfg: AugmentConfig | None = None,
        raster_cfg: RasterizerConfig = RasterizerConfig(),
        margin: float = 0.0,
    ):
        self.samples = samples
        self.schema = schema
        self.augment_cfg = augment_cfg
        self.raster_cfg = raster_cfg
        self.margin = margin
        self.epoch = 0
        self._crops: dict[int, tuple] = {}

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def crop(self, idx: int):
        if idx not in self._crops:
            self._crops[idx] = crop_and_resize(self.samples[idx], CROP_SIZE, self.margin)
        return self._crops[idx]

    def __getitem__(self, idx: int) -> dict:
        img, pts, m = self.crop(idx)
        if self.augment_cfg is not None:
            rng = np.random.default_rng([self.augment_cfg.seed, self.epoch, idx])
            img, pts, _ = augment(img, pts, self.augment_cfg, rng, self.schema)
        bnd, lmk = make_targets(pts, self.schema, self.raster_cfg)
        return {
            "image": normalize_image(img),
            "boundary": torch.from_numpy(bnd.data.astype(np.float32)),
            "landmark": torch.from_numpy(lmk.data.astype(np.float32)),
            "landmarks": torch.from_numpy(pts),
            "index": idx,
        }
