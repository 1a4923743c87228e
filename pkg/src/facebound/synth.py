"""Parametric synthetic faces with exact landmark annotations.

Faces are drawn from a small shape model (jaw ellipse, brow arcs, eye lids,
nose, lips) expressed in face units: half face width = 1, origin between the
eyes, y downward.  Landmarks for each schema are sampled from the same curves
the renderer fills, so annotations are exact by construction.  Only the
image-left half and the midline are specified per schema; the right half is
the mirror image under the schema's flip permutation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .datapipe import FaceSample, write_annotations
from .schemas import AnnotationSchema, get_schema


@dataclass
class FaceShape:
    eye_open: float = 1.0
    mouth_open: float = 0.03
    brow_lift: float = 0.0
    jaw_width: float = 0.95
    smile: float = 0.0


def jaw(t, shape: FaceShape):
    d = 0.2
    th = math.pi + d - t * (math.pi + 2 * d)
    return (shape.jaw_width * math.cos(th), -0.05 + 1.15 * math.sin(th))


def brow_top(t, shape: FaceShape):
    return (-0.8 + 0.6 * t, -0.48 - shape.brow_lift - 0.1 * math.sin(math.pi * t) + 0.04 * t)


def brow_bottom(t, shape: FaceShape):
    x, y = brow_top(t, shape)
    return (x, y + 0.07)


def brow_mid(t, shape: FaceShape):
    x, y = brow_top(t, shape)
    return (x, y + 0.035)


EYE_C, EYE_HW = (-0.42, -0.22), 0.17


def eye_upper(t, shape: FaceShape):
    cx, cy = EYE_C
    return (cx - EYE_HW * math.cos(math.pi * t), cy - 0.085 * shape.eye_open * math.sin(math.pi * t))


def eye_lower(t, shape: FaceShape):
    cx, cy = EYE_C
    return (cx - EYE_HW * math.cos(math.pi * t), cy + 0.065 * shape.eye_open * math.sin(math.pi * t))


def bridge(t, shape: FaceShape):
    return (0.0, -0.25 + 0.43 * t)


def nose_base(t, shape: FaceShape):
    return (-0.2 + 0.4 * t, 0.25 + 0.06 * math.sin(math.pi * t))


MOUTH_Y, MOUTH_HW, MOUTH_IHW = 0.58, 0.36, 0.26


def _corner_lift(t, shape):
    return -shape.smile * (2 * t - 1) ** 2


def outer_upper(t, shape: FaceShape):
    return (-MOUTH_HW + 2 * MOUTH_HW * t, MOUTH_Y - 0.11 * math.sin(math.pi * t) + _corner_lift(t, shape))


def outer_lower(t, shape: FaceShape):
    return (-MOUTH_HW + 2 * MOUTH_HW * t, MOUTH_Y + (0.13 + shape.mouth_open) * math.sin(math.pi * t) + _corner_lift(t, shape))


def inner_upper(t, shape: FaceShape):
    return (-MOUTH_IHW + 2 * MOUTH_IHW * t, MOUTH_Y - 0.025 * math.sin(math.pi * t) + _corner_lift(t, shape))


def inner_lower(t, shape: FaceShape):
    return (-MOUTH_IHW + 2 * MOUTH_IHW * t, MOUTH_Y + shape.mouth_open * math.sin(math.pi * t) + _corner_lift(t, shape))


def _wflw98(shape):
    pts = {i: jaw(i / 32, shape) for i in range(17)}
    pts.update({33 + k: brow_top(k / 4, shape) for k in range(5)})
    pts.update({38 + k: brow_bottom(0.8 - 0.2 * k, shape) for k in range(4)})
    pts.update({51 + k: bridge(k / 3, shape) for k in range(4)})
    pts.update({55 + k: nose_base(k / 4, shape) for k in range(3)})
    pts.update({60 + k: eye_upper(k / 4, shape) for k in range(5)})
    pts.update({65 + k: eye_lower(0.75 - 0.25 * k, shape) for k in range(3)})
    pts.update({76 + k: outer_upper(k / 6, shape) for k in range(4)})
    pts.update({85: outer_lower(3 / 6, shape), 86: outer_lower(2 / 6, shape), 87: outer_lower(1 / 6, shape)})
    pts.update({88 + k: inner_upper(k / 4, shape) for k in range(3)})
    pts.update({94: inner_lower(0.5, shape), 95: inner_lower(0.25, shape)})
    pts[96] = EYE_C
    return pts


def _ibug68(shape):
    pts = {i: jaw(i / 16, shape) for i in range(9)}
    pts.update({17 + k: brow_top(k / 4, shape) for k in range(5)})
    pts.update({27 + k: bridge(k / 3, shape) for k in range(4)})
    pts.update({31 + k: nose_base(k / 4, shape) for k in range(3)})
    pts.update({36 + k: eye_upper(k / 3, shape) for k in range(4)})
    pts.update({40: eye_lower(2 / 3, shape), 41: eye_lower(1 / 3, shape)})
    pts.update({48 + k: outer_upper(k / 6, shape) for k in range(4)})
    pts.update({57: outer_lower(3 / 6, shape), 58: outer_lower(2 / 6, shape), 59: outer_lower(1 / 6, shape)})
    pts.update({60 + k: inner_upper(k / 4, shape) for k in range(3)})
    pts.update({66: inner_lower(0.5, shape), 67: inner_lower(0.25, shape)})
    return pts


def _cofw29(shape):
    return {
        0: brow_mid(0, shape), 2: brow_mid(1, shape), 4: brow_top(0.5, shape), 5: brow_bottom(0.5, shape),
        8: eye_upper(0, shape), 10: eye_upper(1, shape), 12: eye_upper(0.5, shape), 13: eye_lower(0.5, shape),
        16: EYE_C, 18: nose_base(0, shape), 20: bridge(1, shape), 21: nose_base(0.5, shape),
        22: outer_upper(0, shape), 24: outer_upper(0.5, shape), 25: inner_upper(0.5, shape),
        26: inner_lower(0.5, shape), 27: outer_lower(0.5, shape), 28: jaw(0.5, shape),
    }


def _aflw19(shape):
    return {
        0: brow_mid(0, shape), 1: brow_mid(0.5, shape), 2: brow_mid(1, shape),
        6: eye_upper(0, shape), 7: EYE_C, 8: eye_upper(1, shape),
        12: nose_base(0, shape), 13: bridge(1, shape),
        15: outer_upper(0, shape), 16: (0.0, MOUTH_Y + shape.mouth_open / 2), 18: jaw(0.5, shape),
    }


_LEFT_HALF = {"wflw98": _wflw98, "ibug68": _ibug68, "cofw29": _cofw29, "aflw19": _aflw19}


def face_landmarks(schema: AnnotationSchema, shape: FaceShape | None = None) -> np.ndarray:
    """Landmarks of a frontal, exactly mirror-symmetric face in face units."""
    shape = shape or FaceShape()
    half = _LEFT_HALF[schema.name](shape)
    perm = schema.flip_permutation
    pts = np.full((schema.num_landmarks, 2), np.nan)
    for i, (x, y) in half.items():
        j = perm[i]
        if j == i:
            pts[i] = (0.0, y)
        else:
            pts[i] = (x, y)
            pts[j] = (-x, y)
    if np.isnan(pts).any():
        raise RuntimeError(f"synthetic layout for {schema.name} leaves landmarks unassigned")
    return pts


def _mirror_curve(f, n, shape, reverse=False):
    ts = np.linspace(0, 1, n)
    pts = np.array([f(t, shape) for t in ts])
    right = pts * [-1, 1]
    return pts, (right[::-1] if reverse else right)


def face_polygons(shape: FaceShape, n: int = 24) -> dict[str, list[np.ndarray]]:
    """Dense outlines (face units) of the rendered face parts."""
    ts = np.linspace(0, 1, 2 * n)
    jaw_pts = np.array([jaw(t, shape) for t in ts])
    top = np.array([(shape.jaw_width * math.cos(a), -0.3 - 0.95 * math.sin(a)) for a in np.linspace(0, math.pi, n)])
    head = np.concatenate([jaw_pts, top])
    polys: dict[str, list[np.ndarray]] = {"head": [head], "brow": [], "eye": [], "iris": [], "lips": [], "mouth": []}
    bt, bt_r = _mirror_curve(brow_top, n, shape)
    bb, bb_r = _mirror_curve(brow_bottom, n, shape)
    polys["brow"] = [np.concatenate([bt, bb[::-1]]), np.concatenate([bt_r, bb_r[::-1]])]
    eu, eu_r = _mirror_curve(eye_upper, n, shape)
    el, el_r = _mirror_curve(eye_lower, n, shape)
    polys["eye"] = [np.concatenate([eu, el[::-1]]), np.concatenate([eu_r, el_r[::-1]])]
    ou = np.array([outer_upper(t, shape) for t in np.linspace(0, 1, n)])
    ol = np.array([outer_lower(t, shape) for t in np.linspace(0, 1, n)])
    iu = np.array([inner_upper(t, shape) for t in np.linspace(0, 1, n)])
    il = np.array([inner_lower(t, shape) for t in np.linspace(0, 1, n)])
    polys["lips"] = [np.concatenate([ou, ol[::-1]])]
    polys["mouth"] = [np.concatenate([iu, il[::-1]])]
    polys["nose"] = [np.array([bridge(t, shape) for t in np.linspace(0, 1, n)]),
                     np.array([nose_base(t, shape) for t in np.linspace(0, 1, n)])]
    return polys


@dataclass
class Placement:
    center: tuple[float, float]
    scale: float  # pixels per face unit
    angle: float  # degrees, counter-clockwise on screen

    def matrix(self) -> np.ndarray:
        a = math.radians(self.angle)
        c, s = self.scale * math.cos(a), self.scale * math.sin(a)
        return np.array([[c, s, self.center[0]], [-s, c, self.center[1]]])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        m = self.matrix()
        return np.asarray(pts) @ m[:, :2].T + m[:, 2]


def _poly(img, pts, color, closed=True, thickness=None):
    p = np.round(np.asarray(pts) * 16).astype(np.int32).reshape(-1, 1, 2)
    if thickness is None:
        cv2.fillPoly(img, [p], color, lineType=cv2.LINE_AA, shift=4)
    else:
        cv2.polylines(img, [p], closed, color, thickness, lineType=cv2.LINE_AA, shift=4)


def render_face(size: int, shape: FaceShape, place: Placement, rng: np.random.Generator,
                occlude: bool = False, blur: float = 0.0, light: float = 1.0):
    c0 = rng.uniform(40, 200, 3)
    c1 = rng.uniform(40, 200, 3)
    ramp = np.linspace(0, 1, size)[:, None, None]
    img = (c0 * (1 - ramp) + c1 * ramp) * np.ones((size, size, 3))
    img += rng.normal(0, 6, img.shape)
    img = np.clip(img, 0, 255).astype(np.uint8)
    img = np.ascontiguousarray(img)

    skin = tuple(float(v) for v in rng.uniform([150, 110, 90], [235, 190, 160]))
    hair = tuple(float(v) for v in rng.uniform(10, 70, 3))
    polys = face_polygons(shape)
    tf = place.apply
    _poly(img, tf(polys["head"][0]), skin)
    for p in polys["brow"]:
        _poly(img, tf(p), hair)
    for p in polys["eye"]:
        _poly(img, tf(p), (245, 245, 240))
        _poly(img, tf(p), (40, 30, 30), thickness=1)
    iris_r = max(1, int(round(0.06 * place.scale * min(1.0, shape.eye_open))))
    for cx in (EYE_C[0], -EYE_C[0]):
        x, y = tf(np.array([[cx, EYE_C[1]]]))[0]
        cv2.circle(img, (int(round(x * 16)), int(round(y * 16))), iris_r * 16, (60, 40, 30), -1, cv2.LINE_AA, 4)
    _poly(img, tf(polys["nose"][0]), (120, 80, 70), closed=False, thickness=2)
    _poly(img, tf(polys["nose"][1]), (120, 80, 70), closed=False, thickness=2)
    _poly(img, tf(polys["lips"][0]), (170, 60, 70))
    _poly(img, tf(polys["mouth"][0]), (60, 20, 25))

    if occlude:
        w = int(rng.uniform(0.25, 0.45) * size)
        h = int(rng.uniform(0.15, 0.3) * size)
        cx, cy = tf(np.array([[rng.uniform(-0.6, 0.6), rng.uniform(-0.3, 0.8)]]))[0]
        x0, y0 = int(cx - w / 2), int(cy - h / 2)
        cv2.rectangle(img, (x0, y0), (x0 + w, y0 + h), tuple(float(v) for v in rng.uniform(0, 255, 3)), -1)
    if light != 1.0:
        img = np.clip(img.astype(np.float32) * light, 0, 255).astype(np.uint8)
    if blur > 0:
        img = cv2.GaussianBlur(img, (0, 0), blur)
    return img


def landmark_bbox(pts: np.ndarray, pad: float = 0.15) -> tuple[float, float, float, float]:
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    w, h = hi - lo
    side = max(w, h) * (1 + pad)
    cx, cy = (lo + hi) / 2
    return (float(cx - side / 2), float(cy - side / 2), float(side), float(side))


@dataclass
class SynthConfig:
    size: int = 256
    max_roll: float = 25.0
    occlusion_prob: float = 0.2
    blur_prob: float = 0.15
    light_prob: float = 0.15
    scale_range: tuple[float, float] = (70.0, 90.0)


def synth_face(schema: AnnotationSchema, rng: np.random.Generator, cfg: SynthConfig = SynthConfig()):
    """One random face: ``(image, landmarks, bbox, tags)``."""
    shape = FaceShape(
        eye_open=float(rng.uniform(0.4, 1.3)),
        mouth_open=float(rng.choice([0.0, rng.uniform(0.0, 0.04), rng.uniform(0.05, 0.15)])),
        brow_lift=float(rng.uniform(-0.03, 0.08)),
        jaw_width=float(rng.uniform(0.85, 1.0)),
        smile=float(rng.uniform(-0.02, 0.06)),
    )
    size = cfg.size
    place = Placement(
        center=(size / 2 + rng.uniform(-0.05, 0.05) * size, size / 2 + rng.uniform(-0.08, 0.02) * size),
        scale=float(rng.uniform(*cfg.scale_range)) * size / 256,
        angle=float(rng.uniform(-cfg.max_roll, cfg.max_roll)),
    )
    tags = []
    if abs(place.angle) > 15:
        tags.append("pose")
    if shape.mouth_open > 0.05 or shape.smile > 0.04:
        tags.append("expression")
    occlude = bool(rng.random() < cfg.occlusion_prob)
    if occlude:
        tags.append("occlusion")
    light = 1.0
    if rng.random() < cfg.light_prob:
        light = float(rng.choice([rng.uniform(0.35, 0.6), rng.uniform(1.4, 1.8)]))
        tags.append("illumination")
    blur = 0.0
    if rng.random() < cfg.blur_prob:
        blur = float(rng.uniform(1.5, 3.0))
        tags.append("blur")
    img = render_face(size, shape, place, rng, occlude=occlude, blur=blur, light=light)
    pts = place.apply(face_landmarks(schema, shape))
    return img, pts, landmark_bbox(pts), tuple(tags)


def frontal_face(schema: AnnotationSchema, size: int = 256, scale: float = 80.0) -> np.ndarray:
    """Landmarks of the neutral symmetric face centred on the image midline."""
    c = (size - 1) / 2.0
    return Placement((c, c), scale, 0.0).apply(face_landmarks(schema))


def synth_dataset(out_dir: str | Path, num: int, schema_name: str, seed: int = 0, cfg: SynthConfig = SynthConfig()) -> Path:
    """Render ``num`` faces into ``out_dir/images`` and write ``out_dir/annotations.txt``."""
    if num < 1:
        raise ValueError("num must be >= 1")
    schema = get_schema(schema_name)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(num):
        img, pts, bbox, tags = synth_face(schema, rng, cfg)
        path = out_dir / "images" / f"face_{k:05d}.png"
        if not cv2.imwrite(str(path), cv2.cvtColor(img, cv2.COLOR_RGB2BGR)):
            raise OSError(f"could not write {path}")
        samples.append(FaceSample(path, bbox, pts, tags))
    ann = out_dir / "annotations.txt"
    write_annotations(ann, samples)
    return ann
