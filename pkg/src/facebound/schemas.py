"""Landmark annotation schemas.

A schema names a landmark layout (98/68/29/19 points), groups its indices into
15 facial boundary curves and carries the horizontal-flip permutation.  The
tables live in ``data/*.schema`` text files; see ``docs/formats.md`` for the
record layout.

Coordinates are ``(x, y)`` with x to the right, y downward and the origin at
the centre of the top-left pixel.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

SCHEMA_NAMES = ("wflw98", "ibug68", "cofw29", "aflw19")

CURVE_NAMES = (
    "cheek",
    "left_eyebrow_upper",
    "left_eyebrow_lower",
    "right_eyebrow_upper",
    "right_eyebrow_lower",
    "nose_bridge",
    "nose_boundary",
    "left_eye_upper",
    "left_eye_lower",
    "right_eye_upper",
    "right_eye_lower",
    "upper_lip_upper",
    "upper_lip_lower",
    "lower_lip_upper",
    "lower_lip_lower",
)


class SchemaError(ValueError):
    """Unknown schema name or malformed schema table."""


@dataclass(frozen=True)
class BoundarySpec:
    curve_names: tuple[str, ...]

    @property
    def num_channels(self) -> int:
        # last channel is the union of all curves
        return len(self.curve_names) + 1

    @property
    def union_channel(self) -> int:
        return len(self.curve_names)


@dataclass(frozen=True)
class AnnotationSchema:
    name: str
    num_landmarks: int
    flip_permutation: tuple[int, ...]
    boundary_membership: tuple[tuple[int, ...], ...]
    curve_names: tuple[str, ...]
    norm_groups: dict[str, tuple[tuple[int, ...], tuple[int, ...]]] = field(
        default_factory=dict, compare=False
    )

    @property
    def boundary(self) -> BoundarySpec:
        return BoundarySpec(self.curve_names)

    @property
    def num_boundaries(self) -> int:
        """Channel count K of the boundary heatmap stack (curves + union)."""
        return self.boundary.num_channels

    def validate(self) -> None:
        L = self.num_landmarks
        perm = np.asarray(self.flip_permutation)
        if perm.shape != (L,) or sorted(perm.tolist()) != list(range(L)):
            raise SchemaError(f"{self.name}: flip permutation is not a permutation of [0, {L})")
        if not np.array_equal(perm[perm], np.arange(L)):
            raise SchemaError(f"{self.name}: flip permutation is not an involution")
        if len(self.boundary_membership) != len(self.curve_names):
            raise SchemaError(f"{self.name}: curve name/index count mismatch")
        for cname, idx in zip(self.curve_names, self.boundary_membership):
            if not idx:
                raise SchemaError(f"{self.name}: curve {cname!r} is empty")
            if any(i < 0 or i >= L for i in idx):
                raise SchemaError(f"{self.name}: curve {cname!r} has an index outside [0, {L})")
            if len(set(idx)) != len(idx):
                raise SchemaError(f"{self.name}: curve {cname!r} repeats an index")
        for kind, groups in self.norm_groups.items():
            for g in groups:
                if not g or any(i < 0 or i >= L for i in g):
                    raise SchemaError(f"{self.name}: bad index group for {kind}")


def parse_schema(text: str, source: str = "<string>") -> AnnotationSchema:
    name = None
    num = None
    curves: list[tuple[str, tuple[int, ...]]] = []
    pairs: list[tuple[int, int]] = []
    norms: dict[str, tuple[tuple[int, ...], tuple[int, ...]]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, *rest = line.split()
        try:
            if key == "schema":
                (name,) = rest
            elif key == "landmarks":
                (num,) = map(int, rest)
            elif key == "curve":
                curves.append((rest[0], tuple(int(v) for v in rest[1:])))
            elif key == "flip":
                a, b = map(int, rest)
                pairs.append((a, b))
            elif key == "norm":
                kind, left, right = rest
                norms[kind] = (
                    tuple(int(v) for v in left.split(",")),
                    tuple(int(v) for v in right.split(",")),
                )
            else:
                raise SchemaError(f"unknown record {key!r}")
        except (ValueError, IndexError) as exc:
            raise SchemaError(f"{source}:{lineno}: malformed line {raw!r} ({exc})") from None
    if name is None or num is None:
        raise SchemaError(f"{source}: missing 'schema' or 'landmarks' record")

    perm = list(range(num))
    for a, b in pairs:
        if not (0 <= a < num and 0 <= b < num):
            raise SchemaError(f"{source}: flip pair ({a}, {b}) out of range")
        perm[a], perm[b] = b, a

    schema = AnnotationSchema(
        name=name,
        num_landmarks=num,
        flip_permutation=tuple(perm),
        boundary_membership=tuple(idx for _, idx in curves),
        curve_names=tuple(c for c, _ in curves),
        norm_groups=norms,
    )
    schema.validate()
    return schema


def load_schema_file(path: str | Path) -> AnnotationSchema:
    path = Path(path)
    return parse_schema(path.read_text(encoding="utf-8"), source=str(path))


@functools.lru_cache(maxsize=None)
def get_schema(name: str) -> AnnotationSchema:
    """Return the shipped schema called ``name``.

    Raises SchemaError for names outside ``SCHEMA_NAMES``.
    """
    if name not in SCHEMA_NAMES:
        raise SchemaError(f"unknown schema {name!r}; expected one of {', '.join(SCHEMA_NAMES)}")
    text = resources.files("facebound.data").joinpath(f"{name}.schema").read_text(encoding="utf-8")
    schema = parse_schema(text, source=f"{name}.schema")
    if schema.curve_names != CURVE_NAMES:
        raise SchemaError(f"{name}: curve table does not list the 15 standard curves in order")
    return schema


def flip_landmarks(landmarks: np.ndarray, image_width: int, schema: AnnotationSchema) -> np.ndarray:
    """Mirror an ``(L, 2)`` landmark array horizontally and reorder by the flip permutation."""
    if image_width <= 0:
        raise ValueError(f"image width must be positive, got {image_width}")
    pts = np.asarray(landmarks, dtype=np.float64)
    if pts.shape != (schema.num_landmarks, 2):
        raise ValueError(f"expected {(schema.num_landmarks, 2)} landmarks, got {pts.shape}")
    out = pts.copy()
    out[:, 0] = (image_width - 1) - out[:, 0]
    return out[list(schema.flip_permutation)]
