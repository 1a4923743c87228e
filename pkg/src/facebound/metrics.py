"""Normalized mean error, failure rate and CED/AUC."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .schemas import AnnotationSchema

NORM_KINDS = ("inter_ocular", "inter_pupil", "face_size")


def normalization_factor(kind: str, gt: np.ndarray, schema: AnnotationSchema, bbox=None) -> float:
    """Distance ``d`` used to normalize errors for one face.

    ``inter_ocular`` and ``inter_pupil`` take the distance between the means of
    the two index groups shipped with the schema; ``face_size`` is
    ``sqrt(w * h)`` of the annotation bbox.
    """
    if kind == "face_size":
        if bbox is None:
            raise ValueError("face_size normalization needs a bbox")
        _, _, w, h = bbox
        d = float(np.sqrt(w * h))
    elif kind in ("inter_ocular", "inter_pupil"):
        try:
            left, right = schema.norm_groups[kind]
        except KeyError:
            raise ValueError(f"schema {schema.name} has no {kind} index groups") from None
        gt = np.asarray(gt, dtype=np.float64)
        d = float(np.linalg.norm(gt[list(left)].mean(axis=0) - gt[list(right)].mean(axis=0)))
    else:
        raise ValueError(f"unknown normalization {kind!r}; expected one of {NORM_KINDS}")
    if not d > 0:
        raise ValueError(f"normalization factor must be positive, got {d}")
    return d


def nme(pred: np.ndarray, gt: np.ndarray, d: float) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"point count mismatch: {pred.shape} vs {gt.shape}")
    if not d > 0:
        raise ValueError(f"normalization factor must be positive, got {d}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean() / d)


def failure_rate(nmes: Sequence[float], threshold: float) -> float:
    """Fraction of images whose NME is strictly above ``threshold``."""
    e = np.asarray(nmes, dtype=np.float64)
    if e.size == 0:
        raise ValueError("failure_rate of an empty list")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return float(np.mean(e > threshold))


def ced_auc(nmes: Sequence[float], tau_max: float, resolution: int = 1000) -> tuple[np.ndarray, float]:
    """CED sampled on ``linspace(0, tau_max, resolution)`` and its normalized trapezoid area.

    Returns ``(ced, auc)`` with ``ced`` of shape ``(resolution, 2)`` holding
    ``(error, fraction <= error)`` rows.
    """
    e = np.sort(np.asarray(nmes, dtype=np.float64))
    if e.size == 0:
        raise ValueError("ced_auc of an empty list")
    if tau_max <= 0 or resolution < 2:
        raise ValueError("need tau_max > 0 and resolution >= 2")
    grid = np.linspace(0.0, tau_max, resolution)
    frac = np.searchsorted(e, grid, side="right") / e.size
    # normalized area; clip float round-off so a perfect predictor reports exactly 1
    auc = float(np.clip(np.trapezoid(frac, grid) / tau_max, 0.0, 1.0))
    return np.stack([grid, frac], axis=1), auc


@dataclass
class SubsetRow:
    subset: str
    count: int
    nme: float
    fr: float
    auc: float


@dataclass
class EvalReport:
    per_image_nme: list[float]
    nme_mean: float
    fr: float
    auc: float
    threshold: float
    norm: str
    ced: np.ndarray = field(repr=False, default=None)
    subsets: list[SubsetRow] = field(default_factory=list)
    image_ids: list[str] = field(default_factory=list)

    def rows(self) -> list[SubsetRow]:
        full = SubsetRow("full", len(self.per_image_nme), self.nme_mean, self.fr, self.auc)
        return [full, *self.subsets]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ced"] = None if self.ced is None else self.ced.tolist()
        return out

    def write_tsv(self, path: str | Path) -> None:
        lines = [f"# norm={self.norm}\tthreshold={self.threshold:g}", "subset\tcount\tnme\tfr\tauc"]
        for r in self.rows():
            lines.append(f"{r.subset}\t{r.count}\t{r.nme:.6f}\t{r.fr:.6f}\t{r.auc:.6f}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")


def make_report(
    per_image_nme: Sequence[float],
    threshold: float,
    norm: str,
    subset_tags: Sequence[Sequence[str]] | None = None,
    resolution: int = 1000,
    image_ids: Sequence[str] | None = None,
) -> EvalReport:
    nmes = [float(v) for v in per_image_nme]
    ced, auc = ced_auc(nmes, threshold, resolution)
    report = EvalReport(
        per_image_nme=nmes,
        nme_mean=float(np.mean(nmes)),
        fr=failure_rate(nmes, threshold),
        auc=auc,
        threshold=threshold,
        norm=norm,
        ced=ced,
        image_ids=list(image_ids or []),
    )
    if subset_tags:
        names = sorted({t for tags in subset_tags for t in tags})
        arr = np.asarray(nmes)
        for name in names:
            sel = arr[[name in tags for tags in subset_tags]]
            _, sub_auc = ced_auc(sel, threshold, resolution)
            report.subsets.append(
                SubsetRow(name, int(sel.size), float(sel.mean()), failure_rate(sel, threshold), sub_auc)
            )
    return report
