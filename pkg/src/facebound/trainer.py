"""Two-phase training and evaluation.

Phase ``scbe`` fits the boundary network with intermediate supervision.
Phase ``balt`` freezes it (parameters and batch-norm statistics) and fits the
landmark transform network on landmark-heatmap MSE, feeding it the frozen
network's final boundary prediction and feature pyramid.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from .balt_net import BaltModel
from .checkpoint import save_checkpoint
from .datapipe import FaceDataset, FaceSample, crop_and_resize, invert_affine, apply_affine, normalize_image
from .heatmaps import decode_heatmaps
from .metrics import EvalReport, make_report, nme, normalization_factor
from .schemas import AnnotationSchema
from .scbe_net import ScbeModel, scbe_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class MissingCheckpointError(TrainingError):
    pass


@dataclass
class TrainConfig:
    phase: Literal["scbe", "balt"] = "scbe"
    lr: float = 1e-4
    weight_decay: float = 0.0
    epochs: int = 140
    lr_drops: tuple[int, ...] = (80, 120)
    lr_gamma: float = 0.1
    batch_size: int = 8
    seed: int = 0
    max_steps: int | None = None
    checkpoint_every: int = 10
    num_workers: int = 0
    joint_finetune: bool = False

    def __post_init__(self):
        if self.phase not in ("scbe", "balt"):
            raise ValueError(f"phase must be 'scbe' or 'balt', got {self.phase!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        self.lr_drops = tuple(int(e) for e in self.lr_drops)
        if list(self.lr_drops) != sorted(self.lr_drops) or any(e >= self.epochs for e in self.lr_drops):
            raise ValueError("lr_drops must be sorted and below epochs")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: multiply by ``lr_gamma`` at every drop epoch reached."""
    return cfg.lr * cfg.lr_gamma ** sum(epoch >= e for e in cfg.lr_drops)


@dataclass
class TrainResult:
    epoch_loss: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    checkpoint: Path | None = None


def freeze(model: torch.nn.Module) -> None:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)


def _phase_step(scbe, balt, batch, cfg: TrainConfig):
    image = batch["image"]
    if cfg.phase == "scbe":
        return scbe_loss(scbe(image), batch["boundary"])
    if cfg.joint_finetune:
        out = scbe(image)
        pred = balt(out.boundary_preds[-1], out.features)
        return F.mse_loss(pred, batch["landmark"]) + scbe_loss(out, batch["boundary"])
    with torch.no_grad():
        out = scbe(image)
    pred = balt(out.boundary_preds[-1], out.features)
    return F.mse_loss(pred, batch["landmark"])


def train_phase(
    scbe: ScbeModel | None,
    balt: BaltModel | None,
    dataset: FaceDataset,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Run one training phase in place on the given models.

    With ``out_dir`` set, writes ``<phase>_loss.csv`` and ``<phase>_last.pt``
    (plus ``<phase>_epochNNN.pt`` every ``checkpoint_every`` epochs).
    """
    if scbe is None:
        raise MissingCheckpointError("both phases need a boundary network; phase 'balt' needs the phase-A checkpoint")
    if cfg.phase == "balt" and balt is None:
        raise TrainingError("phase 'balt' needs a landmark transform network")
    torch.manual_seed(cfg.seed)

    if cfg.phase == "scbe":
        scbe.train()
        params = [p for p in scbe.parameters() if p.requires_grad]
    else:
        if cfg.joint_finetune:
            scbe.train()
            params = [*scbe.parameters(), *balt.parameters()]
        else:
            freeze(scbe)
            params = list(balt.parameters())
        balt.train()
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    out_dir = Path(out_dir) if out_dir is not None else None
    result = TrainResult()
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        dataset.set_epoch(epoch)
        gen = torch.Generator().manual_seed(cfg.seed * 100003 + epoch)
        loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, generator=gen, num_workers=cfg.num_workers)
        losses = []
        for batch in loader:
            loss = _phase_step(scbe, balt, batch, cfg)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} in phase {cfg.phase} at epoch {epoch}, step {step}, lr {lr:g}; "
                    f"batch indices {batch['index'].tolist()}"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            result.step_loss.append(loss.item())
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        result.epoch_loss.append(float(np.mean(losses)) if losses else math.nan)
        result.lrs.append(lr)
        log.info("phase %s epoch %d loss %.6g lr %g", cfg.phase, epoch, result.epoch_loss[-1], lr)
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _save(out_dir / f"{cfg.phase}_epoch{epoch + 1:03d}.pt", scbe, balt, dataset.schema, cfg)
        if done:
            break

    if out_dir is not None:
        write_loss_csv(out_dir / f"{cfg.phase}_loss.csv", result)
        result.checkpoint = _save(out_dir / f"{cfg.phase}_last.pt", scbe, balt, dataset.schema, cfg)
    return result


def _save(path: Path, scbe, balt, schema: AnnotationSchema, cfg: TrainConfig) -> Path:
    return save_checkpoint(path, schema.name, scbe=scbe, balt=balt if cfg.phase == "balt" else None,
                           extra={"train": asdict(cfg)})


def write_loss_csv(path: str | Path, result: TrainResult) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "lr"])
        for e, (loss, lr) in enumerate(zip(result.epoch_loss, result.lrs)):
            w.writerow([e, f"{loss:.8g}", f"{lr:.8g}"])


# -- inference / evaluation ---------------------------------------------------


@torch.no_grad()
def predict_heatmaps(scbe: ScbeModel, balt: BaltModel, images: torch.Tensor):
    scbe.eval()
    balt.eval()
    out = scbe(images)
    return balt(out.boundary_preds[-1], out.features), out


def predict_landmarks(scbe: ScbeModel, balt: BaltModel, samples: Sequence[FaceSample],
                      batch_size: int = 8, margin: float = 0.0) -> list[np.ndarray]:
    """Crop, run both networks, decode and map back to original image coordinates."""
    preds = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        crops = [crop_and_resize(s, margin=margin) for s in chunk]
        images = torch.stack([normalize_image(c[0]) for c in crops])
        heat, _ = predict_heatmaps(scbe, balt, images)
        coords, _ = decode_heatmaps(heat.double().numpy())
        for (_, _, m), xy in zip(crops, coords):
            preds.append(apply_affine(invert_affine(m), xy))
    return preds


def report_from_predictions(preds: Sequence[np.ndarray], samples: Sequence[FaceSample], schema: AnnotationSchema,
                            norm: str, threshold: float, resolution: int = 1000) -> EvalReport:
    errors = []
    for p, s in zip(preds, samples):
        d = normalization_factor(norm, s.landmarks, schema, bbox=s.bbox)
        errors.append(nme(p, s.landmarks, d))
    tags = [s.subset for s in samples]
    return make_report(errors, threshold, norm, subset_tags=tags if any(tags) else None,
                       resolution=resolution, image_ids=[s.image_path.name for s in samples])


def evaluate(scbe: ScbeModel, balt: BaltModel, samples: Sequence[FaceSample], schema: AnnotationSchema,
             norm: str = "inter_ocular", threshold: float = 0.1, batch_size: int = 8,
             resolution: int = 1000) -> EvalReport:
    if balt.num_landmarks != schema.num_landmarks or scbe.cfg.num_boundary_channels != schema.num_boundaries:
        raise ValueError(
            f"model expects L={balt.num_landmarks}, K={scbe.cfg.num_boundary_channels} but schema {schema.name} "
            f"has L={schema.num_landmarks}, K={schema.num_boundaries}"
        )
    preds = predict_landmarks(scbe, balt, samples, batch_size)
    return report_from_predictions(preds, samples, schema, norm, threshold, resolution)
