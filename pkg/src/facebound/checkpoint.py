"""Checkpoint container: named parameter tensors plus a manifest.

The file is a ``torch.save`` dict with keys ``manifest``, ``scbe`` and
``balt`` (either state dict may be absent).  ``load_checkpoint`` rebuilds the
models from the manifest and refuses files whose manifest disagrees with the
caller's expectations.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import torch

from . import __version__
from .balt_net import BaltModel, FusionConfig, balt_config_dict, build_balt
from .scbe_net import ScbeConfig, ScbeModel, StemConfig, build_scbe, scbe_config_dict

FORMAT = "facebound-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Missing, malformed or incompatible checkpoint."""


def make_manifest(schema_name: str, scbe: ScbeModel | None, balt: BaltModel | None, extra: dict | None = None) -> dict:
    m: dict[str, Any] = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "code_version": __version__,
        "schema": schema_name,
    }
    if scbe is not None:
        m["scbe"] = scbe_config_dict(scbe)
        m["K"] = scbe.cfg.num_boundary_channels
        m["N"] = scbe.cfg.num_stacks
        m["s"] = scbe.cfg.feature_scales
    if balt is not None:
        m["balt"] = balt_config_dict(balt)
        m["K"] = balt.num_boundaries
        m["L"] = balt.num_landmarks
        m["fusion"] = m["balt"]["fusion"]
    if extra:
        m["extra"] = extra
    return m


def save_checkpoint(path: str | Path, schema_name: str, scbe: ScbeModel | None = None,
                    balt: BaltModel | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"manifest": make_manifest(schema_name, scbe, balt, extra)}
    if scbe is not None:
        payload["scbe"] = {k: v.detach().cpu().clone() for k, v in scbe.state_dict().items()}
    if balt is not None:
        payload["balt"] = {k: v.detach().cpu().clone() for k, v in balt.state_dict().items()}
    torch.save(payload, path)
    return path


def read_manifest(path: str | Path) -> dict:
    return _read(path)["manifest"]


def _read(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("manifest", {}).get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    return payload


def load_checkpoint(path: str | Path, expect: dict | None = None):
    """Returns ``(manifest, scbe_or_None, balt_or_None)``.

    ``expect`` maps manifest keys (``schema``, ``K``, ``N``, ``s``, ``L``,
    ``fusion``) to required values; any disagreement raises CheckpointError.
    """
    payload = _read(path)
    manifest = payload["manifest"]
    for key, want in (expect or {}).items():
        if want is None:
            continue
        have = manifest.get(key)
        if have != want:
            raise CheckpointError(f"{path}: manifest {key}={have!r} does not match expected {want!r}")

    scbe = balt = None
    if "scbe" in payload:
        c = manifest["scbe"]
        stem = StemConfig(**{**c["stem"], "pretrained": False})
        scbe = build_scbe(stem, ScbeConfig(**c["scbe"]), stem_width=c.get("stem_width"))
        scbe.stem_cfg = StemConfig(**c["stem"])
        _load_state(scbe, payload["scbe"], path, "scbe")
    if "balt" in payload:
        c = manifest["balt"]
        balt = build_balt(c["num_boundaries"], c["num_landmarks"], c["feature_channels"],
                          FusionConfig(**c["fusion"]), base_width=c["base_width"])
        _load_state(balt, payload["balt"], path, "balt")
    return manifest, scbe, balt


def _load_state(model: torch.nn.Module, state: dict, path, name: str) -> None:
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: {name} parameters do not match the manifest config: {exc}") from None
