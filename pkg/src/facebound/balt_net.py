"""Boundary-aware landmark transform network.

A UNet-style encoder/decoder maps the K boundary heatmaps to L landmark
heatmaps at the same 64x64 resolution.  Boundary features from the boundary
network are injected into the encoder with t-fold multi-scale fusion, and the
decoder concatenates the fused (pre-pool) encoder maps back in.

Indexing follows the usual 1-based level convention: level ``i`` has spatial
size ``64 / 2**(i-1)`` and ``base_width * 2**(i-1)`` channels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .scbe_net import clamp_unit

MAX_T = 3


@dataclass
class FusionConfig:
    mode: Literal["ss", "ms"] = "ms"
    t: int = 2
    s: int = 5

    def __post_init__(self):
        if self.mode not in ("ss", "ms"):
            raise ValueError(f"fusion mode must be 'ss' or 'ms', got {self.mode!r}")
        if not 0 <= self.t <= MAX_T:
            raise ValueError(f"fusion multiplicity t must be in 0..3, got {self.t}")
        if self.s < 2:
            raise ValueError("BALT needs at least two scales")


def shortcut_start(i: int, t: int) -> int:
    """Lowest source level ``m = max(1, i - t + 1)`` of the shortcut sum at level ``i``."""
    return max(1, i - t + 1)


def fusion_sources(i: int, cfg: FusionConfig) -> list[int]:
    """Boundary feature levels that feed the fused map at encoder level ``i``."""
    if cfg.t == 0:
        return []
    if cfg.mode == "ss":
        return [1] if i == 1 else []
    return list(range(shortcut_start(i, cfg.t), i + 1))


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class Transition(nn.Conv2d):
    """1x1 channel transition; spatial size is untouched."""

    def __init__(self, cin: int, cout: int, bias: bool = True):
        super().__init__(cin, cout, kernel_size=1, bias=bias)

    def identity_(self) -> "Transition":
        if self.in_channels != self.out_channels:
            raise ValueError("identity transition needs equal channel counts")
        with torch.no_grad():
            self.weight.zero_()
            self.weight[:, :, 0, 0] = torch.eye(self.in_channels, dtype=self.weight.dtype)
            if self.bias is not None:
                self.bias.zero_()
        return self


def transition(feat: torch.Tensor, layer: Transition) -> torch.Tensor:
    if feat.dim() != 4 or feat.shape[1] != layer.in_channels:
        raise ValueError(f"transition expects {layer.in_channels} channels, got {tuple(feat.shape)}")
    return layer(feat)


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class BaltModel(nn.Module):
    def __init__(
        self,
        num_boundaries: int,
        num_landmarks: int,
        feature_channels: Sequence[int],
        fusion: FusionConfig,
        base_width: int = 64,
    ):
        super().__init__()
        s = fusion.s
        if len(feature_channels) < s:
            raise ValueError(f"fusion over {s} scales needs {s} boundary features, got {len(feature_channels)}")
        self.num_boundaries = num_boundaries
        self.num_landmarks = num_landmarks
        self.feature_channels = list(feature_channels)
        self.fusion = fusion
        self.base_width = base_width
        ch = [base_width * 2**i for i in range(s)]
        self.channels = ch

        self.inc = DoubleConv(num_boundaries, ch[0])
        self.down = nn.ModuleList([DoubleConv(ch[i], ch[i + 1]) for i in range(s - 1)])
        # one transition per (source level j, target level i) pair: B_j -> C_i channels;
        # t <= 3 means shortcuts span at most two levels
        self.transitions = nn.ModuleDict()
        for i in range(1, s + 1):
            for j in range(max(1, i - MAX_T + 1), i + 1):
                self.transitions[f"{j}_{i}"] = Transition(self.feature_channels[j - 1], ch[i - 1])
        self.bottleneck = DoubleConv(ch[s - 1], ch[s - 1])
        # decode step i joins F^{e'}_{s-i+1} with F^d_i
        self.up = nn.ModuleList()
        for i in range(1, s):
            lvl = s - i + 1
            self.up.append(DoubleConv(2 * ch[lvl - 1], ch[lvl - 2]))
        self.final = DoubleConv(2 * ch[0], ch[0])
        self.head = nn.Conv2d(ch[0], num_landmarks, 1)
        # start from a near-blank heatmap; a default-initialized head overshoots and
        # spends its first steps collapsing onto the all-zero plateau
        nn.init.normal_(self.head.weight, 0.0, 0.001)
        nn.init.zeros_(self.head.bias)

    # -- fusion algebra -------------------------------------------------
    def boundary_term(self, feats: Sequence[torch.Tensor], j: int, i: int) -> torch.Tensor:
        """``T(B_j)`` for j == i, else ``MP^(i-j)(T(B_j))`` brought to level i."""
        out = transition(feats[j - 1], self.transitions[f"{j}_{i}"])
        for _ in range(i - j):
            out = F.max_pool2d(out, 2)
        return out

    def fuse(self, f_enc: torch.Tensor, feats: Sequence[torch.Tensor], i: int, cfg: FusionConfig | None = None):
        """Fused pre-pool map ``F_i^{e'}`` at level ``i``."""
        cfg = cfg or self.fusion
        sources = fusion_sources(i, cfg)
        if not sources:
            return f_enc
        if feats[i - 1].shape[-2:] != f_enc.shape[-2:] and i in sources:
            raise ValueError(f"level {i}: boundary feature {tuple(feats[i - 1].shape)} vs encoder map {tuple(f_enc.shape)}")
        out = f_enc
        if i in sources:
            out = out + self.boundary_term(feats, i, i)
        shortcuts = [j for j in sources if j < i]
        if shortcuts:
            acc = self.boundary_term(feats, shortcuts[0], i)
            for j in shortcuts[1:]:
                acc = acc + self.boundary_term(feats, j, i)
            out = out + acc
        return out

    def encode_step(self, f_enc, feats, i: int, cfg: FusionConfig | None = None):
        """One encoder level: returns ``(F_{i+1}^e, F_i^{e'})``."""
        fused = self.fuse(f_enc, feats, i, cfg)
        return self.down[i - 1](F.max_pool2d(fused, 2)), fused

    def encode_step_single(self, f_enc, feats, i: int):
        """Plain one-fold fusion ``DC(MP(F_i + T(B_i)))``, kept as a reference path."""
        fused = f_enc + transition(feats[i - 1], self.transitions[f"{i}_{i}"])
        return self.down[i - 1](F.max_pool2d(fused, 2)), fused

    def decode_step(self, f_dec: torch.Tensor, skip: torch.Tensor, i: int) -> torch.Tensor:
        """``F_{i+1}^d = BU(DC(F_{s-i+1}^{e'} (+) F_i^d))`` with channel concatenation."""
        if skip.shape[-2:] != f_dec.shape[-2:]:
            raise ValueError(f"decode step {i}: skip {tuple(skip.shape)} vs decoder map {tuple(f_dec.shape)}")
        return upsample2x(self.up[i - 1](torch.cat([skip, f_dec], dim=1)))

    # -- full pass --------------------------------------------------------
    def forward(self, boundary: torch.Tensor, feats: Sequence[torch.Tensor], cfg: FusionConfig | None = None,
                clamp: bool = True):
        cfg = cfg or self.fusion
        s = self.fusion.s
        if boundary.dim() != 4 or boundary.shape[1] != self.num_boundaries:
            raise ValueError(f"expected (B, {self.num_boundaries}, H, W) boundary heatmaps, got {tuple(boundary.shape)}")
        if len(feats) < s:
            raise ValueError(f"need {s} boundary features, got {len(feats)}")
        f = self.inc(boundary)
        fused_maps = []
        for i in range(1, s):
            f, fused = self.encode_step(f, feats, i, cfg)
            fused_maps.append(fused)
        fused_maps.append(self.fuse(f, feats, s, cfg))
        d = self.bottleneck(fused_maps[-1])
        for i in range(1, s):
            d = self.decode_step(d, fused_maps[s - i], i)
        d = self.final(torch.cat([fused_maps[0], d], dim=1))
        out = self.head(d)
        return clamp_unit(out, straight_through=self.training) if clamp else out


def build_balt(
    num_boundaries: int,
    num_landmarks: int,
    feature_channels: Sequence[int],
    fusion: FusionConfig = FusionConfig(),
    base_width: int = 64,
    seed: int = 0,
) -> BaltModel:
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = BaltModel(num_boundaries, num_landmarks, feature_channels, fusion, base_width)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def balt_config_dict(model: BaltModel) -> dict:
    return {
        "num_boundaries": model.num_boundaries,
        "num_landmarks": model.num_landmarks,
        "feature_channels": model.feature_channels,
        "fusion": asdict(model.fusion),
        "base_width": model.base_width,
    }
