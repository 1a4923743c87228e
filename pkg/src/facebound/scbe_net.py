"""Self-calibrated boundary estimation network.

A stem reduces a 3x256x256 image to 64x64 features, N stacked hourglasses
predict K boundary heatmaps each (every stack is supervised), the stem
features are re-injected before every hourglass after the first, and the last
hourglass exports a pyramid of features for the landmark transform network.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

StemKind = Literal["hourglass_baseline", "resnet_style", "vgg_style"]

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class StemConfig:
    kind: StemKind = "vgg_style"
    pretrained: bool = False
    output_channels: int = 64
    weights_path: str | None = None


@dataclass
class ScbeConfig:
    num_stacks: int = 2
    num_boundary_channels: int = 16
    feature_scales: int = 5
    base_width: int = 64
    depth: int = 4

    def __post_init__(self):
        if self.num_stacks < 1:
            raise ValueError("num_stacks must be >= 1")
        if self.num_boundary_channels < 2:
            raise ValueError("need at least one curve plus the union channel")
        if not 1 <= self.feature_scales <= self.depth + 1:
            raise ValueError(f"feature_scales must be in [1, {self.depth + 1}]")
        if self.base_width % 4:
            raise ValueError("base_width must be divisible by 4")


@dataclass
class ScbeOutput:
    boundary_preds: list[torch.Tensor]  # N tensors of shape (B, K, 64, 64)
    features: list[torch.Tensor] = field(default_factory=list)  # finest first


class _UnitClampST(torch.autograd.Function):
    """Clamp to [0, 1] in the forward pass, identity gradient in the backward pass."""

    @staticmethod
    def forward(ctx, x):
        return x.clamp(0.0, 1.0)

    @staticmethod
    def backward(ctx, grad):
        return grad


def clamp_unit(x: torch.Tensor, straight_through: bool = False) -> torch.Tensor:
    """Map heatmap logits into [0, 1].

    A plain clamp passes no gradient to pixels pushed below zero, so a head that
    drifts to the all-zero solution can never recover.  Training therefore uses
    the straight-through variant; inference uses the exact clamp.
    """
    if straight_through:
        return _UnitClampST.apply(x)
    return x.clamp(0.0, 1.0)


class ConvBlock(nn.Module):
    """FAN-style bottleneck: three pre-activated 3x3 convs, concatenated, plus a residual."""

    def __init__(self, in_planes: int, out_planes: int):
        super().__init__()
        half, quarter = out_planes // 2, out_planes // 4
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, half, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(half)
        self.conv2 = nn.Conv2d(half, quarter, 3, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(quarter)
        self.conv3 = nn.Conv2d(quarter, out_planes - half - quarter, 3, padding=1, bias=False)
        self.downsample = None
        if in_planes != out_planes:
            self.downsample = nn.Sequential(
                nn.BatchNorm2d(in_planes),
                nn.ReLU(inplace=False),
                nn.Conv2d(in_planes, out_planes, 1, bias=False),
            )

    def forward(self, x):
        out1 = self.conv1(F.relu(self.bn1(x)))
        out2 = self.conv2(F.relu(self.bn2(out1)))
        out3 = self.conv3(F.relu(self.bn3(out2)))
        out = torch.cat([out1, out2, out3], dim=1)
        residual = x if self.downsample is None else self.downsample(x)
        return out + residual


class Hourglass(nn.Module):
    """Recursive hourglass; ``forward`` also returns the merged map at each level."""

    def __init__(self, depth: int, width: int):
        super().__init__()
        self.depth = depth
        self.up = nn.ModuleList([ConvBlock(width, width) for _ in range(depth)])
        self.down = nn.ModuleList([ConvBlock(width, width) for _ in range(depth)])
        self.post = nn.ModuleList([ConvBlock(width, width) for _ in range(depth)])
        self.bottom = ConvBlock(width, width)

    def forward(self, x):
        # levels[0] is the full-resolution output, levels[depth] the bottleneck
        levels = [None] * (self.depth + 1)
        skips = []
        cur = x
        for lvl in range(self.depth):
            skips.append(self.up[lvl](cur))
            cur = self.down[lvl](F.avg_pool2d(cur, 2))
        cur = self.bottom(cur)
        levels[self.depth] = cur
        for lvl in reversed(range(self.depth)):
            cur = self.post[lvl](cur)
            cur = skips[lvl] + F.interpolate(cur, scale_factor=2, mode="nearest")
            levels[lvl] = cur
        return cur, levels


class HourglassStem(nn.Module):
    def __init__(self, out_channels: int):
        super().__init__()
        mid = max(4, out_channels // 2)
        mid -= mid % 4
        self.conv1 = nn.Conv2d(3, mid, 7, stride=2, padding=3)
        self.bn1 = nn.BatchNorm2d(mid)
        self.block1 = ConvBlock(mid, out_channels)
        self.block2 = ConvBlock(out_channels, out_channels)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.avg_pool2d(self.block1(x), 2)
        return self.block2(x)


class BasicBlock(nn.Module):
    def __init__(self, planes: int):
        super().__init__()
        self.conv1 = nn.Conv2d(planes, planes, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(out)) + x)


class ResNetStem(nn.Module):
    def __init__(self, out_channels: int, width: int = 64):
        super().__init__()
        self.conv1 = nn.Conv2d(3, width, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.layer1 = nn.Sequential(BasicBlock(width), BasicBlock(width))
        self.proj = nn.Conv2d(width, out_channels, 1)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.max_pool2d(x, 3, stride=2, padding=1)
        return self.proj(self.layer1(x))


class VggStem(nn.Module):
    """First two blocks of VGG16-BN.

    ``features`` uses the torchvision index layout so that a vgg16_bn state
    dict can be loaded key-for-key (``features.0.weight`` ... ``features.12``).
    """

    def __init__(self, out_channels: int, widths: tuple[int, int] = (64, 128)):
        super().__init__()
        a, b = widths
        self.features = nn.Sequential(
            nn.Conv2d(3, a, 3, padding=1), nn.BatchNorm2d(a), nn.ReLU(inplace=True),
            nn.Conv2d(a, a, 3, padding=1), nn.BatchNorm2d(a), nn.ReLU(inplace=True),
            nn.MaxPool2d(2, 2),
            nn.Conv2d(a, b, 3, padding=1), nn.BatchNorm2d(b), nn.ReLU(inplace=True),
            nn.Conv2d(b, b, 3, padding=1), nn.BatchNorm2d(b), nn.ReLU(inplace=True),
            nn.MaxPool2d(2, 2),
        )
        self.proj = nn.Conv2d(b, out_channels, 1)

    def forward(self, x):
        return self.proj(self.features(x))


def build_stem(cfg: StemConfig, stem_width: int | None = None) -> nn.Module:
    if cfg.kind == "hourglass_baseline":
        return HourglassStem(cfg.output_channels)
    if cfg.kind == "resnet_style":
        return ResNetStem(cfg.output_channels, width=stem_width or 64)
    if cfg.kind == "vgg_style":
        w = stem_width or 64
        return VggStem(cfg.output_channels, widths=(w, 2 * w))
    raise ValueError(f"unknown stem kind {cfg.kind!r}")


class ScbeModel(nn.Module):
    def __init__(self, stem_cfg: StemConfig, cfg: ScbeConfig, stem_width: int | None = None):
        super().__init__()
        self.stem_cfg = stem_cfg
        self.cfg = cfg
        self.stem_width = stem_width
        w, K, N = cfg.base_width, cfg.num_boundary_channels, cfg.num_stacks
        self.stem = build_stem(stem_cfg, stem_width)
        self.stem_to_hg = nn.Conv2d(stem_cfg.output_channels, w, 1)
        self.hourglasses = nn.ModuleList([Hourglass(cfg.depth, w) for _ in range(N)])
        self.top = nn.ModuleList([ConvBlock(w, w) for _ in range(N)])
        self.ll_conv = nn.ModuleList([nn.Conv2d(w, w, 1) for _ in range(N)])
        self.ll_bn = nn.ModuleList([nn.BatchNorm2d(w) for _ in range(N)])
        self.heads = nn.ModuleList([nn.Conv2d(w, K, 1) for _ in range(N)])
        # stack -> next-stack remaps, including the low-level stem reuse
        self.feat_remap = nn.ModuleList([nn.Conv2d(w, w, 1) for _ in range(N - 1)])
        self.pred_remap = nn.ModuleList([nn.Conv2d(K, w, 1) for _ in range(N - 1)])
        self.reuse = nn.ModuleList([nn.Conv2d(stem_cfg.output_channels, w, 1) for _ in range(N - 1)])

    @property
    def feature_channels(self) -> list[int]:
        return [self.cfg.base_width] * self.cfg.feature_scales

    def hourglass_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("stem."):
                yield name, p

    def forward(self, x: torch.Tensor, clamp: bool = True) -> ScbeOutput:
        """``clamp=False`` returns raw head outputs (used for gradient checks)."""
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != 256 or x.shape[3] != 256:
            raise ValueError(f"expected input of shape (B, 3, 256, 256), got {tuple(x.shape)}")
        low = self.stem(x)
        h = self.stem_to_hg(low)
        preds = []
        features: list[torch.Tensor] = []
        N = self.cfg.num_stacks
        for n in range(N):
            hg, levels = self.hourglasses[n](h)
            ll = self.top[n](hg)
            ll = F.relu(self.ll_bn[n](self.ll_conv[n](ll)))
            pred = self.heads[n](ll)
            if clamp:
                pred = clamp_unit(pred, straight_through=self.training)
            preds.append(pred)
            if n < N - 1:
                h = h + self.feat_remap[n](ll) + self.pred_remap[n](pred) + self.reuse[n](low)
            else:
                features = [ll] + levels[1 : self.cfg.feature_scales]
        return ScbeOutput(boundary_preds=preds, features=features)


def init_hourglass_(model: ScbeModel, std: float = 0.001) -> None:
    """N(0, std^2) for every conv weight and bias outside the stem; batch norms keep unit/zero affine."""
    for name, mod in model.named_modules():
        if name.startswith("stem") and not name.startswith("stem_to_hg"):
            continue
        if isinstance(mod, nn.Conv2d):
            nn.init.normal_(mod.weight, 0.0, std)
            if mod.bias is not None:
                nn.init.normal_(mod.bias, 0.0, std)


def load_stem_weights(model: ScbeModel, path: str | Path) -> None:
    """Load stem weights from a torch state dict file.

    Accepts either a state dict of the stem itself or a full torchvision
    vgg16_bn state dict; in the latter case only the matching ``features.*``
    entries are taken.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"pretrained stem weights not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if "state_dict" in state:
        state = state["state_dict"]
    own = model.stem.state_dict()
    picked = {}
    for key, val in state.items():
        key = key.removeprefix("stem.")
        if key in own:
            if own[key].shape != val.shape:
                raise ValueError(f"stem weight {key}: shape {tuple(val.shape)} != expected {tuple(own[key].shape)}")
            picked[key] = val
    missing = [k for k in own if k not in picked and not k.startswith("proj.")]
    if missing:
        raise ValueError(f"pretrained stem file {path} lacks {len(missing)} tensors, e.g. {missing[0]}")
    model.stem.load_state_dict(picked, strict=False)


def build_scbe(stem: StemConfig, cfg: ScbeConfig, seed: int = 0, stem_width: int | None = None) -> ScbeModel:
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = ScbeModel(stem, cfg, stem_width=stem_width)
        init_hourglass_(model)
    finally:
        torch.random.set_rng_state(gen_state)
    if stem.pretrained:
        if stem.weights_path is None:
            warnings.warn("pretrained stem requested but no weights file given; using seeded random init", stacklevel=2)
        else:
            load_stem_weights(model, stem.weights_path)
    return model


def scbe_loss(out: ScbeOutput, target: torch.Tensor) -> torch.Tensor:
    """Sum over stacks of the per-element MSE against the same target."""
    loss = None
    for pred in out.boundary_preds:
        if pred.shape != target.shape:
            raise ValueError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
        term = F.mse_loss(pred, target)
        loss = term if loss is None else loss + term
    return loss


def scbe_config_dict(model: ScbeModel) -> dict:
    return {"stem": asdict(model.stem_cfg), "scbe": asdict(model.cfg), "stem_width": model.stem_width}
