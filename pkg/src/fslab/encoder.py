"""Hierarchical encoders for the appearance, motion and merging branches.

Each backbone exposes four pyramid levels (conv2..conv5 in ResNet terms) at
strides stem_stride * (1, 2, 4, 8). With the default stem stride of 4, a 352x352
input gives levels of 88, 44, 22 and 11 pixels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb
from torch import nn

from .datamodel import ContractError, FeaturePyramid

PRESETS = {
    "toy": (16, 32, 64, 128),
    "resnet50-like": (256, 512, 1024, 2048),
}


@dataclass
class BackboneConfig:
    channel_widths: list = field(default_factory=lambda: list(PRESETS["toy"]))
    stem_stride: int = 4
    preset: str = "toy"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ContractError(f"unknown backbone preset {self.preset!r}")
        w = list(self.channel_widths)
        if len(w) != 4 or any(c <= 0 for c in w) or any(b < a for a, b in zip(w, w[1:])):
            raise ContractError(f"channel widths must be 4 positive non-decreasing ints, got {w}")
        if self.stem_stride not in (1, 2, 4):
            raise ContractError(f"stem_stride must be 1, 2 or 4, got {self.stem_stride}")
        self.channel_widths = w

    @classmethod
    def from_preset(cls, preset: str = "toy", stem_stride: int = 4) -> "BackboneConfig":
        if preset not in PRESETS:
            raise ContractError(f"unknown backbone preset {preset!r}")
        return cls(list(PRESETS[preset]), stem_stride, preset)

    @property
    def size_multiple(self) -> int:
        """Input sizes must be divisible by this (the stride of the deepest level)."""
        return self.stem_stride * 8

    def to_dict(self) -> dict:
        return asdict(self)


def flow_normalizer(flows, percentile: float = 99.0) -> float:
    """Magnitude used to scale a clip's flow for the color wheel; 1.0 for static clips."""
    mags = [np.hypot(f[0], f[1]).ravel() for f in flows]
    value = float(np.percentile(np.concatenate(mags), percentile)) if mags else 0.0
    return value if value > 1e-12 else 1.0


def flow_to_input(flow, normalizer: float | None = None) -> np.ndarray:
    """Color-wheel encode a 2xHxW flow into a 3xHxW RGB raster in [0, 1].

    Hue follows the flow angle; saturation is the magnitude over ``normalizer``
    (clipped to 1) and value rises from 0.5 to 1 with it, so zero flow is a flat gray.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ContractError(f"flow must be 2xHxW, got {flow.shape}")
    u, v = flow
    mag = np.hypot(u, v)
    if normalizer is None:
        normalizer = flow_normalizer([flow])
    sat = np.clip(mag / normalizer, 0.0, 1.0)
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    hsv = np.stack([hue, sat, 0.5 + 0.5 * sat], axis=-1)
    return hsv_to_rgb(hsv).transpose(2, 0, 1).astype(np.float32)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = _norm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x):
        out = torch.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return torch.relu(out + skip)


class Bottleneck(nn.Module):
    expansion_divisor = 4

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        mid = max(cout // self.expansion_divisor, 1)
        self.body = nn.Sequential(
            nn.Conv2d(cin, mid, 1, bias=False),
            _norm(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, mid, 3, stride, 1, bias=False),
            _norm(mid),
            nn.ReLU(inplace=True),
            nn.Conv2d(mid, cout, 1, bias=False),
            _norm(cout),
        )
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut(x)
        return torch.relu(self.body(x) + skip)


def _block_type(preset: str):
    return Bottleneck if preset == "resnet50-like" else BasicBlock


def stem_width(config: BackboneConfig) -> int:
    return 64 if config.preset == "resnet50-like" else config.channel_widths[0]


class Backbone(nn.Module):
    """Stem plus four stages; stage 1 keeps the stem resolution, later ones halve it."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        block = _block_type(config.preset)
        sw = stem_width(config)
        stem = []
        cin, remaining = 3, config.stem_stride
        while True:
            stride = 2 if remaining > 1 else 1
            stem += [nn.Conv2d(cin, sw, 3, stride, 1, bias=False), _norm(sw), nn.ReLU(inplace=True)]
            cin, remaining = sw, remaining // 2
            if remaining <= 1:
                break
        self.stem = nn.Sequential(*stem)
        widths = config.channel_widths
        self.stages = nn.ModuleList(
            block(sw if i == 0 else widths[i - 1], widths[i], 1 if i == 0 else 2) for i in range(4)
        )

    def forward(self, x) -> list:
        feats = []
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def check_input_size(x, config: BackboneConfig) -> None:
    m = config.size_multiple
    h, w = x.shape[-2:]
    if h % m or w % m:
        raise ContractError(f"input size {h}x{w} is not divisible by {m}")


def extract_pyramid(backbone: Backbone, x, branch: str) -> FeaturePyramid:
    if branch not in ("appearance", "motion"):
        raise ContractError(f"branch must be appearance or motion, got {branch!r}")
    check_input_size(x, backbone.config)
    return FeaturePyramid(backbone(x), branch)


class MergeBranch(nn.Module):
    """Third backbone that accumulates the cross-attended features level by level.

    ``blocks[i]`` is the stride-1 level block B_k; ``projections[i]`` carries the
    previous level's Z to the current level (stride 2 plus a channel change) so it can
    be added to the attended features. With ``two_branch`` the blocks are identities.
    """

    def __init__(self, config: BackboneConfig, two_branch: bool = False):
        super().__init__()
        block = _block_type(config.preset)
        w = config.channel_widths
        self.two_branch = two_branch
        self.blocks = nn.ModuleList(
            nn.Identity() if two_branch else block(w[i], w[i]) for i in range(4)
        )
        self.projections = nn.ModuleList(
            [nn.Identity()] + [nn.Conv2d(w[i - 1], w[i], 1, 2, bias=False) for i in range(1, 4)]
        )

    def step(self, level: int, q_sum, z_prev):
        return merge_step(self.blocks[level], self.projections[level], q_sum, z_prev)


def merge_step(block: nn.Module, projection: nn.Module, q_sum, z_prev=None):
    """Z_k = B_k[Q^X_k + Q^Y_k + Z_{k-1}], with Z_{k-1} = None meaning the zero tensor."""
    total = q_sum
    if z_prev is not None:
        carried = projection(z_prev)
        if carried.shape != q_sum.shape:
            raise ContractError(
                f"cannot add level features {tuple(q_sum.shape)} and {tuple(carried.shape)}"
            )
        total = total + carried
    return block(total)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
