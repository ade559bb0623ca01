"""Top-down decoders with pyramid pooling, and the BCE training objective."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .bpm import BPM_CHANNELS
from .datamodel import ContractError, PredictionPair

PPM_BINS = (1, 2, 3, 6)
PPM_BRANCH_CHANNELS = 8
LOSS_EPS = 1e-7


class Ppm(nn.Module):
    """Pool at several bin sizes, map each to 8 channels, upsample and fuse back to 32."""

    def __init__(self, channels: int = BPM_CHANNELS, bins=PPM_BINS):
        super().__init__()
        self.bins = tuple(bins)
        self.branches = nn.ModuleList(nn.Conv2d(channels, PPM_BRANCH_CHANNELS, 1) for _ in self.bins)
        self.fuse = nn.Conv2d(PPM_BRANCH_CHANNELS * len(self.bins), channels, 1)

    def forward(self, x):
        return ppm_pool(x, self)


def ppm_pool(x, ppm: Ppm):
    h, w = x.shape[-2:]
    outs = []
    for b, conv in zip(ppm.bins, ppm.branches):
        pooled = F.adaptive_avg_pool2d(x, (min(b, h), min(b, w)))
        y = torch.relu(conv(pooled))
        outs.append(F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False))
    return ppm.fuse(torch.cat(outs, dim=1))


class Decoder(nn.Module):
    """Consumes four 32-channel levels (shallow to deep) and predicts a sigmoid map."""

    def __init__(self, num_levels: int = 4):
        super().__init__()
        self.num_levels = num_levels
        self.ppm = nn.ModuleList(Ppm() for _ in range(num_levels))
        self.reduce = nn.ModuleList(
            nn.Sequential(nn.Conv2d(2 * BPM_CHANNELS, BPM_CHANNELS, 3, 1, 1), nn.ReLU(inplace=True))
            for _ in range(num_levels - 1)
        )
        self.head = nn.Conv2d(BPM_CHANNELS, 1, 1)

    def forward(self, levels, out_size):
        return decode(levels, self, out_size)


def decode(levels, decoder: Decoder, out_size):
    """Seed with the pooled deepest level, then fuse upward: C[F_k ++ UP(PPM(F^_{k+1}))]."""
    if len(levels) != decoder.num_levels:
        raise ContractError(f"decoder needs {decoder.num_levels} levels, got {len(levels)}")
    top = decoder.num_levels - 1
    x = decoder.ppm[top](levels[top])
    for k in range(top - 1, -1, -1):
        skip = levels[k]
        up = F.interpolate(decoder.ppm[k](x), size=skip.shape[-2:], mode="bilinear", align_corners=False)
        x = decoder.reduce[k](torch.cat([skip, up], dim=1))
    s = torch.sigmoid(decoder.head(x))
    if tuple(s.shape[-2:]) != tuple(out_size):
        s = F.interpolate(s, size=tuple(out_size), mode="bilinear", align_corners=False)
    return s


def bce_loss(s, g, reduction: str = "sum", eps: float = LOSS_EPS):
    """-sum[G log S + (1-G) log(1-S)] per frame; batches average the per-frame values.

    ``reduction="mean"`` divides each frame's sum by its pixel count.
    """
    if s.shape != g.shape:
        raise ContractError(f"prediction {tuple(s.shape)} and mask {tuple(g.shape)} differ")
    s = s.clamp(eps, 1 - eps)
    g = g.to(s.dtype)
    per_pixel = -(g * torch.log(s) + (1 - g) * torch.log(1 - s))
    if s.dim() <= 3:
        total = per_pixel.sum()
        return total / per_pixel.numel() if reduction == "mean" else total
    per_frame = per_pixel.flatten(1).sum(1)
    if reduction == "mean":
        per_frame = per_frame / per_pixel[0].numel()
    return per_frame.mean()


def total_loss(pred: PredictionPair, g, reduction: str = "sum"):
    return bce_loss(pred.s_a, g, reduction) + bce_loss(pred.s_m, g, reduction)
