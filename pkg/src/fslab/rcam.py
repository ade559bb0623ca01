"""Relational cross-attention between appearance and motion features.

At each level both features are squeezed to channel vectors by global average
pooling; a 1x1 map plus sigmoid turns one branch's vector into channel weights for
the other branch. The merging branch then accumulates the weighted features.
"""

from __future__ import annotations

import torch
from torch import nn

from .datamodel import ContractError, FeaturePyramid
from .encoder import MergeBranch

RCAM_MODES = ("full-duplex", "simplex-app-to-mo", "simplex-mo-to-app", "direction-independent")


def channel_vector(feat):
    """Per-channel spatial mean, kept as an N x C x 1 x 1 tensor (C x 1 x 1 for 3-d input)."""
    if feat.shape[-1] < 1 or feat.shape[-2] < 1:
        raise ContractError("feature map must have non-empty spatial extent")
    return feat.mean(dim=(-2, -1), keepdim=True)


class RcamLevel(nn.Module):
    """phi (appearance vector -> motion weights) and theta (motion vector -> appearance weights)."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.phi = nn.Conv2d(channels, channels, 1)
        self.theta = nn.Conv2d(channels, channels, 1)


def cross_attend(x, y, params: RcamLevel, mode: str = "full-duplex"):
    """Return (Q^X, Q^Y) for one level under the given direction strategy."""
    if mode not in RCAM_MODES:
        raise ContractError(f"unknown rcam mode {mode!r}")
    if x.shape != y.shape:
        raise ContractError(f"appearance/motion shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.shape[-3] != params.channels:
        raise ContractError(f"level has {x.shape[-3]} channels, params expect {params.channels}")
    qx, qy = x, y
    if mode in ("full-duplex", "simplex-mo-to-app"):
        qx = x * torch.sigmoid(params.theta(channel_vector(y)))
    if mode in ("full-duplex", "simplex-app-to-mo"):
        qy = y * torch.sigmoid(params.phi(channel_vector(x)))
    return qx, qy


class Rcam(nn.Module):
    def __init__(self, channel_widths, mode: str = "full-duplex"):
        super().__init__()
        if mode not in RCAM_MODES:
            raise ContractError(f"unknown rcam mode {mode!r}")
        self.mode = mode
        self.levels = nn.ModuleList(RcamLevel(c) for c in channel_widths)

    def forward(self, appearance: FeaturePyramid, motion: FeaturePyramid, merge: MergeBranch):
        return rcam_forward(appearance, motion, self, merge, self.mode)


def rcam_forward(appearance, motion, rcam: Rcam, merge: MergeBranch, mode: str | None = None):
    """Attend level by level and feed the merging branch; returns the merged pyramid."""
    mode = rcam.mode if mode is None else mode
    if len(appearance) != 4 or len(motion) != 4:
        raise ContractError("both pyramids must have 4 levels")
    z, merged = None, []
    for k in range(4):
        qx, qy = cross_attend(appearance[k], motion[k], rcam.levels[k], mode)
        z = merge.step(k, qx + qy, z)
        merged.append(z)
    return FeaturePyramid(merged, "merged")
