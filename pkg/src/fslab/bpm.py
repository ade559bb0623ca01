"""Bidirectional purification: a cascade of units exchanging information between the
fused features F and the motion features G through interlaced decremental connections.

Levels are addressed by position k = 1..K (K = 4, shallow to deep). The level-k update
of one branch consumes the other branch's levels k..K, each upsampled to level k and
passed through a 1x1 map ("P" below).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import ContractError

BPM_CHANNELS = 32
BPM_MODES = ("full-duplex", "simplex-FtoG", "simplex-GtoF", "self-purification")
NUM_LEVELS = 4


@dataclass
class BpmConfig:
    n: int = 4
    direction: str = "full-duplex"
    share_allocator: bool = True

    def __post_init__(self):
        if self.n < 0:
            raise ContractError(f"bpm cascade length must be >= 0, got {self.n}")
        if self.direction not in BPM_MODES:
            raise ContractError(f"unknown bpm mode {self.direction!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BpmState:
    f: list
    g: list
    n: int = 0


def allocator(cin: int) -> nn.Sequential:
    """Two 3x3 convs with 32 filters each."""
    return nn.Sequential(
        nn.Conv2d(cin, BPM_CHANNELS, 3, 1, 1),
        nn.ReLU(inplace=True),
        nn.Conv2d(BPM_CHANNELS, BPM_CHANNELS, 3, 1, 1),
        nn.ReLU(inplace=True),
    )


class Projection(nn.Module):
    """Bilinear upsampling to the target level followed by a 1x1 map."""

    def __init__(self, channels: int = BPM_CHANNELS):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 1)

    def forward(self, x, size):
        if tuple(x.shape[-2:]) != tuple(size):
            x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        return self.conv(x)


def _check_arity(members, k: int, num_levels: int):
    expected = num_levels - k + 1
    if len(members) != expected:
        raise ContractError(
            f"level {k} of {num_levels} needs {expected} guidance tensors, got {len(members)}"
        )


def idc_concat(f_k, g_list, projections, fuse, k: int, num_levels: int = NUM_LEVELS):
    """fuse(concat[F_k, P(G_k), ..., P(G_K)]) -- the spatial-temporal combination term."""
    _check_arity(g_list, k, num_levels)
    _check_arity(projections, k, num_levels)
    size = f_k.shape[-2:]
    members = [f_k] + [p(g, size) for p, g in zip(projections, g_list)]
    return fuse(torch.cat(members, dim=1))


def idc_multiply(g_k, f_list, projections, fuse, k: int, num_levels: int = NUM_LEVELS):
    """fuse(G_k * P(F_k) * ... * P(F_K)) -- the temporal re-calibration term."""
    _check_arity(f_list, k, num_levels)
    _check_arity(projections, k, num_levels)
    size = g_k.shape[-2:]
    prod = g_k
    for p, f in zip(projections, f_list):
        prod = prod * p(f, size)
    return fuse(prod)


class IdcBranch(nn.Module):
    """Per-level projections and fusing 1x1 map for one update direction."""

    def __init__(self, combine: str, num_levels: int = NUM_LEVELS):
        super().__init__()
        self.combine = combine
        self.num_levels = num_levels
        self.projections = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for k in range(1, num_levels + 1):
            m = num_levels - k + 1
            self.projections.append(nn.ModuleList(Projection() for _ in range(m)))
            cin = (m + 1) * BPM_CHANNELS if combine == "concat" else BPM_CHANNELS
            self.fuse.append(nn.Conv2d(cin, BPM_CHANNELS, 1))

    def increment(self, own: list, guide: list, level: int):
        """Update term for position ``level`` (0-based) of the branch ``own``."""
        k = level + 1
        op = idc_concat if self.combine == "concat" else idc_multiply
        return op(own[level], guide[level:], self.projections[level], self.fuse[level], k, self.num_levels)

    def zero_init(self):
        for conv in self.fuse:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)


class BpmUnit(nn.Module):
    def __init__(self, direction: str = "full-duplex", own_allocator: bool = False):
        super().__init__()
        if direction not in BPM_MODES:
            raise ContractError(f"unknown bpm mode {direction!r}")
        self.direction = direction
        self.update_f = IdcBranch("concat") if direction != "simplex-FtoG" else None
        self.update_g = IdcBranch("multiply") if direction != "simplex-GtoF" else None
        self.alloc_f = self.alloc_g = None
        if own_allocator:
            self.alloc_f = nn.ModuleList(allocator(BPM_CHANNELS) for _ in range(NUM_LEVELS))
            self.alloc_g = nn.ModuleList(allocator(BPM_CHANNELS) for _ in range(NUM_LEVELS))

    def forward(self, state: BpmState) -> BpmState:
        return bpm_step(state, self)


def bpm_step(state: BpmState, unit: BpmUnit, direction: str | None = None) -> BpmState:
    """One purification unit; both updates read the incoming state only."""
    direction = unit.direction if direction is None else direction
    f, g = list(state.f), list(state.g)
    if unit.alloc_f is not None:
        f = [a(x) for a, x in zip(unit.alloc_f, f)]
        g = [a(x) for a, x in zip(unit.alloc_g, g)]
    if direction == "self-purification":
        f_guide, g_guide = f, g
    else:
        f_guide, g_guide = g, f
    new_f, new_g = f, g
    if direction in ("full-duplex", "simplex-GtoF", "self-purification"):
        new_f = [f[i] + unit.update_f.increment(f, f_guide, i) for i in range(len(f))]
    if direction in ("full-duplex", "simplex-FtoG", "self-purification"):
        new_g = [g[i] + unit.update_g.increment(g, g_guide, i) for i in range(len(g))]
    return BpmState(new_f, new_g, state.n + 1)


def bpm_chain(state: BpmState, units) -> BpmState:
    for unit in units:
        state = bpm_step(state, unit)
    return state


class Bpm(nn.Module):
    """Allocators psi_F / psi_G followed by ``config.n`` cascaded units."""

    def __init__(self, fused_widths, motion_widths, config: BpmConfig | None = None):
        super().__init__()
        self.config = config or BpmConfig()
        self.alloc_f = nn.ModuleList(allocator(c) for c in fused_widths)
        self.alloc_g = nn.ModuleList(allocator(c) for c in motion_widths)
        own = not self.config.share_allocator
        self.units = nn.ModuleList(
            BpmUnit(self.config.direction, own_allocator=own) for _ in range(self.config.n)
        )

    def allocate(self, z_levels, y_levels) -> BpmState:
        return allocate(z_levels, y_levels, self)

    def forward(self, z_levels, y_levels) -> BpmState:
        return bpm_chain(self.allocate(z_levels, y_levels), self.units)


def allocate(z_levels, y_levels, bpm: Bpm) -> BpmState:
    if len(z_levels) != NUM_LEVELS or len(y_levels) != NUM_LEVELS:
        raise ContractError("allocation needs 4-level pyramids")
    f = [a(z) for a, z in zip(bpm.alloc_f, z_levels)]
    g = [a(y) for a, y in zip(bpm.alloc_g, y_levels)]
    return BpmState(f, g, 0)


def unit_parameter_count(direction: str = "full-duplex", share_allocator: bool = True) -> int:
    unit = BpmUnit(direction, own_allocator=not share_allocator)
    return sum(p.numel() for p in unit.parameters())
