"""Core records and on-disk formats for frames, flow rasters and masks.

Clip directory layout::

    <clip_id>/frames/00000.png   RGB appearance frames, t = 0..T-1
    <clip_id>/flow/00000.flo     flow from frame t to t+1, t = 0..T-2
    <clip_id>/gt/00000.png       8-bit binary masks, t = 0..T-1

Frame ``t`` pairs with flow ``t``; the last frame has no flow and yields no sample.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

FLOW_MAGIC = b"PIEH"
BRANCH_TAGS = ("appearance", "motion", "merged")


class FormatError(ValueError):
    """A file does not follow the expected on-disk format."""


class DecodeError(FormatError):
    """A file could not be decoded at all."""


class ContractError(ValueError):
    """An argument violates a documented shape or range contract."""


@dataclass(frozen=True)
class ClipSample:
    clip_id: str
    t: int
    appearance: np.ndarray  # 3 x H x W float32 in [0, 1]
    flow: np.ndarray  # 2 x H x W float32, pixels/frame
    gt_mask: np.ndarray  # 1 x H x W uint8 in {0, 1}

    def __post_init__(self):
        if self.t < 0:
            raise ContractError(f"frame index must be >= 0, got {self.t}")
        a, m, g = self.appearance, self.flow, self.gt_mask
        if a.ndim != 3 or a.shape[0] != 3:
            raise ContractError(f"appearance must be 3xHxW, got {a.shape}")
        if m.ndim != 3 or m.shape[0] != 2:
            raise ContractError(f"flow must be 2xHxW, got {m.shape}")
        if g.ndim != 3 or g.shape[0] != 1:
            raise ContractError(f"gt_mask must be 1xHxW, got {g.shape}")
        if not (a.shape[1:] == m.shape[1:] == g.shape[1:]):
            raise ContractError(
                f"raster sizes differ: {a.shape[1:]}, {m.shape[1:]}, {g.shape[1:]}"
            )
        if a.min() < 0 or a.max() > 1:
            raise ContractError("appearance values must lie in [0, 1]")
        if not np.isfinite(m).all():
            raise ContractError("flow contains non-finite values")
        if not np.isin(g, (0, 1)).all():
            raise ContractError("gt_mask must be strictly binary")

    @property
    def size(self) -> tuple[int, int]:
        return self.gt_mask.shape[1], self.gt_mask.shape[2]


@dataclass
class FeaturePyramid:
    """K = 4 feature levels of one branch, shallow to deep."""

    levels: list = field(default_factory=list)
    branch_tag: str = "appearance"

    def __post_init__(self):
        if self.branch_tag not in BRANCH_TAGS:
            raise ContractError(f"unknown branch tag {self.branch_tag!r}")
        if len(self.levels) != 4:
            raise ContractError(f"a pyramid has exactly 4 levels, got {len(self.levels)}")
        for lo, hi in zip(self.levels, self.levels[1:]):
            if hi.shape[-2] != lo.shape[-2] // 2 or hi.shape[-1] != lo.shape[-1] // 2:
                raise ContractError(
                    f"spatial size must halve between levels: {tuple(lo.shape)} -> {tuple(hi.shape)}"
                )
            if hi.shape[-3] < lo.shape[-3]:
                raise ContractError("channel counts must be non-decreasing with level")

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)

    @property
    def channels(self) -> list[int]:
        return [lvl.shape[-3] for lvl in self.levels]

    @property
    def sizes(self) -> list[tuple[int, int]]:
        return [tuple(lvl.shape[-2:]) for lvl in self.levels]


@dataclass
class PredictionPair:
    """Sigmoid maps from the appearance-side (S_A) and motion-side (S_M) decoders."""

    s_a: object
    s_m: object

    def select(self, head: str = "SA"):
        if head == "SA":
            return self.s_a
        if head == "SM":
            return self.s_m
        if head == "mean":
            return (self.s_a + self.s_m) / 2
        raise ContractError(f"prediction head must be one of SA, SM, mean; got {head!r}")


def _open_png(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return img


def read_mask(path) -> np.ndarray:
    """Read an 8-bit single-channel PNG as a 1xHxW {0,1} uint8 mask (pixel > 127)."""
    img = _open_png(path)
    if img.mode != "L":
        raise FormatError(f"{path}: expected 8-bit single-channel PNG, got mode {img.mode}")
    arr = np.asarray(img)
    return (arr > 127).astype(np.uint8)[None]


def write_mask(mask, path, threshold: float | None = 0.5) -> None:
    """Write a [0,1] map as PNG.

    With a threshold, pixels strictly above it become 255 and the rest 0. Without one
    the map is stored as round(value * 255) grayscale.
    """
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ContractError(f"mask must be 1xHxW or HxW, got {arr.shape}")
        arr = arr[0]
    if arr.ndim != 2:
        raise ContractError(f"mask must be 1xHxW or HxW, got {arr.shape}")
    if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
        raise ContractError("mask values must lie in [0, 1]")
    if threshold is None:
        out = np.rint(arr * 255).astype(np.uint8)
    else:
        out = np.where(arr > threshold, 255, 0).astype(np.uint8)
    Image.fromarray(out).save(path)


def read_frame(path) -> np.ndarray:
    """Read an RGB PNG as a 3xHxW float32 array in [0, 1]."""
    img = _open_png(path)
    if img.mode != "RGB":
        raise FormatError(f"{path}: expected RGB PNG, got mode {img.mode}")
    return (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def write_frame(frame, path) -> None:
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ContractError(f"frame must be 3xHxW, got {arr.shape}")
    out = np.rint(np.clip(arr, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(np.ascontiguousarray(out)).save(path)


def read_flow(path) -> np.ndarray:
    """Read a PIEH flow raster into a 2xHxW float32 array."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FLOW_MAGIC:
        raise FormatError(f"{path}: bad flow magic")
    w, h = struct.unpack("<ii", data[4:12])
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid flow size {w}x{h}")
    expected = 12 + 8 * w * h
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload holds {(len(data) - 12) / 8:g} pairs, header promises {w * h}"
        )
    uv = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2)
    return uv.transpose(2, 0, 1).astype(np.float32)


def write_flow(flow, path) -> None:
    arr = np.asarray(flow)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ContractError(f"flow must be 2xHxW, got {arr.shape}")
    _, h, w = arr.shape
    payload = np.ascontiguousarray(arr.transpose(1, 2, 0), dtype="<f4").tobytes()
    Path(path).write_bytes(FLOW_MAGIC + struct.pack("<ii", w, h) + payload)


def clip_frame_ids(clip_dir) -> list[int]:
    return sorted(int(p.stem) for p in (Path(clip_dir) / "frames").glob("*.png"))


def load_clip(clip_dir) -> list[ClipSample]:
    """Load every usable (frame, flow, mask) triple of a clip; the last frame is dropped."""
    clip_dir = Path(clip_dir)
    ids = clip_frame_ids(clip_dir)
    samples = []
    for t in ids[:-1]:
        name = f"{t:05d}"
        samples.append(
            ClipSample(
                clip_id=clip_dir.name,
                t=t,
                appearance=read_frame(clip_dir / "frames" / f"{name}.png"),
                flow=read_flow(clip_dir / "flow" / f"{name}.flo"),
                gt_mask=read_mask(clip_dir / "gt" / f"{name}.png"),
            )
        )
    return samples


def write_clip(clip_dir, frames: Sequence, flows: Sequence, masks: Sequence) -> None:
    clip_dir = Path(clip_dir)
    if len(flows) != len(frames) - 1 or len(masks) != len(frames):
        raise ContractError("a clip needs T frames, T masks and T-1 flow rasters")
    for sub in ("frames", "flow", "gt"):
        (clip_dir / sub).mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(frames):
        write_frame(frame, clip_dir / "frames" / f"{t:05d}.png")
        write_mask(masks[t], clip_dir / "gt" / f"{t:05d}.png", threshold=0.5)
    for t, flow in enumerate(flows):
        write_flow(flow, clip_dir / "flow" / f"{t:05d}.flo")
