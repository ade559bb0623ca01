"""In-memory tensors for a corpus split, plus joint multi-scale resizing."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import load_clip
from .encoder import flow_normalizer, flow_to_input
from .synthdata import load_manifest


class SplitError(ValueError):
    pass


@dataclass
class SplitTensors:
    clip_ids: list  # per sample
    frame_ids: list  # per sample
    frames: torch.Tensor  # N x 3 x H x W
    flows: torch.Tensor  # N x 3 x H x W, color-wheel encoded
    masks: torch.Tensor  # N x 1 x H x W, float {0, 1}

    def __len__(self):
        return self.frames.shape[0]


def load_split(corpus, split: str) -> SplitTensors:
    manifest = load_manifest(corpus)
    clips = manifest["splits"].get(split)
    if not clips:
        raise SplitError(f"split {split!r} is missing or empty in {corpus}")
    clip_ids, frame_ids, frames, flows, masks = [], [], [], [], []
    for cid in clips:
        samples = load_clip(Path(corpus) / cid)
        norm = flow_normalizer([s.flow for s in samples])
        for s in samples:
            clip_ids.append(cid)
            frame_ids.append(s.t)
            frames.append(s.appearance)
            flows.append(flow_to_input(s.flow, norm))
            masks.append(s.gt_mask.astype(np.float32))
    return SplitTensors(
        clip_ids,
        frame_ids,
        torch.from_numpy(np.stack(frames)),
        torch.from_numpy(np.stack(flows)),
        torch.from_numpy(np.stack(masks)),
    )


def resize_batch(frames, flows, masks, size: int):
    """Rescale inputs bilinearly and masks by nearest neighbour so they stay binary."""
    if frames.shape[-1] == size and frames.shape[-2] == size:
        return frames, flows, masks
    frames = F.interpolate(frames, size=(size, size), mode="bilinear", align_corners=False)
    flows = F.interpolate(flows, size=(size, size), mode="bilinear", align_corners=False)
    masks = F.interpolate(masks, size=(size, size), mode="nearest")
    return frames, flows, masks
