"""Full two-stream network: encoders -> cross attention -> purification -> decoders."""

from __future__ import annotations

from dataclasses import dataclass, field

from torch import nn

from .bpm import Bpm, BpmConfig
from .datamodel import ContractError, FeaturePyramid, PredictionPair
from .decoder import Decoder
from .encoder import Backbone, BackboneConfig, MergeBranch, check_input_size
from .rcam import RCAM_MODES, Rcam


@dataclass
class NetConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rcam_mode: str = "full-duplex"
    bpm: BpmConfig = field(default_factory=BpmConfig)
    two_branch: bool = False

    def __post_init__(self):
        if self.rcam_mode not in RCAM_MODES:
            raise ContractError(f"unknown rcam mode {self.rcam_mode!r}")


class DuplexNet(nn.Module):
    # parameter groups trained by each stage of the schedule
    STAGE_PREFIXES = {
        "spatial-pretrain": ("appearance.", "bpm.alloc_f.", "decoder_a."),
        "temporal-pretrain": ("motion.", "bpm.alloc_g.", "decoder_m."),
        "joint": ("",),
    }

    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        self.config = config or NetConfig()
        bb = self.config.backbone
        self.appearance = Backbone(bb)
        self.motion = Backbone(bb)
        self.merge = MergeBranch(bb, two_branch=self.config.two_branch)
        self.rcam = Rcam(bb.channel_widths, self.config.rcam_mode)
        self.bpm = Bpm(bb.channel_widths, bb.channel_widths, self.config.bpm)
        self.decoder_a = Decoder()
        self.decoder_m = Decoder()

    def forward(self, frame, flow_rgb) -> PredictionPair:
        check_input_size(frame, self.config.backbone)
        if frame.shape != flow_rgb.shape:
            raise ContractError("frame and flow inputs must have the same shape")
        size = frame.shape[-2:]
        x = FeaturePyramid(self.appearance(frame), "appearance")
        y = FeaturePyramid(self.motion(flow_rgb), "motion")
        z = self.rcam(x, y, self.merge)
        state = self.bpm(z.levels, y.levels)
        return PredictionPair(self.decoder_a(state.f, size), self.decoder_m(state.g, size))

    def forward_appearance(self, frame):
        """Single-stream path used to pretrain the appearance side on still frames."""
        check_input_size(frame, self.config.backbone)
        f = [a(x) for a, x in zip(self.bpm.alloc_f, self.appearance(frame))]
        return self.decoder_a(f, frame.shape[-2:])

    def forward_motion(self, flow_rgb):
        check_input_size(flow_rgb, self.config.backbone)
        g = [a(y) for a, y in zip(self.bpm.alloc_g, self.motion(flow_rgb))]
        return self.decoder_m(g, flow_rgb.shape[-2:])

    def stage_parameters(self, stage: str):
        prefixes = self.STAGE_PREFIXES[stage]
        return [p for name, p in self.named_parameters() if name.startswith(prefixes)]
