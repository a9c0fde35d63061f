"""Range-view segmentation backbone: MSCA encoder with an IAC decoder.

The encoder is a four-stage hierarchy (ResNet34-style block counts) at
1, 1/2, 1/4 and 1/8 resolution. The decoder bilinearly upsamples, merges
with the matching encoder map through a 3x3 convolution, and fuses the last
three decoder outputs with a point-wise convolution into full-resolution
logits.

Any ``nn.Module`` with ``num_classes`` and ``forward(planes, valid) -> logits``
can stand in for ``SegNet`` inside the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfig, ShapeMismatch
from .sr_core import EncoderBlock

PLANES = ("x", "y", "z", "range", "remission")


@dataclass
class SegConfig:
    num_classes: int = 20
    stem_width: int = 32
    widths: tuple = (64, 128, 144, 256)
    depths: tuple = (3, 4, 6, 3)
    decoder_widths: tuple = (128, 128, 64)  # 1/4, 1/2, 1 scale
    strip_kernels: tuple = (7, 11, 21)
    fuse: bool = True
    aux_heads: bool = False

    def __post_init__(self):
        for name in ("widths", "depths", "decoder_widths", "strip_kernels"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.num_classes < 2:
            raise InvalidConfig(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.widths) != 4 or len(self.depths) != 4 or len(self.decoder_widths) != 3:
            raise InvalidConfig("segnet needs 4 stage widths/depths and 3 decoder widths")
        if min(self.depths) < 1:
            raise InvalidConfig("every stage needs at least one block")


def compact_seg_config(num_classes: int) -> SegConfig:
    """Small backbone for desk-scale (CPU) experiments."""
    return SegConfig(num_classes=num_classes, stem_width=16, widths=(16, 32, 48, 64),
                     depths=(1, 1, 1, 1), decoder_widths=(48, 32, 16))


class Backbone(Protocol):
    num_classes: int

    def __call__(self, planes: torch.Tensor, valid: torch.Tensor) -> torch.Tensor: ...


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride, kernels):
        super().__init__()
        self.body = EncoderBlock(cin, cout, stride, kernels)
        self.residual = cin == cout and stride == 1

    def forward(self, x):
        y = self.body(x)
        return x + y if self.residual else y


class IAC(nn.Module):
    """Interpolate the previous decoder map and merge it with an encoder map."""

    def __init__(self, c_prev, c_skip, cout):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(c_prev + c_skip, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout), nn.GELU())

    def forward(self, prev, skip):
        prev = F.interpolate(prev, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.conv(torch.cat([prev, skip], dim=1))


class SegNet(nn.Module):
    def __init__(self, cfg: SegConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or SegConfig()
        self.num_classes = cfg.num_classes
        self.register_buffer("plane_mean", torch.zeros(5))
        self.register_buffer("plane_std", torch.ones(5))

        self.stem = nn.Sequential(
            nn.Conv2d(5, cfg.stem_width, 3, padding=1, bias=False),
            nn.BatchNorm2d(cfg.stem_width), nn.GELU())
        stages = []
        cin = cfg.stem_width
        for i, (w, depth) in enumerate(zip(cfg.widths, cfg.depths)):
            blocks = [ResidualBlock(cin, w, 1 if i == 0 else 2, cfg.strip_kernels)]
            blocks += [ResidualBlock(w, w, 1, cfg.strip_kernels) for _ in range(depth - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = w
        self.stages = nn.ModuleList(stages)

        d3, d2, d1 = cfg.decoder_widths
        w1, w2, w3, w4 = cfg.widths
        self.iac = nn.ModuleList([IAC(w4, w3, d3), IAC(d3, w2, d2), IAC(d2, w1, d1)])
        fused = d3 + d2 + d1 if cfg.fuse else d1
        self.head = nn.Conv2d(fused, cfg.num_classes, 1)
        if cfg.aux_heads:
            self.aux = nn.ModuleList([nn.Conv2d(d3, cfg.num_classes, 1),
                                      nn.Conv2d(d2, cfg.num_classes, 1)])
        self.last_aux = []

    def set_normalization(self, mean, std):
        self.plane_mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
        self.plane_std.copy_(torch.clamp(torch.as_tensor(std, dtype=torch.float32), min=1e-6))

    def encoder_forward(self, planes, valid):
        if planes.shape[-3] != 5:
            raise ShapeMismatch(f"expected 5 input planes, got {planes.shape[-3]}")
        h, w = planes.shape[-2:]
        if h % 8 or w % 8:
            raise ShapeMismatch(f"input {h}x{w} is not divisible by 8")
        x = (planes - self.plane_mean.view(1, -1, 1, 1)) / self.plane_std.view(1, -1, 1, 1)
        x = x * valid.unsqueeze(1).to(x.dtype)
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def iac_decode(self, feats):
        f1, f2, f3, f4 = feats
        d3 = self.iac[0](f4, f3)
        d2 = self.iac[1](d3, f2)
        d1 = self.iac[2](d2, f1)
        size = d1.shape[-2:]
        if self.cfg.fuse:
            up = lambda t: F.interpolate(t, size=size, mode="bilinear", align_corners=False)
            merged = torch.cat([up(d3), up(d2), d1], dim=1)
        else:
            merged = d1
        if self.cfg.aux_heads:
            self.last_aux = [F.interpolate(head(d), size=size, mode="bilinear", align_corners=False)
                             for head, d in zip(self.aux, (d3, d2))]
        return self.head(merged)

    def forward(self, planes, valid):
        return self.iac_decode(self.encoder_forward(planes, valid))


def segment(model, planes, valid):
    return model(planes, valid)


class StubBackbone(nn.Module):
    """Single 1x1 convolution; the smallest thing honouring the backbone contract."""

    def __init__(self, num_classes):
        super().__init__()
        self.num_classes = num_classes
        self.conv = nn.Conv2d(5, num_classes, 1)

    def set_normalization(self, mean, std):
        pass

    def forward(self, planes, valid):
        return self.conv(planes * valid.unsqueeze(1).to(planes.dtype))
