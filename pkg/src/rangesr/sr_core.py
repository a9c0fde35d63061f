"""Guided model-based super-resolution: K unrolled half-quadratic-splitting layers.

Each layer runs

    T <- closed-form data consistency given (S, Z, Y)
    Z <- denoiser(T)
    Y <- mask(Z) * Z

Tensors are batched as [B, C, H, W]; the low-res measurement S has the
decimated height of the DownsampleSpec.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfig, InvalidPenalty, ShapeMismatch
from .rangeview import DownsampleSpec

# per-channel scale used to bring range/remission near unit magnitude
CHANNEL_SCALE = {"range": 20.0, "remission": 1.0, "x": 20.0, "y": 20.0, "z": 2.0}


@dataclass
class UnrollConfig:
    K: int = 4
    penalty_init: float = 0.1
    sr_channels: tuple = ("range", "remission")
    denoiser_width: int = 18
    mask_width: int = 8
    share_weights_across_layers: bool = False
    strip_kernels: tuple = (7, 11, 21)

    def __post_init__(self):
        self.sr_channels = tuple(self.sr_channels)
        self.strip_kernels = tuple(int(k) for k in self.strip_kernels)
        if self.K < 1:
            raise InvalidConfig(f"K must be >= 1, got {self.K}")
        if not self.penalty_init > 0:
            raise InvalidConfig(f"penalty_init must be > 0, got {self.penalty_init}")
        unknown = set(self.sr_channels) - set(CHANNEL_SCALE)
        if unknown:
            raise InvalidConfig(f"unknown SR channels {sorted(unknown)}")


class UnrollState(NamedTuple):
    T: torch.Tensor
    Z: torch.Tensor
    Y: torch.Tensor
    mask: torch.Tensor  # [B, 1, H, W]
    b: torch.Tensor


def data_consistency(S, Z, Y, spec: DownsampleSpec, b, lo_valid=None):
    """Exact minimizer of 1/2|S - DT|^2 + b/2|Z - T|^2 + b/2|Y - T|^2.

    Because D^T D is a 0/1 diagonal the normal equations decouple per pixel:
    selected rows get (S + b(Z + Y)) / (1 + 2b), all others (Z + Y) / 2.
    Pixels flagged invalid in `lo_valid` count as missing measurements.
    """
    if torch.is_tensor(b):
        if (b <= 0).any():
            raise InvalidPenalty(f"penalty must be positive, got {b}")
    elif not b > 0:
        raise InvalidPenalty(f"penalty must be positive, got {b}")
    if Z.shape != Y.shape:
        raise ShapeMismatch(f"Z {tuple(Z.shape)} vs Y {tuple(Y.shape)}")
    if Z.shape[-2] != spec.hi_height or S.shape[-2] != spec.lo_height:
        raise ShapeMismatch(
            f"heights S={S.shape[-2]}, Z={Z.shape[-2]} do not fit spec "
            f"{spec.lo_height}->{spec.hi_height}")
    if S.shape[:-2] != Z.shape[:-2] or S.shape[-1] != Z.shape[-1]:
        raise ShapeMismatch(f"S {tuple(S.shape)} incompatible with Z {tuple(Z.shape)}")

    zy = Z + Y
    T = 0.5 * zy
    rows = list(spec.selected_rows)
    fused = (S + b * zy[..., rows, :]) / (1 + 2 * b)
    if lo_valid is not None:
        keep = lo_valid.to(torch.bool)
        if keep.dim() == S.dim() - 1:
            keep = keep.unsqueeze(-3)
        fused = torch.where(keep, fused, T[..., rows, :])
    T = T.clone()
    T[..., rows, :] = fused
    return T


def nearest_row_upsample(S, spec: DownsampleSpec):
    idx = torch.as_tensor(spec.nearest_rows(), device=S.device)
    return S.index_select(-2, idx)


def apply_mask(mask, Z):
    """Y = mask * Z with the single-plane mask broadcast over channels."""
    if mask.dim() == Z.dim() - 1:
        mask = mask.unsqueeze(-3)
    if mask.shape[-2:] != Z.shape[-2:]:
        raise ShapeMismatch(f"mask {tuple(mask.shape)} vs Z {tuple(Z.shape)}")
    return mask * Z


class MSCA(nn.Module):
    """Multi-scale convolutional attention.

    Depth-wise 5x5 aggregation, strip-convolution branches (1xk then kx1,
    depth-wise), a 1x1 channel mix, and the result used as a multiplicative
    attention map on the input.
    """

    def __init__(self, dim, kernels=(7, 11, 21)):
        super().__init__()
        self.local = nn.Conv2d(dim, dim, 5, padding=2, groups=dim)
        self.strips = nn.ModuleList()
        for k in kernels:
            self.strips.append(nn.Sequential(
                nn.Conv2d(dim, dim, (1, k), padding=(0, k // 2), groups=dim),
                nn.Conv2d(dim, dim, (k, 1), padding=(k // 2, 0), groups=dim),
            ))
        self.mix = nn.Conv2d(dim, dim, 1)

    def forward(self, x):
        attn = self.local(x)
        attn = attn + sum(branch(attn) for branch in self.strips)
        return self.mix(attn) * x


class EncoderBlock(nn.Module):
    """3x3 convolution followed by MSCA (residual)."""

    def __init__(self, cin, cout, stride=1, kernels=(7, 11, 21), norm=True):
        super().__init__()
        layers = [nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=not norm)]
        if norm:
            layers.append(nn.BatchNorm2d(cout))
        layers.append(nn.GELU())
        self.conv = nn.Sequential(*layers)
        self.attn = MSCA(cout, kernels)

    def forward(self, x):
        x = self.conv(x)
        return x + self.attn(x)


class Denoiser(nn.Module):
    """Compact two-scale encoder/decoder acting on normalized channels.

    A learnable 1x1 skip (initialized to identity) carries the input straight
    through, so a fresh denoiser starts close to the identity map.
    """

    def __init__(self, channels, width=16, kernels=(7, 11, 21), scale=None):
        super().__init__()
        if scale is None:
            scale = torch.ones(channels)
        self.register_buffer("scale", torch.as_tensor(scale, dtype=torch.float32).view(1, -1, 1, 1))
        self.enc1 = EncoderBlock(channels, width, kernels=kernels, norm=False)
        self.enc2 = EncoderBlock(width, 2 * width, stride=2, kernels=kernels, norm=False)
        self.fuse = nn.Conv2d(3 * width, width, 3, padding=1)
        self.out = nn.Conv2d(width, channels, 3, padding=1)
        self.skip = nn.Conv2d(channels, channels, 1)
        with torch.no_grad():
            self.skip.weight.copy_(torch.eye(channels).view(channels, channels, 1, 1))
            self.skip.bias.zero_()
            self.out.weight.mul_(0.1)
            self.out.bias.zero_()

    def forward(self, T):
        x = T / self.scale
        e1 = self.enc1(x)
        e2 = self.enc2(e1)
        up = F.interpolate(e2, size=e1.shape[-2:], mode="bilinear", align_corners=False)
        d = F.gelu(self.fuse(torch.cat([up, e1], dim=1)))
        return (self.out(d) + self.skip(x)) * self.scale


class GuidanceMask(nn.Module):
    """Three-layer convolutional head producing a nonnegative [B, 1, H, W] map."""

    def __init__(self, channels, width=8, scale=None):
        super().__init__()
        if scale is None:
            scale = torch.ones(channels)
        self.register_buffer("scale", torch.as_tensor(scale, dtype=torch.float32).view(1, -1, 1, 1))
        self.net = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1), nn.GELU(),
            nn.Conv2d(width, width, 3, padding=1), nn.GELU(),
            nn.Conv2d(width, 1, 3, padding=1),
        )
        # softplus(0.5413) == 1, so a fresh mask is close to the identity
        with torch.no_grad():
            self.net[-1].bias.fill_(math.log(math.e - 1))

    def forward(self, Z):
        return F.softplus(self.net(Z / self.scale))


def _inv_softplus(y):
    return math.log(math.expm1(y))


class UnrollLayer(nn.Module):
    def __init__(self, denoiser, mask, penalty_init, learn_penalty=True):
        super().__init__()
        self.denoiser = denoiser
        self.mask = mask
        # b = softplus(raw) stays positive whatever the optimizer does
        raw = torch.tensor(_inv_softplus(penalty_init))
        if learn_penalty:
            self.raw_penalty = nn.Parameter(raw)
        else:
            self.register_buffer("raw_penalty", raw)

    @property
    def penalty(self):
        return F.softplus(self.raw_penalty)

    def forward(self, S, Z, Y, spec, lo_valid=None):
        b = self.penalty
        T = data_consistency(S, Z, Y, spec, b, lo_valid)
        Z = self.denoiser(T)
        m = self.mask(Z)
        return UnrollState(T, Z, apply_mask(m, Z), m, b)


class SRNet(nn.Module):
    def __init__(self, spec: DownsampleSpec, cfg: Optional[UnrollConfig] = None):
        super().__init__()
        self.cfg = cfg = cfg or UnrollConfig()
        self.spec = spec
        c = len(cfg.sr_channels)
        scale = [CHANNEL_SCALE[name] for name in cfg.sr_channels]

        def make():
            return (Denoiser(c, cfg.denoiser_width, cfg.strip_kernels, scale),
                    GuidanceMask(c, cfg.mask_width, scale))

        layers = []
        shared = make() if cfg.share_weights_across_layers else None
        for k in range(cfg.K):
            den, msk = shared or make()
            # with Z = Y = upsample(S) the first solve returns the same T for every b,
            # so a learnable b there would never receive gradient
            layers.append(UnrollLayer(den, msk, cfg.penalty_init, learn_penalty=k > 0))
        self.layers = nn.ModuleList(layers)

    def forward(self, S, lo_valid=None, return_intermediates=False):
        if S.shape[-2] != self.spec.lo_height:
            raise ShapeMismatch(f"input has {S.shape[-2]} rows, expected {self.spec.lo_height}")
        Z = nearest_row_upsample(S, self.spec)
        Y = Z
        states: List[UnrollState] = []
        for layer in self.layers:
            st = layer(S, Z, Y, self.spec, lo_valid)
            Z, Y = st.Z, st.Y
            states.append(st)
        if return_intermediates:
            return Y, states
        return Y


def sr_forward(S, model: SRNet, lo_valid=None):
    """Final estimate plus every per-layer UnrollState."""
    return model(S, lo_valid, return_intermediates=True)


def count_parameters(model: nn.Module) -> int:
    # shared submodules are yielded once by parameters()
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
