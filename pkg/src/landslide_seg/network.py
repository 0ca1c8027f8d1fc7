"""Encoder-decoder segmentation network with dual-branch optical/DEM fusion."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import NetworkConfig


def conv_block(in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
               dilation: int = 1) -> nn.Sequential:
    padding = dilation * (kernel // 2)
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding, dilation=dilation,
                  bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def upsample_to(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class CoordinateAttention(nn.Module):
    """Direction-aware channel attention with separate row and column gates."""

    def __init__(self, channels: int, reduction: int = 32, min_hidden: int = 8):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"channels={channels} not divisible by reduction={reduction}")
        hidden = max(min_hidden, channels // reduction)
        self.shared = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.BatchNorm2d(hidden),
            nn.ReLU(inplace=True),
        )
        self.gate_h = nn.Conv2d(hidden, channels, 1)
        self.gate_w = nn.Conv2d(hidden, channels, 1)

    def gates(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h, w = x.shape[-2:]
        pooled_h = x.mean(dim=3, keepdim=True)  # C x h x 1
        pooled_w = x.mean(dim=2, keepdim=True).transpose(2, 3)  # C x w x 1
        y = self.shared(torch.cat([pooled_h, pooled_w], dim=2))
        y_h, y_w = torch.split(y, [h, w], dim=2)
        a_h = torch.sigmoid(self.gate_h(y_h))
        a_w = torch.sigmoid(self.gate_w(y_w.transpose(2, 3)))
        return a_h, a_w

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a_h, a_w = self.gates(x)
        return x * a_h * a_w


class SEBlock(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"channels={channels} not divisible by reduction={reduction}")
        self.fc1 = nn.Conv2d(channels, channels // reduction, 1)
        self.fc2 = nn.Conv2d(channels // reduction, channels, 1)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        s = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gates(x)


class AtrousConv(nn.Module):
    """3x3 dilated conv + BN + ReLU whose rate shrinks on small inputs.

    A rate at or beyond the feature extent only ever samples padding, so
    it is clamped to ``min(h, w) - 1`` with a warning.
    """

    def __init__(self, in_ch: int, out_ch: int, rate: int):
        super().__init__()
        self.rate = rate
        self.conv = nn.Conv2d(in_ch, out_ch, 3, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)

    def effective_rate(self, h: int, w: int) -> int:
        limit = max(1, min(h, w) - 1)
        if self.rate > limit:
            warnings.warn(f"atrous rate {self.rate} >= feature extent {min(h, w)}; clamped to {limit}",
                          RuntimeWarning, stacklevel=3)
            return limit
        return self.rate

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        r = self.effective_rate(*x.shape[-2:])
        y = F.conv2d(x, self.conv.weight, None, padding=r, dilation=r)
        return F.relu(self.bn(y))


class ASPP(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, rates: Sequence[int] = (6, 12, 18),
                 branch_ch: Optional[int] = None):
        super().__init__()
        branch_ch = branch_ch or out_ch
        self.rates = tuple(rates)
        self.point = conv_block(in_ch, branch_ch, kernel=1)
        self.atrous = nn.ModuleList(AtrousConv(in_ch, branch_ch, r) for r in self.rates)
        # no BN on the pooled branch: its spatial extent is 1x1
        self.pool_conv = nn.Conv2d(in_ch, branch_ch, 1)
        self.project = conv_block(branch_ch * (len(self.rates) + 2), out_ch, kernel=1)

    def branches(self, x: torch.Tensor) -> List[torch.Tensor]:
        size = x.shape[-2:]
        pooled = F.relu(self.pool_conv(F.adaptive_avg_pool2d(x, 1)))
        return [self.point(x), *(b(x) for b in self.atrous), pooled.expand(-1, -1, *size)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(torch.cat(self.branches(x), dim=1))


class HeterogeneousFeatureExtractor(nn.Module):
    """Two unshared branches (optical, elevation) fused under coordinate attention.

    Each branch is conv block -> max pool -> conv block. The concatenated
    half-resolution maps are reweighted by coordinate attention, upsampled,
    joined with both branches' first-block maps and fused by one more conv
    block, giving a full-resolution map of ``hfe_out_channels``.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c1, c2 = cfg.hfe_channels
        self.hrsi_block1 = conv_block(cfg.in_channels_hrsi, c1)
        self.hrsi_block2 = conv_block(c1, c2)
        self.dem_block1 = conv_block(cfg.in_channels_dem, c1)
        self.dem_block2 = conv_block(c1, c2)
        self.pool = nn.MaxPool2d(2)
        self.attention = CoordinateAttention(2 * c2, cfg.ca_reduction)
        self.fuse = conv_block(2 * c2 + 2 * c1, cfg.hfe_out_channels)

    def forward(self, hrsi: torch.Tensor, dem: torch.Tensor) -> torch.Tensor:
        if hrsi.shape[-2:] != dem.shape[-2:] or hrsi.shape[0] != dem.shape[0]:
            raise ValueError(f"branch shape mismatch: hrsi {tuple(hrsi.shape)} vs dem {tuple(dem.shape)}")
        h1 = self.hrsi_block1(hrsi)
        d1 = self.dem_block1(dem)
        h2 = self.hrsi_block2(self.pool(h1))
        d2 = self.dem_block2(self.pool(d1))
        weighted = self.attention(torch.cat([h2, d2], dim=1))
        up = upsample_to(weighted, h1.shape[-2:])
        return self.fuse(torch.cat([up, h1, d1], dim=1))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch: int, width: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        out_ch = width * self.expansion
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, width, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
            nn.BatchNorm2d(width), nn.ReLU(inplace=True),
            nn.Conv2d(width, out_ch, 1, bias=False), nn.BatchNorm2d(out_ch),
        )
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                                          nn.BatchNorm2d(out_ch))

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(self.body(x) + identity)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_ch: int, width: int, stride: int = 1, dilation: int = 1):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, width, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
            nn.BatchNorm2d(width), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=dilation, dilation=dilation, bias=False),
            nn.BatchNorm2d(width),
        )
        self.shortcut = None
        if stride != 1 or in_ch != width:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, width, 1, stride=stride, bias=False),
                                          nn.BatchNorm2d(width))

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(self.body(x) + identity)


BACKBONES = {
    # block type, units per stage, default widths
    "resnet101": (Bottleneck, (3, 4, 23, 3), (64, 128, 256, 512)),
    "small": (BasicBlock, (2, 2, 2, 2), (16, 32, 48, 64)),
}


def _stage(block, in_ch, width, units, stride, dilation):
    layers = [block(in_ch, width, stride=stride, dilation=max(1, dilation // 2) if stride == 1 else 1)]
    out_ch = width * block.expansion
    layers += [block(out_ch, width, dilation=dilation) for _ in range(units - 1)]
    return nn.Sequential(*layers), out_ch


class MultiScaleFeatureExtractor(nn.Module):
    """Dilated residual backbone (output stride 8) + SE reweighting + ASPP.

    Stem and Block1 bring the map to 1/4 resolution, Block2 to 1/8; Block3
    and Block4 use dilation 2 and 4 instead of striding. Block2 features
    are concatenated with Block4 features resized to Block2's grid.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        block, units, widths = BACKBONES[cfg.backbone_depth]
        widths = tuple(cfg.backbone_widths or widths)
        stem_ch = widths[0]
        self.stem = nn.Sequential(conv_block(cfg.hfe_out_channels, stem_ch, stride=2),
                                  nn.MaxPool2d(3, stride=2, padding=1))
        self.block1, c1 = _stage(block, stem_ch, widths[0], units[0], 1, 1)
        self.block2, c2 = _stage(block, c1, widths[1], units[1], 2, 1)
        self.block3, c3 = _stage(block, c2, widths[2], units[2], 1, 2)
        self.block4, c4 = _stage(block, c3, widths[3], units[3], 1, 4)
        self.block1_channels = c1
        self.block2_channels = c2
        se_in = c2 + c4
        se_red = cfg.se_reduction
        while se_in % se_red:
            se_red -= 1
        self.se = SEBlock(se_in, se_red)
        self.aspp = ASPP(se_in, cfg.encoder_out_channels, cfg.aspp_rates, cfg.aspp_channels)

    def forward(self, x: torch.Tensor):
        b1 = self.block1(self.stem(x))
        b2 = self.block2(b1)
        b4 = self.block4(self.block3(b2))
        merged = torch.cat([b2, upsample_to(b4, b2.shape[-2:])], dim=1)
        return self.aspp(self.se(merged)), b1, b2


@dataclass
class EncoderOutput:
    fused: torch.Tensor  # encoder_out_channels x H/8 x W/8
    block1: torch.Tensor  # H/4 x W/4
    block2: torch.Tensor  # H/8 x W/8


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.hfe = HeterogeneousFeatureExtractor(cfg)
        self.mafe = MultiScaleFeatureExtractor(cfg)

    def forward(self, hrsi: torch.Tensor, dem: torch.Tensor) -> EncoderOutput:
        h, w = hrsi.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"input size {h}x{w} is not a multiple of 8")
        fused, b1, b2 = self.mafe(self.hfe(hrsi, dem))
        return EncoderOutput(fused, b1, b2)


class ProjectionHead(nn.Module):
    """1x1 conv to ``dim`` channels followed by per-pixel L2 normalisation."""

    def __init__(self, in_ch: int, dim: int = 128):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, dim, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.conv(x), dim=1, eps=1e-12)


class Decoder(nn.Module):
    def __init__(self, in_ch: int, block1_ch: int, channels: int = 64, num_classes: int = 2):
        super().__init__()
        self.reduce = conv_block(in_ch + block1_ch, channels)
        self.up1 = nn.Sequential(nn.ConvTranspose2d(channels, channels, 4, stride=2, padding=1, bias=False),
                                 nn.BatchNorm2d(channels), nn.ReLU(inplace=True))
        self.up2 = nn.Sequential(nn.ConvTranspose2d(channels, channels, 4, stride=2, padding=1, bias=False),
                                 nn.BatchNorm2d(channels), nn.ReLU(inplace=True))
        self.classifier = nn.Conv2d(channels, num_classes, 1)

    def forward(self, encoder_out: torch.Tensor, block1: torch.Tensor) -> torch.Tensor:
        if encoder_out.shape[0] != block1.shape[0]:
            raise ValueError("batch size mismatch between encoder output and block1 features")
        bh, bw = block1.shape[-2:]
        eh, ew = encoder_out.shape[-2:]
        if (bh, bw) != (2 * eh, 2 * ew):
            raise ValueError(f"block1 grid {bh}x{bw} must be twice the encoder grid {eh}x{ew}")
        x = torch.cat([upsample_to(encoder_out, (bh, bw)), block1], dim=1)
        return self.classifier(self.up2(self.up1(self.reduce(x))))


class SegmentationNetwork(nn.Module):
    """Encoder, projection head and decoder; ``forward`` returns class scores."""

    def __init__(self, cfg: Optional[NetworkConfig] = None):
        super().__init__()
        self.cfg = cfg or NetworkConfig()
        self.cfg.validate()
        self.encoder = Encoder(self.cfg)
        self.projection = ProjectionHead(self.cfg.encoder_out_channels, self.cfg.projection_dim)
        self.decoder = Decoder(self.cfg.encoder_out_channels, self.encoder.mafe.block1_channels,
                               self.cfg.decoder_channels, self.cfg.num_classes)

    def forward(self, hrsi: torch.Tensor, dem: torch.Tensor) -> torch.Tensor:
        out = self.encoder(hrsi, dem)
        return self.decoder(out.fused, out.block1)

    def forward_all(self, hrsi: torch.Tensor, dem: torch.Tensor):
        out = self.encoder(hrsi, dem)
        return out, self.projection(out.fused), self.decoder(out.fused, out.block1)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
