"""Saliency-mask branch: caption-pretrained encoder, ASPP bridge and a small
upsampling decoder that predicts a blurred thumbnail of the matte."""
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ResNetEncoder, VisualBackboneConfig, normalize, scaled

ASPP_STRIDE = 16


@dataclass
class AsppConfig:
    dilation_rates: tuple = (6, 12, 18)
    branch_channels: int = 256
    global_pool_branch: bool = True

    def __post_init__(self):
        self.dilation_rates = tuple(int(r) for r in self.dilation_rates)
        if len(set(self.dilation_rates)) != len(self.dilation_rates):
            raise ValueError(f"dilation rates must be distinct: {self.dilation_rates}")
        if any(r < 1 for r in self.dilation_rates):
            raise ValueError(f"dilation rates must be >= 1: {self.dilation_rates}")


@dataclass
class SpdConfig:
    width_multiplier: float = 0.25
    aspp: AsppConfig = field(default_factory=AsppConfig)
    mask_stride: int = 16
    head_bias: float = 0.0

    def __post_init__(self):
        if isinstance(self.aspp, dict):
            self.aspp = AsppConfig(**self.aspp)
        if self.mask_stride not in (4, 8, 16):
            raise ValueError(f"mask_stride must be 4, 8 or 16, got {self.mask_stride}")

    def backbone_config(self, in_channels=3):
        return VisualBackboneConfig(width_multiplier=self.width_multiplier,
                                    in_channels=in_channels, dilate_last_stage=True)


def conv_bn_relu(in_ch, out_ch, kernel=3, dilation=1):
    pad = dilation * (kernel - 1) // 2
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class ASPP(nn.Module):
    def __init__(self, in_ch, cfg: AsppConfig, width=1.0):
        super().__init__()
        out_ch = scaled(cfg.branch_channels, width)
        self.branches = nn.ModuleList([conv_bn_relu(in_ch, out_ch, 1)])
        self.branches.extend(conv_bn_relu(in_ch, out_ch, 3, r) for r in cfg.dilation_rates)
        self.pool = None
        if cfg.global_pool_branch:
            # no BN here: the pooled map is 1x1 and batch statistics degenerate at batch size 1
            self.pool = nn.Sequential(
                nn.AdaptiveAvgPool2d(1), nn.Conv2d(in_ch, out_ch, 1), nn.ReLU(inplace=True)
            )
        n = len(self.branches) + (self.pool is not None)
        self.project = conv_bn_relu(n * out_ch, out_ch, 1)
        self.out_channels = out_ch

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        if self.pool is not None:
            outs.append(self.pool(x).expand(-1, -1, *x.shape[-2:]))
        return self.project(torch.cat(outs, dim=1))


class SaliencyDecoder(nn.Module):
    """Two conv blocks from the stride-16 ASPP output; each block first
    upsamples 2x while the current stride is above ``mask_stride``."""

    def __init__(self, in_ch, mask_stride, head_bias=0.0):
        super().__init__()
        mid = max(8, in_ch // 2)
        self.upsample = []
        stride = ASPP_STRIDE
        for _ in range(2):
            up = stride > mask_stride
            self.upsample.append(up)
            stride //= 2 if up else 1
        if stride != mask_stride:
            raise ValueError(f"cannot reach mask stride {mask_stride} in two 2x steps")
        self.block1 = conv_bn_relu(in_ch, mid)
        self.block2 = conv_bn_relu(mid, mid)
        self.head = nn.Conv2d(mid, 1, 1)
        nn.init.constant_(self.head.bias, head_bias)

    def forward(self, x):
        for up, block in zip(self.upsample, (self.block1, self.block2)):
            if up:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = block(x)
        return self.head(x)


class SpdNetwork(nn.Module):
    def __init__(self, cfg: SpdConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = ResNetEncoder(cfg.backbone_config())
        self.aspp = ASPP(self.backbone.out_channels, cfg.aspp, cfg.width_multiplier)
        self.decoder = SaliencyDecoder(self.aspp.out_channels, cfg.mask_stride, cfg.head_bias)

    def load_caption_backbone(self, state_dict):
        """Initialise the encoder from a captioning checkpoint's backbone weights."""
        self.backbone.load_state_dict(state_dict, strict=True)

    def forward(self, image):
        """Return ``(mask, pyramid)``; ``pyramid`` maps stage index -> feature."""
        feats = self.backbone(normalize(image))
        logits = self.decoder(self.aspp(feats[4]))
        return torch.sigmoid(logits), feats


def spd_loss(mask, target):
    """Per-sample RMSE between predicted mask and saliency target, batch-averaged."""
    if mask.shape != target.shape:
        raise ValueError(f"shape mismatch: mask {tuple(mask.shape)} vs target {tuple(target.shape)}")
    diff = (mask - target).reshape(mask.shape[0], -1) if mask.dim() > 2 else (mask - target)[None]
    return diff.pow(2).mean(dim=1).sqrt().mean()


def upsample_mask(mask, size):
    """Bilinear handoff of the saliency mask to image resolution."""
    return F.interpolate(mask, size=size, mode="bilinear", align_corners=False).clamp(0.0, 1.0)
