"""Bottleneck residual encoder (50-layer layout) with a channel width multiplier."""
from dataclasses import dataclass, field

import torch
import torch.nn as nn

FULL_STAGE_CHANNELS = (256, 512, 1024, 2048)
STAGE_STRIDES = (4, 8, 16, 32)
BLOCKS_PER_STAGE = (3, 4, 6, 3)
EXPANSION = 4
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


@dataclass
class VisualBackboneConfig:
    width_multiplier: float = 1.0
    in_channels: int = 3
    # replace the stride of stage 4 by dilation 2 (output stride 16)
    dilate_last_stage: bool = False
    blocks: tuple = BLOCKS_PER_STAGE
    stage_channels: tuple = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.width_multiplier <= 1.0:
            raise ValueError(f"width_multiplier must be in (0, 1], got {self.width_multiplier}")
        if len(self.blocks) != 4:
            raise ValueError("backbone has exactly four stages")
        self.blocks = tuple(int(b) for b in self.blocks)
        self.stage_channels = tuple(scaled(c, self.width_multiplier) for c in FULL_STAGE_CHANNELS)

    @property
    def strides(self):
        if self.dilate_last_stage:
            return STAGE_STRIDES[:3] + (16,)
        return STAGE_STRIDES

    @property
    def stem_channels(self):
        return scaled(64, self.width_multiplier)


def normalize(image):
    mean = image.new_tensor(IMAGE_MEAN).view(1, 3, 1, 1)
    std = image.new_tensor(IMAGE_STD).view(1, 3, 1, 1)
    return (image - mean) / std


def scaled(channels, width):
    return max(1, int(round(channels * width)))


class Bottleneck(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1, dilation=1):
        super().__init__()
        mid = max(1, out_ch // EXPANSION)
        self.conv1 = nn.Conv2d(in_ch, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class ResNetEncoder(nn.Module):
    """Four-stage encoder returning every stage output.

    ``forward`` returns a dict ``{1: c1, 2: c2, 3: c3, 4: c4}`` at strides
    4, 8, 16 and 32 (16 for stage 4 when ``dilate_last_stage`` is set).
    """

    def __init__(self, cfg: VisualBackboneConfig):
        super().__init__()
        self.cfg = cfg
        stem = cfg.stem_channels
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, stem, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(stem),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        in_ch = stem
        for idx, (n_blocks, out_ch) in enumerate(zip(cfg.blocks, cfg.stage_channels)):
            stride = 1 if idx == 0 else 2
            dilation = 1
            if idx == 3 and cfg.dilate_last_stage:
                stride, dilation = 1, 2
            blocks = [Bottleneck(in_ch, out_ch, stride=stride, dilation=dilation)]
            blocks += [Bottleneck(out_ch, out_ch, dilation=dilation) for _ in range(n_blocks - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        # zero-init the last BN of each residual branch
        for m in self.modules():
            if isinstance(m, Bottleneck):
                nn.init.zeros_(m.bn3.weight)

    @property
    def out_channels(self):
        return self.cfg.stage_channels[-1]

    def forward(self, x):
        if x.shape[-1] % 32 or x.shape[-2] % 32:
            h, w = x.shape[-2:]
            raise ValueError(
                f"input {h}x{w} is not divisible by 32; pad to "
                f"{-(-h // 32) * 32}x{-(-w // 32) * 32}"
            )
        feats = {}
        x = self.stem(x)
        for idx, stage in enumerate(self.stages, start=1):
            x = stage(x)
            feats[idx] = x
        return feats
