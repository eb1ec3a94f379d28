"""Guided matting branch.

RGB plus saliency mask go through a 4-channel encoder; stages 2-4 are fused
with the saliency branch's features by non-local retrieval (TST) and the
alpha is refined over three levels (strides 8, 4, 1) by focal refinement
blocks that split a large-receptive-field body path from a small-kernel
boundary path.
"""
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ResNetEncoder, VisualBackboneConfig, normalize, scaled
from .spd import conv_bn_relu

TST_STAGES = (2, 3, 4)
LEVEL_STRIDES = (8, 4, 1)
DEFAULT_LOSS_WEIGHTS = (1.0, 2.0, 3.0)


@dataclass
class SpgmConfig:
    width_multiplier: float = 0.25
    use_tst: bool = True
    use_aft: bool = True
    # run without a guidance pyramid (retrieved half zero) instead of failing
    allow_unguided: bool = False
    focal_eps: float = 1e-3
    body_kernel: int = 5
    body_dilation: int = 2

    def backbone_config(self):
        return VisualBackboneConfig(width_multiplier=self.width_multiplier, in_channels=4,
                                    dilate_last_stage=True)


def attention_weights(k_guid, k_matt):
    """``(B, N_matt, N_guid)`` softmax over guidance locations of ``k_matt^T k_guid``.

    Keys are ``(B, key_dim, N)`` with spatial grids flattened row-major.
    """
    return torch.einsum("bdm,bdg->bmg", k_matt, k_guid).softmax(dim=-1)


def tst_fuse(k_guid, k_matt, v_guid, v_matt):
    """Retrieve guidance values with the attention map and append them to the
    matting values. Values are ``(B, value_dim, N)``; returns ``(fused, attn)``
    with ``fused`` of shape ``(B, 2 * value_dim, N_matt)``."""
    attn = attention_weights(k_guid, k_matt)
    retrieved = torch.einsum("bdg,bmg->bdm", v_guid, attn)
    return torch.cat([v_matt, retrieved], dim=1), attn


class TstBlock(nn.Module):
    def __init__(self, guid_ch, matt_ch, key_dim, value_dim):
        super().__init__()
        self.key_guid = nn.Conv2d(guid_ch, key_dim, 1)
        self.value_guid = nn.Conv2d(guid_ch, value_dim, 1)
        self.key_matt = nn.Conv2d(matt_ch, key_dim, 1)
        self.value_matt = nn.Conv2d(matt_ch, value_dim, 1)
        self.key_dim = key_dim
        self.value_dim = value_dim
        self.last_attention = None

    @property
    def out_channels(self):
        return 2 * self.value_dim

    def forward(self, f_guid, f_matt):
        b, _, h, w = f_matt.shape
        v = self.value_matt(f_matt).flatten(2)
        if f_guid is None:
            fused = torch.cat([v, torch.zeros_like(v)], dim=1)
            self.last_attention = None
            return fused.view(b, -1, h, w)
        if f_guid.shape[-2:] != f_matt.shape[-2:]:
            raise ValueError(
                f"stride mismatch: guidance grid {tuple(f_guid.shape[-2:])} vs matting grid {(h, w)}"
            )
        fused, attn = tst_fuse(self.key_guid(f_guid).flatten(2), self.key_matt(f_matt).flatten(2),
                               self.value_guid(f_guid).flatten(2), v)
        self.last_attention = attn.detach()
        return fused.view(b, -1, h, w)


def focal_mask(a_prev, eps=1e-3):
    """1 where ``eps < a < 1 - eps`` (low-confidence pixels), else 0."""
    return ((a_prev > eps) & (a_prev < 1.0 - eps)).to(a_prev.dtype)


class SeparableConv(nn.Module):
    """``k x 1`` followed by ``1 x k`` convolution (optionally dilated)."""

    def __init__(self, in_ch, out_ch, kernel=5, dilation=1, bias=True):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.vertical = nn.Conv2d(in_ch, out_ch, (kernel, 1), padding=(pad, 0),
                                  dilation=(dilation, 1), bias=False)
        self.horizontal = nn.Conv2d(out_ch, out_ch, (1, kernel), padding=(0, pad),
                                    dilation=(1, dilation), bias=bias)

    def forward(self, x):
        return self.horizontal(self.vertical(x))


class AftLevel(nn.Module):
    """Focal refinement: body path on ``a_prev`` and boundary path on
    ``a_prev * u``, both concatenated with the level feature, then fused."""

    def __init__(self, feat_ch, mid, kernel=5, dilation=2, eps=1e-3):
        super().__init__()
        self.eps = eps
        self.body = nn.Sequential(
            SeparableConv(feat_ch + 1, mid, kernel, dilation, bias=False),
            nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
            SeparableConv(mid, mid, kernel, dilation, bias=False),
            nn.BatchNorm2d(mid), nn.ReLU(inplace=True),
        )
        self.boundary = nn.Sequential(conv_bn_relu(feat_ch + 1, mid), conv_bn_relu(mid, mid))
        self.fuse = nn.Sequential(conv_bn_relu(2 * mid, mid), nn.Conv2d(mid, 1, 1))

    def forward(self, a_prev, feat):
        size = feat.shape[-2:]
        u = focal_mask(a_prev, self.eps)
        a_up = F.interpolate(a_prev, size=size, mode="bilinear", align_corners=False)
        focal_up = F.interpolate(a_prev * u, size=size, mode="bilinear", align_corners=False)
        if a_up.shape[-2:] != size:
            raise ValueError(f"upsampled alpha {tuple(a_up.shape[-2:])} != feature {tuple(size)}")
        body = self.body(torch.cat([a_up, feat], dim=1))
        edge = self.boundary(torch.cat([focal_up, feat], dim=1))
        return torch.sigmoid(self.fuse(torch.cat([body, edge], dim=1)))


class PlainLevel(nn.Module):
    """Refinement level without focal splitting, for ablations."""

    def __init__(self, feat_ch, mid, **_):
        super().__init__()
        self.net = nn.Sequential(conv_bn_relu(feat_ch + 1, mid), conv_bn_relu(mid, mid),
                                 nn.Conv2d(mid, 1, 1))

    def forward(self, a_prev, feat):
        a_up = F.interpolate(a_prev, size=feat.shape[-2:], mode="bilinear", align_corners=False)
        return torch.sigmoid(self.net(torch.cat([a_up, feat], dim=1)))


@dataclass
class MattingOutput:
    alphas: list
    seed: torch.Tensor = None
    attention: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.alphas[-1]


def _up(x, size):
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class SpgmNetwork(nn.Module):
    def __init__(self, cfg: SpgmConfig, guid_channels=None):
        super().__init__()
        self.cfg = cfg
        self.encoder = ResNetEncoder(cfg.backbone_config())
        chans = dict(zip((1, 2, 3, 4), self.encoder.cfg.stage_channels))
        guid_channels = guid_channels or chans
        self.tst = nn.ModuleDict()
        for s in TST_STAGES:
            self.tst[str(s)] = TstBlock(guid_channels[s], chans[s],
                                        key_dim=max(8, chans[s] // 8), value_dim=max(8, chans[s] // 4))
        fused = {s: self.tst[str(s)].out_channels for s in TST_STAGES}
        w = cfg.width_multiplier
        d8, d4, d1 = scaled(256, w), scaled(128, w), scaled(64, w)
        self.seed_head = nn.Conv2d(fused[4], 1, 1)
        self.merge8 = conv_bn_relu(fused[4] + fused[3] + fused[2], d8)
        self.merge4 = conv_bn_relu(d8 + chans[1], d4)
        self.merge1 = conv_bn_relu(d4 + 4, d1)
        level = AftLevel if cfg.use_aft else PlainLevel
        kw = dict(kernel=cfg.body_kernel, dilation=cfg.body_dilation, eps=cfg.focal_eps)
        self.levels = nn.ModuleList([level(d8, d8, **kw), level(d4, d4, **kw), level(d1, d1, **kw)])

    def forward(self, image, mask, guidance=None):
        """``image`` (B,3,H,W) in [0,1]; ``mask`` (B,1,H,W) saliency at image
        resolution; ``guidance`` is the saliency branch's stage pyramid."""
        if guidance is None and self.cfg.use_tst and not self.cfg.allow_unguided:
            raise ValueError("guidance pyramid missing and unguided fallback not enabled")
        if mask.shape[-2:] != image.shape[-2:]:
            raise ValueError(f"mask {tuple(mask.shape[-2:])} not at image size {tuple(image.shape[-2:])}")
        x = torch.cat([normalize(image), mask], dim=1)
        feats = self.encoder(x)
        fused = {}
        for s in TST_STAGES:
            g = guidance[s] if (guidance is not None and self.cfg.use_tst) else None
            fused[s] = self.tst[str(s)](g, feats[s])
        a0 = torch.sigmoid(self.seed_head(fused[4]))
        h, w = image.shape[-2:]
        s8 = (h // 8, w // 8)
        d8 = self.merge8(torch.cat([_up(fused[4], s8), _up(fused[3], s8), fused[2]], dim=1))
        a1 = self.levels[0](a0, d8)
        d4 = self.merge4(torch.cat([_up(d8, feats[1].shape[-2:]), feats[1]], dim=1))
        a2 = self.levels[1](a1, d4)
        d1 = self.merge1(torch.cat([_up(d4, (h, w)), x], dim=1))
        a3 = self.levels[2](a2, d1)
        attention = {s: self.tst[str(s)].last_attention for s in TST_STAGES
                     if self.tst[str(s)].last_attention is not None}
        return MattingOutput(alphas=[a1, a2, a3], seed=a0, attention=attention)


def alpha_pyramid(a_star, alphas):
    """Area-downsample the ground truth to every level's resolution."""
    return [a_star if a.shape[-2:] == a_star.shape[-2:]
            else F.interpolate(a_star, size=a.shape[-2:], mode="area") for a in alphas]


def spgm_loss(out, a_star, weights=DEFAULT_LOSS_WEIGHTS):
    """Weighted sum over levels of the mean absolute alpha error."""
    alphas = out.alphas if isinstance(out, MattingOutput) else list(out)
    if len(weights) != len(alphas):
        raise ValueError(f"{len(weights)} loss weights for {len(alphas)} alpha levels")
    targets = alpha_pyramid(a_star, alphas)
    return sum(lam * (a - t).abs().mean() for lam, a, t in zip(weights, alphas, targets))
