"""Training loops for the three networks."""
import logging
import random
from dataclasses import dataclass

import numpy as np
import torch

from . import imio
from .caption import Captioner, Tokenizer, make_pretrain_optimizer, train_bicaption
from .config import TrainConfig, lr_at
from .data import read_manifest
from .spd import SpdNetwork, spd_loss, upsample_mask
from .spgm import SpgmNetwork, spgm_loss

log = logging.getLogger(__name__)


def seed_everything(seed):
    """Seed every RNG from one integer; returns a torch generator for data order."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


@dataclass
class MattingData:
    images: torch.Tensor     # (N, 3, H, W)
    alphas: torch.Tensor     # (N, 1, H, W)
    saliency: torch.Tensor   # (N, 1, H/d, W/d)

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx):
        return MattingData(self.images[idx], self.alphas[idx], self.saliency[idx])


def to_tensor(plane):
    t = torch.as_tensor(np.asarray(plane), dtype=torch.float32)
    return t.permute(2, 0, 1) if t.dim() == 3 else t[None]


def load_matting_data(manifest_path, skip_flags=("degenerate_alpha",)):
    records = [r for r in read_manifest(manifest_path) if not set(r.flags) & set(skip_flags)]
    if not records:
        raise ValueError(f"no usable records in {manifest_path}")
    return MattingData(
        torch.stack([to_tensor(imio.read_image(r.image)) for r in records]),
        torch.stack([to_tensor(imio.read_alpha(r.alpha)) for r in records]),
        torch.stack([to_tensor(imio.read_alpha(r.saliency)) for r in records]),
    )


def _optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.initial_lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.initial_lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def _batches(n, cfg: TrainConfig, gen):
    """Yield ``(t, index_tensor)``; ``t`` is the step or epoch fed to the LR schedule."""
    bs = min(cfg.batch_size, n)
    if cfg.unit == "step":
        perm, pos = torch.randperm(n, generator=gen), 0
        for step in range(cfg.duration):
            if pos + bs > n:
                perm, pos = torch.randperm(n, generator=gen), 0
            yield step, perm[pos:pos + bs]
            pos += bs
    else:
        for epoch in range(cfg.duration):
            perm = torch.randperm(n, generator=gen)
            for i in range(0, n - bs + 1, bs):
                yield epoch, perm[i:i + bs]


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def train_spd(net: SpdNetwork, data: MattingData, cfg: TrainConfig, log_every=50):
    gen = seed_everything(cfg.seed)
    opt = _optimizer(net.parameters(), cfg)
    history = []
    net.train()
    for t, idx in _batches(len(data), cfg, gen):
        _set_lr(opt, lr_at(t, cfg))
        mask, _ = net(data.images[idx])
        loss = spd_loss(mask, data.saliency[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if log_every and len(history) % log_every == 0:
            log.info("spd %s %d loss %.4f", cfg.unit, t, history[-1])
    net.eval()
    return history


@torch.no_grad()
def guidance(spd_net: SpdNetwork, images):
    spd_net.eval()
    mask, pyramid = spd_net(images)
    return upsample_mask(mask, images.shape[-2:]), pyramid


def train_spgm(net: SpgmNetwork, spd_net: SpdNetwork, data: MattingData, cfg: TrainConfig,
               log_every=50):
    """Train the matting branch with the saliency branch frozen."""
    gen = seed_everything(cfg.seed)
    for p in spd_net.parameters():
        p.requires_grad_(False)
    mask, pyramid = guidance(spd_net, data.images)
    opt = _optimizer(net.parameters(), cfg)
    weights = cfg.loss_weights or (1.0, 2.0, 3.0)
    history = []
    net.train()
    for t, idx in _batches(len(data), cfg, gen):
        _set_lr(opt, lr_at(t, cfg))
        out = net(data.images[idx], mask[idx], {k: v[idx] for k, v in pyramid.items()})
        loss = spgm_loss(out, data.alphas[idx], weights)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
        if log_every and len(history) % log_every == 0:
            log.info("spgm %s %d loss %.4f", cfg.unit, t, history[-1])
    net.eval()
    return history


def train_captioner(model: Captioner, tokenizer: Tokenizer, images, texts, caption_cfg,
                    seed=0, log_every=50):
    """Bidirectional caption pretraining over ``schedule.total_steps`` mini-batches."""
    gen = seed_everything(seed)
    schedule = caption_cfg.schedule
    opt, sched = make_pretrain_optimizer(model, schedule)
    n = len(texts)
    bs = min(caption_cfg.batch_size, n)
    history, skipped = [], 0
    perm, pos = torch.randperm(n, generator=gen), 0
    for step in range(schedule.total_steps):
        if pos + bs > n:
            perm, pos = torch.randperm(n, generator=gen), 0
        idx = perm[pos:pos + bs].tolist()
        pos += bs
        loss, s = train_bicaption(model, tokenizer, [(images[i], texts[i]) for i in idx], opt, sched)
        skipped += s
        if loss is not None:
            history.append(loss)
        if log_every and history and (step + 1) % log_every == 0:
            log.info("caption step %d loss %.4f", step, history[-1])
    model.eval()
    return history, skipped
