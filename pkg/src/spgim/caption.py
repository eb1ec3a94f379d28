"""Visual-to-textual pretraining: grid features from the encoder, decoded into
captions by a pair of causal transformer decoders (forward and backward)."""
import logging
import math
import re
import warnings
from collections import Counter
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ResNetEncoder, VisualBackboneConfig, normalize

log = logging.getLogger(__name__)

PAD, SOS, EOS, UNK = "[PAD]", "[SOS]", "[EOS]", "[UNK]"
SPECIALS = (PAD, SOS, EOS, UNK)
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class Tokenizer:
    """Lower-cased word/punctuation tokenizer with a frequency-threshold vocabulary."""

    def __init__(self, vocab=SPECIALS):
        self.itos = list(vocab)
        if tuple(self.itos[:4]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    pad_id, sos_id, eos_id, unk_id = 0, 1, 2, 3

    @staticmethod
    def split(text):
        return _TOKEN_RE.findall(text.lower())

    @classmethod
    def fit(cls, texts, min_freq=1):
        counts = Counter(w for t in texts for w in cls.split(t))
        words = sorted(w for w, c in counts.items() if c >= min_freq)
        return cls(list(SPECIALS) + words)

    def __len__(self):
        return len(self.itos)

    def encode(self, text, max_len=None, direction="forward"):
        ids = [self.stoi.get(w, self.unk_id) for w in self.split(text)]
        if direction == "backward":
            ids = ids[::-1]
        elif direction != "forward":
            raise ValueError(f"direction must be forward or backward, got {direction!r}")
        if max_len is not None:
            ids = ids[:max_len - 2]
        return [self.sos_id] + ids + [self.eos_id]

    def decode(self, ids):
        return " ".join(self.itos[i] for i in ids if i >= len(SPECIALS))


@dataclass
class TextualDecoderConfig:
    layers: int = 2
    heads: int = 4
    model_width: int = 128
    vocab_size: int = 64
    max_len: int = 30
    dropout: float = 0.1
    # share one decoder between the forward and backward directions
    shared_heads: bool = False

    def __post_init__(self):
        if self.model_width % self.heads:
            raise ValueError(f"model_width {self.model_width} not divisible by heads {self.heads}")


class Attention(nn.Module):
    """Multi-head scaled dot-product attention that keeps its per-head weights."""

    def __init__(self, width, heads, dropout=0.0):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width)
        self.v = nn.Linear(width, width)
        self.out = nn.Linear(width, width)
        self.drop = nn.Dropout(dropout)
        self.last_weights = None

    def forward(self, query, memory, mask=None):
        b, tq, d = query.shape
        tk = memory.shape[1]
        hd = d // self.heads
        q = self.q(query).view(b, tq, self.heads, hd).transpose(1, 2)
        k = self.k(memory).view(b, tk, self.heads, hd).transpose(1, 2)
        v = self.v(memory).view(b, tk, self.heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
        weights = scores.softmax(dim=-1)
        self.last_weights = weights.detach()
        out = self.drop(weights) @ v
        return self.out(out.transpose(1, 2).reshape(b, tq, d))


class DecoderLayer(nn.Module):
    def __init__(self, width, heads, dropout):
        super().__init__()
        self.self_attn = Attention(width, heads, dropout)
        self.cross_attn = Attention(width, heads, dropout)
        self.ff = nn.Sequential(
            nn.Linear(width, 4 * width), nn.GELU(), nn.Dropout(dropout), nn.Linear(4 * width, width)
        )
        self.norm1 = nn.LayerNorm(width)
        self.norm2 = nn.LayerNorm(width)
        self.norm3 = nn.LayerNorm(width)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, memory, causal):
        x = x + self.drop(self.self_attn(self.norm1(x), self.norm1(x), causal))
        x = x + self.drop(self.cross_attn(self.norm2(x), memory))
        return x + self.drop(self.ff(self.norm3(x)))


class TextualDecoder(nn.Module):
    def __init__(self, cfg: TextualDecoderConfig, embedding: nn.Embedding):
        super().__init__()
        self.cfg = cfg
        self.embedding = embedding
        self.position = nn.Embedding(cfg.max_len, cfg.model_width)
        self.embed_norm = nn.LayerNorm(cfg.model_width)
        self.drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.model_width, cfg.heads, cfg.dropout) for _ in range(cfg.layers)
        )
        self.final_norm = nn.LayerNorm(cfg.model_width)

    def forward(self, tokens, memory):
        """Logits for every prefix position, shape ``(B, T, vocab)``."""
        t = tokens.shape[1]
        if t > self.cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {self.cfg.max_len}")
        pos = torch.arange(t, device=tokens.device)
        x = self.drop(self.embed_norm(self.embedding(tokens) + self.position(pos)))
        causal = torch.ones(t, t, dtype=torch.bool, device=tokens.device).triu(1)
        for layer in self.layers:
            x = layer(x, memory, causal)
        # output projection tied to the token embedding
        return self.final_norm(x) @ self.embedding.weight.t()


class Captioner(nn.Module):
    """Encoder + linear projection to grid tokens + bidirectional decoder heads."""

    def __init__(self, backbone_cfg: VisualBackboneConfig, decoder_cfg: TextualDecoderConfig):
        super().__init__()
        self.backbone_cfg = backbone_cfg
        self.decoder_cfg = decoder_cfg
        self.backbone = ResNetEncoder(backbone_cfg)
        self.projection = nn.Linear(self.backbone.out_channels, decoder_cfg.model_width)
        embedding = nn.Embedding(decoder_cfg.vocab_size, decoder_cfg.model_width)
        nn.init.normal_(embedding.weight, std=0.02)
        self.forward_decoder = TextualDecoder(decoder_cfg, embedding)
        if decoder_cfg.shared_heads:
            self.backward_decoder = self.forward_decoder
        else:
            self.backward_decoder = TextualDecoder(decoder_cfg, embedding)
        self.register_buffer("trained_steps", torch.zeros((), dtype=torch.long))

    def encode_image(self, images):
        """Grid tokens ``(B, (H/32)*(W/32), model_width)``."""
        feats = self.backbone(normalize(images))[4]
        return self.projection(feats.flatten(2).transpose(1, 2))

    def decoder(self, direction):
        if direction == "forward":
            return self.forward_decoder
        if direction == "backward":
            return self.backward_decoder
        raise ValueError(f"unknown direction {direction!r}")

    def logits(self, grid, tokens, direction="forward"):
        return self.decoder(direction)(tokens, grid)

    def caption_step(self, grid, prefix, direction="forward"):
        """Next-token distribution after ``prefix`` (which must start with [SOS])."""
        prefix = torch.as_tensor(prefix, dtype=torch.long)
        if prefix.dim() == 1:
            prefix = prefix[None]
        if (prefix[:, 0] != Tokenizer.sos_id).any():
            raise ValueError("prefix must begin with [SOS]")
        return self.logits(grid, prefix, direction)[:, -1].softmax(dim=-1)

    def sequence_loss(self, grid, tokens, direction="forward"):
        """Teacher-forced cross entropy over padded ``(B, T)`` token ids."""
        logits = self.logits(grid, tokens[:, :-1], direction)
        return F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), tokens[:, 1:].reshape(-1),
            ignore_index=Tokenizer.pad_id,
        )

    def bicaption_loss(self, grid, fwd_tokens, bwd_tokens):
        return 0.5 * (self.sequence_loss(grid, fwd_tokens, "forward")
                      + self.sequence_loss(grid, bwd_tokens, "backward"))

    @torch.no_grad()
    def word_attention(self, grid, caption, grid_hw, direction="forward"):
        """Cross-attention heatmaps (head-averaged, last layer) for each word.

        ``caption`` is a full ``[SOS] w1 .. wT [EOS]`` sequence; the map for
        ``w_t`` is the attention of the query that predicts it. Returns
        ``(maps, meta)`` with ``maps`` of shape ``(T, h, w)``.
        """
        caption = torch.as_tensor(caption, dtype=torch.long)
        if caption.dim() == 1:
            caption = caption[None]
        dec = self.decoder(direction)
        dec(caption[:, :-1], grid)
        weights = dec.layers[-1].cross_attn.last_weights  # (1, heads, T+1, N)
        maps = weights.mean(dim=1)[0, : caption.shape[1] - 2]
        meta = {"untrained": bool(self.trained_steps.item() == 0)}
        if meta["untrained"]:
            warnings.warn("word attention exported from untrained decoder weights")
        return maps.reshape(-1, *grid_hw), meta


@dataclass
class PretrainSchedule:
    total_steps: int = 1000
    warmup_steps: int = 50
    backbone_lr: float = 0.2
    decoder_lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def factor(self, step):
        """Multiplier on the max LR: linear warmup, then cosine decay to zero."""
        if self.warmup_steps <= 0:
            raise ValueError("warmup_steps must be positive")
        if step < self.warmup_steps:
            return step / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        return 0.5 * (1.0 + math.cos(math.pi * progress))


def make_pretrain_optimizer(model: Captioner, schedule: PretrainSchedule):
    backbone = list(model.backbone.parameters())
    backbone_ids = {id(p) for p in backbone}
    rest = [p for p in model.parameters() if id(p) not in backbone_ids]
    opt = torch.optim.SGD(
        [{"params": backbone, "lr": schedule.backbone_lr, "name": "backbone"},
         {"params": rest, "lr": schedule.decoder_lr, "name": "decoder"}],
        momentum=schedule.momentum, weight_decay=schedule.weight_decay,
    )
    sched = torch.optim.lr_scheduler.LambdaLR(opt, schedule.factor)
    return opt, sched


def pad_batch(seqs):
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), Tokenizer.pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s)
    return out


def train_bicaption(model, tokenizer, batch, optimizer, scheduler=None):
    """One optimisation step on ``[(image_tensor (3,H,W), text), ...]``.

    Returns ``(loss, skipped)``; samples with empty captions are skipped.
    """
    kept = [(img, txt) for img, txt in batch if tokenizer.split(txt)]
    skipped = len(batch) - len(kept)
    if skipped:
        log.info("skipped %d sample(s) with empty captions", skipped)
    if not kept:
        return None, skipped
    max_len = model.decoder_cfg.max_len + 1
    images = torch.stack([img for img, _ in kept])
    fwd = pad_batch([tokenizer.encode(t, max_len, "forward") for _, t in kept])
    bwd = pad_batch([tokenizer.encode(t, max_len, "backward") for _, t in kept])
    model.train()
    loss = model.bicaption_loss(model.encode_image(images), fwd, bwd)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    model.trained_steps += 1
    return float(loss.detach()), skipped
