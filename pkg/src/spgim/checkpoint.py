"""Checkpoint archives: versioned header, config echo, weights per submodule."""
import dataclasses
import os
import tempfile

import torch

from .backbone import VisualBackboneConfig
from .caption import Captioner, Tokenizer
from .config import ExperimentConfig
from .spd import SpdNetwork
from .spgm import SpgmNetwork

FORMAT = "spgim-checkpoint"
VERSION = 1
KINDS = ("caption", "spd", "spgm")


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, kind, model, config: ExperimentConfig, step=0, extra=None):
    """Write atomically (temp file + rename) so readers never see a partial archive."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": config.to_toml(),
        "step": int(step),
        "weights": {name: child.state_dict() for name, child in model.named_children()},
        "buffers": {name: buf for name, buf in model.named_buffers(recurse=False)},
    }
    payload.update(extra or {})
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return path


def read_checkpoint(path, kind=None):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} archive")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {payload.get('version')}")
    if kind is not None and payload.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {payload.get('kind')!r} model, expected {kind!r}")
    return payload


def config_of(payload):
    return ExperimentConfig.from_toml(payload["config"])


def build_model(kind, cfg: ExperimentConfig, vocab_size=None):
    if kind == "spd":
        return SpdNetwork(cfg.spd_model)
    if kind == "spgm":
        guid = SpdNetwork(cfg.spd_model).backbone.cfg.stage_channels
        return SpgmNetwork(cfg.spgm_model, guid_channels=dict(zip((1, 2, 3, 4), guid)))
    if kind == "caption":
        dec = cfg.caption.decoder
        if vocab_size is not None:
            dec = dataclasses.replace(dec, vocab_size=vocab_size)
        return Captioner(VisualBackboneConfig(width_multiplier=cfg.spd_model.width_multiplier), dec)
    raise ValueError(f"unknown model kind {kind!r}")


def load_model(path, kind):
    """Rebuild the model from the config echo and restore its weights (eval mode)."""
    payload = read_checkpoint(path, kind)
    cfg = config_of(payload)
    vocab = payload.get("vocab")
    model = build_model(kind, cfg, vocab_size=len(vocab) if vocab else None)
    try:
        for name, child in model.named_children():
            if name not in payload["weights"]:
                raise KeyError(f"missing weights for submodule {name!r}")
            child.load_state_dict(payload["weights"][name], strict=True)
        for name, buf in payload.get("buffers", {}).items():
            getattr(model, name).copy_(buf)
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: weights do not match config: {exc}") from exc
    model.eval()
    extras = {"config": cfg, "step": payload["step"]}
    if vocab:
        extras["tokenizer"] = Tokenizer(vocab)
    return model, extras


def count_parameters(model_or_path, kind=None):
    """Exact trainable-parameter counts per top-level submodule (shared tensors counted once)."""
    if isinstance(model_or_path, (str, os.PathLike)):
        kind = kind or read_checkpoint(model_or_path)["kind"]
        model, _ = load_model(model_or_path, kind)
    else:
        model = model_or_path
    seen = set()
    per_module = {}
    for name, child in model.named_children():
        n = 0
        for p in child.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                n += p.numel()
        per_module[name] = n
    loose = sum(p.numel() for p in model.parameters() if id(p) not in seen)
    if loose:
        per_module["<root>"] = loose
    return {"per_module": per_module, "total": sum(per_module.values())}


def format_millions(n):
    return f"{n / 1e6:.1f}M"
