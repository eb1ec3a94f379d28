"""End-to-end inference: saliency branch, then guided matting on the same image."""
import math

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import config_of, load_model, read_checkpoint
from .config import diff_sections
from .spd import SpdNetwork, upsample_mask
from .spgm import SpgmNetwork

PAD_MULTIPLE = 32


class ConfigMismatchError(ValueError):
    def __init__(self, fields):
        self.fields = list(fields)
        super().__init__("saliency and matting checkpoints disagree on: " + ", ".join(self.fields))


def check_compatible(spd_cfg, spgm_cfg):
    """The matting checkpoint records the saliency network it was trained against;
    both echoes must agree on ``spd_model`` and the saliency target."""
    a, b = spd_cfg.to_dict(), spgm_cfg.to_dict()
    fields = diff_sections(a.get("spd_model", {}), b.get("spd_model", {}), "spd_model.")
    for key in ("saliency_downsample", "blur_sigma"):
        if a["data"].get(key) != b["data"].get(key):
            fields.append(f"data.{key}")
    if fields:
        raise ConfigMismatchError(fields)


def load_pipeline(spd_path, spgm_path):
    check_compatible(config_of(read_checkpoint(spd_path, "spd")),
                     config_of(read_checkpoint(spgm_path, "spgm")))
    spd, _ = load_model(spd_path, "spd")
    spgm, _ = load_model(spgm_path, "spgm")
    return spd, spgm


def pad_to_multiple(x, multiple=PAD_MULTIPLE):
    """Replicate-pad a ``(B, C, H, W)`` tensor on the bottom/right."""
    h, w = x.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, (h, w)


@torch.no_grad()
def run_pipeline(image, spd: SpdNetwork, spgm: SpgmNetwork, dump_attention=False):
    """Matte one RGB image (H, W, 3) in [0, 1] of any size.

    Returns a dict of numpy planes: ``alpha`` and ``saliency_mask`` at input
    size, ``level_alphas`` (coarse to fine, cropped to the unpadded extent)
    and, if asked, ``attention`` maps keyed by encoder stage.
    """
    spd.eval()
    spgm.eval()
    x = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if x.dim() != 3 or x.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {tuple(x.shape)}")
    x = x.permute(2, 0, 1)[None]
    x, (h, w) = pad_to_multiple(x)
    mask, pyramid = spd(x)
    mask_full = upsample_mask(mask, x.shape[-2:])
    out = spgm(x, mask_full, pyramid)
    levels = []
    for a in out.alphas:
        stride = x.shape[-1] // a.shape[-1]
        levels.append(a[0, 0, :math.ceil(h / stride), :math.ceil(w / stride)].numpy())
    result = {
        "alpha": out.final[0, 0, :h, :w].numpy(),
        "saliency_mask": mask_full[0, 0, :h, :w].numpy(),
        "level_alphas": levels,
    }
    if dump_attention:
        result["attention"] = {s: a[0].numpy() for s, a in out.attention.items()}
    return result
