"""Composite generation: alpha blending, trimaps, saliency targets and manifests."""
import hashlib
import json
import logging
import os
import warnings
from dataclasses import dataclass, field, asdict

import cv2
import numpy as np
from scipy import ndimage

from . import imio

log = logging.getLogger(__name__)

BACKGROUND, UNKNOWN, FOREGROUND = 0, 128, 255
MANIFEST_FIELDS = ("image", "alpha", "trimap", "saliency", "fg_id", "bg_id", "seed", "flags")
DEFAULT_RATIOS = {"train": 100, "test": 20}


@dataclass
class ForegroundAsset:
    foreground: np.ndarray
    alpha: np.ndarray
    id: str

    def __post_init__(self):
        self.foreground = np.asarray(self.foreground, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        check_alpha(self.alpha)
        if self.foreground.shape[:2] != self.alpha.shape:
            raise ValueError(
                f"foreground {self.foreground.shape[:2]} and alpha {self.alpha.shape} differ in size"
            )


@dataclass
class SynthesisConfig:
    threshold_lo: float = 0.0
    threshold_hi: float = 1.0
    radius_range: tuple = (1, 15)
    saliency_downsample: int = 16
    blur_sigma: float = 1.0
    # square output side; None keeps the foreground size
    size: int | None = None


@dataclass
class Trimap:
    labels: np.ndarray
    radius: int
    degenerate: bool = False


def check_alpha(alpha):
    alpha = np.asarray(alpha)
    if alpha.ndim != 2:
        raise ValueError(f"alpha must be a 2-D plane, got shape {alpha.shape}")
    if alpha.size and (np.nanmin(alpha) < 0.0 or np.nanmax(alpha) > 1.0 or np.isnan(alpha).any()):
        raise ValueError(
            f"alpha values must lie in [0, 1]; got range [{np.nanmin(alpha)}, {np.nanmax(alpha)}]"
        )


def fit_background(background, height, width):
    """Bilinear scale-to-cover followed by a centre crop to ``height x width``."""
    bg = np.asarray(background, dtype=np.float64)
    bh, bw = bg.shape[:2]
    scale = max(height / bh, width / bw)
    nh, nw = max(height, int(np.ceil(bh * scale))), max(width, int(np.ceil(bw * scale)))
    if (nh, nw) != (bh, bw):
        bg = cv2.resize(bg, (nw, nh), interpolation=cv2.INTER_LINEAR)
    top, left = (nh - height) // 2, (nw - width) // 2
    return bg[top:top + height, left:left + width]


def compose(foreground, background, alpha=None, resize_background=True):
    """Blend ``alpha * F + (1 - alpha) * B`` per pixel and channel.

    ``foreground`` is either a :class:`ForegroundAsset` or an RGB plane, in
    which case ``alpha`` must be given.
    """
    if isinstance(foreground, ForegroundAsset):
        fg, alpha = foreground.foreground, foreground.alpha
    else:
        fg = np.asarray(foreground, dtype=np.float64)
        alpha = np.asarray(alpha, dtype=np.float64)
        check_alpha(alpha)
    h, w = alpha.shape
    bg = np.asarray(background, dtype=np.float64)
    if resize_background and bg.shape[:2] != (h, w):
        bg = fit_background(bg, h, w)
    if fg.shape[:2] != (h, w) or bg.shape[:2] != (h, w):
        raise ValueError(
            f"shape mismatch: foreground {fg.shape[:2]}, alpha {(h, w)}, background {bg.shape[:2]}"
        )
    a = alpha[..., None] if fg.ndim == 3 else alpha
    return a * fg + (1.0 - a) * bg


def area_downsample(plane, factor):
    plane = np.asarray(plane, dtype=np.float64)
    h, w = plane.shape
    if h % factor or w % factor:
        raise ValueError(f"plane {h}x{w} is not divisible by downsample factor {factor}")
    return plane.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def make_saliency_target(alpha_gt, downsample=16, blur_sigma=1.0):
    """Gaussian-blurred thumbnail of the ground-truth matte (reflective borders)."""
    if downsample < 1:
        raise ValueError(f"downsample must be >= 1, got {downsample}")
    if blur_sigma <= 0:
        raise ValueError(f"blur_sigma must be positive, got {blur_sigma}")
    check_alpha(alpha_gt)
    small = area_downsample(alpha_gt, int(downsample))
    out = ndimage.gaussian_filter(small, sigma=blur_sigma, mode="reflect")
    return np.clip(out, 0.0, 1.0)


def disk(radius):
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= r * r


def make_trimap(alpha_gt, threshold_lo=0.0, threshold_hi=1.0, radius=(1, 15), seed=0):
    """Threshold the matte into fg/bg/unknown and dilate the unknown band.

    ``radius`` is either a fixed int or an inclusive ``(lo, hi)`` range from
    which the dilation radius is drawn with ``seed``.
    """
    if not 0.0 <= threshold_lo < threshold_hi <= 1.0:
        raise ValueError(f"need 0 <= lo < hi <= 1, got lo={threshold_lo}, hi={threshold_hi}")
    check_alpha(alpha_gt)
    alpha = np.asarray(alpha_gt, dtype=np.float64)
    if np.isscalar(radius) or np.ndim(radius) == 0:
        r = int(radius)
    else:
        lo, hi = (int(v) for v in radius)
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid radius range {radius}")
        r = int(np.random.default_rng(seed).integers(lo, hi + 1))
    labels = np.full(alpha.shape, UNKNOWN, dtype=np.uint8)
    labels[alpha <= threshold_lo] = BACKGROUND
    labels[alpha >= threshold_hi] = FOREGROUND
    unknown = labels == UNKNOWN
    if r > 0 and unknown.any():
        unknown = ndimage.binary_dilation(unknown, structure=disk(r))
        labels[unknown] = UNKNOWN
    degenerate = bool((labels == UNKNOWN).all())
    if degenerate:
        log.warning("trimap is entirely unknown")
    return Trimap(labels=labels, radius=r, degenerate=degenerate)


@dataclass
class ManifestRecord:
    image: str
    alpha: str
    trimap: str
    saliency: str
    fg_id: str
    bg_id: str
    seed: int
    flags: list = field(default_factory=list)

    def to_json(self):
        d = asdict(self)
        return json.dumps({k: d[k] for k in MANIFEST_FIELDS})


@dataclass
class DatasetManifest:
    records: list
    split: str
    composition_ratio: int

    def __len__(self):
        return len(self.records)

    def to_jsonl(self):
        return "".join(r.to_json() + "\n" for r in self.records)

    def digest(self):
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    def write(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            fh.write(self.to_jsonl())
        os.replace(tmp, path)


def read_manifest(path):
    """Load a JSON-lines manifest; paths are returned resolved against its directory."""
    root = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            missing = set(MANIFEST_FIELDS) - set(d)
            if missing:
                raise ValueError(f"manifest record missing fields {sorted(missing)}")
            for key in ("image", "alpha", "trimap", "saliency"):
                d[key] = os.path.join(root, d[key])
            records.append(ManifestRecord(**{k: d[k] for k in MANIFEST_FIELDS}))
    return records


def _ident(item, index, prefix):
    if isinstance(item, str):
        return item
    ident = getattr(item, "id", None)
    return ident if ident is not None else f"{prefix}{index:05d}"


def build_manifest(foregrounds, backgrounds, ratio=None, split="train", seed=0):
    """Plan ``ratio`` background draws per foreground.

    Backgrounds are drawn without replacement within one foreground and
    independently across foregrounds. Items may be assets, planes or plain ids.
    """
    if split not in DEFAULT_RATIOS:
        raise ValueError(f"split must be one of {sorted(DEFAULT_RATIOS)}, got {split!r}")
    ratio = DEFAULT_RATIOS[split] if ratio is None else int(ratio)
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    if len(backgrounds) == 0:
        raise ValueError("background pool is empty")
    fg_ids = [_ident(f, i, "fg") for i, f in enumerate(foregrounds)]
    bg_ids = [_ident(b, i, "bg") for i, b in enumerate(backgrounds)]
    replace = len(bg_ids) < ratio
    flags = []
    if replace:
        warnings.warn(
            f"background pool ({len(bg_ids)}) smaller than ratio ({ratio}); sampling with replacement"
        )
        flags = ["bg_with_replacement"]
    rng = np.random.default_rng(seed)
    records = []
    for fg_id in fg_ids:
        picks = rng.choice(len(bg_ids), size=ratio, replace=replace)
        seeds = rng.integers(0, 2**31 - 1, size=ratio)
        for k, (b, s) in enumerate(zip(picks, seeds)):
            stem = f"{fg_id}__{k:03d}_{bg_ids[b]}"
            records.append(ManifestRecord(
                image=f"{split}/image/{stem}.png",
                alpha=f"{split}/alpha/{stem}.png",
                trimap=f"{split}/trimap/{stem}.png",
                saliency=f"{split}/saliency/{stem}.png",
                fg_id=fg_id,
                bg_id=bg_ids[b],
                seed=int(s),
                flags=list(flags),
            ))
    return DatasetManifest(records=records, split=split, composition_ratio=ratio)


def render_sample(asset, background, record, cfg: SynthesisConfig):
    """Produce image, alpha, trimap and saliency planes for one manifest record."""
    if cfg.size is not None and asset.alpha.shape != (cfg.size, cfg.size):
        fg = fit_background(asset.foreground, cfg.size, cfg.size)
        alpha = np.clip(fit_background(asset.alpha, cfg.size, cfg.size), 0.0, 1.0)
        asset = ForegroundAsset(fg, alpha, asset.id)
    image = compose(asset, background)
    trimap = make_trimap(asset.alpha, cfg.threshold_lo, cfg.threshold_hi,
                         cfg.radius_range, seed=record.seed)
    saliency = make_saliency_target(asset.alpha, cfg.saliency_downsample, cfg.blur_sigma)
    flags = list(record.flags)
    if not asset.alpha.any():
        flags.append("degenerate_alpha")
    if trimap.degenerate:
        flags.append("trimap_all_unknown")
    return image, asset.alpha, trimap.labels, saliency, flags


def materialize(manifest, foregrounds, backgrounds, out_dir, cfg=None):
    """Write every planned composite to ``out_dir`` and the manifest alongside.

    ``foregrounds``/``backgrounds`` map ids to :class:`ForegroundAsset` / RGB
    planes (or loaders returning them). Returns the manifest path.
    """
    cfg = cfg or SynthesisConfig()
    for rec in manifest.records:
        fg = foregrounds[rec.fg_id]
        bg = backgrounds[rec.bg_id]
        fg = fg() if callable(fg) else fg
        bg = bg() if callable(bg) else bg
        image, alpha, trimap, saliency, flags = render_sample(fg, bg, rec, cfg)
        rec.flags = flags
        imio.write_image(os.path.join(out_dir, rec.image), image)
        imio.write_gray(os.path.join(out_dir, rec.alpha), alpha)
        imio.write_labels(os.path.join(out_dir, rec.trimap), trimap)
        imio.write_gray(os.path.join(out_dir, rec.saliency), saliency)
    path = os.path.join(out_dir, f"{manifest.split}.jsonl")
    manifest.write(path)
    return path


def load_foreground_dir(fg_dir):
    """Read ``fg/<id>.png`` + ``alpha/<id>.png`` pairs into assets keyed by id."""
    fg_root, alpha_root = os.path.join(fg_dir, "fg"), os.path.join(fg_dir, "alpha")
    assets = {}
    for name in sorted(os.listdir(fg_root)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in (".png", ".jpg", ".jpeg"):
            continue
        alpha_path = os.path.join(alpha_root, stem + ".png")
        if not os.path.exists(alpha_path):
            log.warning("no alpha for foreground %s, skipping", name)
            continue
        assets[stem] = ForegroundAsset(imio.read_image(os.path.join(fg_root, name)),
                                       imio.read_alpha(alpha_path), stem)
    return assets


def list_background_dir(bg_dir):
    out = {}
    for name in sorted(os.listdir(bg_dir)):
        stem, ext = os.path.splitext(name)
        if ext.lower() in (".png", ".jpg", ".jpeg"):
            path = os.path.join(bg_dir, name)
            out[stem] = (lambda p=path: imio.read_image(p))
    return out
