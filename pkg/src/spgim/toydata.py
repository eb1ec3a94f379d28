"""Procedural foregrounds, backgrounds and captioned scenes for offline runs."""
import json
import os

import numpy as np

from . import imio
from .data import ForegroundAsset

COLORS = {
    "red": (0.85, 0.15, 0.1),
    "green": (0.1, 0.7, 0.2),
    "blue": (0.15, 0.25, 0.9),
    "yellow": (0.95, 0.85, 0.1),
    "purple": (0.6, 0.2, 0.7),
    "white": (0.95, 0.95, 0.95),
}


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def soft_ellipse(size, cy, cx, ry, rx, angle, softness):
    yy, xx = _grid(size)
    c, s = np.cos(angle), np.sin(angle)
    u = ((xx - cx) * c + (yy - cy) * s) / rx
    v = (-(xx - cx) * s + (yy - cy) * c) / ry
    # approximate signed distance in pixels to the ellipse boundary
    d = (np.sqrt(u * u + v * v) - 1.0) * min(rx, ry)
    return np.clip(0.5 - d / softness, 0.0, 1.0)


def make_foreground(rng, size=64, fg_id="fg"):
    """A blob of 1-3 soft ellipses with a few semi-transparent strands."""
    alpha = np.zeros((size, size))
    n = int(rng.integers(1, 4))
    cy0, cx0 = rng.uniform(0.35, 0.65, size=2) * size
    for _ in range(n):
        cy = cy0 + rng.normal(0, 0.08) * size
        cx = cx0 + rng.normal(0, 0.08) * size
        ry, rx = rng.uniform(0.12, 0.28, size=2) * size
        alpha = np.maximum(alpha, soft_ellipse(size, cy, cx, ry, rx, rng.uniform(0, np.pi),
                                               rng.uniform(1.0, 4.0)))
    yy, xx = _grid(size)
    for _ in range(int(rng.integers(2, 6))):
        theta = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(0.15, 0.35) * size
        t = np.linspace(0, 1, 4 * size)
        py = cy0 + np.sin(theta) * length * (0.6 + t)
        px = cx0 + np.cos(theta) * length * (0.6 + t)
        strand = np.zeros_like(alpha)
        iy = np.clip(np.rint(py).astype(int), 0, size - 1)
        ix = np.clip(np.rint(px).astype(int), 0, size - 1)
        strand[iy, ix] = rng.uniform(0.3, 0.8)
        alpha = np.maximum(alpha, strand)
    base = np.array(rng.uniform(0.1, 0.95, size=3))
    tint = np.array(rng.uniform(-0.3, 0.3, size=3))
    ramp = ((yy + xx) / (2 * size))[..., None]
    fg = np.clip(base + tint * ramp + rng.normal(0, 0.03, (size, size, 3)), 0.0, 1.0)
    # keep values exactly representable in 8 bits
    alpha = np.rint(alpha * 255) / 255
    fg = np.rint(fg * 255) / 255
    return ForegroundAsset(fg, alpha, fg_id)


def make_background(rng, size=64):
    yy, xx = _grid(size)
    c0, c1 = rng.uniform(0, 1, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    t = ((np.cos(angle) * xx + np.sin(angle) * yy) / size)[..., None]
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    bg = c0 * (1 - t) + c1 * t
    for _ in range(int(rng.integers(2, 6))):
        blob = soft_ellipse(size, *rng.uniform(0, size, 2), *rng.uniform(3, size / 4, 2),
                            rng.uniform(0, np.pi), 2.0)[..., None]
        bg = bg * (1 - blob) + rng.uniform(0, 1, 3) * blob
    bg = np.clip(bg + rng.normal(0, 0.02, bg.shape), 0.0, 1.0)
    return np.rint(bg * 255) / 255


def write_toy_sources(out_dir, n_fg=4, n_bg=8, size=64, seed=0):
    """Write ``fg/``, ``alpha/`` and ``bg/`` folders for the compose command."""
    rng = np.random.default_rng(seed)
    for i in range(n_fg):
        asset = make_foreground(rng, size, f"fg{i:03d}")
        imio.write_image(os.path.join(out_dir, "fg", f"{asset.id}.png"), asset.foreground)
        imio.write_gray(os.path.join(out_dir, "alpha", f"{asset.id}.png"), asset.alpha)
    for j in range(n_bg):
        imio.write_image(os.path.join(out_dir, "bg", f"bg{j:03d}.png"), make_background(rng, size))
    return out_dir


def _draw_shape(canvas, shape, color, cy, cx, r):
    size = canvas.shape[0]
    yy, xx = _grid(size)
    if shape == "circle":
        m = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif shape == "square":
        m = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    else:  # triangle
        m = (yy - cy <= r) & (yy - cy >= -r) & (np.abs(xx - cx) <= (yy - cy + r) / 2)
    canvas[m] = COLORS[color]


def captioned_scene(rng, size=64):
    """Two shapes on a plain background, with a caption describing them."""
    shapes = ("circle", "square", "triangle")
    names = list(COLORS)
    bg_name = names[int(rng.integers(len(names)))]
    canvas = np.empty((size, size, 3))
    canvas[:] = np.asarray(COLORS[bg_name]) * 0.4
    s1, s2 = (shapes[int(i)] for i in rng.integers(len(shapes), size=2))
    c1, c2 = (names[int(i)] for i in rng.choice(len(names), size=2, replace=False))
    r = size / 8
    vertical = bool(rng.integers(2))
    if vertical:
        _draw_shape(canvas, s1, c1, size * 0.28, size / 2, r)
        _draw_shape(canvas, s2, c2, size * 0.72, size / 2, r)
        rel = "above"
    else:
        _draw_shape(canvas, s1, c1, size / 2, size * 0.28, r)
        _draw_shape(canvas, s2, c2, size / 2, size * 0.72, r)
        rel = "left of"
    return canvas, f"a {c1} {s1} {rel} a {c2} {s2} on a dark {bg_name} background."


def write_caption_corpus(out_dir, n=8, size=64, seed=0):
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i in range(n):
        img, text = captioned_scene(rng, size)
        name = f"scene{i:02d}.png"
        imio.write_image(os.path.join(out_dir, name), img)
        lines.append(json.dumps({"image": name, "caption": text}))
    path = os.path.join(out_dir, "captions.jsonl")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def fixture_corpus_path():
    return os.path.join(os.path.dirname(__file__), "fixtures", "captions", "captions.jsonl")


def read_caption_manifest(path):
    """``[(image_path, caption)]`` from a JSON-lines ``{image, caption}`` file."""
    root = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                pairs.append((os.path.join(root, d["image"]), d["caption"]))
    return pairs
