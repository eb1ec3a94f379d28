"""Command line entry point: ``spgim <verb> ...``.

Every verb accepts ``--config``, ``--profile``, ``--seed`` and ``--out``;
the process exits 0 only when the verb completes.
"""
import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import cv2
import numpy as np
import torch

from . import imio, metrics
from .caption import Tokenizer
from .checkpoint import (
    CheckpointError, build_model, count_parameters, format_millions, load_model, save_checkpoint,
)
from .compare import emit_comparison
from .config import ExperimentConfig, get_profile
from .data import (
    BACKGROUND, FOREGROUND, build_manifest, list_background_dir, load_foreground_dir, materialize,
)
from .pipeline import ConfigMismatchError, check_compatible, load_pipeline, pad_to_multiple, run_pipeline
from .toydata import read_caption_manifest, write_caption_corpus, write_toy_sources
from .training import (
    load_matting_data, seed_everything, to_tensor, train_captioner, train_spd, train_spgm,
)

log = logging.getLogger("spgim")

CACHE_ENV = "SPGIM_CACHE_DIR"
IMAGE_EXTS = (".png", ".jpg", ".jpeg")


def cache_dir():
    """Scratch root for outputs whose location was not given on the command line."""
    return os.environ.get(CACHE_ENV) or os.path.join(os.path.expanduser("~"), ".cache", "spgim")


def _out(args, default_name):
    return args.out or os.path.join(cache_dir(), default_name)


def load_config(args, fallback=None):
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    elif args.profile:
        cfg = get_profile(args.profile)
    else:
        cfg = fallback or get_profile("composition1k")
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _list_images(directory):
    return {os.path.splitext(n)[0]: os.path.join(directory, n) for n in sorted(os.listdir(directory))
            if os.path.splitext(n)[1].lower() in IMAGE_EXTS}


def cmd_toy_data(args):
    out = _out(args, "toy")
    write_toy_sources(out, args.n_fg, args.n_bg, args.size, args.seed or 0)
    if args.captions:
        write_caption_corpus(os.path.join(out, "captions"), args.captions, args.size, args.seed or 0)
    print(out)


def cmd_compose(args):
    cfg = load_config(args)
    foregrounds = load_foreground_dir(args.fg_dir)
    backgrounds = list_background_dir(args.bg_dir)
    if not foregrounds:
        raise ValueError(f"no foreground/alpha pairs under {args.fg_dir}")
    manifest = build_manifest(list(foregrounds.values()), list(backgrounds), ratio=args.ratio,
                              split=args.split, seed=cfg.seed)
    path = materialize(manifest, foregrounds, backgrounds, _out(args, "composites"), cfg.data)
    log.info("%d composites, manifest digest %s", len(manifest), manifest.digest()[:12])
    print(path)


def _caption_images(pairs, size):
    images = []
    for path, _ in pairs:
        img = imio.read_image(path)
        if img.shape[:2] != (size, size):
            img = cv2.resize(img, (size, size), interpolation=cv2.INTER_AREA)
        images.append(to_tensor(img))
    return torch.stack(images)


def cmd_pretrain_captioner(args):
    cfg = load_config(args)
    pairs = read_caption_manifest(args.manifest)
    texts = [t for _, t in pairs]
    tokenizer = Tokenizer.fit(texts, cfg.caption.min_freq)
    seed_everything(cfg.seed)
    model = build_model("caption", cfg, vocab_size=len(tokenizer))
    images = _caption_images(pairs, cfg.caption.input_size)
    history, skipped = train_captioner(model, tokenizer, images, texts, cfg.caption, seed=cfg.seed)
    if skipped:
        log.warning("skipped %d sample(s) with empty captions", skipped)
    if history:
        log.info("caption loss %.4f -> %.4f", history[0], history[-1])
    path = save_checkpoint(_out(args, "caption.pt"), "caption", model, cfg, step=len(history),
                           extra={"vocab": tokenizer.itos})
    print(path)


def cmd_train_spd(args):
    cfg = load_config(args)
    seed_everything(cfg.seed)
    net = build_model("spd", cfg)
    if args.init_ckpt and args.init_ckpt != "none":
        caption, extras = load_model(args.init_ckpt, "caption")
        width = extras["config"].spd_model.width_multiplier
        if width != cfg.spd_model.width_multiplier:
            raise ConfigMismatchError(["spd_model.width_multiplier"])
        net.load_caption_backbone(caption.backbone.state_dict())
    data = load_matting_data(args.manifest)
    history = train_spd(net, data, cfg.spd)
    log.info("spd loss %.4f -> %.4f", history[0], history[-1])
    print(save_checkpoint(_out(args, "spd.pt"), "spd", net, cfg, step=len(history)))


def cmd_train_spgm(args):
    spd, extras = load_model(args.spd_ckpt, "spd")
    cfg = load_config(args, fallback=extras["config"])
    check_compatible(extras["config"], cfg)
    seed_everything(cfg.seed)
    net = build_model("spgm", cfg)
    data = load_matting_data(args.manifest)
    history = train_spgm(net, spd, data, cfg.spgm)
    log.info("spgm loss %.4f -> %.4f", history[0], history[-1])
    print(save_checkpoint(_out(args, "spgm.pt"), "spgm", net, cfg, step=len(history)))


def cmd_infer_spd(args):
    spd, _ = load_model(args.ckpt, "spd")
    image = imio.read_image(args.image)
    x, (h, w) = pad_to_multiple(to_tensor(image)[None])
    with torch.no_grad():
        mask, _ = spd(x)
    if args.full_res:
        mask = torch.nn.functional.interpolate(mask, size=x.shape[-2:], mode="bilinear",
                                               align_corners=False)[..., :h, :w]
    else:
        d = x.shape[-1] // mask.shape[-1]
        mask = mask[..., :-(-h // d), :-(-w // d)]
    out = _out(args, "mask.png")
    imio.write_gray(out, mask[0, 0].clamp(0, 1).numpy())
    print(out)


def cmd_infer(args):
    spd, spgm = load_pipeline(args.spd_ckpt, args.spgm_ckpt)
    result = run_pipeline(imio.read_image(args.image), spd, spgm, dump_attention=bool(args.dump_attention))
    bits = 16 if args.bits16 else 8
    out = _out(args, "alpha.png")
    imio.write_gray(out, result["alpha"], bits=bits)
    if args.dump_levels:
        imio.write_gray(os.path.join(args.dump_levels, "saliency_mask.png"), result["saliency_mask"])
        for i, a in enumerate(result["level_alphas"], 1):
            imio.write_gray(os.path.join(args.dump_levels, f"level_{i}.png"), a, bits=bits)
    if args.dump_attention:
        os.makedirs(args.dump_attention, exist_ok=True)
        for stage, attn in result["attention"].items():
            np.save(os.path.join(args.dump_attention, f"stage_{stage}.npy"), attn)
    print(out)


def _score(job):
    name, pred_path, gt_path, trimap_path = job
    pred, gt = imio.read_alpha(pred_path), imio.read_alpha(gt_path)
    row = {"id": name, "whole-image": metrics.evaluate(pred, gt).as_dict()}
    if trimap_path:
        labels = imio.read_labels(trimap_path)
        unknown = (labels != FOREGROUND) & (labels != BACKGROUND)
        if unknown.any():
            row["unknown-only"] = metrics.evaluate(pred, gt, region=unknown).as_dict()
    return row


def _mean_row(rows, region):
    scored = [r[region] for r in rows if region in r]
    if not scored:
        return None
    return {k: float(np.mean([s[k] for s in scored])) for k in ("sad", "mse", "grad", "conn")}


def cmd_eval(args):
    gts = _list_images(args.gt_dir)
    preds = _list_images(args.pred_dir)
    trimaps = _list_images(args.trimap_dir) if args.trimap_dir else {}
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise FileNotFoundError(f"no prediction for {len(missing)} ground-truth matte(s): {missing[:5]}")
    jobs = [(n, preds[n], gts[n], trimaps.get(n)) for n in gts]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            rows = list(pool.map(_score, jobs))
    else:
        rows = [_score(j) for j in jobs]
    mean = {"id": "mean"}
    for region in ("whole-image", "unknown-only"):
        m = _mean_row(rows, region)
        if m is not None:
            mean[region] = m
    report = {"rows": rows, "mean": mean}
    out = _out(args, "report.json")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w") as fh:
        json.dump(report, fh, indent=2)
    for region in ("whole-image", "unknown-only"):
        if region in mean:
            m = mean[region]
            print(f"{region:>13}  SAD {m['sad']:.4f}  MSE {m['mse']:.5f}  "
                  f"Grad {m['grad']:.4f}  Conn {m['conn']:.4f}")
    print(out)


def cmd_compare(args):
    images = {k: imio.read_image(p) for k, p in _list_images(args.image_dir).items()}
    methods = {}
    for spec in args.method:
        name, _, directory = spec.partition("=")
        if not directory:
            raise ValueError(f"--method expects NAME=DIR, got {spec!r}")
        methods[name] = {k: imio.read_alpha(p) for k, p in _list_images(directory).items() if k in images}
    paths = emit_comparison(images, methods, _out(args, "compare"), cell=tuple(args.cell),
                            bg_color=tuple(args.bg))
    print(f"{len(paths)} sheet(s) in {os.path.dirname(paths[0]) if paths else _out(args, 'compare')}")


def cmd_count_params(args):
    counts = count_parameters(args.ckpt)
    for name, n in counts["per_module"].items():
        print(f"{name:<20} {n:>12,d}  {format_millions(n)}")
    print(f"{'total':<20} {counts['total']:>12,d}  {format_millions(counts['total'])}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(counts, fh, indent=2)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config")
    common.add_argument("--profile", help="named profile: composition1k, distinction646, human2k, "
                                          "multiobject1k or desk")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="spgim", description="Trimap-free matting toolkit.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name, fn, out_aliases=(), help=None):
        p = sub.add_parser(name, parents=[common], help=help)
        p.add_argument("--out", *out_aliases, dest="out", help="output path")
        p.set_defaults(fn=fn)
        return p

    p = verb("toy-data", cmd_toy_data, help="write synthetic foregrounds/backgrounds")
    p.add_argument("--n-fg", type=int, default=4)
    p.add_argument("--n-bg", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--captions", type=int, default=0, help="also write N captioned scenes")

    p = verb("compose", cmd_compose, help="composite foregrounds onto backgrounds")
    p.add_argument("--fg-dir", required=True, help="folder with fg/ and alpha/")
    p.add_argument("--bg-dir", required=True)
    p.add_argument("--ratio", type=int, help="backgrounds per foreground (default 100 train, 20 test)")
    p.add_argument("--split", default="train")

    p = verb("pretrain-captioner", cmd_pretrain_captioner, ("--out-ckpt",),
             help="bidirectional caption pretraining")
    p.add_argument("--manifest", required=True, help="JSON lines of {image, caption}")

    p = verb("train-spd", cmd_train_spd, ("--out-ckpt",), help="train the saliency branch")
    p.add_argument("--manifest", required=True)
    p.add_argument("--init-ckpt", default="none", help="caption checkpoint or 'none'")

    p = verb("infer-spd", cmd_infer_spd, ("--out-mask",), help="predict a saliency mask")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--full-res", action="store_true", help="upsample the mask to image size")

    p = verb("train-spgm", cmd_train_spgm, ("--out-ckpt",), help="train the matting branch")
    p.add_argument("--manifest", required=True)
    p.add_argument("--spd-ckpt", required=True)

    p = verb("infer", cmd_infer, ("--out-alpha",), help="full pipeline on one image")
    p.add_argument("--image", required=True)
    p.add_argument("--spd-ckpt", required=True)
    p.add_argument("--spgm-ckpt", required=True)
    p.add_argument("--dump-levels", metavar="DIR")
    p.add_argument("--dump-attention", metavar="DIR")
    p.add_argument("--bits16", action="store_true", help="write 16-bit PNG alphas")

    p = verb("eval", cmd_eval, ("--report",), help="SAD/MSE/Grad/Conn over a folder")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--trimap-dir")
    p.add_argument("--workers", type=int, default=1)

    p = verb("compare", cmd_compare, help="side-by-side comparison sheets")
    p.add_argument("--image-dir", required=True)
    p.add_argument("--method", action="append", default=[], metavar="NAME=DIR")
    p.add_argument("--cell", type=int, nargs=2, default=(128, 128), metavar=("H", "W"))
    p.add_argument("--bg", type=float, nargs=3, default=(0.0, 0.8, 0.0), metavar=("R", "G", "B"))

    p = verb("count-params", cmd_count_params, help="parameter counts of a checkpoint")
    p.add_argument("--ckpt", required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except (ValueError, CheckpointError, OSError, KeyError) as exc:
        print(f"spgim {args.verb}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
