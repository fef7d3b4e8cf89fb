"""Command-line surface: pretrain / probe / viz / selftest."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .config import Config, config_hash, load_config
from .data import load_dataset, synth_disks
from .errors import DualStreamError
from .nn import EncoderConfig
from .storage import load_checkpoint, params_from_arrays, save_checkpoint, write_ppm
from .train import attention_map, linear_probe, pretrain


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualstream",
        description="Dual-stream self-supervised pretraining with "
                    "transformer-guided CNN attention.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run pretext training")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", default="model.ckpt", help="checkpoint path")
    p.add_argument("--metrics", help="per-step metrics CSV path")
    p.add_argument("--seed", type=int, help="global seed override")

    p = sub.add_parser("probe", help="linear-probe a frozen encoder")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("viz", help="write a saliency heatmap PPM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", type=int, required=True, help="dataset index")
    p.add_argument("--dataset", default="synth:64:0")
    p.add_argument("--out", required=True, help="output .ppm path")

    p = sub.add_parser("selftest", help="run gradient and invariant suites")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _encoder_from_ckpt(path: str):
    arrays, meta = load_checkpoint(path)
    enc_flat = {name[len("online/encoder/"):]: arr
                for name, arr in arrays.items()
                if name.startswith("online/encoder/")}
    if not enc_flat:
        raise DualStreamError(f"{path}: checkpoint holds no online encoder")
    return params_from_arrays(enc_flat), EncoderConfig(), meta


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.seed = args.seed
    metrics = args.metrics or cfg.metrics_path or None
    params, model, rows = pretrain(cfg, metrics_path=metrics, progress=True)
    meta = {
        "step": len(rows),
        "config_sha256": config_hash(cfg),
        "export": "online/encoder",
    }
    save_checkpoint(args.out,
                    {"online": params["online"], "momentum": params["momentum"]},
                    meta)
    print(f"wrote checkpoint {args.out} after {len(rows)} steps")
    return 0


def cmd_probe(args) -> int:
    encoder, enc_cfg, _ = _encoder_from_ckpt(args.ckpt)
    records = load_dataset(args.dataset)
    acc = linear_probe(encoder, enc_cfg, records,
                       epochs=args.epochs, lr=args.lr, seed=args.seed)
    print(f"top-1 accuracy: {acc:.4f}")
    return 0


def cmd_viz(args) -> int:
    encoder, enc_cfg, _ = _encoder_from_ckpt(args.ckpt)
    if args.dataset.startswith("disks:"):
        n = int(args.dataset.split(":")[1])
        images = [img for img, _ in synth_disks(n, 0)]
    else:
        images = [r.pixels for r in load_dataset(args.dataset)]
    if not 0 <= args.image < len(images):
        raise DualStreamError(
            f"image index {args.image} outside dataset of {len(images)}")
    heat = attention_map(encoder, enc_cfg, images[args.image])
    write_ppm(args.out, heat)
    print(f"wrote {args.out}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest(args.seed) else 1


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "pretrain": cmd_pretrain,
        "probe": cmd_probe,
        "viz": cmd_viz,
        "selftest": cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except (DualStreamError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
