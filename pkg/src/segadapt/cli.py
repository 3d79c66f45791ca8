"""Command-line interface.

Subcommands: ``gen`` (render a dataset), ``sam-sim`` (derive segment masks
from instance maps), ``train``, ``eval``, ``viz-features``, ``pool-stats``.

Exit codes: 0 success, 1 usage error, 2 data or contract error. Every
subcommand takes ``--seed`` and echoes its fully resolved configuration to
stderr before doing any work, so runs are auditable and reproducible.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import netpbm
from .autodiff import Tensor
from .errors import ContractViolation, DataError, ShapeError
from .evaluation import eval_report, viz_features
from .masks import OracleParams, load_mask_set, mask_stats, oversegment_oracle, save_mask_set
from .network import forward
from .scenegen import gen_dataset, load_manifest
from .training import FrameStore, TrainConfig, load_checkpoint, train

__all__ = ["main", "entrypoint"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); usage errors are 1
        raise UsageError(message)


def _bool_flag(value: str) -> bool:
    if value not in ("true", "false"):
        raise argparse.ArgumentTypeError(f"expected true or false, got {value!r}")
    return value == "true"


def _build_parser() -> _Parser:
    parser = _Parser(prog="segadapt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="render a toy dataset for one domain")
    p.add_argument("--domain", required=True, choices=("syn", "real"))
    p.add_argument("--out", required=True)
    p.add_argument("--num", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("sam-sim", help="derive overlapping segment masks from instance maps")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-prob", type=float, default=0.7)
    p.add_argument("--max-parts", type=int, default=3)
    p.add_argument("--keep-whole-prob", type=float, default=0.8)
    p.add_argument("--jitter", type=int, default=1)
    p.add_argument("--spurious", type=int, default=2)
    p.add_argument("--min-mask-pixels", type=int, default=8)
    p.set_defaults(func=_cmd_sam_sim)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--mode", required=True, choices=("full", "syn-only", "real-labels"))
    p.add_argument("--out", required=True)
    p.add_argument("--syn")
    p.add_argument("--real")
    p.add_argument("--masks")
    p.add_argument("--real-test")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--frames-per-epoch", type=int, default=200)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--margin", type=float, default=0.5)
    p.add_argument("--ema-decay", type=float, default=0.99)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dense-dim", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--fused-channels", type=int, default=32)
    p.add_argument("--hidden-channels", type=int, default=16)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--use-ema", type=_bool_flag, default=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("viz-features", help="render the dense head of one frame as an image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--use-ema", type=_bool_flag, default=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_viz)

    p = sub.add_parser("pool-stats", help="summarize mask files in a directory")
    p.add_argument("--masks", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_pool_stats)

    return parser


def _echo_config(args: argparse.Namespace) -> None:
    resolved = {k: str(v) if isinstance(v, Path) else v
                for k, v in vars(args).items() if k != "func"}
    print("config " + json.dumps(resolved, sort_keys=True), file=sys.stderr)


def _cmd_gen(args) -> int:
    manifest = gen_dataset(
        frame_count=args.num,
        domain_name=args.domain,
        out_dir=args.out,
        seed=args.seed,
        class_count=args.classes,
        height=args.height,
        width=args.width,
    )
    print(f"wrote {manifest.frame_count} {args.domain} frames to {args.out}")
    return 0


def _cmd_sam_sim(args) -> int:
    manifest = load_manifest(args.data)
    params = OracleParams(
        split_probability=args.split_prob,
        max_parts_per_instance=args.max_parts,
        keep_whole_probability=args.keep_whole_prob,
        boundary_jitter_radius=args.jitter,
        spurious_background_masks=args.spurious,
        min_mask_pixels=args.min_mask_pixels,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    total = 0
    for k, files in enumerate(manifest.frames):
        instances = netpbm.read_pgm(Path(args.data) / files.instances)
        mask_set = oversegment_oracle(instances, params, args.seed ^ k)
        save_mask_set(mask_set, out / files.masks)
        total += len(mask_set.masks)
    print(f"wrote masks for {manifest.frame_count} frames ({total} masks) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    requirements = {
        "full": ("syn", "real", "masks"),
        "syn-only": ("syn",),
        "real-labels": ("real",),
    }[args.mode]
    missing = [f"--{name}" for name in requirements if getattr(args, name) is None]
    if missing:
        raise UsageError(f"--mode {args.mode} requires {', '.join(missing)}")
    config = TrainConfig(
        mode=args.mode,
        out_dir=Path(args.out),
        syn_dir=Path(args.syn) if args.syn else None,
        real_dir=Path(args.real) if args.real else None,
        masks_dir=Path(args.masks) if args.masks else None,
        real_test_dir=Path(args.real_test) if args.real_test else None,
        epochs=args.epochs,
        frames_per_epoch=args.frames_per_epoch,
        alpha=args.alpha,
        margin=args.margin,
        ema_decay=args.ema_decay,
        lr=args.lr,
        seed=args.seed,
        dense_dim=args.dense_dim,
        base_channels=args.base_channels,
        fused_channels=args.fused_channels,
        hidden_channels=args.hidden_channels,
    )
    _, metrics = train(config)
    final = metrics[-1]
    print(f"trained {args.epochs} epochs, final mean supervised loss "
          f"{final['mean_sup_loss']:.6f}, checkpoint in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    params = checkpoint.ema if args.use_ema else checkpoint.params
    store = FrameStore(args.data)

    def frames():
        for i in range(store.frame_count):
            out = forward(params, Tensor(store.image(i)), need_dense=False)
            yield store.frame_name(i), out.logits.data.argmax(axis=0), store.labels(i)

    print(eval_report(frames(), store.class_count).to_json())
    return 0


def _cmd_viz(args) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    params = checkpoint.ema if args.use_ema else checkpoint.params
    rgb = netpbm.read_ppm(args.image)
    image = np.ascontiguousarray(rgb.transpose(2, 0, 1)).astype(np.float64) / 255.0
    out = forward(params, Tensor(image), need_logits=False)
    meta = viz_features(out.dense.data, args.out)
    note = f" (constant channels: {meta['constant_channels']})" if meta["constant_channels"] else ""
    print(f"wrote feature visualization to {args.out}{note}")
    return 0


def _cmd_pool_stats(args) -> int:
    masks_dir = Path(args.masks)
    if not masks_dir.is_dir():
        raise DataError(f"mask directory not found: {masks_dir}")
    paths = sorted(masks_dir.glob("*.masks.json"))
    if not paths:
        raise DataError(f"no *.masks.json files in {masks_dir}")
    per_file = []
    counts = []
    coverages = []
    overlaps = []
    for path in paths:
        stats = mask_stats(load_mask_set(path))
        counts.append(stats.mask_count)
        coverages.append(stats.coverage)
        overlaps.append(stats.overlap_pixels)
        per_file.append({
            "file": path.name,
            "mask_count": stats.mask_count,
            "pixel_counts": list(stats.pixel_counts),
            "overlap_pixels": stats.overlap_pixels,
            "coverage": stats.coverage,
        })
    summary = {
        "file_count": len(paths),
        "mean_mask_count": float(np.mean(counts)),
        "mean_coverage": float(np.mean(coverages)),
        "mean_overlap_pixels": float(np.mean(overlaps)),
        "files": per_file,
    }
    print(json.dumps(summary, sort_keys=True, indent=1))
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    _echo_config(args)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, ContractViolation, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


def entrypoint() -> None:  # console script
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
