"""Command-line surface.

    keyrestore generate       render the synthetic dataset from a spec file
    keyrestore train          train on a dataset, writing checkpoints + loss log
    keyrestore score          restore test units and write per-video score CSVs
    keyrestore eval           frame-level ROC AUC report from score CSVs
    keyrestore plot           score-curve images from score CSVs
    keyrestore dump-attention qualitative skip-pathway maps for one clip

The environment variable KEYRESTORE_DATA_ROOT overrides any configured
dataset root. Commands exit nonzero on contract violations.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .config import RunConfig, load_run_config
from .data import (
    DatasetManifest,
    SyntheticSpec,
    generate_synthetic,
    load_labels,
    load_synthetic_spec,
    load_video,
)
from .model import extract_keyframe_stack
from .scoring import frame_auc, read_score_csv, score_video, tile_units, write_score_csv
from .train import run_training, set_determinism
from .visualize import dump_decoder_maps, plot_score_curve


def _data_root(explicit: str | None, fallback: str = "data") -> Path:
    return Path(explicit or os.environ.get("KEYRESTORE_DATA_ROOT", fallback))


def cmd_generate(args) -> int:
    spec = load_synthetic_spec(args.config) if args.config else SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    root = _data_root(args.out)
    manifest = generate_synthetic(spec, root)
    print(f"dataset at {root}: {len(manifest.train)} train / {len(manifest.test)} test videos, "
          f"{spec.frames_per_video} frames each at {spec.canvas[0]}x{spec.canvas[1]}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.data_root = str(_data_root(args.data_root, cfg.data_root))
    out_dir = Path(args.out) if args.out else Path(cfg.checkpoint_dir)
    final = run_training(cfg, out_dir, resume=args.resume, deterministic=args.deterministic)
    print(f"final checkpoint: {final}")
    return 0


def _load_model(checkpoint_path):
    model, step = load_checkpoint(checkpoint_path)
    model.eval()
    return model, step


def cmd_score(args) -> int:
    if args.deterministic:
        set_determinism(args.seed if args.seed is not None else 0, strict=True)
    model, _ = _load_model(args.checkpoint)
    root = _data_root(args.data_root)
    manifest = DatasetManifest.load(root)
    if tuple(manifest.frame_size) != (model.cfg.H, model.cfg.W):
        raise ValueError(
            f"dataset frames {manifest.frame_size} incompatible with checkpoint "
            f"(config fingerprint {model.cfg.fingerprint()}, expects "
            f"{model.cfg.H}x{model.cfg.W})"
        )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t = model.cfg.T
    for entry in manifest.split(args.split):
        video = load_video(entry, manifest.frame_size, root)
        units = []
        for start, stop in tile_units(len(video), t):
            real = torch.from_numpy(video[start:stop])
            keys = extract_keyframe_stack(real)
            restored = model.restore_event(keys)
            units.append((restored.numpy(), video[start:stop], (start, stop)))
        labels = load_labels(entry, root) if entry.label_file else None
        series = score_video(units, video_id=entry.video_id, labels=labels)
        write_score_csv(series, out_dir / f"{entry.video_id}.csv")
        print(f"{entry.video_id}: {len(series.scores)} frames, "
              f"mean score {series.scores.mean():.3f}")
    return 0


def _read_series_dir(path) -> list:
    files = sorted(Path(path).glob("*.csv"))
    if not files:
        raise ValueError(f"no score CSVs under {path}")
    return [read_score_csv(f) for f in files]


def cmd_eval(args) -> int:
    series = _read_series_dir(args.scores)
    overall = frame_auc(series)
    per_video = {}
    for s in series:
        if s.labels is None:
            raise ValueError(f"{s.video_id}: eval needs labeled score CSVs")
        if 0 < s.labels.sum() < len(s.labels):
            per_video[s.video_id] = frame_auc([s])
        else:
            per_video[s.video_id] = None  # single-class video
    print(f"frame-level AUC: {overall:.4f}")
    for vid, auc in per_video.items():
        print(f"  {vid}: {'n/a (single class)' if auc is None else f'{auc:.4f}'}")
    if args.out:
        report = {"frame_auc": overall, "per_video": per_video}
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_plot(args) -> int:
    out_dir = Path(args.out)
    count = 0
    for csv_path in sorted(Path(args.scores).glob("*.csv")):
        try:
            series = read_score_csv(csv_path)
        except (ValueError, IndexError) as exc:
            print(f"warning: skipping {csv_path}: {exc}", file=sys.stderr)
            continue
        plot_score_curve(series, out_dir / f"{series.video_id}.png")
        count += 1
    if count == 0:
        raise ValueError(f"no usable score CSVs under {args.scores}")
    print(f"wrote {count} score curves to {out_dir}")
    return 0


def cmd_dump_attention(args) -> int:
    model, _ = _load_model(args.checkpoint)
    root = _data_root(args.data_root)
    manifest = DatasetManifest.load(root)
    entries = {e.video_id: e for e in manifest.train + manifest.test}
    if args.video not in entries:
        raise ValueError(f"video {args.video!r} not in manifest ({sorted(entries)[:6]}...)")
    video = load_video(entries[args.video], manifest.frame_size, root)
    t = model.cfg.T
    if args.start < 0 or args.start + t > len(video):
        raise ValueError(f"clip start {args.start} out of range for {len(video)} frames")
    clip = torch.from_numpy(video[args.start : args.start + t])
    keys = extract_keyframe_stack(clip)
    written = dump_decoder_maps(model, keys, args.out)
    print(f"wrote {len(written)} maps to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keyrestore", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False):
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded, fixed-order numerics")
        if config:
            p.add_argument("--config", type=Path, default=None, help="key=value config file")

    p = sub.add_parser("generate", help="render the synthetic dataset")
    common(p, config=True)
    p.add_argument("--out", type=Path, default=None, help="dataset root directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the restoration network")
    common(p, config=True)
    p.add_argument("--out", type=Path, default=None, help="run directory for logs/checkpoints")
    p.add_argument("--data-root", type=Path, default=None)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="write per-video anomaly score CSVs")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--data-root", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="frame-level AUC from score CSVs")
    common(p)
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="score-curve images from score CSVs")
    common(p)
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("dump-attention", help="skip-pathway maps for one clip")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data-root", type=Path, default=None)
    p.add_argument("--video", required=True, help="video id from the manifest")
    p.add_argument("--start", type=int, default=0, help="clip start frame")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_dump_attention)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
