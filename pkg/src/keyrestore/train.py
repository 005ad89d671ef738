"""Training loop: AdamW with decoupled weight decay, cosine-annealed learning
rate, per-step loss CSV, per-epoch checkpoints plus a rolling best."""

from __future__ import annotations

import math
import random
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, write_run_config
from .data import DatasetManifest, iterate_batches
from .losses import adjacent_difference_loss, charbonnier_loss
from .model import KeyframeRestorer

LOSS_CSV_HEADER = "step,total,charbonnier,afd,lr"


def set_determinism(seed: int, strict: bool = False) -> None:
    """Seed every RNG in play; strict mode pins thread count and algorithms
    so repeated runs produce identical loss logs."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if strict:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def run_training(
    cfg: RunConfig,
    out_dir,
    resume=None,
    deterministic: bool = False,
    log=print,
) -> Path:
    """Train on the manifest's train split; returns the final checkpoint path.

    Resuming restores parameters and the step counter from a checkpoint (the
    cosine schedule is re-advanced to that step) and appends to the loss log.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_run_config(cfg, out_dir / "config.cfg")
    set_determinism(cfg.seed, strict=deterministic)

    manifest = DatasetManifest.load(cfg.data_root)
    if tuple(manifest.frame_size) != (cfg.model.H, cfg.model.W):
        raise ValueError(
            f"dataset frames are {manifest.frame_size}, model expects "
            f"({cfg.model.H}, {cfg.model.W})"
        )

    start_step = 0
    if resume is not None:
        model, start_step = load_checkpoint(resume)
        if model.cfg.fingerprint() != cfg.model.fingerprint():
            raise ValueError(
                f"resume checkpoint config {model.cfg.fingerprint()} does not match "
                f"run config {cfg.model.fingerprint()}"
            )
        log(f"resumed from {resume} at step {start_step}")
    else:
        model = KeyframeRestorer(cfg.model)
    model.train()

    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay,
    )
    clips = sum(
        max(0, (entry.frames - cfg.model.T) // cfg.clip_stride + 1)
        for entry in manifest.train
    )
    if clips == 0:
        raise ValueError("train split yields no clips")
    steps_per_epoch = math.ceil(clips / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=total_steps)
    if start_step:
        # re-advance the schedule to the resumed step; the pre-optimizer-step
        # warning does not apply to replaying past steps
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            for _ in range(min(start_step, total_steps)):
                scheduler.step()

    loss_csv = out_dir / "loss_log.csv"
    mode = "a" if (resume is not None and loss_csv.exists()) else "w"
    ckpt_root = out_dir / "checkpoints"
    step = start_step
    best = math.inf
    with open(loss_csv, mode, encoding="utf-8", newline="\n") as fh:
        if mode == "w":
            fh.write(LOSS_CSV_HEADER + "\n")
        for epoch in range(cfg.epochs):
            epoch_total, epoch_batches = 0.0, 0
            batches = iterate_batches(
                manifest, cfg.model.T, cfg.batch_size,
                seed=cfg.seed + epoch, stride=cfg.clip_stride,
            )
            for keys, targets in batches:
                optimizer.zero_grad()
                pred = model(keys)
                cb = charbonnier_loss(pred, targets, cfg.loss)
                if cfg.afd_loss:
                    afd = adjacent_difference_loss(pred, targets, cfg.loss)
                else:
                    afd = torch.zeros(())
                loss = cb + afd
                loss.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                if step < total_steps:
                    scheduler.step()
                step += 1
                lr = optimizer.param_groups[0]["lr"]
                fh.write(f"{step},{loss.item()!r},{cb.item()!r},{afd.item()!r},{lr!r}\n")
                epoch_total += loss.item()
                epoch_batches += 1
            fh.flush()
            mean_loss = epoch_total / max(epoch_batches, 1)
            log(f"epoch {epoch + 1}/{cfg.epochs}: mean loss {mean_loss:.6f} (step {step})")
            save_checkpoint(ckpt_root / f"epoch_{epoch + 1:03d}", model, step)
            if mean_loss < best:
                best = mean_loss
                save_checkpoint(ckpt_root / "best", model, step)
    final = save_checkpoint(ckpt_root / "final", model, step)
    return final
