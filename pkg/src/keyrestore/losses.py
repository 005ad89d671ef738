"""Training objective: robust appearance loss plus adjacent-frame motion loss.

Both losses reduce the same way: mean over the elements of one frame (or one
adjacent-frame pair), summed over the frame axis. A leading batch dimension,
when present, is averaged. With matching inputs the appearance loss is exactly
T*epsilon and the motion loss (T-1)*epsilon, which the tests pin.
"""

from __future__ import annotations

import torch

from .config import LossConfig

_DEFAULT = LossConfig()


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.dim() < 4:
        raise ValueError(f"expected (..., T, H, W, C) sequences, got {tuple(pred.shape)}")


def charbonnier_loss(pred, target, cfg: LossConfig = _DEFAULT):
    """Smooth L1/L2 interpolating penalty on per-pixel differences.

    sqrt(diff^2 + eps^2), averaged per frame and summed over frames.
    """
    _check_pair(pred, target)
    eps2 = cfg.epsilon ** 2
    per_elem = torch.sqrt((pred - target) ** 2 + eps2)
    per_frame = per_elem.mean(dim=(-1, -2, -3))  # (..., T)
    return per_frame.sum(dim=-1).mean()


def adjacent_difference_loss(pred, target, cfg: LossConfig = _DEFAULT):
    """Motion-consistency penalty on squared adjacent-frame differences.

    For each neighbouring frame pair, compares the per-pixel squared change in
    the restored sequence against the real one through the same smooth
    penalty. Blind to static appearance error by construction.
    """
    _check_pair(pred, target)
    if pred.shape[-4] < 2:
        raise ValueError(f"need at least 2 frames for adjacent differences, got {pred.shape[-4]}")
    eps2 = cfg.epsilon ** 2
    d_pred = (pred.narrow(-4, 0, pred.shape[-4] - 1) - pred.narrow(-4, 1, pred.shape[-4] - 1)) ** 2
    d_target = (target.narrow(-4, 0, target.shape[-4] - 1) - target.narrow(-4, 1, target.shape[-4] - 1)) ** 2
    per_elem = torch.sqrt((d_pred - d_target) ** 2 + eps2)
    per_pair = per_elem.mean(dim=(-1, -2, -3))  # (..., T-1)
    return per_pair.sum(dim=-1).mean()


def total_loss(pred, target, cfg: LossConfig = _DEFAULT):
    """Unit-weight sum of the appearance and motion losses."""
    return charbonnier_loss(pred, target, cfg) + adjacent_difference_loss(pred, target, cfg)
