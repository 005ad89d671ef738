"""Score-curve plots and qualitative dumps of the decoder's skip pathways."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .model import KeyframeRestorer
from .scoring import AnomalyScoreSeries


def plot_score_curve(series: AnomalyScoreSeries, path) -> Path:
    """Score vs frame index; anomaly spans shaded when labels are present."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(8, 3))
    frames = np.arange(len(series.scores))
    ax.plot(frames, series.scores, color="tab:red", lw=1.5, label="anomaly score")
    if series.labels is not None:
        in_span = series.labels.astype(bool)
        ax.fill_between(frames, 0, 1, where=in_span, color="tab:orange", alpha=0.25,
                        step="mid", label="labeled anomaly")
    ax.set_xlim(0, max(len(frames) - 1, 1))
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("frame")
    ax.set_ylabel("score")
    ax.set_title(series.video_id)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _save_heatmap(grid: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(grid, cmap="viridis")
    ax.axis("off")
    fig.tight_layout(pad=0.1)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def attention_spatial_map(weights: torch.Tensor, grid: tuple[int, int], window: int,
                          kv_frames: int) -> np.ndarray:
    """Collapse per-window cross-attention weights to one spatial map.

    weights: (num_windows, heads, q_tokens, kv_frames*window^2). For every key
    position, the received attention mass is averaged over heads, queries, and
    key frames, then windows are laid back onto the stage grid.
    """
    rows, cols = grid
    m = window
    w = weights.mean(dim=(1, 2))  # (nW, kv_frames*m*m)
    w = w.reshape(rows * cols, kv_frames, m * m).mean(dim=1)
    w = w.reshape(rows, cols, m, m).permute(0, 2, 1, 3)
    return w.reshape(rows * m, cols * m).cpu().numpy()


def dump_decoder_maps(model: KeyframeRestorer, keyframes: torch.Tensor, out_dir) -> list[Path]:
    """Write cross-attention maps (stages d3..d0) and TU-residual feature maps
    (stages d2..d0) for one clip. Returns the written paths."""
    out_dir = Path(out_dir)
    collect: dict[str, torch.Tensor] = {}
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(keyframes if keyframes.dim() == 5 else keyframes.unsqueeze(0), collect=collect)
    finally:
        model.train(was_training)
    written = []
    for depth in range(3, -1, -1):
        key = f"cross_attention_d{depth}"
        if key not in collect:
            continue
        weights = collect[key]
        h, w = collect[f"stage_resolution_d{depth}"]
        m_eff = int(round((weights.shape[-1] / 3) ** 0.5))
        grid = (h // m_eff, w // m_eff)
        spatial = attention_spatial_map(weights, grid, m_eff, kv_frames=3)
        path = out_dir / f"attention_d{depth}.png"
        _save_heatmap(spatial, path)
        written.append(path)
    for depth in range(2, -1, -1):
        key = f"tu_residual_d{depth}"
        if key not in collect:
            continue
        residual = collect[key]  # (B, T, h, w, C)
        spatial = residual.mean(dim=(0, 1, -1)).cpu().numpy()
        path = out_dir / f"tu_residual_d{depth}.png"
        _save_heatmap(spatial, path)
        written.append(path)
    return written
