"""Test-time anomaly scoring: worst-frame PSNR per unit, per-video
normalization, and frame-level ROC AUC.

A video is tiled into T-frame units (non-overlapping, plus one tail unit
aligned to the last frame when T does not divide the length). Every frame of a
unit inherits the PSNR of the unit's worst-restored frame; where units
overlap, a frame keeps the minimum PSNR seen. Scores are 1 minus the min-max
normalized PSNR within the video, so 1 marks the most anomalous evidence.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MSE_FLOOR = 1e-10  # guards PSNR on perfect restorations


@dataclass
class AnomalyScoreSeries:
    """Per-frame anomaly evidence for one test video."""

    video_id: str
    scores: np.ndarray
    psnrs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.psnrs = np.asarray(self.psnrs, dtype=np.float64)
        if self.scores.shape != self.psnrs.shape:
            raise ValueError("scores and psnrs must have one entry per frame")
        if np.any(self.scores < 0) or np.any(self.scores > 1):
            raise ValueError("scores must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != self.scores.shape:
                raise ValueError(
                    f"{self.video_id}: {len(self.labels)} labels for {len(self.scores)} frames"
                )


def _as_array(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def select_worst_frame(restored, real) -> tuple[int, float]:
    """Index and value of the largest per-frame MSE; ties go to the smallest index."""
    restored, real = _as_array(restored), _as_array(real)
    if restored.shape != real.shape:
        raise ValueError(
            f"shape mismatch: restored {restored.shape} vs real {real.shape}"
        )
    per_frame = ((restored - real) ** 2).reshape(restored.shape[0], -1).mean(axis=1)
    t_star = int(np.argmax(per_frame))
    return t_star, float(per_frame[t_star])


def psnr(restored_frame, real_frame) -> float:
    """10*log10(max^2 / mse) with the restored frame's own pixel maximum.

    The MSE is floored at MSE_FLOOR so identical frames give a large finite
    value instead of infinity.
    """
    restored, real = _as_array(restored_frame), _as_array(real_frame)
    if restored.shape != real.shape:
        raise ValueError(f"shape mismatch: {restored.shape} vs {real.shape}")
    mse = float(((restored - real) ** 2).mean())
    peak = float(restored.max())
    return 10.0 * math.log10(peak * peak / max(mse, MSE_FLOOR))


def tile_units(length: int, t: int) -> list[tuple[int, int]]:
    """Half-open unit spans covering a video: disjoint T-frame tiles plus a
    tail unit aligned to the last frame when T does not divide the length."""
    if length < t:
        raise ValueError(f"video of {length} frames is shorter than a unit of {t}")
    spans = [(start, start + t) for start in range(0, length - t + 1, t)]
    if spans[-1][1] < length:
        spans.append((length - t, length))
    return spans


def score_video(units, video_id: str = "", labels=None) -> AnomalyScoreSeries:
    """Turn (restored, real, span) units into normalized per-frame scores.

    Spans are half-open frame ranges and must jointly cover the video.
    Overlapping frames keep the minimum PSNR (the most anomalous evidence).
    When all units carry identical PSNR the scores degenerate to all zeros.
    """
    if not units:
        raise ValueError("no units to score")
    length = max(span[1] for _, _, span in units)
    frame_psnr = np.full(length, np.inf)
    for restored, real, (start, stop) in units:
        if not (0 <= start < stop <= length):
            raise ValueError(f"unit span ({start}, {stop}) out of bounds for {length} frames")
        t_star, _ = select_worst_frame(restored, real)
        value = psnr(_as_array(restored)[t_star], _as_array(real)[t_star])
        frame_psnr[start:stop] = np.minimum(frame_psnr[start:stop], value)
    if np.any(np.isinf(frame_psnr)):
        uncovered = np.flatnonzero(np.isinf(frame_psnr))
        raise ValueError(f"frames not covered by any unit: {uncovered[:8].tolist()}...")
    lo, hi = frame_psnr.min(), frame_psnr.max()
    if hi > lo:
        scores = 1.0 - (frame_psnr - lo) / (hi - lo)
    else:
        scores = np.zeros_like(frame_psnr)
    return AnomalyScoreSeries(video_id=video_id, scores=scores, psnrs=frame_psnr, labels=labels)


def frame_auc(series: list[AnomalyScoreSeries]) -> float:
    """Frame-level ROC AUC over all videos' concatenated frames.

    Rank-based (Mann-Whitney) with ties contributing 1/2. Labels are required
    and both classes must be present.
    """
    missing = [s.video_id for s in series if s.labels is None]
    if missing:
        raise ValueError(f"series without labels: {missing}")
    scores = np.concatenate([s.scores for s in series])
    labels = np.concatenate([s.labels for s in series])
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0:
        raise ValueError("no positive (anomalous) frames in the labels")
    if n_neg == 0:
        raise ValueError("no negative (normal) frames in the labels")
    # average ranks: rank of a value = (# strictly smaller) + (ties + 1) / 2
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    below = np.cumsum(counts) - counts
    ranks = (below + (counts + 1) / 2.0)[inverse]
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def write_score_csv(series: AnomalyScoreSeries, path) -> None:
    """One CSV per video: frame_index, psnr, score, and label when present."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["frame_index", "psnr", "score"]
        if series.labels is not None:
            header.append("label")
        writer.writerow(header)
        for i in range(len(series.scores)):
            row = [i, repr(float(series.psnrs[i])), repr(float(series.scores[i]))]
            if series.labels is not None:
                row.append(int(series.labels[i]))
            writer.writerow(row)


def read_score_csv(path) -> AnomalyScoreSeries:
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["frame_index", "psnr", "score"]:
            raise ValueError(f"{path}: unexpected score CSV header {header}")
        labelled = len(header) > 3 and header[3] == "label"
        psnrs, scores, labels = [], [], []
        for row in reader:
            psnrs.append(float(row[1]))
            scores.append(float(row[2]))
            if labelled:
                labels.append(int(row[3]))
    return AnomalyScoreSeries(
        video_id=path.stem,
        scores=np.array(scores),
        psnrs=np.array(psnrs),
        labels=np.array(labels, dtype=np.int64) if labelled else None,
    )
