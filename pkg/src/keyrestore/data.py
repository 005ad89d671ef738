"""Dataset ingestion, clip sampling, and the deterministic synthetic
moving-shapes generator.

On-disk layout:

    <root>/manifest.json
    <root>/<split>/<video_id>/frame_000000.png ...
    <root>/<split>/<video_id>.labels          (test split: one 0/1 per line)

Frames are lossless PNG so generator -> loader round-trips are exact. The
generator is pure function of its spec: same seed, byte-identical dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_NAME = "manifest.json"
_IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg")

SHAPE_KINDS = ("square", "circle", "triangle")
ANOMALY_KINDS = ("speed_jump", "teleport", "shape_swap")


@dataclass
class VideoClip:
    """A length-T window of one video: frames in [0,1] plus source positions."""

    frames: np.ndarray
    frame_indices: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        self.frame_indices = np.asarray(self.frame_indices, dtype=np.int64)
        if self.frames.ndim != 4:
            raise ValueError(f"clip frames must be (T, H, W, C), got {self.frames.shape}")
        if len(self.frame_indices) != len(self.frames):
            raise ValueError("one source index per frame required")
        diffs = np.diff(self.frame_indices)
        if len(diffs) and not np.all(diffs == 1):
            raise ValueError("clip frames must be contiguous in the source video")
        if self.frames.min() < 0 or self.frames.max() > 1:
            raise ValueError("frame values must lie in [0, 1]")


@dataclass
class VideoEntry:
    video_id: str
    frame_dir: str
    frames: int
    label_file: str | None = None


@dataclass
class DatasetManifest:
    """Ordered catalog of a dataset's videos per split."""

    root: str
    frame_size: tuple[int, int]
    train: list[VideoEntry] = field(default_factory=list)
    test: list[VideoEntry] = field(default_factory=list)

    def split(self, name: str) -> list[VideoEntry]:
        if name not in ("train", "test"):
            raise ValueError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test

    def save(self) -> Path:
        path = Path(self.root) / MANIFEST_NAME
        payload = {
            "frame_size": list(self.frame_size),
            "train": [asdict(v) for v in self.train],
            "test": [asdict(v) for v in self.test],
        }
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"no {MANIFEST_NAME} under {root}")
        payload = json.loads(path.read_text(encoding="utf-8"))
        manifest = cls(root=str(root), frame_size=tuple(payload["frame_size"]))
        manifest.train = [VideoEntry(**v) for v in payload["train"]]
        manifest.test = [VideoEntry(**v) for v in payload["test"]]
        ids = [v.video_id for v in manifest.train + manifest.test]
        if len(ids) != len(set(ids)):
            raise ValueError(f"{path}: duplicate video ids")
        return manifest


def load_video(entry: VideoEntry, frame_size: tuple[int, int], root=".") -> np.ndarray:
    """Decode a frame directory into a (L, H, W, 3) array in [0, 1].

    Frames are taken in lexicographic filename order and bilinearly resized
    to frame_size when needed.
    """
    directory = Path(root) / entry.frame_dir
    if not directory.is_dir():
        raise FileNotFoundError(f"frame directory missing: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no image frames in {directory}")
    h, w = frame_size
    frames = np.empty((len(files), h, w, 3), dtype=np.float32)
    for i, path in enumerate(files):
        try:
            with Image.open(path) as img:
                img = img.convert("RGB")
                if img.size != (w, h):
                    img = img.resize((w, h), Image.BILINEAR)
                frames[i] = np.asarray(img, dtype=np.float32) / 255.0
        except OSError as exc:
            raise ValueError(f"unreadable frame {path}: {exc}") from exc
    return frames


def load_labels(entry: VideoEntry, root=".") -> np.ndarray:
    if entry.label_file is None:
        raise ValueError(f"video {entry.video_id} has no label file")
    path = Path(root) / entry.label_file
    values = [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    labels = np.array([int(v) for v in values], dtype=np.int64)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError(f"{path}: labels must be 0 or 1")
    if len(labels) != entry.frames:
        raise ValueError(f"{path}: {len(labels)} labels for {entry.frames} frames")
    return labels


def sample_training_clips(video: np.ndarray, t: int, stride: int = 1) -> list[VideoClip]:
    """All length-t windows at the given stride; empty (with a warning) when
    the video is shorter than one clip."""
    length = len(video)
    if length < t:
        import warnings

        warnings.warn(f"video of {length} frames yields no clips of length {t}")
        return []
    return [
        VideoClip(frames=video[s : s + t], frame_indices=np.arange(s, s + t))
        for s in range(0, length - t + 1, stride)
    ]


@dataclass
class SyntheticSpec:
    """Recipe for the synthetic moving-shapes dataset.

    Normal dynamics: shapes with constant velocity bouncing off the canvas.
    Test videos carry exactly one labeled anomaly span in which one of the
    shapes misbehaves. Anomaly span starts snap to `span_snap` frames so
    desk-scale scoring units line up with label boundaries.

    The default mix holds the dynamics anomalies only: a span-aligned
    shape_swap segment is self-consistent inside each scoring unit (its
    keyframes already show the swapped shape), so unit-granular scoring
    cannot flag it; it stays available for explicitly configured datasets.
    """

    seed: int = 42
    num_train_videos: int = 8
    num_test_videos: int = 4
    frames_per_video: int = 72
    canvas: tuple[int, int] = (64, 64)
    num_shapes: int = 3
    size_range: tuple[int, int] = (10, 18)
    speed_range: tuple[int, int] = (1, 3)
    anomaly_types: tuple[str, ...] = ("teleport", "speed_jump")
    anomaly_length: int = 18
    span_snap: int = 9

    def __post_init__(self):
        unknown = set(self.anomaly_types) - set(ANOMALY_KINDS)
        if unknown:
            raise ValueError(f"unknown anomaly types {sorted(unknown)}")
        if self.num_test_videos > 0 and not self.anomaly_types:
            raise ValueError("test videos requested but no anomaly types given")
        if self.anomaly_length >= self.frames_per_video:
            raise ValueError("anomaly span must fit inside the video")
        if min(self.canvas) < 2 * self.size_range[1]:
            raise ValueError("canvas too small for the largest shape")


def _draw_shape(frame: np.ndarray, kind: str, x: float, y: float, size: int, color) -> None:
    h, w, _ = frame.shape
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "square":
        mask = (yy >= y) & (yy < y + size) & (xx >= x) & (xx < x + size)
    elif kind == "circle":
        cy, cx, r = y + size / 2, x + size / 2, size / 2
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif kind == "triangle":
        # upright triangle: apex on the top edge of the bounding box
        rel = np.clip((yy - y) / max(size - 1, 1), 0, None)
        mask = (yy >= y) & (yy < y + size) & (np.abs(xx - (x + size / 2)) <= rel * size / 2)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    frame[mask] = color


class _Shape:
    def __init__(self, rng: np.random.Generator, spec: SyntheticSpec):
        h, w = spec.canvas
        self.kind = SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))]
        self.size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
        self.x = float(rng.uniform(0, w - self.size))
        self.y = float(rng.uniform(0, h - self.size))
        lo, hi = spec.speed_range
        self.vx = float(rng.uniform(lo, hi)) * (1 if rng.random() < 0.5 else -1)
        self.vy = float(rng.uniform(lo, hi)) * (1 if rng.random() < 0.5 else -1)
        self.color = rng.uniform(0.35, 1.0, size=3).astype(np.float32)

    def step(self, canvas: tuple[int, int], factor: float = 1.0) -> None:
        h, w = canvas
        self.x += self.vx * factor
        self.y += self.vy * factor
        if self.x < 0 or self.x > w - self.size:
            self.vx = -self.vx
            self.x = float(np.clip(self.x, 0, w - self.size))
        if self.y < 0 or self.y > h - self.size:
            self.vy = -self.vy
            self.y = float(np.clip(self.y, 0, h - self.size))


def _background(rng: np.random.Generator, canvas: tuple[int, int]) -> np.ndarray:
    h, w = canvas
    gy = np.linspace(0, 1, h)[:, None, None]
    gx = np.linspace(0, 1, w)[None, :, None]
    base = rng.uniform(0.02, 0.10, size=3).astype(np.float32)
    tilt = rng.uniform(0.02, 0.08, size=3).astype(np.float32)
    return (base + gy * tilt + gx * tilt[::-1]).astype(np.float32)


def _render_video(
    spec: SyntheticSpec, rng: np.random.Generator, anomaly: str | None, span: tuple[int, int] | None
) -> np.ndarray:
    h, w = spec.canvas
    shapes = [_Shape(rng, spec) for _ in range(spec.num_shapes)]
    background = _background(rng, spec.canvas)
    target = shapes[0]  # the shape that misbehaves during the span
    normal_kind = target.kind
    frames = np.empty((spec.frames_per_video, h, w, 3), dtype=np.float32)
    for t in range(spec.frames_per_video):
        inside = span is not None and span[0] <= t < span[1]
        if inside and anomaly == "teleport":
            target.x = float(rng.uniform(0, w - target.size))
            target.y = float(rng.uniform(0, h - target.size))
        target.kind = _swap(normal_kind) if (inside and anomaly == "shape_swap") else normal_kind
        frame = background.copy()
        for shape in shapes:
            _draw_shape(frame, shape.kind, shape.x, shape.y, shape.size, shape.color)
        frames[t] = frame
        for shape in shapes:
            factor = 4.0 if (inside and anomaly == "speed_jump" and shape is target) else 1.0
            if not (inside and anomaly == "teleport" and shape is target):
                shape.step(spec.canvas, factor)
    return np.clip(frames, 0.0, 1.0)


def _swap(kind: str) -> str:
    return SHAPE_KINDS[(SHAPE_KINDS.index(kind) + 1) % len(SHAPE_KINDS)]


def _pick_span(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[int, int]:
    latest = spec.frames_per_video - spec.anomaly_length
    snap = max(1, spec.span_snap)
    choices = np.arange(snap, latest + 1, snap)
    if len(choices) == 0:
        choices = np.array([min(1, latest)])
    start = int(choices[rng.integers(len(choices))])
    return start, start + spec.anomaly_length


def _write_frames(frames: np.ndarray, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        img = Image.fromarray(np.round(frame * 255.0).astype(np.uint8))
        img.save(directory / f"frame_{i:06d}.png")


def generate_synthetic(spec: SyntheticSpec, root) -> DatasetManifest:
    """Render the dataset to disk and return its manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(root=str(root), frame_size=spec.canvas)
    for i in range(spec.num_train_videos):
        rng = np.random.default_rng([spec.seed, 0, i])
        video_id = f"train_{i:03d}"
        frames = _render_video(spec, rng, anomaly=None, span=None)
        _write_frames(frames, root / "train" / video_id)
        manifest.train.append(
            VideoEntry(video_id=video_id, frame_dir=f"train/{video_id}", frames=len(frames))
        )
    for i in range(spec.num_test_videos):
        rng = np.random.default_rng([spec.seed, 1, i])
        video_id = f"test_{i:03d}"
        anomaly = spec.anomaly_types[i % len(spec.anomaly_types)]
        span = _pick_span(spec, rng)
        frames = _render_video(spec, rng, anomaly=anomaly, span=span)
        _write_frames(frames, root / "test" / video_id)
        labels = np.zeros(len(frames), dtype=np.int64)
        labels[span[0] : span[1]] = 1
        label_file = root / "test" / f"{video_id}.labels"
        label_file.write_text("".join(f"{v}\n" for v in labels), encoding="utf-8")
        manifest.test.append(
            VideoEntry(
                video_id=video_id,
                frame_dir=f"test/{video_id}",
                frames=len(frames),
                label_file=f"test/{video_id}.labels",
            )
        )
    manifest.save()
    return manifest


def load_synthetic_spec(path) -> SyntheticSpec:
    """Read a SyntheticSpec from a flat key=value file."""
    from .config import read_key_values

    pairs = read_key_values(path)
    kwargs = {}
    defaults = SyntheticSpec()
    for key, raw in pairs.items():
        if not hasattr(defaults, key):
            raise ValueError(f"{path}: unknown synthetic spec key {key!r}")
        current = getattr(defaults, key)
        if isinstance(current, bool):
            kwargs[key] = raw.lower() in ("true", "1", "yes", "on")
        elif isinstance(current, int):
            kwargs[key] = int(raw)
        elif isinstance(current, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            numeric = not current or isinstance(current[0], int)
            kwargs[key] = tuple(int(p) for p in parts) if numeric else tuple(parts)
        else:
            kwargs[key] = raw
    return SyntheticSpec(**kwargs)


def iterate_batches(
    manifest: DatasetManifest,
    t: int,
    batch_size: int,
    seed: int,
    stride: int = 1,
    split: str = "train",
):
    """Yield shuffled (keyframe stack, target clip) batches for one epoch.

    Keyframes are the clip's frames {0, (T-1)/2, T-1}; the target is the full
    clip. The last partial batch is emitted. Order is a pure function of the
    seed.
    """
    import torch

    root = manifest.root
    videos = [load_video(entry, manifest.frame_size, root) for entry in manifest.split(split)]
    index = [
        (vi, clip.frame_indices[0])
        for vi, video in enumerate(videos)
        for clip in sample_training_clips(video, t, stride)
    ]
    if not index:
        return
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(index))
    mid = (t - 1) // 2
    for lo in range(0, len(order), batch_size):
        chosen = [index[j] for j in order[lo : lo + batch_size]]
        targets = np.stack([videos[vi][s : s + t] for vi, s in chosen])
        keys = targets[:, [0, mid, t - 1]]
        yield torch.from_numpy(keys), torch.from_numpy(targets)
