"""Configuration dataclasses and the flat key=value config file format.

Config files are plain text, one ``key = value`` pair per line, ``#`` starts a
comment. Lists are comma separated. Every key matches a field of
:class:`RunConfig` (or its nested model/loss sections); unknown keys are an
error so typos fail loudly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path


@dataclass
class ModelConfig:
    """Architecture hyperparameters for the restoration network.

    Defaults follow the published training setup (T=9, 256x256 inputs, window
    size 4, 96 channels, depth 6); desk-scale runs override H/W/N.
    """

    T: int = 9
    H: int = 256
    W: int = 256
    M: int = 4
    C: int = 96
    N: int = 6
    head_count: int = 3
    input_channels: int = 3
    feature_extractor_widths: tuple[int, ...] = (64, 128)
    mlp_ratio: float = 4.0
    qkv_bias: bool = True
    leaky_slope: float = 0.2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    cross_attention_skip: bool = True
    tu_residual_skip: bool = True

    def __post_init__(self):
        if self.T % 2 == 0 or self.T < 5:
            raise ValueError(f"clip length T must be odd and >= 5, got {self.T}")
        if self.N % 2 != 0 or self.N < 2:
            raise ValueError(f"block depth N must be even and >= 2, got {self.N}")
        # feature extractor divides by 4, three encoder stages halve again
        for name, v in (("H", self.H), ("W", self.W)):
            if v % 32 != 0:
                raise ValueError(f"{name}={v} must be divisible by 32")
        if self.C % self.head_count != 0:
            raise ValueError(
                f"channels C={self.C} not divisible by head_count={self.head_count}"
            )
        if self.M < 1:
            raise ValueError(f"window size M must be >= 1, got {self.M}")
        if len(self.feature_extractor_widths) != 2:
            raise ValueError("feature_extractor_widths must have exactly two entries")
        self.feature_extractor_widths = tuple(int(w) for w in self.feature_extractor_widths)

    @property
    def middle_index(self) -> int:
        """0-based offset of the middle keyframe within a clip."""
        return (self.T - 1) // 2

    @property
    def missing_frames(self) -> int:
        """Temporal length produced by a TU module (frames to fill in)."""
        return self.T - 3

    @property
    def feature_height(self) -> int:
        return self.H // 4

    @property
    def feature_width(self) -> int:
        return self.W // 4

    def fingerprint(self) -> str:
        """Stable hash of the config, used for checkpoint compatibility checks."""
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class LossConfig:
    """Settings shared by the appearance and motion losses.

    Reduction is fixed: per-element mean within a frame (or frame pair),
    summed over frames, averaged over a leading batch dimension if present.
    """

    epsilon: float = 1e-3

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class RunConfig:
    """Everything a training/scoring run needs: model, loss, optimizer, paths."""

    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    learning_rate: float = 2e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    grad_clip: float = 0.0  # 0 disables clipping
    epochs: int = 16
    batch_size: int = 4
    clip_stride: int = 1
    seed: int = 42
    afd_loss: bool = True
    data_root: str = "data"
    checkpoint_dir: str = "runs"


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_LOSS_KEYS = {f.name for f in fields(LossConfig)}
_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"model", "loss"}


def _parse_value(raw: str, target_type):
    raw = raw.strip()
    if target_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    if target_type is tuple:
        return tuple(int(part) for part in raw.split(",") if part.strip())
    return raw


def read_key_values(path) -> dict[str, str]:
    """Parse a flat key=value file into a string dict."""
    pairs: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, raw = line.split("=", 1)
        pairs[key.strip()] = raw.strip()
    return pairs


def _field_type(cls, name):
    for f in fields(cls):
        if f.name == name:
            if f.name == "feature_extractor_widths":
                return tuple
            return type(getattr(cls(), name)) if name != "model" else None
    raise KeyError(name)


def load_run_config(path) -> RunConfig:
    """Build a RunConfig from a key=value file; unknown keys raise."""
    pairs = read_key_values(path)
    model_kwargs, loss_kwargs, run_kwargs = {}, {}, {}
    for key, raw in pairs.items():
        if key in _MODEL_KEYS:
            model_kwargs[key] = _parse_value(raw, _field_type(ModelConfig, key))
        elif key in _LOSS_KEYS:
            loss_kwargs[key] = _parse_value(raw, _field_type(LossConfig, key))
        elif key in _RUN_KEYS:
            run_kwargs[key] = _parse_value(raw, _field_type(RunConfig, key))
        else:
            raise ValueError(f"{path}: unknown config key {key!r}")
    return RunConfig(
        model=ModelConfig(**model_kwargs), loss=LossConfig(**loss_kwargs), **run_kwargs
    )


def write_run_config(cfg: RunConfig, path) -> None:
    """Serialize a RunConfig back to the flat key=value format."""
    lines = []
    for f in fields(ModelConfig):
        v = getattr(cfg.model, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    lines.append(f"epsilon = {cfg.loss.epsilon}")
    for name in sorted(_RUN_KEYS):
        lines.append(f"{name} = {getattr(cfg, name)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
