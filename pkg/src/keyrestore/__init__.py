"""Keyframe-based video event restoration and anomaly scoring."""

from .attention import (
    DecoderBlock,
    EncoderBlock,
    WindowAttention,
    WindowBatch,
    cyclic_shift,
    partition_windows,
    reverse_windows,
    window_attention,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import LossConfig, ModelConfig, RunConfig, load_run_config
from .data import (
    DatasetManifest,
    SyntheticSpec,
    VideoClip,
    generate_synthetic,
    iterate_batches,
    load_video,
    sample_training_clips,
)
from .losses import adjacent_difference_loss, charbonnier_loss, total_loss
from .model import (
    KeyframeRestorer,
    TemporalUpsample,
    assemble_prototype,
    extract_keyframe_stack,
)
from .scoring import (
    AnomalyScoreSeries,
    frame_auc,
    psnr,
    score_video,
    select_worst_frame,
    tile_units,
)

__version__ = "0.1.0"
