"""The keyframe restoration network: convolutional feature extractor, four
windowed-attention encoder stages, a temporal-upsampling bottleneck, four
decoder stages with dual skip connections, and a pixel-shuffle output head.

All inter-module tensors are channel-last, (frames, height, width, channels),
optionally with a leading batch dimension; convolutional submodules permute to
channel-first internally. Three keyframes go in, T frames come out.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .attention import DecoderBlock, EncoderBlock
from .config import ModelConfig


def extract_keyframe_stack(clip) -> torch.Tensor:
    """Pick the first, middle, and last frame of a clip, in that order.

    Accepts (T, H, W, C) or batched (B, T, H, W, C); anything with a `frames`
    attribute (a dataset clip) contributes its frames array.
    """
    frames = getattr(clip, "frames", clip)
    if not torch.is_tensor(frames):
        frames = torch.as_tensor(frames)
    t = frames.shape[-4]
    idx = torch.tensor([0, (t - 1) // 2, t - 1], device=frames.device)
    return frames.index_select(-4, idx)


def _frames_to_2d(x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
    """(B, F, h, w, c) -> (B*F, c, h, w) plus the folded (B, F) sizes."""
    b, f, h, w, c = x.shape
    return x.reshape(b * f, h, w, c).permute(0, 3, 1, 2), (b, f)


def _frames_from_2d(y: torch.Tensor, fold: tuple[int, int]) -> torch.Tensor:
    b, f = fold
    y = y.permute(0, 2, 3, 1)
    return y.reshape(b, f, *y.shape[1:])


def _ensure_batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 4:
        return x.unsqueeze(0), True
    if x.dim() == 5:
        return x, False
    raise ValueError(f"expected a 4-D or 5-D feature tensor, got {tuple(x.shape)}")


class FeatureExtractor(nn.Module):
    """Per-frame convolutional front end: two conv+BN+LeakyReLU pairs at each
    of two widths with 2x2 max-pools between, then a conv to the embedding
    width. Divides the spatial resolution by 4."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w1, w2 = cfg.feature_extractor_widths
        slope = cfg.leaky_slope
        bn = lambda ch: nn.BatchNorm2d(ch, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.net = nn.Sequential(
            nn.Conv2d(cfg.input_channels, w1, 3, padding=1), bn(w1), nn.LeakyReLU(slope),
            nn.Conv2d(w1, w1, 3, padding=1), bn(w1), nn.LeakyReLU(slope),
            nn.MaxPool2d(2),
            nn.Conv2d(w1, w2, 3, padding=1), bn(w2), nn.LeakyReLU(slope),
            nn.Conv2d(w2, w2, 3, padding=1), bn(w2), nn.LeakyReLU(slope),
            nn.MaxPool2d(2),
            nn.Conv2d(w2, cfg.C, 3, padding=1), nn.LeakyReLU(slope),
        )

    def forward(self, x):
        x, squeeze = _ensure_batched(x)
        if x.shape[-3] % 4 or x.shape[-2] % 4:
            raise ValueError(f"spatial dims {x.shape[-3]}x{x.shape[-2]} must divide by 4")
        y, fold = _frames_to_2d(x)
        y = _frames_from_2d(self.net(y), fold)
        return y.squeeze(0) if squeeze else y


class _FrameConv(nn.Module):
    """Apply a 2-D conv module independently to every frame of a channel-last map."""

    def __init__(self, conv: nn.Module):
        super().__init__()
        self.conv = conv

    def forward(self, x):
        x, squeeze = _ensure_batched(x)
        y, fold = _frames_to_2d(x)
        y = _frames_from_2d(self.conv(y), fold)
        return y.squeeze(0) if squeeze else y


class Encoder(nn.Module):
    """Four stages of N alternating regular/shifted attention blocks; the
    first three stages end in a stride-2 conv. Returns both the pre-downsample
    stage outputs (skip sources) and the downsampled chain."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stages = nn.ModuleList(
            nn.ModuleList(
                EncoderBlock(
                    cfg.C, cfg.head_count, cfg.M,
                    shifted=(i % 2 == 1),
                    mlp_ratio=cfg.mlp_ratio,
                    qkv_bias=cfg.qkv_bias,
                )
                for i in range(cfg.N)
            )
            for _ in range(4)
        )
        self.downsamples = nn.ModuleList(
            _FrameConv(nn.Conv2d(cfg.C, cfg.C, 3, stride=2, padding=1)) for _ in range(3)
        )

    def forward(self, feat):
        pre, post = [], []
        x = feat
        for n, stage in enumerate(self.stages):
            for block in stage:
                x = block(x)
            pre.append(x)
            if n < 3:
                x = self.downsamples[n](x)
            post.append(x)
        return pre, post


class TemporalUpsample(nn.Module):
    """3-D transposed convolution turning 3 keyframe feature frames into the
    T-3 missing-frame features at the same spatial resolution.

    Kernel (T-3, 3, 3), stride 1; temporal padding 1 makes the output length
    exactly (3-1) - 2 + (T-3) = T-3 for every valid T.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.deconv = nn.ConvTranspose3d(
            cfg.C, cfg.C,
            kernel_size=(cfg.missing_frames, 3, 3),
            stride=1,
            padding=(1, 1, 1),
        )

    def forward(self, x):
        x, squeeze = _ensure_batched(x)
        if x.shape[1] != 3:
            raise ValueError(f"temporal upsampling expects 3 keyframe frames, got {x.shape[1]}")
        y = x.permute(0, 4, 1, 2, 3)  # (B, C, 3, h, w)
        y = self.deconv(y)
        y = y.permute(0, 2, 3, 4, 1)
        return y.squeeze(0) if squeeze else y


def assemble_prototype(keyframes: torch.Tensor, filler: torch.Tensor) -> torch.Tensor:
    """Interleave keyframe features with generated missing-frame features.

    keyframes (..., 3, h, w, c) occupy slots {0, (T-1)/2, T-1}; the first half
    of filler (..., T-3, h, w, c) fills the forward gap, the second half the
    backward gap. Keyframe slots are copied verbatim.
    """
    k, sq_k = _ensure_batched(keyframes)
    q, sq_q = _ensure_batched(filler)
    if k.shape[1] != 3:
        raise ValueError(f"expected 3 keyframe slots, got {k.shape[1]}")
    if q.shape[1] % 2 != 0:
        raise ValueError(f"filler length {q.shape[1]} must be even")
    if k.shape[-3:] != q.shape[-3:] or k.shape[0] != q.shape[0]:
        raise ValueError(
            f"keyframes {tuple(k.shape)} and filler {tuple(q.shape)} do not align"
        )
    half = q.shape[1] // 2
    out = torch.cat(
        [k[:, :1], q[:, :half], k[:, 1:2], q[:, half:], k[:, 2:]], dim=1
    )
    return out.squeeze(0) if (sq_k and sq_q) else out


class Decoder(nn.Module):
    """Four decoder stages walking back up the resolution pyramid.

    The deepest stage cross-attends the prototype sequence against the
    bottleneck encoder features and upsamples; the remaining stages add a
    temporally-upsampled residual of the matching encoder output (shared TU
    weights), cross-attend against that same encoder output, and upsample,
    except for the last stage which keeps its resolution. Either skip family
    can be disabled.
    """

    def __init__(self, cfg: ModelConfig, skip_tu: TemporalUpsample | None):
        super().__init__()
        self.cfg = cfg
        self.skip_tu = skip_tu  # shared across skip levels; None when disabled
        self.stages = nn.ModuleList(
            nn.ModuleList(
                DecoderBlock(
                    cfg.C, cfg.head_count, cfg.M,
                    shifted=(i % 2 == 1),
                    mlp_ratio=cfg.mlp_ratio,
                    qkv_bias=cfg.qkv_bias,
                    cross_attention=cfg.cross_attention_skip,
                )
                for i in range(cfg.N)
            )
            for _ in range(4)
        )
        self.upsamples = nn.ModuleList(
            _FrameConv(nn.ConvTranspose2d(cfg.C, cfg.C, 2, stride=2)) for _ in range(3)
        )

    def forward(self, skips: list[torch.Tensor], proto: torch.Tensor, collect=None):
        """skips: pre-downsample encoder outputs [level0..level3]; proto: the
        assembled T-frame prototype at bottleneck resolution."""
        x = proto
        for depth, stage in zip(range(3, -1, -1), self.stages):
            enc = skips[depth]
            if depth < 3 and self.skip_tu is not None:
                residual = assemble_prototype(enc, self.skip_tu(enc))
                if collect is not None:
                    collect[f"tu_residual_d{depth}"] = residual.detach()
                x = x + residual
            sink = [] if collect is not None else None
            for i, block in enumerate(stage):
                x = block(x, enc, sink=sink if i == 0 else None)
            if collect is not None and sink:
                collect[f"cross_attention_d{depth}"] = sink[0]
                collect[f"stage_resolution_d{depth}"] = (x.shape[-3], x.shape[-2])
            if depth > 0:
                x = self.upsamples[3 - depth](x)
        return x


class OutputHead(nn.Module):
    """Per-frame upsampling head: conv + 2x pixel shuffle twice, then two
    refining convs down to RGB. Restores the /4 resolution of the extractor."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        slope = cfg.leaky_slope
        # second pre-shuffle width scales with C; C=96 gives the 256/64 pair
        mid = 4 * max(1, round(256 * cfg.C / 96 / 4))
        self.net = nn.Sequential(
            nn.Conv2d(cfg.C, 4 * cfg.C, 3, padding=1),
            nn.PixelShuffle(2), nn.LeakyReLU(slope),
            nn.Conv2d(cfg.C, mid, 3, padding=1),
            nn.PixelShuffle(2), nn.LeakyReLU(slope),
            nn.Conv2d(mid // 4, mid // 4, 3, padding=1), nn.LeakyReLU(slope),
            nn.Conv2d(mid // 4, cfg.input_channels, 3, padding=1),
        )

    def forward(self, x):
        x, squeeze = _ensure_batched(x)
        y, fold = _frames_to_2d(x)
        y = _frames_from_2d(self.net(y), fold)
        return y.squeeze(0) if squeeze else y


class KeyframeRestorer(nn.Module):
    """End-to-end network mapping 3 stacked keyframes to the restored T-frame
    sequence. The bottleneck TU has its own weights; the skip-level TUs share
    one parameter set."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.feature_extractor = FeatureExtractor(cfg)
        self.encoder = Encoder(cfg)
        self.bottleneck_tu = TemporalUpsample(cfg)
        skip_tu = TemporalUpsample(cfg) if cfg.tu_residual_skip else None
        self.decoder = Decoder(cfg, skip_tu)
        self.output_head = OutputHead(cfg)
        self.apply(_init_parameters)

    def forward(self, keyframes: torch.Tensor, collect=None) -> torch.Tensor:
        """keyframes: (3, H, W, C_in) or (B, 3, H, W, C_in) in [0, 1]."""
        x, squeeze = _ensure_batched(keyframes)
        if x.shape[1] != 3:
            raise ValueError(f"expected 3 stacked keyframes, got {x.shape[1]}")
        if (x.shape[2], x.shape[3]) != (self.cfg.H, self.cfg.W):
            raise ValueError(
                f"frames are {x.shape[2]}x{x.shape[3]}, model expects "
                f"{self.cfg.H}x{self.cfg.W}"
            )
        feats = self.feature_extractor(x)
        skips, chain = self.encoder(feats)
        bottleneck = chain[3]
        filler = self.bottleneck_tu(bottleneck)
        proto = assemble_prototype(bottleneck, filler)
        if collect is not None:
            collect["prototype"] = proto.detach()
        decoded = self.decoder(skips, proto, collect=collect)
        frames = self.output_head(decoded)
        return frames.squeeze(0) if squeeze else frames

    @torch.no_grad()
    def restore_event(self, keyframes: torch.Tensor) -> torch.Tensor:
        """Inference path: eval mode (frozen BN statistics), no gradients."""
        was_training = self.training
        self.eval()
        try:
            return self.forward(keyframes)
        finally:
            self.train(was_training)


def _init_parameters(module: nn.Module) -> None:
    # truncated normal for token projections, torch's fan-in default for
    # convs, zero biases everywhere (paper leaves initialization open)
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.ConvTranspose3d)):
        if module.bias is not None:
            nn.init.zeros_(module.bias)
