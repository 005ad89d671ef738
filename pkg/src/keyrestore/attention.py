"""Window partitioning, cyclic shifting, and windowed multi-head attention.

Feature maps are channel-last tensors shaped ``(F, h, w, c)`` (or with a
leading batch dimension). A window groups the tokens of one M x M spatial
tile across *all* F frames, so self-attention inside a window spans space and
time jointly. Token order inside a window is frame-major: token ``f*M*M + r*M
+ s`` is frame ``f``, window row ``r``, window column ``s``. That ordering is
part of the contract (masks and oracle tests rely on it).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass
class WindowBatch:
    """Windows flattened for attention: ``data`` is (batch*rows*cols, tokens, c)."""

    data: torch.Tensor
    window_grid: tuple[int, int]
    window_size: int
    batched: bool = False

    @property
    def num_windows(self) -> int:
        return self.window_grid[0] * self.window_grid[1]


def _check_divisible(value: int, window_size: int, axis: str) -> None:
    if value % window_size != 0:
        raise ValueError(
            f"{axis}={value} is not divisible by window size {window_size}"
        )


def partition_windows(feat: torch.Tensor, window_size: int) -> WindowBatch:
    """Split a feature map into non-overlapping combined windows.

    (F, h, w, c) -> (h*w/M^2, F*M^2, c); a leading batch dimension folds into
    the window axis. Exact inverse is :func:`reverse_windows`.
    """
    batched = feat.dim() == 5
    if not batched:
        if feat.dim() != 4:
            raise ValueError(f"expected a (F, h, w, c) feature map, got {tuple(feat.shape)}")
        feat = feat.unsqueeze(0)
    b, f, h, w, c = feat.shape
    m = window_size
    _check_divisible(h, m, "height")
    _check_divisible(w, m, "width")
    rows, cols = h // m, w // m
    x = feat.reshape(b, f, rows, m, cols, m, c)
    x = x.permute(0, 2, 4, 1, 3, 5, 6)  # (b, rows, cols, f, m, m, c)
    data = x.reshape(b * rows * cols, f * m * m, c)
    return WindowBatch(data=data, window_grid=(rows, cols), window_size=m, batched=batched)


def reverse_windows(
    wb: WindowBatch, frames: int, height: int, width: int, channels: int
) -> torch.Tensor:
    """Exact inverse of :func:`partition_windows` for the given source shape."""
    m = wb.window_size
    rows, cols = wb.window_grid
    if (rows, cols) != (height // m, width // m) or height % m or width % m:
        raise ValueError(
            f"window grid {wb.window_grid} inconsistent with {height}x{width} at window size {m}"
        )
    total, tokens, c = wb.data.shape
    if tokens != frames * m * m or c != channels:
        raise ValueError(
            f"window data {tuple(wb.data.shape)} inconsistent with "
            f"(F={frames}, h={height}, w={width}, c={channels}, M={m})"
        )
    if total % (rows * cols) != 0:
        raise ValueError(f"{total} windows do not tile a {rows}x{cols} grid")
    b = total // (rows * cols)
    x = wb.data.reshape(b, rows, cols, frames, m, m, channels)
    x = x.permute(0, 3, 1, 4, 2, 5, 6)  # (b, f, rows, m, cols, m, c)
    out = x.reshape(b, frames, height, width, channels)
    return out if wb.batched else out.squeeze(0)


def cyclic_shift(feat: torch.Tensor, shift: int) -> torch.Tensor:
    """Displace content by (-shift, -shift) on the spatial axes with wraparound.

    Negative shifts undo positive ones: cyclic_shift(cyclic_shift(x, s), -s) == x.
    """
    h, w = feat.shape[-3], feat.shape[-2]
    if abs(shift) >= min(h, w):
        raise ValueError(f"shift {shift} out of range for spatial dims {h}x{w}")
    if shift == 0:
        return feat
    return torch.roll(feat, shifts=(-shift, -shift), dims=(-3, -2))


def shifted_window_mask(
    height: int,
    width: int,
    window_size: int,
    shift: int,
    query_frames: int,
    kv_frames: int,
    device=None,
    dtype=torch.float32,
) -> torch.Tensor:
    """Additive attention mask for shifted windows.

    After a cyclic shift the edge windows mix content that was not spatially
    contiguous; the mask blocks attention across those regions. The spatial
    (M^2, M^2) mask is tiled over the frame axes since frames are never
    shifted. Returns (num_windows, query_frames*M^2, kv_frames*M^2) with 0 for
    allowed pairs and -100 for blocked pairs.
    """
    m = window_size
    region = torch.zeros((1, height, width, 1), device=device)
    spans = (slice(0, -m), slice(-m, -shift), slice(-shift, None))
    idx = 0
    for hs in spans:
        for ws in spans:
            region[:, hs, ws, :] = idx
            idx += 1
    region_windows = partition_windows(region, m).data.squeeze(-1)  # (nW, m*m)
    diff = region_windows.unsqueeze(1) - region_windows.unsqueeze(2)
    mask2d = torch.zeros_like(diff).masked_fill(diff != 0, -100.0)
    return mask2d.repeat(1, query_frames, kv_frames).to(dtype)


class WindowAttention(nn.Module):
    """Multi-head attention over combined windows (self- or cross-attention).

    Query/key/value use separate linear projections so the same module serves
    the self-attention path (key/value = query stream) and the cross-attention
    path (key/value = encoder features). No positional bias: window content is
    small and token order is fixed.
    """

    def __init__(self, channels: int, num_heads: int, qkv_bias: bool = True):
        super().__init__()
        if channels % num_heads != 0:
            raise ValueError(f"channels {channels} not divisible by {num_heads} heads")
        self.channels = channels
        self.num_heads = num_heads
        self.head_dim = channels // num_heads
        self.scale = self.head_dim ** -0.5
        self.q = nn.Linear(channels, channels, bias=qkv_bias)
        self.k = nn.Linear(channels, channels, bias=qkv_bias)
        self.v = nn.Linear(channels, channels, bias=qkv_bias)
        self.proj = nn.Linear(channels, channels)

    def forward(self, query, keyvalue=None, mask=None, sink=None):
        """query: (B_, Nq, c); keyvalue: (B_, Nk, c) or None for self-attention.

        mask, when given, is (num_windows, Nq, Nk) additive and B_ must be a
        multiple of num_windows. sink, when given, is a list that receives the
        detached softmax weights (B_, heads, Nq, Nk).
        """
        kv = query if keyvalue is None else keyvalue
        if kv.shape[-1] != query.shape[-1]:
            raise ValueError(
                f"channel mismatch: query has {query.shape[-1]}, key/value has {kv.shape[-1]}"
            )
        if kv.shape[0] != query.shape[0]:
            raise ValueError(
                f"window count mismatch: query {query.shape[0]}, key/value {kv.shape[0]}"
            )
        b, nq, c = query.shape
        nk = kv.shape[1]
        heads, hd = self.num_heads, self.head_dim
        q = self.q(query).reshape(b, nq, heads, hd).transpose(1, 2)
        k = self.k(kv).reshape(b, nk, heads, hd).transpose(1, 2)
        v = self.v(kv).reshape(b, nk, heads, hd).transpose(1, 2)
        attn = (q * self.scale) @ k.transpose(-2, -1)  # (b, heads, nq, nk)
        if mask is not None:
            if mask.dim() != 3 or mask.shape[1] != nq or mask.shape[2] != nk:
                raise ValueError(
                    f"mask shape {tuple(mask.shape)} does not match tokens ({nq}, {nk})"
                )
            nw = mask.shape[0]
            if b % nw != 0:
                raise ValueError(f"{b} window batches not divisible by {nw} mask windows")
            attn = attn.view(b // nw, nw, heads, nq, nk) + mask.unsqueeze(0).unsqueeze(2)
            attn = attn.view(b, heads, nq, nk)
        weights = attn.softmax(dim=-1)
        if sink is not None:
            sink.append(weights.detach())
        out = (weights @ v).transpose(1, 2).reshape(b, nq, c)
        return self.proj(out)


def window_attention(
    q_windows: WindowBatch,
    kv_windows: WindowBatch,
    params: WindowAttention,
    mask=None,
) -> WindowBatch:
    """Apply windowed attention on a WindowBatch pair; output keeps q's shape."""
    if q_windows.num_windows != kv_windows.num_windows:
        raise ValueError(
            f"window grids differ: {q_windows.window_grid} vs {kv_windows.window_grid}"
        )
    if q_windows.data.shape[0] != kv_windows.data.shape[0]:
        raise ValueError("query and key/value batches hold different window counts")
    kv = None if kv_windows.data is q_windows.data else kv_windows.data
    out = params(q_windows.data, kv, mask=mask)
    return WindowBatch(
        data=out,
        window_grid=q_windows.window_grid,
        window_size=q_windows.window_size,
        batched=q_windows.batched,
    )


class FeedForward(nn.Module):
    """Token-wise two-layer MLP with GELU, the transformer block tail."""

    def __init__(self, channels: int, hidden_ratio: float = 4.0):
        super().__init__()
        hidden = max(1, int(round(channels * hidden_ratio)))
        self.fc1 = nn.Linear(channels, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


def effective_window(window_size: int, height: int, width: int) -> int:
    """Clamp the window to the grid so tiny stages stay partitionable."""
    return min(window_size, height, width)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block with (shifted) windowed self-attention.

    x -> x + WMSA(LN(x)) -> x + MLP(LN(x)); the shifted variant rolls the map
    by floor(M/2) before partitioning, applies the cross-region mask, and
    rolls back after.
    """

    def __init__(
        self,
        channels: int,
        num_heads: int,
        window_size: int,
        shifted: bool,
        mlp_ratio: float = 4.0,
        qkv_bias: bool = True,
    ):
        super().__init__()
        self.window_size = window_size
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(channels)
        self.attn = WindowAttention(channels, num_heads, qkv_bias=qkv_bias)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = FeedForward(channels, mlp_ratio)

    def _attend(self, x, frames, h, w, c):
        m = effective_window(self.window_size, h, w)
        shift = m // 2 if self.shifted else 0
        if shift:
            x = cyclic_shift(x, shift)
            mask = shifted_window_mask(
                h, w, m, shift, frames, frames, device=x.device, dtype=x.dtype
            )
        else:
            mask = None
        wb = partition_windows(x, m)
        out = self.attn(wb.data, mask=mask)
        y = reverse_windows(
            WindowBatch(out, wb.window_grid, m, wb.batched), frames, h, w, c
        )
        if shift:
            y = cyclic_shift(y, -shift)
        return y

    def forward(self, x):
        squeeze = x.dim() == 4
        if squeeze:
            x = x.unsqueeze(0)
        _, f, h, w, c = x.shape
        x = x + self._attend(self.norm1(x), f, h, w, c)
        x = x + self.mlp(self.norm2(x))
        return x.squeeze(0) if squeeze else x


class DecoderBlock(nn.Module):
    """Decoder block: windowed self-attention, then cross-attention into the
    encoder stream, then the MLP; all three pre-norm residual branches.

    The query stream carries T frames, the encoder stream 3 keyframe slots at
    the same spatial resolution. In the shifted variant both streams are
    rolled by the same offset so their windows stay aligned. Cross-attention
    can be disabled (skip-connection ablation), leaving self-attention + MLP.
    """

    def __init__(
        self,
        channels: int,
        num_heads: int,
        window_size: int,
        shifted: bool,
        mlp_ratio: float = 4.0,
        qkv_bias: bool = True,
        cross_attention: bool = True,
    ):
        super().__init__()
        self.window_size = window_size
        self.shifted = shifted
        self.cross_attention = cross_attention
        self.norm1 = nn.LayerNorm(channels)
        self.attn = WindowAttention(channels, num_heads, qkv_bias=qkv_bias)
        if cross_attention:
            self.norm_cross = nn.LayerNorm(channels)
            self.cross_attn = WindowAttention(channels, num_heads, qkv_bias=qkv_bias)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = FeedForward(channels, mlp_ratio)

    def _windowed(self, attn, q_feat, kv_feat, q_frames, kv_frames, h, w, c, sink=None):
        m = effective_window(self.window_size, h, w)
        shift = m // 2 if self.shifted else 0
        if shift:
            q_feat = cyclic_shift(q_feat, shift)
            kv_feat = cyclic_shift(kv_feat, shift) if kv_feat is not None else None
            mask = shifted_window_mask(
                h, w, m, shift, q_frames, kv_frames,
                device=q_feat.device, dtype=q_feat.dtype,
            )
        else:
            mask = None
        qwb = partition_windows(q_feat, m)
        kv = partition_windows(kv_feat, m).data if kv_feat is not None else None
        out = attn(qwb.data, kv, mask=mask, sink=sink)
        y = reverse_windows(
            WindowBatch(out, qwb.window_grid, m, qwb.batched), q_frames, h, w, c
        )
        if shift:
            y = cyclic_shift(y, -shift)
        return y

    def forward(self, x, enc=None, sink=None):
        squeeze = x.dim() == 4
        if squeeze:
            x = x.unsqueeze(0)
            if enc is not None and enc.dim() == 4:
                enc = enc.unsqueeze(0)
        _, f, h, w, c = x.shape
        if self.cross_attention:
            if enc is None:
                raise ValueError("decoder block with cross-attention needs encoder features")
            if enc.shape[-3:] != x.shape[-3:]:
                raise ValueError(
                    f"encoder features {tuple(enc.shape)} do not align with "
                    f"decoder stream {tuple(x.shape)}"
                )
        x = x + self._windowed(self.attn, self.norm1(x), None, f, f, h, w, c)
        if self.cross_attention:
            kf = enc.shape[1]
            x = x + self._windowed(
                self.cross_attn, self.norm_cross(x), enc, f, kf, h, w, c, sink=sink
            )
        x = x + self.mlp(self.norm2(x))
        return x.squeeze(0) if squeeze else x
