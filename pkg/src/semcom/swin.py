"""Hierarchical windowed-attention codec: image -> latent -> image.

Encoder: patch embed, alternating plain/shifted window attention blocks,
patch merging between stages, then a learned projection to the flat latent.
The decoder mirrors it with patch expanding and a pixel head squashed to
[0, 1]. Attention projections are adapter-capable; everything else is plain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .latent import LatentCode
from .lora import AdaptedLinear


class CodecError(ValueError):
    pass


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * num_windows, window*window, C)."""
    b, h, w, c = x.shape
    x = x.view(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    c = windows.shape[-1]
    x = windows.view(-1, h // window, w // window, window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, h, w, c)


def relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
    flat = coords.flatten(1)  # (2, N)
    rel = flat[:, :, None] - flat[:, None, :]  # (2, N, N)
    rel = rel.permute(1, 2, 0) + (window - 1)
    return (rel[..., 0] * (2 * window - 1) + rel[..., 1]).long()


def _shift_region_map(hp: int, wp: int, window: int, shift: int) -> torch.Tensor:
    """Region ids on the rolled canvas; ids differ across wrap boundaries."""
    region = torch.zeros(hp, wp)
    cnt = 0
    for hs in (slice(0, hp - window), slice(hp - window, hp - shift), slice(hp - shift, hp)):
        for ws in (slice(0, wp - window), slice(wp - window, wp - shift), slice(wp - shift, wp)):
            region[hs, ws] = cnt
            cnt += 1
    return region


_MASK_CACHE: dict[tuple, torch.Tensor] = {}


def shift_attention_mask(hp: int, wp: int, window: int, shift: int) -> torch.Tensor:
    """(num_windows, N, N) boolean mask, True where attention must be blocked."""
    key = (hp, wp, window, shift)
    if key not in _MASK_CACHE:
        region = _shift_region_map(hp, wp, window, shift)[None, :, :, None]
        win = window_partition(region, window).squeeze(-1)  # (nW, N)
        _MASK_CACHE[key] = win.unsqueeze(1) != win.unsqueeze(2)
    return _MASK_CACHE[key]


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, bias: torch.Tensor, mask: torch.Tensor | None = None):
    """Scaled dot-product attention within windows.

    q, k, v: (B, heads, N, d_head); bias: (heads, N, N) added to the logits;
    mask: bool (B, 1, N, N) or broadcastable, True entries get zero weight.
    Returns (output, attention weights).
    """
    d_head = q.shape[-1]
    logits = q @ k.transpose(-2, -1) / math.sqrt(d_head) + bias
    if mask is not None:
        logits = logits.masked_fill(mask, float("-inf"))
    weights = logits.softmax(dim=-1)
    return weights @ v, weights


class WindowAttention(nn.Module):
    """Multi-head self attention inside (optionally shifted) square windows."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        if dim % heads:
            raise CodecError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.window = window
        self.q = AdaptedLinear(dim, dim)
        self.k = AdaptedLinear(dim, dim)
        self.v = AdaptedLinear(dim, dim)
        self.out = AdaptedLinear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)
        self.register_buffer("rel_index", relative_position_index(window), persistent=False)
        self.record_attention = False
        self.last_attention: torch.Tensor | None = None
        self.last_op_count = 0

    def forward(self, x: torch.Tensor, shift: int = 0) -> torch.Tensor:
        b, h, w, c = x.shape
        m = self.window
        if shift not in (0, m // 2):
            raise CodecError(f"shift must be 0 or {m // 2}, got {shift}")
        pad_h = (m - h % m) % m
        pad_w = (m - w % m) % m
        if pad_h or pad_w:
            x = F.pad(x, (0, 0, 0, pad_w, 0, pad_h))
        hp, wp = h + pad_h, w + pad_w
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))

        windows = window_partition(x, m)  # (B*nW, N, C)
        n = m * m
        bw = windows.shape[0]

        def heads_view(t):
            return t.view(bw, n, self.heads, c // self.heads).transpose(1, 2)

        q, k, v = heads_view(self.q(windows)), heads_view(self.k(windows)), heads_view(self.v(windows))
        bias = self.rel_bias[self.rel_index].permute(2, 0, 1)  # (heads, N, N)

        mask = None
        if shift:
            win_mask = shift_attention_mask(hp, wp, m, shift).to(x.device)  # (nW, N, N)
            n_windows = (hp // m) * (wp // m)
            mask = win_mask.repeat(b, 1, 1).unsqueeze(1)  # (B*nW, 1, N, N)
            assert mask.shape[0] == bw == b * n_windows

        out, weights = attend(q, k, v, bias, mask)
        if self.record_attention:
            self.last_attention = weights.detach()
        # score and value multiplies, linear in the number of windows
        self.last_op_count = 2 * bw * self.heads * n * n * (c // self.heads)

        out = out.transpose(1, 2).reshape(bw, n, c)
        out = self.out(out)
        x = window_reverse(out, m, hp, wp)
        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        if pad_h or pad_w:
            x = x[:, :h, :w]
        return x


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, shift: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x), self.shift)
        return x + self.mlp(self.norm2(x))


class PatchMerge(nn.Module):
    """Concatenate each 2x2 patch block and project 4*dim_in -> dim_out."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim_in)
        self.proj = nn.Linear(4 * dim_in, dim_out, bias=False)

    def forward(self, x):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise CodecError(f"patch merging needs even spatial dims, got {h}x{w}")
        x = x.view(b, h // 2, 2, w // 2, 2, c).permute(0, 1, 3, 2, 4, 5).reshape(b, h // 2, w // 2, 4 * c)
        return self.proj(self.norm(x))


class PatchExpand(nn.Module):
    """Project dim_in -> 4*dim_out and unfold each token into a 2x2 block."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.proj = nn.Linear(dim_in, 4 * dim_out, bias=False)
        self.dim_out = dim_out

    def forward(self, x):
        b, h, w, _ = x.shape
        x = self.proj(x).view(b, h, w, 2, 2, self.dim_out)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(b, 2 * h, 2 * w, self.dim_out)


@dataclass
class SwinStageConfig:
    depth: int = 2
    dim: int = 48
    heads: int = 3
    window: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise CodecError(f"stage dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise CodecError("stage depth must be >= 1")


@dataclass
class CodecConfig:
    image_shape: tuple[int, int, int] = (32, 32, 3)  # H, W, C
    patch_size: int = 2
    stages: tuple[SwinStageConfig, ...] = field(
        default_factory=lambda: (SwinStageConfig(2, 48, 3), SwinStageConfig(2, 96, 6))
    )
    latent_shape: tuple[int, int, int] = (12, 12, 16)
    mlp_ratio: float = 4.0

    def __post_init__(self):
        h, w, _ = self.image_shape
        p = self.patch_size
        if h % p or w % p:
            raise CodecError(f"image {h}x{w} not divisible by patch size {p}")
        gh, gw = h // p, w // p
        for i in range(len(self.stages) - 1):
            if gh % 2 or gw % 2:
                raise CodecError(f"grid {gh}x{gw} before merge {i} must be even")
            gh, gw = gh // 2, gw // 2
        self.final_grid = (gh, gw)

    @property
    def latent_dim(self) -> int:
        h, w, c = self.latent_shape
        return h * w * c


def _stage_shifts(depth: int, window: int):
    return [0 if i % 2 == 0 else window // 2 for i in range(depth)]


def _build_stage(cfg: SwinStageConfig, mlp_ratio: float) -> nn.ModuleList:
    return nn.ModuleList(
        SwinBlock(cfg.dim, cfg.heads, cfg.window, shift, mlp_ratio)
        for shift in _stage_shifts(cfg.depth, cfg.window)
    )


class SwinEncoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        h, w, c = cfg.image_shape
        p = cfg.patch_size
        self.patch_embed = nn.Linear(p * p * c, cfg.stages[0].dim)
        self.stages = nn.ModuleList(_build_stage(s, cfg.mlp_ratio) for s in cfg.stages)
        self.merges = nn.ModuleList(
            PatchMerge(cfg.stages[i].dim, cfg.stages[i + 1].dim) for i in range(len(cfg.stages) - 1)
        )
        gh, gw = cfg.final_grid
        self.norm = nn.LayerNorm(cfg.stages[-1].dim)
        self.head = nn.Linear(gh * gw * cfg.stages[-1].dim, cfg.latent_dim)

    def forward(self, x: torch.Tensor) -> LatentCode:
        b, c, h, w = x.shape
        eh, ew, ec = self.cfg.image_shape
        if (h, w, c) != (eh, ew, ec):
            raise CodecError(f"expected {ec}x{eh}x{ew} images, got {c}x{h}x{w}")
        p = self.cfg.patch_size
        tokens = (
            x.view(b, c, h // p, p, w // p, p).permute(0, 2, 4, 3, 5, 1).reshape(b, h // p, w // p, p * p * c)
        )
        tokens = self.patch_embed(tokens)
        for i, stage in enumerate(self.stages):
            for block in stage:
                tokens = block(tokens)
            if i < len(self.merges):
                tokens = self.merges[i](tokens)
        tokens = self.norm(tokens)
        values = self.head(tokens.reshape(b, -1))
        return LatentCode(values, self.cfg.latent_shape)


class SwinDecoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        gh, gw = cfg.final_grid
        dim_last = cfg.stages[-1].dim
        self.head = nn.Linear(cfg.latent_dim, gh * gw * dim_last)
        rev = tuple(reversed(cfg.stages))
        self.stages = nn.ModuleList(_build_stage(s, cfg.mlp_ratio) for s in rev)
        self.expands = nn.ModuleList(PatchExpand(rev[i].dim, rev[i + 1].dim) for i in range(len(rev) - 1))
        h, w, c = cfg.image_shape
        p = cfg.patch_size
        self.norm = nn.LayerNorm(cfg.stages[0].dim)
        self.pixel_head = nn.Linear(cfg.stages[0].dim, p * p * c)

    def forward(self, z: LatentCode | torch.Tensor) -> torch.Tensor:
        values = z.as_batch() if isinstance(z, LatentCode) else z
        if values.ndim == 1:
            values = values.unsqueeze(0)
        if values.shape[-1] != self.cfg.latent_dim:
            raise CodecError(f"latent length {values.shape[-1]} != configured {self.cfg.latent_dim}")
        b = values.shape[0]
        gh, gw = self.cfg.final_grid
        tokens = self.head(values).view(b, gh, gw, self.cfg.stages[-1].dim)
        for i, stage in enumerate(self.stages):
            for block in stage:
                tokens = block(tokens)
            if i < len(self.expands):
                tokens = self.expands[i](tokens)
        tokens = self.pixel_head(self.norm(tokens))
        h, w, c = self.cfg.image_shape
        p = self.cfg.patch_size
        img = tokens.view(b, h // p, w // p, p, p, c).permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)
        return torch.sigmoid(img)
