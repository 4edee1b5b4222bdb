"""Multi-frame epsilon-prediction U-Net.

Frames are processed as a batch by convolutional stages. Transformer blocks at
the coarse levels add Ref-KV self-attention (targets attend to the reference
frame's keys and values), cross-attention to prompt tokens, and a temporal
motion block across frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .flow import MotionPayload
from .layers import Attention, FeedForward, TemporalAttention, sinusoidal_embedding

PROMPT_MODES = ("caption_table", "learned_global_16")
TRAIN_SCOPES = ("adapters_only", "full")
GLOBAL_PROMPT_TOKENS = 16


class ConfigError(ValueError):
    pass


@dataclass
class DenoiserConfig:
    base_channels: int = 64
    depth: int = 3
    attn_levels: Optional[tuple[int, ...]] = None  # None: the two coarsest levels
    num_heads: int = 4
    frame_capacity: int = 24
    cond_channels: int = 3
    prompt_mode: str = "caption_table"
    num_categories: int = 4
    caption_tokens: int = 4
    ctx_dim: int = 64
    lora_rank: int = 4
    lora_alpha: float = 4.0
    train_scope: str = "full"
    ref_kv: bool = True
    temporal: bool = True
    extra_in_channels: int = 0  # dense flow features

    def validate(self) -> None:
        if self.frame_capacity < 24:
            raise ConfigError("frame_capacity must be >= 24")
        if self.lora_rank < 0:
            raise ConfigError("lora_rank must be >= 0")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(f"unknown prompt mode {self.prompt_mode!r}")
        if self.train_scope not in TRAIN_SCOPES:
            raise ConfigError(f"unknown train scope {self.train_scope!r}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_channels % self.num_heads or self.ctx_dim % self.num_heads:
            raise ConfigError("channel counts must be divisible by num_heads")

    @property
    def in_channels(self) -> int:
        return 2 * self.cond_channels + 1 + self.extra_in_channels

    @property
    def levels_with_attention(self) -> tuple[int, ...]:
        if self.attn_levels is not None:
            return tuple(self.attn_levels)
        return tuple(range(max(self.depth - 2, 0), self.depth))

    def channels(self, level: int) -> int:
        return self.base_channels * min(2**level, 4)


def _groups(c: int) -> int:
    return math.gcd(c, 8)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(temb_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TransformerBlock(nn.Module):
    """Ref-KV self-attention, prompt cross-attention, feed-forward, temporal motion block."""

    def __init__(self, channels: int, cfg: DenoiserConfig):
        super().__init__()
        r, a = cfg.lora_rank, cfg.lora_alpha
        self.ref_kv = cfg.ref_kv
        self.norm_in = nn.GroupNorm(_groups(channels), channels)
        self.proj_in = nn.Linear(channels, channels)
        self.norm1 = nn.LayerNorm(channels)
        self.attn1 = Attention(channels, cfg.num_heads, lora_rank=r, lora_alpha=a)
        self.norm2 = nn.LayerNorm(channels)
        self.attn2 = Attention(channels, cfg.num_heads, ctx_dim=cfg.ctx_dim, lora_rank=r, lora_alpha=a)
        self.norm3 = nn.LayerNorm(channels)
        self.ff = FeedForward(channels)
        self.motion = TemporalAttention(channels, cfg.num_heads, cfg.frame_capacity) if cfg.temporal else None
        self.proj_out = nn.Linear(channels, channels)

    def self_attention(self, h):
        """``(B, F, L, d)``; frame 0 attends to itself, targets also to frame 0."""
        ref = h[:, :1]
        out0 = self.attn1(ref)
        if h.shape[1] == 1:
            return out0
        tgt = h[:, 1:]
        if self.ref_kv:
            out = self.attn1(tgt, ref=ref.expand_as(tgt))
        else:
            out = self.attn1(tgt)
        return torch.cat([out0, out], dim=1)

    def forward(self, x, context, frames: int):
        bf, c, hh, ww = x.shape
        b = bf // frames
        h = self.norm_in(x).permute(0, 2, 3, 1).reshape(b, frames, hh * ww, c)
        h = self.proj_in(h)
        h = h + self.self_attention(self.norm1(h))
        ctx = context.reshape(b, frames, *context.shape[1:])
        h = h + self.attn2(self.norm2(h), context=ctx)
        h = h + self.ff(self.norm3(h))
        if self.motion is not None:
            h = self.motion(h)
        h = self.proj_out(h).reshape(bf, hh, ww, c).permute(0, 3, 1, 2)
        return x + h


class PromptEmbedder(nn.Module):
    """Learned prompt tokens: a per-category caption table or 16 shared global tokens."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.mode = cfg.prompt_mode
        if self.mode == "caption_table":
            self.table = nn.Parameter(torch.randn(cfg.num_categories, cfg.caption_tokens, cfg.ctx_dim) * 0.02)
        else:
            self.tokens = nn.Parameter(torch.randn(GLOBAL_PROMPT_TOKENS, cfg.ctx_dim) * 0.02)

    def forward(self, caption_id: Optional[int] = None):
        if self.mode == "learned_global_16":
            return self.tokens
        if caption_id is None or not 0 <= int(caption_id) < self.table.shape[0]:
            raise ConfigError(f"unknown caption id {caption_id!r}")
        return self.table[int(caption_id)]


def prompt_embed(embedder: PromptEmbedder, caption_id: Optional[int] = None):
    return embedder(caption_id)


def context_tokens(prompt, motion: Optional[MotionPayload], batch: int, frames: int):
    """Per-frame cross-attention context, ``(B * F, T [+1], d_ctx)``."""
    if prompt.dim() == 2:
        prompt = prompt[None].expand(batch, *prompt.shape)
    ctx = prompt[:, None].expand(batch, frames, *prompt.shape[1:])
    if motion is not None and motion.kind == "cross_attn_token":
        ctx = torch.cat([ctx, motion.data[:, :, None, :].to(ctx.dtype)], dim=2)
    return ctx.reshape(batch * frames, *ctx.shape[2:])


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c0 = cfg.base_channels
        self.temb_dim = 4 * c0
        self.time_mlp = nn.Sequential(nn.Linear(c0, self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim))
        self.conv_in = nn.Conv2d(cfg.in_channels, c0, 3, padding=1)
        attn = set(cfg.levels_with_attention)

        self.down_res, self.down_attn, self.downsample = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        prev = c0
        for i in range(cfg.depth):
            c = cfg.channels(i)
            self.down_res.append(ResBlock(prev, c, self.temb_dim))
            self.down_attn.append(TransformerBlock(c, cfg) if i in attn else nn.Identity())
            self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1) if i < cfg.depth - 1 else nn.Identity())
            prev = c
        cm = cfg.channels(cfg.depth - 1)
        self.mid1 = ResBlock(cm, cm, self.temb_dim)
        self.mid_attn = TransformerBlock(cm, cfg) if cfg.depth - 1 in attn else nn.Identity()
        self.mid2 = ResBlock(cm, cm, self.temb_dim)

        self.up_res, self.up_attn, self.upsample = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        prev = cm
        for i in reversed(range(cfg.depth)):
            c = cfg.channels(i)
            self.up_res.append(ResBlock(prev + c, c, self.temb_dim))
            self.up_attn.append(TransformerBlock(c, cfg) if i in attn else nn.Identity())
            self.upsample.append(nn.Conv2d(c, cfg.channels(i - 1), 3, padding=1) if i > 0 else nn.Identity())
            prev = cfg.channels(i - 1) if i > 0 else c
        self.norm_out = nn.GroupNorm(_groups(c0), c0)
        self.conv_out = nn.Conv2d(c0, cfg.cond_channels, 3, padding=1)

    def base_parameters(self):
        """Parameters frozen when training adapters only."""
        for name, p in self.named_parameters():
            if not is_adapter_parameter(name):
                yield p

    def _block(self, block, h, ctx, frames):
        if isinstance(block, TransformerBlock):
            return block(h, ctx, frames)
        return h

    def forward(self, x, t, prompt, motion: Optional[MotionPayload] = None):
        """Predict noise for ``x`` of shape ``([B,] F, h, w, 2 C_z + 1)`` at timestep ``t``."""
        squeeze = x.dim() == 4
        if squeeze:
            x = x[None]
        b, frames, hh, ww, cin = x.shape
        cfg = self.cfg
        if frames > cfg.frame_capacity:
            raise ConfigError(f"{frames} frames exceed frame capacity {cfg.frame_capacity}")
        if motion is not None and motion.kind == "dense":
            x = torch.cat([x, motion.data.to(x.dtype)], dim=-1)
            cin = x.shape[-1]
        if cin != cfg.in_channels:
            raise ConfigError(f"expected {cfg.in_channels} input channels, got {cin}")
        if hh % 2 ** (cfg.depth - 1) or ww % 2 ** (cfg.depth - 1):
            raise ConfigError("spatial size must be divisible by 2^(depth-1)")

        t = torch.as_tensor(t, device=x.device).reshape(-1).expand(b)
        temb = self.time_mlp(sinusoidal_embedding(t, cfg.base_channels).to(x.dtype))
        temb = temb[:, None].expand(b, frames, self.temb_dim)
        if motion is not None and motion.kind == "time_emb_add":
            temb = temb + motion.data.to(x.dtype)
        temb = temb.reshape(b * frames, self.temb_dim)
        ctx = context_tokens(prompt.to(x.dtype), motion, b, frames)

        h = self.conv_in(x.reshape(b * frames, hh, ww, cin).permute(0, 3, 1, 2))
        skips = []
        for res, attn, down in zip(self.down_res, self.down_attn, self.downsample):
            h = self._block(attn, res(h, temb), ctx, frames)
            skips.append(h)
            h = down(h)
        h = self.mid2(self._block(self.mid_attn, self.mid1(h, temb), ctx, frames), temb)
        for res, attn, up in zip(self.up_res, self.up_attn, self.upsample):
            h = self._block(attn, res(torch.cat([h, skips.pop()], dim=1), temb), ctx, frames)
            if not isinstance(up, nn.Identity):
                h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
        out = self.conv_out(F.silu(self.norm_out(h)))
        out = out.permute(0, 2, 3, 1).reshape(b, frames, hh, ww, cfg.cond_channels)
        return out[0] if squeeze else out


def is_adapter_parameter(name: str) -> bool:
    """LoRA factors and temporal motion blocks are the adapter parameters."""
    return "lora_" in name or ".motion." in name
