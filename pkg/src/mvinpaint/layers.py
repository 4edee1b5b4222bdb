"""Attention building blocks shared by the denoiser and the flow grouper."""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn


def lora_apply(weight, bias, lora_a, lora_b, alpha: float, x):
    """``x W^T + b + (alpha / r) (x A^T) B^T``; rank 0 disables the adapter."""
    out = F.linear(x, weight, bias)
    r = 0 if lora_a is None else lora_a.shape[0]
    if r == 0 or alpha == 0:
        return out
    return out + (alpha / r) * F.linear(F.linear(x, lora_a), lora_b)


class LoRALinear(nn.Module):
    """Linear layer with an optional low-rank adapter whose B factor starts at zero."""

    def __init__(self, d_in: int, d_out: int, rank: int = 0, alpha: float = 1.0, bias: bool = True):
        super().__init__()
        self.base = nn.Linear(d_in, d_out, bias=bias)
        self.rank = rank
        self.alpha = alpha
        if rank > 0:
            self.lora_A = nn.Parameter(torch.empty(rank, d_in))
            self.lora_B = nn.Parameter(torch.zeros(d_out, rank))
            nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        else:
            self.register_parameter("lora_A", None)
            self.register_parameter("lora_B", None)

    def forward(self, x):
        return lora_apply(self.base.weight, self.base.bias, self.lora_A, self.lora_B, self.alpha, x)


def split_heads(x, heads: int):
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).transpose(-3, -2)


def merge_heads(x):
    *lead, h, n, dh = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * dh)


def attend(q, k, v, heads: int):
    """Multi-head softmax attention normalized over keys."""
    q, k, v = (split_heads(t, heads) for t in (q, k, v))
    return merge_heads(F.scaled_dot_product_attention(q, k, v))


class Attention(nn.Module):
    """Multi-head attention with LoRA-capable projections.

    ``forward(x)`` is plain self-attention. With ``ref`` given, reference
    features are concatenated to the keys and values along the token axis
    while queries still come from ``x`` only.
    """

    def __init__(self, dim: int, heads: int = 4, ctx_dim: Optional[int] = None, lora_rank: int = 0, lora_alpha: float = 1.0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        ctx_dim = ctx_dim or dim
        self.dim, self.heads = dim, heads
        self.to_q = LoRALinear(dim, dim, lora_rank, lora_alpha, bias=False)
        self.to_k = LoRALinear(ctx_dim, dim, lora_rank, lora_alpha, bias=False)
        self.to_v = LoRALinear(ctx_dim, dim, lora_rank, lora_alpha, bias=False)
        self.to_out = LoRALinear(dim, dim, lora_rank, lora_alpha)

    def forward(self, x, ref=None, context=None):
        src = x if context is None else context
        if ref is not None:
            if ref.shape[-1] != x.shape[-1]:
                raise ValueError("reference and target feature dims differ")
            src = torch.cat([src, ref], dim=-2)
        q, k, v = self.to_q(x), self.to_k(src), self.to_v(src)
        return self.to_out(attend(q, k, v, self.heads))


def ref_kv_attention(attn: Attention, target_feats, ref_feats, enabled: bool = True):
    """Self-attention of ``target_feats`` with reference keys/values appended when enabled."""
    if target_feats.shape[-1] != ref_feats.shape[-1]:
        raise ValueError("reference and target feature dims differ")
    return attn(target_feats, ref=ref_feats if enabled else None)


def sinusoidal_embedding(positions, dim: int, max_period: float = 10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = torch.as_tensor(positions, dtype=torch.float64)[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TemporalAttention(nn.Module):
    """Self-attention across the frame axis at every spatial location, with a residual.

    Input and output are shaped ``(B, F, L, d)``. The output projection is zero
    initialized by default, so a fresh block is the identity.
    """

    def __init__(self, dim: int, heads: int = 4, frame_capacity: int = 24, pos_enc: bool = True, zero_init: bool = True):
        super().__init__()
        self.frame_capacity = frame_capacity
        self.pos_enc = pos_enc
        self.norm = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.register_buffer("pe", sinusoidal_embedding(torch.arange(frame_capacity), dim).float(), persistent=False)
        if zero_init:
            nn.init.zeros_(self.attn.to_out.base.weight)
            nn.init.zeros_(self.attn.to_out.base.bias)

    def forward(self, x):
        b, f, l, d = x.shape
        if f > self.frame_capacity:
            raise ValueError(f"{f} frames exceed frame capacity {self.frame_capacity}")
        h = self.norm(x)
        if self.pos_enc:
            h = h + self.pe[:f].to(h.dtype)[None, :, None, :]
        h = h.permute(0, 2, 1, 3).reshape(b * l, f, d)
        out = self.attn(h).reshape(b, l, f, d).permute(0, 2, 1, 3)
        return x + out


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 2):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))

    def forward(self, x):
        return self.net(x)
