"""Flow grouping: masked flow encoding, slot attention and motion injection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import masks as mk
from .layers import TemporalAttention

FLOW_MODES = ("none", "dense", "slot2d", "slot3d")
INJECT_MODES = ("cross_attn_token", "time_emb_add")
FLOW_DILATION = 5

# ablation row labels for each (mode, inject) pair
ABLATION_ROWS = {
    ("none", None): "w/o Flow",
    ("dense", None): "Dense Flow",
    ("slot2d", "time_emb_add"): "Slot2D Flow (time-emb)",
    ("slot2d", "cross_attn_token"): "Slot2D Flow (cross-attn)",
    ("slot3d", "cross_attn_token"): "Slot3D Flow (cross-attn)",
}


class FlowConfigError(ValueError):
    pass


@dataclass
class MotionPayload:
    """Conditioning handed to the denoiser.

    ``kind`` is one of ``cross_attn_token`` (``data``: ``(B, F, d_ctx)``, one
    token per frame), ``time_emb_add`` (``(B, F, d_temb)``) or ``dense``
    (``(B, F, h, w, c)`` extra input channels).
    """

    kind: str
    data: torch.Tensor


def mask_flows(flows: np.ndarray, masks: np.ndarray, radius: int = FLOW_DILATION) -> np.ndarray:
    """Zero every flow vector inside the dilated mask of the frame the flow lives on.

    ``flows[i]`` is defined on frame ``i + 1``, so it is masked with ``masks[i + 1]``.
    """
    flows = np.asarray(flows, np.float32)
    masks = np.asarray(masks)
    if flows.shape[0] != masks.shape[0] - 1 or flows.shape[1:3] != masks.shape[1:3]:
        raise ValueError(f"flow shape {flows.shape} does not align with masks {masks.shape}")
    out = flows.copy()
    for i in range(len(flows)):
        out[i][mk.dilate(masks[i + 1], radius) > 0] = 0.0
    return out


def _groups(c: int) -> int:
    return math.gcd(c, 8)


class FlowEncoder(nn.Module):
    """Three stride-2 conv blocks (stride 8 total) with group normalization."""

    def __init__(self, dim: int = 64, hidden: int = 32):
        super().__init__()
        chans = [2, hidden, hidden, dim]
        layers = []
        for a, b in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(a, b, 3, stride=2, padding=1), nn.GroupNorm(_groups(b), b), nn.SiLU()]
        self.net = nn.Sequential(*layers)
        self.dim = dim

    def forward(self, flows):
        """``(..., H, W, 2)`` pixel flows -> ``(..., H/8, W/8, dim)`` features."""
        lead, (h, w) = flows.shape[:-3], flows.shape[-3:-1]
        x = flows.reshape(-1, h, w, 2).permute(0, 3, 1, 2) / (0.05 * h)
        y = self.net(x).permute(0, 2, 3, 1)
        return y.reshape(*lead, *y.shape[1:])


def encode_flow(encoder: FlowEncoder, flows, masks) -> torch.Tensor:
    """Mask ``flows`` with the 5 px dilated masks and encode them."""
    flows = np.asarray(flows)
    masks = np.asarray(masks)
    if masks.ndim != flows.ndim - 1:
        raise ValueError("masks must have one fewer axis than flows")
    if flows.ndim == 5:
        masked = np.stack([mask_flows(f, m) for f, m in zip(flows, masks)])
    else:
        masked = mask_flows(flows, masks)
    p = next(encoder.parameters())
    return encoder(torch.as_tensor(masked, dtype=p.dtype, device=p.device))


def slot_attention(queries, feats, w_q, w_k, w_v, return_attn: bool = False):
    """Single-pass slot attention; the softmax is taken over the slot axis.

    ``queries`` is ``(K, d)``, ``feats`` is ``(..., L, d)``; returns ``(..., K, d)``.
    Each key distributes a unit of attention mass across the ``K`` slots.
    """
    if feats.shape[-2] == 0:
        raise ValueError("slot attention needs at least one feature")
    q = queries @ w_q
    k = feats @ w_k
    v = feats @ w_v
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    attn = torch.softmax(logits, dim=-2)
    out = attn @ v
    return (out, attn) if return_attn else out


class SlotAttention(nn.Module):
    def __init__(self, dim: int, num_slots: int = 4):
        super().__init__()
        if num_slots < 1:
            raise ValueError("need at least one slot")
        self.queries = nn.Parameter(torch.randn(num_slots, dim) * 0.02)
        self.w_q = nn.Parameter(torch.randn(dim, dim) / math.sqrt(dim))
        self.w_k = nn.Parameter(torch.randn(dim, dim) / math.sqrt(dim))
        self.w_v = nn.Parameter(torch.randn(dim, dim) / math.sqrt(dim))

    def forward(self, feats):
        return slot_attention(self.queries, feats, self.w_q, self.w_k, self.w_v)


class SlotFusion(nn.Module):
    """Concatenate the K slots and project them to one d-dim embedding."""

    def __init__(self, dim: int, num_slots: int = 4):
        super().__init__()
        self.fc = nn.Linear(num_slots * dim, dim)

    def forward(self, slots):
        return self.fc(slots.flatten(-2))


def fuse_slots(fusion: SlotFusion, slots_out):
    return fusion(slots_out)


class FlowGrouper(nn.Module):
    """Flow encoder + slot grouping + projection into a denoiser payload."""

    def __init__(self, mode: str = "slot3d", inject: str = "cross_attn_token", dim: int = 64, num_slots: int = 4,
                 ctx_dim: int = 64, temb_dim: int = 256, frame_capacity: int = 24, heads: int = 4, pos_enc: bool = True):
        super().__init__()
        if mode not in FLOW_MODES or mode == "none":
            raise FlowConfigError(f"flow grouper needs a flow mode, got {mode!r}")
        if mode != "dense" and inject not in INJECT_MODES:
            raise FlowConfigError(f"unknown injection {inject!r}")
        self.mode, self.inject, self.dim = mode, inject, dim
        self.encoder = FlowEncoder(dim)
        if mode in ("slot2d", "slot3d"):
            self.slots = SlotAttention(dim, num_slots)
            self.fusion = SlotFusion(dim, num_slots)
            if mode == "slot3d":
                self.temporal = TemporalAttention(dim, heads, frame_capacity, pos_enc=pos_enc, zero_init=False)
            out_dim = ctx_dim if inject == "cross_attn_token" else temb_dim
            # no bias: a zero embedding must leave the timestep embedding untouched
            self.project = nn.Linear(dim, out_dim, bias=False)

    def group(self, feats):
        """``(B, N, h, w, d)`` features -> ``(B, N, d)`` (slot2d) or ``(B, 1, d)`` (slot3d)."""
        b, n, h, w, d = feats.shape
        tokens = feats.reshape(b, n, h * w, d)
        return group_flow(self, tokens)

    def forward(self, flows, masks) -> MotionPayload:
        """``flows``: ``(B, N, H, W, 2)`` numpy, ``masks``: ``(B, N+1, H, W)``."""
        feats = encode_flow(self.encoder, flows, masks)
        b, n = feats.shape[:2]
        if self.mode == "dense":
            h, w = np.asarray(masks).shape[-2:]
            maps = feats.permute(0, 1, 4, 2, 3).reshape(b * n, self.dim, *feats.shape[2:4])
            maps = F.interpolate(maps, size=(h, w), mode="nearest").reshape(b, n, self.dim, h, w)
            maps = torch.cat([torch.zeros_like(maps[:, :1]), maps], dim=1)
            return MotionPayload("dense", maps.permute(0, 1, 3, 4, 2))
        emb = self.group(feats)
        return inject_motion(self, emb, n + 1)


def group_flow(grouper: FlowGrouper, tokens):
    """Slot grouping of ``(B, N, L, d)`` flow tokens.

    slot2d pools each frame separately; slot3d mixes frames with temporal
    attention (skipped for a single frame) and pools all ``N * L`` tokens into one
    embedding shared by every view.
    """
    if grouper.mode == "slot2d":
        return grouper.fusion(grouper.slots(tokens))
    if grouper.mode == "slot3d":
        b, n, l, d = tokens.shape
        if n > 1:
            tokens = grouper.temporal(tokens)
        return grouper.fusion(grouper.slots(tokens.reshape(b, 1, n * l, d)))
    raise FlowConfigError(f"unknown grouping mode {grouper.mode!r}")


def inject_motion(grouper: FlowGrouper, embedding, num_frames: int) -> MotionPayload:
    """Project a motion embedding into a per-frame payload for ``num_frames`` frames.

    Per-frame embeddings (slot2d) cover frames 1..N; the reference frame gets a
    zero embedding. A shared embedding (slot3d) is broadcast to every frame.
    """
    if grouper.mode == "dense":
        raise FlowConfigError("dense flow bypasses the slot pipeline")
    proj = grouper.project(embedding)
    b, n, c = proj.shape
    if n == 1:
        proj = proj.expand(b, num_frames, c)
    elif n == num_frames - 1:
        proj = torch.cat([torch.zeros_like(proj[:, :1]), proj], dim=1)
    else:
        raise ValueError(f"{n} embeddings for {num_frames} frames")
    return MotionPayload(grouper.inject, proj)


def ablation_row(mode: str, inject: Optional[str]) -> str:
    key = (mode, inject if mode in ("slot2d", "slot3d") else None)
    if key not in ABLATION_ROWS:
        raise FlowConfigError(f"no ablation row for {key}")
    return ABLATION_ROWS[key]
