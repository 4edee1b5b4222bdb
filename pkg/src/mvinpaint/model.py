"""The multi-view inpainter: denoiser, prompt tokens, flow grouping and sampling."""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .config import RunConfig
from .denoiser import Denoiser, PromptEmbedder, is_adapter_parameter
from .diffusion import (
    blend_unmasked,
    conditioning,
    ddim_sample,
    epsilon_loss,
    make_schedule,
    q_sample,
)
from .flow import FlowGrouper, MotionPayload


class PixelCodec:
    """Identity "latent" space: pixels scaled to [-1, 1].

    With ``channels=4`` a luminance channel is appended, giving the 9-channel
    assembled input of a 4-channel latent space.
    """

    def __init__(self, channels: int = 3):
        if channels not in (3, 4):
            raise ValueError("pixel codec supports 3 or 4 channels")
        self.channels = channels

    def encode(self, frames: np.ndarray) -> torch.Tensor:
        z = torch.as_tensor(np.asarray(frames, np.float32) * 2 - 1)
        if self.channels == 4:
            z = torch.cat([z, z.mean(dim=-1, keepdim=True)], dim=-1)
        return z

    def decode(self, z: torch.Tensor) -> np.ndarray:
        return np.clip((z[..., :3].detach().cpu().numpy() + 1) / 2, 0, 1)


class MVInpainter(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        m = cfg.model
        self.denoiser = Denoiser(m)
        self.prompt = PromptEmbedder(m)
        self.flow = None
        if cfg.flow.mode != "none":
            self.flow = FlowGrouper(
                cfg.flow.mode, cfg.flow.injection, cfg.flow.dim, cfg.flow.slots,
                ctx_dim=m.ctx_dim, temb_dim=self.denoiser.temb_dim, frame_capacity=m.frame_capacity, heads=m.num_heads,
            )
        self.codec = PixelCodec(m.cond_channels)
        self.schedule = make_schedule(cfg.diffusion.schedule, cfg.diffusion.T)

    @property
    def mode(self) -> str:
        return self.cfg.train.mode

    @property
    def uses_flow(self) -> bool:
        return self.flow is not None

    def trainable_parameters(self):
        if self.cfg.model.train_scope == "full":
            return [p for p in self.parameters()]
        return [p for n, p in self.named_parameters() if not n.startswith("denoiser.") or is_adapter_parameter(n)]

    def freeze_for_scope(self) -> None:
        keep = {id(p) for p in self.trainable_parameters()}
        for p in self.parameters():
            p.requires_grad_(id(p) in keep)

    def prompt_tokens(self, caption: Optional[int]):
        if self.cfg.model.prompt_mode == "learned_global_16":
            return self.prompt()
        return self.prompt(0 if caption is None else caption)

    def motion(self, flows, masks) -> Optional[MotionPayload]:
        """Payload from ``flows`` ``([B,] N, H, W, 2)`` and masks ``([B,] N+1, H, W)``."""
        if self.flow is None:
            return None
        if flows is None:
            raise ValueError("this model is conditioned on optical flow; pass flows")
        flows, masks = np.asarray(flows), np.asarray(masks)
        if flows.ndim == 4:
            flows, masks = flows[None], masks[None]
        return self.flow(flows, masks)

    def eps(self, x_in, t, caption=None, payload=None, prompt=None):
        tokens = self.prompt_tokens(caption) if prompt is None else prompt
        return self._eps(x_in, t, tokens, payload)

    def _eps(self, x_in, t, tokens, payload):
        out = self.denoiser(x_in, t, tokens, payload)
        if self.cfg.diffusion.output == "eps":
            return out
        a = self.schedule.abar(t.numpy() if torch.is_tensor(t) else t, like=out)
        if a.dim() == 1:
            a = a.reshape(-1, *([1] * (out.dim() - 1)))
        return (1 - a).sqrt() * x_in[..., : out.shape[-1]] + a.sqrt() * out

    def training_loss(self, frames, masks, flows=None, caption=None, generator=None):
        """Epsilon loss for a batch ``(B, F, H, W, 3)`` with masks ``(B, F, H, W)``."""
        z0 = self.codec.encode(frames)
        if z0.dim() == 4:
            z0, masks = z0[None], np.asarray(masks)[None]
            flows = None if flows is None else np.asarray(flows)[None]
        b = z0.shape[0]
        t = torch.randint(0, self.schedule.T, (b,), generator=generator)
        eps = torch.randn(z0.shape, generator=generator)
        clean, m = conditioning(z0, masks)
        x_in = torch.cat([q_sample(z0, t.numpy(), eps, self.schedule), clean, m], dim=-1)
        payload = self.motion(flows, masks)
        pred = self.eps(x_in, t, caption, payload)
        weight = m if self.cfg.loss.masked_only else None
        return epsilon_loss(pred, eps, weight)

    @torch.no_grad()
    def inpaint(self, frames, masks, flows=None, caption=None, seed: int = 0, steps: Optional[int] = None, eta=None):
        """Sample the masked regions of ``frames`` (F, H, W, 3) and blend with the originals.

        The result keeps the floating dtype of ``frames``; unmasked pixels are copied bitwise.
        """
        frames = np.asarray(frames)
        if not np.issubdtype(frames.dtype, np.floating):
            frames = frames.astype(np.float32)
        masks = np.asarray(masks).astype(np.uint8)
        if masks[0].any():
            raise ValueError("reference mask must be a zero matrix")
        if not masks.any():
            return frames.copy()
        z0 = self.codec.encode(frames)
        clean, m = conditioning(z0, masks)
        payload = self.motion(flows, masks)
        tokens = self.prompt_tokens(caption)
        gen = torch.Generator().manual_seed(int(seed))

        def model(x_in, t):
            return self._eps(x_in, t, tokens, payload)

        was_training = self.training
        self.eval()
        z = ddim_sample(model, clean, m, self.schedule, steps or self.cfg.sample.steps,
                        self.cfg.sample.eta if eta is None else eta, generator=gen, clip_x0=self.cfg.sample.clip_x0)
        self.train(was_training)
        return blend_unmasked(self.codec.decode(z).astype(frames.dtype), frames, masks)

    def save(self, path, meta: Optional[dict] = None) -> None:
        info = {"mode": self.mode}
        info.update(meta or {})
        ckpt.save_tensors(path, self.state_dict(), self.cfg.to_dict(), info)

    @classmethod
    def load(cls, path) -> "MVInpainter":
        tensors, config, meta = ckpt.load_tensors(path)
        model = cls(RunConfig.from_dict(config))
        model.load_state_dict(tensors)
        model.checkpoint_meta = meta
        return model
