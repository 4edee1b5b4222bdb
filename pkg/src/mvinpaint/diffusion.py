"""Noise schedules, inpainting input assembly, epsilon loss and DDIM sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch


class DiffusionError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alphas_cumprod: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def abar(self, t, like: Optional[torch.Tensor] = None):
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.T):
            raise DiffusionError(f"timestep {t} outside [0, {self.T})")
        a = self.alphas_cumprod[t]
        if like is not None:
            return torch.as_tensor(a, dtype=like.dtype, device=like.device)
        return a


def make_schedule(kind: str = "linear", T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 2:
        raise DiffusionError("T must be >= 2")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], 0, 0.999)
    else:
        raise DiffusionError(f"unknown schedule {kind!r}")
    return NoiseSchedule(betas, np.cumprod(1 - betas))


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``."""
    if eps.shape != x0.shape:
        raise DiffusionError("eps must match x0")
    a = sched.abar(t, like=x0)
    if a.dim() == 1:
        a = a.reshape(-1, *([1] * (x0.dim() - 1)))
    return a.sqrt() * x0 + (1 - a).sqrt() * eps


def downsample_masks(masks, size: tuple[int, int]):
    """Nearest-neighbour resize of ``(..., H, W)`` binary masks to ``size``."""
    masks = torch.as_tensor(np.asarray(masks), dtype=torch.float32)
    h, w = masks.shape[-2:]
    if (h, w) == tuple(size):
        return masks
    rows = (torch.arange(size[0]) * h) // size[0]
    cols = (torch.arange(size[1]) * w) // size[1]
    return masks[..., rows[:, None], cols[None, :]]


@dataclass
class AssembledInput:
    x: torch.Tensor  # (..., F, h, w, 2 C + 1)
    cond_channels: int

    @property
    def noised(self):
        return self.x[..., : self.cond_channels]

    @property
    def clean(self):
        return self.x[..., self.cond_channels : 2 * self.cond_channels]

    @property
    def mask(self):
        return self.x[..., 2 * self.cond_channels :]


def conditioning(z0, masks):
    """Clean masked latents and downsampled masks, ``(z0 (1 - M), M)``."""
    m = downsample_masks(masks, tuple(z0.shape[-3:-1])).to(z0)
    if m.shape != z0.shape[:-1]:
        raise DiffusionError(f"mask shape {tuple(m.shape)} does not match latents {tuple(z0.shape)}")
    if torch.any(m[..., 0, :, :] != 0):
        raise DiffusionError("reference mask must be a zero matrix")
    m = m[..., None]
    return z0 * (1 - m), m


def assemble_input(z0, masks, t, eps, sched: NoiseSchedule) -> AssembledInput:
    """``[z_t ; z0 (1 - M) ; M]`` along channels."""
    clean, m = conditioning(z0, masks)
    zt = q_sample(z0, t, eps, sched)
    return AssembledInput(torch.cat([zt, clean, m], dim=-1), z0.shape[-1])


def epsilon_loss(pred, eps, weight=None):
    """Mean squared error; ``weight`` (broadcastable) restricts the average."""
    if pred.shape != eps.shape:
        raise DiffusionError(f"shape mismatch {tuple(pred.shape)} vs {tuple(eps.shape)}")
    sq = (pred - eps) ** 2
    if weight is None:
        return sq.mean()
    w = torch.broadcast_to(weight.to(sq), sq.shape)
    return (sq * w).sum() / w.sum().clamp_min(1.0)


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    if steps < 1 or steps > T:
        raise DiffusionError(f"steps must lie in [1, {T}], got {steps}")
    return np.unique(np.round(np.linspace(T - 1, 0, steps)).astype(int))[::-1]


@torch.no_grad()
def ddim_sample(
    model: Callable,
    clean,
    mask,
    sched: NoiseSchedule,
    steps: int = 50,
    eta: float = 0.0,
    generator: Optional[torch.Generator] = None,
    x_T=None,
    check_conditioning: bool = True,
    clip_x0: Optional[float] = None,
):
    """DDIM from pure noise with fixed conditioning channels.

    ``model(x_in, t)`` returns predicted noise for the assembled input
    ``[x_t ; clean ; mask]``. Returns the final ``x0`` estimate.
    With ``clip_x0`` each step's ``x0`` estimate is clamped to ``[-clip_x0, clip_x0]``
    and the noise re-derived from it; the raw recursion is unchanged for estimates
    already inside that range.
    """
    if eta < 0:
        raise DiffusionError("eta must be >= 0")
    ts = ddim_timesteps(sched.T, steps)
    x = torch.randn(clean.shape, generator=generator, dtype=clean.dtype) if x_T is None else x_T.clone()
    cond = torch.cat([clean, mask], dim=-1)
    cond_ref = cond.clone()
    x0 = x
    for i, t in enumerate(ts):
        a_t = sched.abar(t, like=x)
        a_prev = sched.abar(ts[i + 1], like=x) if i + 1 < len(ts) else torch.ones((), dtype=x.dtype)
        x_in = torch.cat([x, cond], dim=-1)
        eps = model(x_in, int(t))
        if check_conditioning and not torch.equal(x_in[..., x.shape[-1] :], cond_ref):
            raise DiffusionError("conditioning channels changed during sampling")
        x0 = (x - (1 - a_t).sqrt() * eps) / a_t.sqrt()
        if clip_x0 is not None:
            x0 = x0.clamp(-clip_x0, clip_x0)
            eps = (x - a_t.sqrt() * x0) / (1 - a_t).sqrt()
        sigma = eta * ((1 - a_prev) / (1 - a_t) * (1 - a_t / a_prev)).clamp_min(0).sqrt()
        dir_xt = (1 - a_prev - sigma**2).clamp_min(0).sqrt() * eps
        x = a_prev.sqrt() * x0 + dir_xt
        if eta > 0 and i + 1 < len(ts):
            x = x + sigma * torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return x0


def blend_unmasked(generated, original, masks):
    """``M * generated + (1 - M) * original``, selecting per pixel."""
    if generated.shape != original.shape:
        raise DiffusionError("generated and original shapes differ")
    m = np.asarray(masks).astype(bool)
    if generated.ndim == m.ndim + 1:
        m = m[..., None]
    return np.where(m, generated, original)
