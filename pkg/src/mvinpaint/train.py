"""Two-phase training: fixed-length sequences, then dynamic frame counts."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .bundle_io import load_dataset
from .config import RunConfig
from .denoiser import ConfigError
from .masks import sample_training_masks
from .model import MVInpainter
from .scene import SceneBundle

log = logging.getLogger(__name__)


@dataclass
class Batch:
    frames: np.ndarray  # (B, F, H, W, 3)
    masks: np.ndarray  # (B, F, H, W)
    flows: np.ndarray  # (B, F-1, H, W, 2)
    caption: int
    scene_ids: list[int] = field(default_factory=list)
    phase: int = 1


def category_of(bundle: SceneBundle) -> int:
    obj = bundle.spec.object_spec
    return -1 if obj is None else int(obj.category)


class SequenceSampler:
    """Category-balanced scene order, random frame counts and frame intervals.

    Every epoch draws the same number of scenes from each category (the size of
    the smallest category).
    """

    def __init__(self, bundles: Sequence[SceneBundle], cfg: RunConfig, rng: np.random.Generator,
                 fixed_masks: Optional[Sequence[np.ndarray]] = None):
        if not bundles:
            raise ConfigError("empty dataset")
        self.bundles = list(bundles)
        self.cfg = cfg
        self.rng = rng
        self.fixed_masks = fixed_masks
        by_cat = defaultdict(list)
        for i, b in enumerate(self.bundles):
            by_cat[category_of(b)].append(i)
        self.by_cat = dict(sorted(by_cat.items()))
        self._queue: list[int] = []

    def _epoch(self) -> list[int]:
        per_cat = min(len(v) for v in self.by_cat.values())
        order = []
        for ids in self.by_cat.values():
            order += list(self.rng.choice(ids, per_cat, replace=False))
        self.rng.shuffle(order)
        return [int(i) for i in order]

    def next_scene(self) -> int:
        if not self._queue:
            self._queue = self._epoch()
        return self._queue.pop()

    def frame_count(self, phase: int) -> int:
        tc = self.cfg.train
        if phase == 1:
            return tc.phase1_frames
        lo, hi = tc.phase2_frame_range
        return int(self.rng.integers(lo, hi + 1))

    def indices(self, n_available: int, frames: int) -> list[int]:
        lo, hi = self.cfg.train.frame_interval_range
        max_stride = max(1, (n_available - 1) // max(frames - 1, 1))
        stride = int(self.rng.integers(lo, min(hi, max_stride) + 1)) if max_stride >= lo else 1
        span = (frames - 1) * stride + 1
        start = int(self.rng.integers(0, n_available - span + 1))
        return list(range(start, start + span, stride))

    def sample(self, phase: int) -> Batch:
        tc = self.cfg.train
        frames = self.frame_count(phase)
        out_f, out_m, out_fl, ids = [], [], [], []
        caption = 0
        for _ in range(tc.batch_size):
            sid = self.next_scene()
            bundle = self.bundles[sid]
            if self.fixed_masks is not None:
                sub = bundle if frames == bundle.num_frames else bundle.subsequence(range(frames))
                masks = np.asarray(self.fixed_masks[sid])[:frames]
            else:
                sub = bundle.subsequence(self.indices(bundle.num_frames, frames))
                masks = sample_training_masks(sub, tc.mode, self.rng, tc.random_mask_ratio).masks
            out_f.append(sub.frames)
            out_m.append(masks)
            out_fl.append(sub.flows)
            ids.append(sid)
            caption = max(category_of(bundle), 0)
        return Batch(np.stack(out_f).astype(np.float32), np.stack(out_m), np.stack(out_fl).astype(np.float32),
                     caption, ids, phase)

    def batches(self) -> Iterator[Batch]:
        tc = self.cfg.train
        for _ in range(tc.steps_phase1):
            yield self.sample(1)
        for _ in range(tc.phase2_steps):
            yield self.sample(2)


def check_dataset(bundles: Sequence[SceneBundle], cfg: RunConfig) -> None:
    if not bundles:
        raise ConfigError("empty dataset")
    tc = cfg.train
    cfg.validate()
    need = tc.phase1_frames if tc.steps_phase1 else 0
    if tc.phase2_steps:
        need = max(need, tc.phase2_frame_range[1])
    short = [i for i, b in enumerate(bundles) if b.num_frames < need]
    if short:
        raise ConfigError(f"scenes {short} have fewer than the {need} frames training needs")
    if tc.mode == "object_centric" and not all(b.has_object for b in bundles):
        raise ConfigError("object-centric training needs an object in every scene")


@dataclass
class TrainResult:
    model: MVInpainter
    losses: list[float]

    def smoothed_loss(self, window: int = 100) -> float:
        tail = self.losses[-window:]
        return float(np.mean(tail)) if tail else float("nan")


def train_model(bundles: Sequence[SceneBundle], cfg: RunConfig, model: Optional[MVInpainter] = None,
                fixed_masks=None, progress: bool = False) -> TrainResult:
    """Train on in-memory bundles; returns the model and per-step losses."""
    check_dataset(bundles, cfg)
    tc = cfg.train
    torch.manual_seed(tc.seed)
    rng = np.random.default_rng(tc.seed)
    gen = torch.Generator().manual_seed(tc.seed)
    model = model or MVInpainter(cfg)
    model.freeze_for_scope()
    opt = torch.optim.AdamW([p for p in model.parameters() if p.requires_grad], lr=tc.lr, weight_decay=0.0)
    sampler = SequenceSampler(bundles, cfg, rng, fixed_masks)
    total = tc.steps_phase1 + tc.phase2_steps
    sched = None
    if tc.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(total, 1))
    losses = []
    model.train()
    for step, batch in enumerate(sampler.batches()):
        loss = model.training_loss(batch.frames, batch.masks, batch.flows if model.uses_flow else None,
                                   batch.caption, gen)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        if sched is not None:
            sched.step()
        losses.append(loss.item())
        if tc.log_every and (step + 1) % tc.log_every == 0:
            msg = f"step {step + 1} phase {batch.phase} frames {batch.frames.shape[1]} loss {np.mean(losses[-tc.log_every:]):.4f}"
            log.info(msg)
            if progress:
                print(msg, flush=True)
    model.eval()
    return TrainResult(model, losses)


def train(cfg: RunConfig, data_root, out_path, progress: bool = False) -> Path:
    """Train on every scene bundle under ``data_root`` and write a checkpoint."""
    bundles = load_dataset(data_root)
    result = train_model(bundles, cfg, progress=progress)
    out_path = Path(out_path)
    result.model.save(out_path, {"steps": len(result.losses), "final_loss": result.smoothed_loss()})
    out_path.with_suffix(".losses.json").write_text(json.dumps(result.losses))
    return out_path
