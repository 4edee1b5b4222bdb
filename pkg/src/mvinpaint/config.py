"""Run configuration, loadable from nested or dotted-key JSON."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .denoiser import ConfigError, DenoiserConfig
from .flow import FLOW_MODES, INJECT_MODES
from .masks import MODES


@dataclass
class FlowConfig:
    mode: str = "none"
    inject: Optional[str] = None  # defaults to cross_attn_token for slot modes
    slots: int = 4
    dim: int = 64

    def validate(self) -> None:
        if self.mode not in FLOW_MODES:
            raise ConfigError(f"unknown flow mode {self.mode!r}")
        if self.mode == "dense" and self.inject is not None:
            raise ConfigError("dense flow cannot be combined with slot injection")
        if self.inject is not None and self.inject not in INJECT_MODES:
            raise ConfigError(f"unknown injection {self.inject!r}")
        if self.slots < 1:
            raise ConfigError("flow.slots must be >= 1")

    @property
    def injection(self) -> Optional[str]:
        if self.mode in ("slot2d", "slot3d"):
            return self.inject or "cross_attn_token"
        return None


@dataclass
class DiffusionConfig:
    T: int = 1000
    schedule: str = "linear"
    # "eps": the network output is the noise estimate. "v": the output F is mapped to
    # sqrt(1 - abar) x_t + sqrt(abar) F, which keeps x0 estimates bounded at high noise.
    output: str = "eps"

    def validate(self) -> None:
        if self.output not in ("eps", "v"):
            raise ConfigError(f"unknown diffusion output {self.output!r}")


@dataclass
class SampleConfig:
    steps: int = 50
    eta: float = 0.0
    clip_x0: Optional[float] = 1.0  # clamp each x0 estimate to the codec range; None disables


@dataclass
class LossConfig:
    masked_only: bool = False


@dataclass
class TrainConfig:
    phase1_frames: int = 12
    phase2_frame_range: tuple[int, int] = (8, 24)
    batch_size: int = 1
    lr: float = 1e-4
    lr_schedule: str = "constant"  # or "cosine": decay to zero over all steps
    steps_phase1: int = 1000
    steps_phase2: Optional[int] = None  # None: steps_phase1 // 10
    mode: str = "object_centric"
    frame_interval_range: tuple[int, int] = (1, 2)
    seed: int = 0
    random_mask_ratio: float = 0.15
    log_every: int = 50

    @property
    def phase2_steps(self) -> int:
        return self.steps_phase1 // 10 if self.steps_phase2 is None else self.steps_phase2

    def validate(self, frame_capacity: int) -> None:
        lo, hi = self.phase2_frame_range
        if not 2 <= lo <= hi <= frame_capacity:
            raise ConfigError(f"phase2_frame_range {self.phase2_frame_range} outside [2, {frame_capacity}]")
        if not 2 <= self.phase1_frames <= frame_capacity:
            raise ConfigError("phase1_frames outside [2, frame_capacity]")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        a, b = self.frame_interval_range
        if not 1 <= a <= b:
            raise ConfigError("frame_interval_range must satisfy 1 <= lo <= hi")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class RunConfig:
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.model.validate()
        self.flow.validate()
        self.diffusion.validate()
        self.train.validate(self.model.frame_capacity)
        want_extra = self.flow.dim if self.flow.mode == "dense" else 0
        if self.model.extra_in_channels != want_extra:
            raise ConfigError("model.extra_in_channels must equal flow.dim in dense mode and 0 otherwise")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        cfg.update(d)
        return cfg

    def update(self, d: dict) -> "RunConfig":
        """Apply nested (``{"flow": {"mode": ...}}``) or dotted (``{"flow.mode": ...}``) keys."""
        for key, value in _flatten(d).items():
            section, _, name = key.partition(".")
            if not name or not hasattr(self, section):
                raise ConfigError(f"unknown config key {key!r}")
            sub = getattr(self, section)
            if name not in {f.name for f in dataclasses.fields(sub)}:
                raise ConfigError(f"unknown config key {key!r}")
            if isinstance(value, list):
                value = tuple(value)
            setattr(sub, name, value)
        if self.flow.mode == "dense":
            self.model.extra_in_channels = self.flow.dim
        return self

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out
