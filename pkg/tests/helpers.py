import torch

from mvinpaint.config import RunConfig
from mvinpaint.model import MVInpainter

TINY = {"model": {"base_channels": 16, "depth": 2, "ctx_dim": 16, "attn_levels": [1]}, "sample": {"steps": 2}}


def tiny_config(**sections) -> RunConfig:
    cfg = RunConfig().update(TINY)
    return cfg.update(sections) if sections else cfg


def tiny_model(**sections) -> MVInpainter:
    torch.manual_seed(0)
    return MVInpainter(tiny_config(**sections))
