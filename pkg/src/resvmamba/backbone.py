"""Hierarchical VMamba backbone, the global-residual variant, and the classifier head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import LayerNorm, Linear, Module
from .vss import VssBlock

PLAIN = "plain"
GLOBAL_RESIDUAL = "global_residual"
VARIANTS = (PLAIN, GLOBAL_RESIDUAL)
PATCH = 4
RESIDUAL_POOL = 8


@dataclass
class ModelConfig:
    stage_depths: tuple = (1, 1, 2, 1)
    stage_dims: tuple = (16, 32, 64, 128)
    state_size: int = 16
    expansion: int = 2
    num_classes: int = 241
    variant: str = PLAIN
    input_size: tuple = (32, 32)
    kernel_size: int = 3
    dt_rank: int | None = None

    def __post_init__(self):
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.stage_dims = tuple(int(d) for d in self.stage_dims)
        self.input_size = tuple(int(s) for s in self.input_size)
        if len(self.stage_depths) != 4 or len(self.stage_dims) != 4:
            raise ValueError("need exactly four stage depths and four stage dims")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        H, W = self.input_size
        if H % 32 or W % 32:
            raise ValueError(f"input size {H}x{W} must be divisible by 32")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_depths"] = list(self.stage_depths)
        d["stage_dims"] = list(self.stage_dims)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


PRESETS = {
    # VMamba-S as used for the full-scale runs
    "small": dict(stage_depths=(2, 2, 27, 2), stage_dims=(96, 192, 384, 768), state_size=16, input_size=(224, 224)),
    # desk-scale
    "nano": dict(stage_depths=(1, 1, 2, 1), stage_dims=(16, 32, 64, 128), state_size=16),
    # gradient-check scale
    "micro": dict(stage_depths=(1, 1, 1, 1), stage_dims=(4, 8, 16, 32), state_size=2),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return ModelConfig(**kw)


class Stem(Module):
    """4x4 patch embedding followed by a channel layer norm."""

    def __init__(self, dim: int, rng: np.random.Generator, in_chans: int = 3):
        self.in_chans = in_chans
        self.proj = Linear(in_chans * PATCH * PATCH, dim, rng)
        self.norm = LayerNorm(dim)


class PatchMerging(Module):
    def __init__(self, dim: int, out_dim: int, rng: np.random.Generator):
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, out_dim, rng, bias=False)


class GlobalResidual(Module):
    """Pool the stem map by 8 and project C1 -> C4; the projection starts at zero."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, zero_init: bool = True):
        self.proj = Linear(in_dim, out_dim, rng, zero=zero_init)


class VMamba(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, in_chans: int = 3):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.stem = Stem(c.stage_dims[0], rng, in_chans)
        self.stages = []
        self.merges = []
        for i, (depth, dim) in enumerate(zip(c.stage_depths, c.stage_dims)):
            blocks = [
                VssBlock(dim, rng, d_state=c.state_size, expansion=c.expansion, kernel_size=c.kernel_size, dt_rank=c.dt_rank)
                for _ in range(depth)
            ]
            self.stages.append(_Stage(blocks))
            if i < 3:
                self.merges.append(PatchMerging(dim, c.stage_dims[i + 1], rng))
        self.norm = LayerNorm(c.stage_dims[3])
        self.head = Linear(c.stage_dims[3], c.num_classes, rng)
        # created last so plain and residual models share backbone weights for a seed
        self.global_residual = (
            GlobalResidual(c.stage_dims[0], c.stage_dims[3], rng) if c.variant == GLOBAL_RESIDUAL else None
        )

    def __call__(self, img: Tensor, chunk: int | None = None) -> Tensor:
        if self.global_residual is not None:
            return res_vmamba_forward(img, self, self.global_residual, chunk=chunk)
        return vmamba_forward(img, self, chunk=chunk)


class _Stage(Module):
    def __init__(self, blocks: list):
        self.blocks = blocks


def stem_embed(img: Tensor, stem: Stem) -> Tensor:
    """(B, 3, H, W) -> (B, C1, H/4, W/4)."""
    if img.ndim != 4 or img.shape[1] != stem.in_chans:
        raise ShapeError(f"stem expects (B, {stem.in_chans}, H, W), got {img.shape}")
    B, C, H, W = img.shape
    if H % PATCH or W % PATCH:
        raise ShapeError(f"image extents {H}x{W} not divisible by patch size {PATCH}")
    h, w = H // PATCH, W // PATCH
    patches = img.reshape(B, C, h, PATCH, w, PATCH).transpose(0, 2, 4, 1, 3, 5).reshape(B, h, w, C * PATCH * PATCH)
    out = stem.norm(stem.proj(patches))
    return out.transpose(0, 3, 1, 2)


def patch_merging(x: Tensor, merge: PatchMerging) -> Tensor:
    """(B, C, H, W) -> (B, C', H/2, W/2) by concatenating each 2x2 neighborhood."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"patch merging needs even extents, got {H}x{W}")
    if merge.norm.gamma.shape[0] != 4 * C:
        raise ShapeError(f"merge layer built for {merge.norm.gamma.shape[0] // 4} channels, got {C}")
    g = x.transpose(0, 2, 3, 1).reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
    g = g.reshape(B, H // 2, W // 2, 4 * C)
    return merge.reduction(merge.norm(g)).transpose(0, 3, 1, 2)


def _run_stages(img: Tensor, model: VMamba, chunk: int | None):
    c = model.config
    H, W = img.shape[2], img.shape[3]
    if H % 32 or W % 32:
        raise ShapeError(f"image extents {H}x{W} must be divisible by 32")
    stem_out = stem_embed(img, model.stem)
    x = stem_out
    for i, stage in enumerate(model.stages):
        scale = PATCH * 2**i
        expected = (img.shape[0], c.stage_dims[i], H // scale, W // scale)
        if x.shape != expected:
            raise ShapeError(f"stage {i + 1} input {x.shape}, expected {expected}")
        for block in stage.blocks:
            x = block(x, chunk=chunk)
        if i < 3:
            x = patch_merging(x, model.merges[i])
    return stem_out, x


def _classify(x: Tensor, model: VMamba) -> Tensor:
    feat = model.norm(x.transpose(0, 2, 3, 1))  # (B, h, w, C4)
    pooled = feat.mean(axis=(1, 2))
    return model.head(pooled)


def vmamba_forward(img: Tensor, model: VMamba, chunk: int | None = None) -> Tensor:
    """Image batch (B, 3, H, W) -> logits (B, num_classes)."""
    _, x = _run_stages(img, model, chunk)
    return _classify(x, model)


def global_residual_branch(stem_out: Tensor, res: GlobalResidual) -> Tensor:
    pooled = ad.avg_pool2d(stem_out, RESIDUAL_POOL)
    return res.proj(pooled.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)


def res_vmamba_forward(img: Tensor, model: VMamba, res: GlobalResidual, chunk: int | None = None) -> Tensor:
    """As :func:`vmamba_forward`, plus the pooled stem map added to the stage-4 output."""
    stem_out, x = _run_stages(img, model, chunk)
    r = global_residual_branch(stem_out, res)
    if r.shape != x.shape:
        raise ShapeError(f"global residual {r.shape} does not match stage-4 output {x.shape}")
    return _classify(x + r, model)
