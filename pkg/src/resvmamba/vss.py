"""VSS block: pre-norm, gated two-branch mixer around SS2D, local residual."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .cross_scan import NUM_DIRECTIONS, ss2d
from .nn import LayerNorm, Linear, Module, param, trunc_normal
from .ssm import SsmLearned


class VssBlock(Module):
    def __init__(
        self,
        dim: int,
        rng: np.random.Generator,
        d_state: int = 16,
        expansion: int = 2,
        kernel_size: int = 3,
        dt_rank: int | None = None,
    ):
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        self.dim = dim
        inner = expansion * dim
        self.inner = inner
        self.kernel_size = kernel_size
        self.norm1 = LayerNorm(dim)
        self.in_proj = Linear(dim, 2 * inner, rng, bias=False)
        self.conv_weight = param(trunc_normal(rng, (inner, 1, kernel_size, kernel_size)))
        self.conv_bias = param(np.zeros(inner))
        self.ssm = [SsmLearned(inner, d_state, rng, dt_rank=dt_rank) for _ in range(NUM_DIRECTIONS)]
        self.out_norm = LayerNorm(inner)
        self.out_proj = Linear(inner, dim, rng, bias=False)

    def __call__(self, x: Tensor, chunk: int | None = None, gate: bool = True) -> Tensor:
        return vss_block_forward(x, self, chunk=chunk, gate=gate)


def vss_block_forward(x: Tensor, p: VssBlock, chunk: int | None = None, gate: bool = True) -> Tensor:
    """x: FeatureMap (B, D, H, W) -> same shape.

    ``gate=False`` replaces the gate branch by ones (ablation hook for tests).
    """
    if x.ndim != 4 or x.shape[1] != p.dim:
        raise ShapeError(f"block of width {p.dim} got input {x.shape}")
    B, D, H, W = x.shape
    u = p.norm1(x.transpose(0, 2, 3, 1))  # (B, H, W, D)
    main, z = ad.split(p.in_proj(u), [p.inner, p.inner], axis=-1)
    main = main.transpose(0, 3, 1, 2)
    main = ad.ew_unary("silu", ad.depthwise_conv2d(main, p.conv_weight, p.kernel_size // 2, p.conv_bias))
    y = ss2d(main, p.ssm, chunk=chunk).transpose(0, 2, 3, 1)
    y = p.out_norm(y)
    if gate:
        y = y * ad.ew_unary("silu", z)
    y = p.out_proj(y).transpose(0, 3, 1, 2)
    return x + y
