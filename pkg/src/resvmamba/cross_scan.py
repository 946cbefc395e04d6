"""Cross-scan: four directional traversals of a 2-D map through the selective scan.

Direction conventions (``L = H*W``):

* 0: row-major, left to right then top to bottom
* 1: column-major, top to bottom then left to right
* 2: direction 0 reversed
* 3: direction 1 reversed
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .ssm import SsmLearned, SsmStack, s6

NUM_DIRECTIONS = 4


@lru_cache(maxsize=64)
def scan_orders(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(perms, inverses)``, each (4, H*W).

    ``perms[k][l]`` is the row-major flat index visited at step ``l`` of
    direction ``k``; ``inverses[k]`` undoes it.
    """
    row = np.arange(H * W)
    col = row.reshape(H, W).T.reshape(-1)
    perms = np.stack([row, col, row[::-1], col[::-1]])
    inverses = np.argsort(perms, axis=1)
    perms.setflags(write=False)
    inverses.setflags(write=False)
    return perms, inverses


def _gather_directions(seq: Tensor, perms: np.ndarray) -> Tensor:
    """(B, L, D) -> (B, 4, L, D) with ``out[:, k] = seq[:, perms[k]]``."""
    inverses = np.argsort(perms, axis=1)
    out = seq.data[:, perms]

    def bw(g):
        total = g[:, 0][:, inverses[0]]
        for k in range(1, perms.shape[0]):
            total = total + g[:, k][:, inverses[k]]
        return (total,)

    return ad.make_op(out, (seq,), bw, "cross_gather")


def _scatter_directions(y: Tensor, inverses: np.ndarray) -> Tensor:
    """(B, 4, L, D) -> (B, L, D): inverse-permute each direction, sum in order 0..3."""
    perms = np.argsort(inverses, axis=1)
    yd = y.data
    out = yd[:, 0][:, inverses[0]]
    for k in range(1, inverses.shape[0]):
        out = out + yd[:, k][:, inverses[k]]

    def bw(g):
        return (g[:, perms],)

    return ad.make_op(out, (y,), bw, "cross_scatter")


def cross_scan_expand(x: Tensor) -> Tensor:
    """FeatureMap (B, D, H, W) -> directional sequences (B, 4, H*W, D)."""
    if x.ndim != 4:
        raise ShapeError(f"expected (B, D, H, W), got {x.shape}")
    B, D, H, W = x.shape
    perms, _ = scan_orders(H, W)
    seq = x.transpose(0, 2, 3, 1).reshape(B, H * W, D)
    return _gather_directions(seq, perms)


def cross_merge(y: Tensor, H: int, W: int) -> Tensor:
    """Directional sequences (B, 4, L, D) -> FeatureMap (B, D, H, W), summed over directions."""
    if y.ndim != 4 or y.shape[1] != NUM_DIRECTIONS:
        raise ShapeError(f"expected (B, 4, L, D), got {y.shape}")
    B, _, L, D = y.shape
    if L != H * W:
        raise ShapeError(f"sequence length {L} does not equal {H}x{W}")
    _, inverses = scan_orders(H, W)
    merged = _scatter_directions(y, inverses)
    return merged.reshape(B, H, W, D).transpose(0, 3, 1, 2)


def ss2d(x: Tensor, learned: list[SsmLearned], chunk: int | None = None, scan=None) -> Tensor:
    """Expand, run an independent selective scan per direction, merge.

    The four directions are stacked on one axis so a single scan call covers them.
    """
    if len(learned) != NUM_DIRECTIONS:
        raise ValueError(f"need {NUM_DIRECTIONS} direction parameter sets, got {len(learned)}")
    B, D, H, W = x.shape
    seqs = cross_scan_expand(x)
    y = s6(seqs, SsmStack.of(learned), chunk=chunk, scan=scan)
    return cross_merge(y, H, W)
