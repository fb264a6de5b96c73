"""Rearrangement between a patch grid and per-block token sequences.

A patch grid is channels-last, ``(B, H, W, D, C)``. Blockifying with a block
grid ``(bh, bw, bd)`` yields ``(B, T, n, C)`` with ``T = bh*bw*bd`` blocks of
``n = (H/bh)*(W/bw)*(D/bd)`` adjacent tokens. Blocks are ordered
row-major over the block grid, tokens row-major within a block.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

Triple = tuple[int, int, int]


@dataclass
class BlockedSequence:
    data: torch.Tensor  # (b, T, n, C')
    level: int
    grid: Triple  # patch-grid extent the blocks were cut from
    block_grid: Triple

    @property
    def num_blocks(self) -> int:
        return self.data.shape[1]

    @property
    def tokens_per_block(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: torch.Tensor) -> "BlockedSequence":
        if data.shape != self.data.shape:
            raise ValueError(f"shape changed from {tuple(self.data.shape)} to {tuple(data.shape)}")
        return BlockedSequence(data, self.level, self.grid, self.block_grid)


def blockify(x: torch.Tensor, block_grid: Triple, level: int = 0) -> BlockedSequence:
    """Cut a channels-last patch grid into ``prod(block_grid)`` local token blocks."""
    if x.ndim != 5:
        raise ValueError(f"expected (B, H, W, D, C) grid, got shape {tuple(x.shape)}")
    b, h, w, d, c = x.shape
    bh, bw, bd = block_grid
    if h % bh or w % bw or d % bd:
        raise ValueError(f"grid {(h, w, d)} is not divisible by block grid {tuple(block_grid)}")
    sh, sw, sd = h // bh, w // bw, d // bd
    x = x.reshape(b, bh, sh, bw, sw, bd, sd, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    x = x.reshape(b, bh * bw * bd, sh * sw * sd, c)
    return BlockedSequence(x, level, (h, w, d), tuple(block_grid))


def deblockify(seq: BlockedSequence) -> torch.Tensor:
    """Exact inverse of :func:`blockify`."""
    x = seq.data
    h, w, d = seq.grid
    bh, bw, bd = seq.block_grid
    sh, sw, sd = h // bh, w // bw, d // bd
    b, t, n, c = x.shape
    if t != bh * bw * bd or n != sh * sw * sd:
        raise ValueError(
            f"sequence shape {tuple(x.shape)} inconsistent with grid {seq.grid} and blocks {seq.block_grid}"
        )
    x = x.reshape(b, bh, bw, bd, sh, sw, sd, c)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(b, h, w, d, c)
