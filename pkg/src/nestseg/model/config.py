"""Architecture hyperparameters and the divisibility validator."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Any

Triple = tuple[int, int, int]

NUM_LEVELS = 3
FINAL_DECODER_CHANNELS = 32


class ConfigError(ValueError):
    """Raised when a configuration fails validation; carries every problem found."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _triple(value) -> Triple:
    if isinstance(value, int):
        return (value, value, value)
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ConfigError([f"expected 3 values, got {value!r}"])
    return value


@dataclass(frozen=True)
class ModelConfig:
    patch_size: Triple = (4, 4, 4)
    embed_dims: tuple[int, ...] = (64, 128, 256)
    num_heads: tuple[int, ...] = (4, 8, 16)
    depths: tuple[int, ...] = (2, 2, 8)
    block_grid: tuple[Triple, ...] = ((4, 4, 4), (2, 2, 2), (1, 1, 1))
    decoder_channels: tuple[int, ...] = (128, 64, 32)
    stem_channels: int = 16
    num_classes: int = 133
    icv_heads_enabled: bool = True
    crop_size: Triple = (96, 96, 96)
    in_channels: int = 1
    mlp_ratio: float = 4.0

    def __post_init__(self):
        # normalise list inputs coming from JSON/YAML
        object.__setattr__(self, "patch_size", _triple(self.patch_size))
        object.__setattr__(self, "crop_size", _triple(self.crop_size))
        object.__setattr__(self, "embed_dims", tuple(int(v) for v in self.embed_dims))
        object.__setattr__(self, "num_heads", tuple(int(v) for v in self.num_heads))
        object.__setattr__(self, "depths", tuple(int(v) for v in self.depths))
        object.__setattr__(self, "decoder_channels", tuple(int(v) for v in self.decoder_channels))
        object.__setattr__(self, "block_grid", tuple(_triple(b) for b in self.block_grid))

    @property
    def embed_dim(self) -> int:
        return self.embed_dims[0]

    def problems(self) -> list[str]:
        """Return every violated constraint (empty when the config is valid)."""
        out = []
        for name in ("embed_dims", "num_heads", "depths", "block_grid"):
            if len(getattr(self, name)) != NUM_LEVELS:
                out.append(f"{name} must have exactly {NUM_LEVELS} levels, got {len(getattr(self, name))}")
        if out:
            return out
        if any(p <= 0 for p in self.patch_size):
            out.append(f"patch_size must be positive, got {self.patch_size}")
        if any(c <= 0 for c in self.crop_size):
            out.append(f"crop_size must be positive, got {self.crop_size}")
        if out:
            return out
        if self.block_grid[-1] != (1, 1, 1):
            out.append(f"block_grid must end at (1, 1, 1) so the last level has T=1, got {self.block_grid[-1]}")
        for lvl in range(NUM_LEVELS - 1):
            cur, nxt = self.block_grid[lvl], self.block_grid[lvl + 1]
            if any(c != 2 * n for c, n in zip(cur, nxt)):
                out.append(f"block_grid must halve per axis between levels, got {cur} -> {nxt}")
        for ax, (c, p) in enumerate(zip(self.crop_size, self.patch_size)):
            if c % p:
                out.append(f"crop_size[{ax}]={c} not divisible by patch_size[{ax}]={p}")
        if not any("crop_size" in o for o in out):
            grid = [c // p for c, p in zip(self.crop_size, self.patch_size)]
            for lvl in range(NUM_LEVELS):
                for ax in range(3):
                    if grid[ax] % self.block_grid[lvl][ax]:
                        out.append(
                            f"level {lvl}: patch grid {tuple(grid)} axis {ax} not divisible "
                            f"by block_grid {self.block_grid[lvl]}"
                        )
                if lvl < NUM_LEVELS - 1:
                    if any(g % 2 for g in grid):
                        out.append(f"level {lvl}: patch grid {tuple(grid)} has an odd extent, cannot halve")
                    grid = [g // 2 for g in grid]
        for lvl, (e, h) in enumerate(zip(self.embed_dims, self.num_heads)):
            if e <= 0 or h <= 0 or e % h:
                out.append(f"level {lvl}: embed dim {e} not divisible by {h} heads")
        if any(d < 1 for d in self.depths):
            out.append(f"depths must be >= 1, got {self.depths}")
        if not self.decoder_channels or self.decoder_channels[-1] != FINAL_DECODER_CHANNELS:
            out.append(f"decoder_channels must end at {FINAL_DECODER_CHANNELS}, got {self.decoder_channels}")
        if len(self.decoder_channels) != NUM_LEVELS:
            out.append(f"decoder_channels must have {NUM_LEVELS} entries, got {len(self.decoder_channels)}")
        if self.num_classes < 2:
            out.append(f"num_classes must be >= 2, got {self.num_classes}")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def grid_shapes(self) -> list[Triple]:
        """Patch-grid extent at each hierarchy level."""
        grid = tuple(c // p for c, p in zip(self.crop_size, self.patch_size))
        shapes = []
        for _ in range(NUM_LEVELS):
            shapes.append(grid)
            grid = tuple(g // 2 for g in grid)
        return shapes

    def block_counts(self) -> list[int]:
        return [math.prod(b) for b in self.block_grid]

    def tokens_per_block(self) -> list[int]:
        return [
            math.prod(g // b for g, b in zip(grid, blocks))
            for grid, blocks in zip(self.grid_shapes(), self.block_grid)
        ]

    def replace(self, **changes) -> "ModelConfig":
        data = self.to_dict()
        data.update(changes)
        return ModelConfig.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        # JSON round-trip turns nested tuples into lists
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown model config key: {k}" for k in unknown])
        return cls(**data)


def default_config(**overrides) -> ModelConfig:
    return ModelConfig().replace(**overrides) if overrides else ModelConfig()


def toy_config(**overrides) -> ModelConfig:
    """Small preset that trains on a single CPU core in minutes."""
    cfg = ModelConfig(
        patch_size=(2, 2, 2),
        embed_dims=(8, 16, 32),
        num_heads=(2, 2, 4),
        depths=(1, 1, 2),
        block_grid=((4, 4, 4), (2, 2, 2), (1, 1, 1)),
        decoder_channels=(16, 8, 32),
        stem_channels=8,
        crop_size=(32, 32, 32),
        mlp_ratio=2.0,
    )
    return cfg.replace(**overrides) if overrides else cfg


PRESETS = {"default": default_config, "toy": toy_config}
