"""Time-conditioned residuals on top of skinning.

A shared multi-resolution hash grid encodes the canonical position; two
small GELU MLPs turn it into a positional/rotational offset and a colour
residual.  The frame's time features are injected at the second layer.
All output heads start at zero, so an untrained net is an exact no-op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .geometry import DTYPE, as_tensor, so3_exp_t

HASH_PRIMES = (1, 2654435761, 805459861)


def frequency_encode(x, num_octaves: int) -> torch.Tensor:
    """``[sin(2^l pi x), cos(2^l pi x)]`` for ``l < num_octaves``, per component."""
    x = as_tensor(x)
    if x.ndim == 0:
        x = x[None]
    if num_octaves == 0:
        return x.new_zeros(*x.shape[:-1], 0)
    freqs = math.pi * 2.0 ** torch.arange(num_octaves, dtype=DTYPE)
    arg = x[..., None] * freqs
    return torch.stack([torch.sin(arg), torch.cos(arg)], -1).reshape(*x.shape[:-1], -1)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    table_size: int = 2**14
    features: int = 2
    base_resolution: int = 16
    growth: float = 1.5
    bbox_min: tuple = (-1.0, -0.2, -1.0)
    bbox_max: tuple = (1.0, 2.0, 1.0)

    def __post_init__(self):
        if min(self.levels, self.table_size, self.features, self.base_resolution) <= 0:
            raise ValueError("hash grid sizes must be positive")
        if not self.growth > 1.0:
            raise ValueError(f"per-level growth must exceed 1, got {self.growth}")
        if any(hi <= lo for lo, hi in zip(self.bbox_min, self.bbox_max)):
            raise ValueError("hash grid bounding box is empty")

    @property
    def out_dim(self) -> int:
        return self.levels * self.features

    def resolution(self, level: int) -> int:
        return int(math.floor(self.base_resolution * self.growth**level))


_CORNERS = torch.tensor([[i >> 2 & 1, i >> 1 & 1, i & 1] for i in range(8)], dtype=torch.int64)


def spatial_hash(coords: torch.Tensor, table_size: int) -> torch.Tensor:
    h = coords[..., 0] * HASH_PRIMES[0]
    h = torch.bitwise_xor(h, coords[..., 1] * HASH_PRIMES[1])
    h = torch.bitwise_xor(h, coords[..., 2] * HASH_PRIMES[2])
    return torch.remainder(h, table_size)


def hash_encode(p, cfg: HashGridConfig, table: torch.Tensor) -> torch.Tensor:
    """Trilinearly interpolated hash-grid features, ``[N, 3] -> [N, levels * F]``.

    ``table`` is ``[levels, table_size, F]``.  Points are clamped to the box.
    """
    p = as_tensor(p)
    if not bool(torch.all(torch.isfinite(p))):
        raise ValueError("hash_encode got non-finite positions")
    lo, hi = as_tensor(cfg.bbox_min), as_tensor(cfg.bbox_max)
    u = ((p - lo) / (hi - lo)).clamp(0.0, 1.0)
    feats = []
    for level in range(cfg.levels):
        x = u * cfg.resolution(level)
        cell = torch.floor(x.detach())
        frac = x - cell
        corners = cell.to(torch.int64)[:, None, :] + _CORNERS  # [N, 8, 3]
        idx = spatial_hash(corners, cfg.table_size)
        c = _CORNERS.to(DTYPE)
        w = torch.prod(c * frac[:, None, :] + (1.0 - c) * (1.0 - frac[:, None, :]), -1)  # [N, 8]
        feats.append((w[..., None] * table[level][idx]).sum(1))
    return torch.cat(feats, -1)


@dataclass(frozen=True)
class TemporalNetConfig:
    hash_grid: HashGridConfig = field(default_factory=HashGridConfig)
    position_encoding: str = "hash"  # or "frequency"
    position_octaves: int = 6
    time_octaves: int = 4
    hidden: int = 64
    seed: int = 0


class _Decoder(nn.Module):
    """Two GELU layers; time features enter the second one."""

    def __init__(self, in_dim: int, time_dim: int, hidden: int, out_dim: int, gen: torch.Generator):
        super().__init__()
        self.l1 = nn.Linear(in_dim, hidden, dtype=DTYPE)
        self.l2 = nn.Linear(hidden + time_dim, hidden, dtype=DTYPE)
        self.head = nn.Linear(hidden, out_dim, dtype=DTYPE)
        for layer in (self.l1, self.l2):
            bound = 1.0 / math.sqrt(layer.in_features)
            with torch.no_grad():
                layer.weight.copy_(torch.rand(layer.weight.shape, generator=gen, dtype=DTYPE) * 2 * bound - bound)
                layer.bias.zero_()
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.act = nn.GELU()

    def forward(self, pos_feat: torch.Tensor, time_feat: torch.Tensor) -> torch.Tensor:
        h = self.act(self.l1(pos_feat))
        h = self.act(self.l2(torch.cat([h, time_feat.expand(h.shape[0], -1)], -1)))
        return self.head(h)


class TemporalNet(nn.Module):
    def __init__(self, config: TemporalNetConfig | None = None):
        super().__init__()
        self.config = config = config or TemporalNetConfig()
        gen = torch.Generator().manual_seed(config.seed)
        hg = config.hash_grid
        if config.position_encoding == "hash":
            self.table = nn.Parameter(
                (torch.rand(hg.levels, hg.table_size, hg.features, generator=gen, dtype=DTYPE) * 2 - 1) * 1e-4)
            pos_dim = hg.out_dim
        elif config.position_encoding == "frequency":
            self.register_parameter("table", None)
            pos_dim = 6 * config.position_octaves
        else:
            raise ValueError(f"unknown position encoding {config.position_encoding!r}")
        time_dim = 2 * config.time_octaves
        self.offset = _Decoder(pos_dim, time_dim, config.hidden, 6, gen)
        self.color = _Decoder(pos_dim, time_dim, config.hidden, 3, gen)

    def encode(self, mu_c: torch.Tensor) -> torch.Tensor:
        if self.table is None:
            return frequency_encode(mu_c, self.config.position_octaves)
        return hash_encode(mu_c, self.config.hash_grid, self.table)

    def forward(self, mu_c: torch.Tensor, t: float):
        """``(dmu [N, 3], dR [N, 3, 3], dc [N, 3])`` at normalised time ``t``."""
        pos = self.encode(mu_c)
        tf = frequency_encode(torch.tensor([float(t)], dtype=DTYPE), self.config.time_octaves)[None]
        off = self.offset(pos, tf)
        return off[:, :3], so3_exp_t(off[:, 3:]), self.color(pos, tf)

    def randomize_heads(self, scale: float, seed: int = 0) -> TemporalNet:
        """Give the zero-initialised heads random weights (tests and audits)."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for head in (self.offset.head, self.color.head):
                head.weight.copy_(torch.randn(head.weight.shape, generator=gen, dtype=DTYPE) * scale)
                head.bias.copy_(torch.randn(head.bias.shape, generator=gen, dtype=DTYPE) * scale)
        return self


def predict_offsets(net: TemporalNet, mu_c, t: float):
    dmu, drot, _ = net(as_tensor(mu_c), t)
    return dmu, drot


def predict_color_residual(net: TemporalNet, mu_c, t: float) -> torch.Tensor:
    return net(as_tensor(mu_c), t)[2]


def apply_offsets(mu, rot, dmu, drot):
    """``mu + dmu`` and right-composed ``rot @ drot``."""
    return mu + dmu, rot @ drot
