"""Dual-resolution (in general k-resolution) VAE with grain-guided mixing.

Tensors use torch NCHW layout. Grain maps are integer tensors of shape
(B, rows, cols) over the coarsest region grid, with 1 = finest factor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensor import Rng, ShapeError


@dataclass(frozen=True)
class FactorLadder:
    factors: tuple[int, ...] = (4, 8)
    n_z: int = 4

    def __post_init__(self):
        f = tuple(int(x) for x in self.factors)
        object.__setattr__(self, "factors", f)
        if len(f) < 2:
            raise ValueError("a factor ladder needs at least two factors")
        if any(a >= b for a, b in zip(f, f[1:])) or f[0] < 1:
            raise ValueError(f"factors must be strictly increasing positive ints, got {f}")

    @property
    def k(self) -> int:
        return len(self.factors)

    @property
    def region_size(self) -> int:
        return self.factors[-1]

    def check_image(self, height: int, width: int) -> None:
        for f in self.factors:
            if height % f or width % f:
                raise ShapeError(f"image extents not divisible by factor {f}", (height, width))

    def grid(self, height: int, width: int, i: int) -> tuple[int, int]:
        """Latent grid of granularity ``i`` (1-based)."""
        f = self.factors[i - 1]
        return height // f, width // f


@dataclass
class LatentMixture:
    latent: torch.Tensor  # (B, n_z, H0/f1, W0/f1)
    grain: torch.Tensor  # (B, H0/S, W0/S), values 1..k


def upsample_nearest(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Exact block replication over the last two dims."""
    if factor == 1:
        return x
    return x.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)


def _resize_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    h, w = mask.shape[-2:]
    if size[0] % h == 0 and size[1] % w == 0 and size[0] // h == size[1] // w:
        return upsample_nearest(mask, size[0] // h)
    return F.interpolate(mask[:, None].float(), size=size, mode="nearest")[:, 0].to(mask.dtype)


def grain_mask(grain: torch.Tensor, level: int, size: tuple[int, int]) -> torch.Tensor:
    """Boolean mask of cells at granularity ``level`` on a grid of ``size``."""
    return _resize_mask(grain == level, size)


def mix_latents(latents: Sequence[torch.Tensor], grain: torch.Tensor, ladder: FactorLadder) -> LatentMixture:
    """Neighbor-copy mixing of per-factor codes into the finest grid.

    ``latents[i]`` holds Z_{i+1} (sampled or mean codes). Regions at
    granularity i take Z_i replicated by f_i / f_1; selection uses
    ``torch.where`` so copied codes are bit-identical to their source.
    """
    if len(latents) != ladder.k:
        raise ShapeError("expected one latent grid per factor", (len(latents),), (ladder.k,))
    fine = latents[0]
    h1, w1 = fine.shape[-2:]
    rows = h1 * ladder.factors[0] // ladder.region_size
    cols = w1 * ladder.factors[0] // ladder.region_size
    if tuple(grain.shape[-2:]) != (rows, cols) or grain.shape[0] != fine.shape[0]:
        raise ShapeError("grain map does not match the region grid", tuple(grain.shape), (fine.shape[0], rows, cols))
    out = fine
    for i in range(2, ladder.k + 1):
        ratio = ladder.factors[i - 1] // ladder.factors[0]
        if ladder.factors[i - 1] % ladder.factors[0]:
            raise ShapeError("factor does not divide into the finest grid", (ladder.factors[i - 1],), (ladder.factors[0],))
        up = upsample_nearest(latents[i - 1], ratio)
        mask = grain_mask(grain, i, (h1, w1))[:, None]
        out = torch.where(mask, up, out)
    return LatentMixture(out, grain)


def reparameterize(mean: torch.Tensor, logvar: torch.Tensor, rng: Rng | None, deterministic: bool = False) -> torch.Tensor:
    if mean.shape != logvar.shape:
        raise ShapeError("mean and logvar shapes differ", mean.shape, logvar.shape)
    if deterministic or rng is None:
        return mean
    eta = rng.normal(*mean.shape).to(mean.device)
    return mean + torch.exp(0.5 * logvar) * eta


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Resample(nn.Module):
    """3x3 conv that lands on an exact target size (strided when halving)."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x, size):
        h, w = x.shape[-2:]
        if (h, w) == (2 * size[0], 2 * size[1]):
            return F.conv2d(x, self.conv.weight, self.conv.bias, stride=2, padding=1)
        if (2 * h, 2 * w) == tuple(size):
            return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))
        if size[0] > h:
            return self.conv(F.interpolate(x, size=size, mode="nearest"))
        return F.adaptive_avg_pool2d(self.conv(x), size)


class DVAE(nn.Module):
    """Hierarchical encoder, grain-guided latent mixing, convolutional decoder."""

    def __init__(
        self,
        ladder: FactorLadder = FactorLadder(),
        channels: Sequence[int] = (32, 64),
        in_channels: int = 3,
        grain_input: bool = False,
    ):
        super().__init__()
        if len(channels) != ladder.k:
            raise ValueError("need one channel width per factor")
        self.ladder = ladder
        self.grain_input = grain_input
        c0 = channels[0]
        self.conv_in = nn.Conv2d(in_channels, c0, 3, padding=1)
        self.stem = Resample(c0, c0)
        self.stages = nn.ModuleList()
        self.heads = nn.ModuleList()
        cin = c0
        for c in channels:
            self.stages.append(nn.ModuleList([ResBlock(cin, c), ResBlock(c, c), Resample(c, c)]))
            self.heads.append(nn.Conv2d(c, 2 * ladder.n_z, 3, padding=1))
            cin = c
        dec = list(reversed(channels))
        extra = ladder.k if grain_input else 0
        self.dec_in = nn.Conv2d(ladder.n_z + extra, dec[0], 3, padding=1)
        self.dec_blocks = nn.ModuleList()
        n_up = max(1, (ladder.factors[0] - 1).bit_length())
        cin = dec[0]
        for j in range(n_up):
            c = dec[min(j + 1, len(dec) - 1)]
            self.dec_blocks.append(nn.ModuleList([ResBlock(cin, c), Resample(c, c)]))
            cin = c
        self.dec_norm = nn.GroupNorm(min(8, cin), cin)
        self.conv_out = nn.Conv2d(cin, in_channels, 3, padding=1)

    def encode(self, x: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Per-factor (mean, logvar) pairs from one pass over the shared trunk."""
        H, W = x.shape[-2:]
        self.ladder.check_image(H, W)
        h = self.conv_in(x)
        h = self.stem(h, (max(H // 2, H // self.ladder.factors[0]), max(W // 2, W // self.ladder.factors[0])))
        out = []
        for i, ((r1, r2, down), head) in enumerate(zip(self.stages, self.heads), start=1):
            h = down(r2(r1(h)), self.ladder.grid(H, W, i))
            mean, logvar = head(h).chunk(2, dim=1)
            out.append((mean, logvar.clamp(-30.0, 20.0)))
        return out

    def decode(self, latent: torch.Tensor, grain: torch.Tensor | None = None) -> torch.Tensor:
        h1, w1 = latent.shape[-2:]
        f1 = self.ladder.factors[0]
        if self.grain_input:
            if grain is None:
                raise ValueError("decoder was built with grain input but no grain map was given")
            onehot = F.one_hot(grain - 1, self.ladder.k).permute(0, 3, 1, 2).float()
            latent = torch.cat([latent, _resize_mask(onehot, (h1, w1))], dim=1)
        h = self.dec_in(latent)
        size = (h1, w1)
        for j, (res, up) in enumerate(self.dec_blocks):
            last = j == len(self.dec_blocks) - 1
            size = (h1 * f1, w1 * f1) if last else (size[0] * 2, size[1] * 2)
            h = up(res(h), size)
        return self.conv_out(F.silu(self.dec_norm(h)))

    def forward(self, x, grain, rng: Rng | None = None, deterministic: bool = False):
        stats = self.encode(x)
        codes = [reparameterize(m, lv, rng.child(i) if rng else None, deterministic) for i, (m, lv) in enumerate(stats)]
        mix = mix_latents(codes, grain, self.ladder)
        return self.decode(mix.latent, grain), stats, mix


def kl_used_cells(stats: Sequence[tuple[torch.Tensor, torch.Tensor]], grain: torch.Tensor) -> torch.Tensor:
    """Mean KL to N(0, I) over latent cells the grain map actually selects."""
    total = 0.0
    count = 0
    for level, (mean, logvar) in enumerate(stats, start=1):
        mask = grain_mask(grain, level, tuple(mean.shape[-2:]))[:, None].to(mean.dtype)
        kl = 0.5 * (mean.square() + logvar.exp() - 1.0 - logvar)
        total = total + (kl * mask).sum()
        count += int(mask.sum().item())
    return total / max(count, 1)


def dvae_loss(image, recon, stats, grain, kl_weight: float = 1e-6) -> torch.Tensor:
    mse = F.mse_loss(recon, image)
    if kl_weight == 0:
        return mse
    return mse + kl_weight * kl_used_cells(stats, grain)
