"""Grain-map prior: noise tokens in, per-region granularity logits out."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
import torch.nn as nn

from . import tensor as T
from .content import Attention, Mlp, sincos_2d
from .tensor import Rng, ShapeError


@dataclass
class GrainPriorConfig:
    rows: int = 8
    cols: int = 8
    k: int = 2
    hidden: int = 64
    depth: int = 2
    heads: int = 4
    num_classes: int = 4
    class_dropout: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "GrainPriorConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


GRAIN_PRESETS = {
    "toy": GrainPriorConfig(),
    # DiT-S widths over a 16 x 16 region grid
    "dit-s": GrainPriorConfig(rows=16, cols=16, hidden=384, depth=12, heads=6, num_classes=1000),
}


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_hidden):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, mlp_hidden)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class GrainTransformer(nn.Module):
    def __init__(self, cfg: GrainPriorConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden
        self.in_proj = nn.Linear(d, d)
        self.pos_embed = nn.Parameter(torch.from_numpy(sincos_2d(d, cfg.rows, cfg.cols))[None].clone())
        self.y_embed = nn.Embedding(cfg.num_classes + 1, d)
        self.blocks = nn.ModuleList(Block(d, cfg.heads, 4 * d) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self.head = nn.Linear(d, cfg.k)
        nn.init.normal_(self.y_embed.weight, std=0.02)

    @property
    def n_regions(self) -> int:
        return self.cfg.rows * self.cfg.cols

    def noise_tokens(self, rng: Rng, batch: int) -> torch.Tensor:
        return rng.normal(batch, self.n_regions, self.cfg.hidden)

    def forward(self, noise: torch.Tensor, y: torch.Tensor | None = None) -> torch.Tensor:
        """(B, N_p, d) noise -> (B, rows, cols, k) logits."""
        B, N, D = noise.shape
        if N != self.n_regions or D != self.cfg.hidden:
            raise ShapeError("noise tokens do not match the region grid", (N, D), (self.n_regions, self.cfg.hidden))
        if y is None:
            y = torch.full((B,), self.cfg.num_classes, dtype=torch.long)
        x = self.in_proj(noise) + self.pos_embed + self.y_embed(y)[:, None]
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x)).reshape(B, self.cfg.rows, self.cfg.cols, self.cfg.k)


def grain_ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy; ``target`` holds granularity indices 1..k."""
    if tuple(logits.shape[:-1]) != tuple(target.shape):
        raise ShapeError("logits and target grids differ", tuple(logits.shape), tuple(target.shape))
    logp = T.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, (target.long() - 1).unsqueeze(-1)).squeeze(-1)
    return -picked.mean()


def argmax_coarse_ties(logits: torch.Tensor) -> torch.Tensor:
    """Per-region argmax (1-based) preferring the coarser (larger) index on ties."""
    k = logits.shape[-1]
    flipped = torch.flip(logits, dims=[-1]).argmax(dim=-1)
    return k - flipped


def sample_grain_map(model: GrainTransformer, rng: Rng, y: torch.Tensor | None = None,
                     temperature: float = 1.0, batch: int = 1) -> torch.Tensor:
    """Draw grain maps (B, rows, cols) with values 1..k."""
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    if y is not None:
        batch = y.shape[0]
    with torch.no_grad():
        logits = model(model.noise_tokens(rng.child("tokens"), batch), y)
    return sample_from_logits(logits, rng.child("draw"), temperature)


def sample_from_logits(logits: torch.Tensor, rng: Rng, temperature: float = 1.0) -> torch.Tensor:
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    if temperature == 0:
        return argmax_coarse_ties(logits)
    probs = T.softmax(logits.double() / temperature, dim=-1)
    cdf = probs.cumsum(dim=-1)
    u = rng.uniform(*logits.shape[:-1]).double().unsqueeze(-1)
    idx = (u >= cdf[..., :-1]).sum(dim=-1)
    return idx + 1
