"""Multi-grained noise predictor.

Pipeline: patchify the noised latent mixture with the large patch (one token
per coarse region), run adaLN-Zero DiT blocks, route tokens through a coarse
head and a fine head, correct the fine noise with a windowed RefineNet, and
recombine both granularities on the finest grid.

Layout: latents are (B, C, H, W) on the fine grid; grain maps are
(B, H/P_L, W/P_L) integer tensors with 1 = fine, 2 = coarse.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensor as T
from .dvae import upsample_nearest
from .tensor import ShapeError

FINE, COARSE = 1, 2


class PartitionError(RuntimeError):
    """A fine-grid cell was written zero or several times."""


@dataclass
class ModelConfig:
    name: str = "d2it-toy"
    arch: str = "d2it"  # "d2it" or "dit"
    latent_size: int = 16
    latent_channels: int = 4
    hidden: int = 128
    heads: int = 4
    backbone_layers: int = 4
    refine_layers: int = 2
    patch_large: int = 2
    patch_small: int = 1
    window: int = 4
    num_classes: int = 4
    k: int = 2
    mlp_ratio: float = 4.0
    class_dropout: float = 0.1
    learn_sigma: bool = False
    grain_cond: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def total_layers(self) -> int:
        return self.backbone_layers + self.refine_layers

    @property
    def mlp_hidden(self) -> int:
        return int(self.hidden * self.mlp_ratio)

    @property
    def backbone_grid(self) -> int:
        return self.latent_size // self.patch_large

    def validate(self) -> None:
        if self.arch not in ("d2it", "dit"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.latent_size % self.patch_large:
            raise ValueError("patch_large must divide the latent size")
        if self.hidden % self.heads:
            raise ValueError("hidden size must be divisible by the head count")
        if self.arch == "dit":
            return
        if self.k != 2:
            raise ValueError("only two granularities are supported")
        if self.patch_small != 1:
            raise ValueError("RefineNet runs at patch size 1")
        if self.patch_large != 2:
            raise ValueError("dual-grain routing expects patch_large = 2 (f2/f1 = 2)")
        if self.latent_size % self.window:
            raise ValueError(f"window {self.window} does not divide the fine grid {self.latent_size}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


def _ref_d2it(name, hidden, heads, backbone, refine):
    return ModelConfig(name=name, latent_size=32, hidden=hidden, heads=heads, backbone_layers=backbone,
                       refine_layers=refine, window=16, num_classes=1000)


def _ref_dit(name, hidden, heads, depth, patch):
    return ModelConfig(name=name, arch="dit", latent_size=32, hidden=hidden, heads=heads, backbone_layers=depth,
                       refine_layers=0, patch_large=patch, window=32, num_classes=1000, learn_sigma=True,
                       grain_cond=False)


PRESETS: dict[str, ModelConfig] = {
    "d2it-toy": ModelConfig(),
    "d2it-b": _ref_d2it("d2it-b", 768, 12, 10, 2),
    "d2it-l": _ref_d2it("d2it-l", 1024, 16, 20, 4),
    "d2it-xl": _ref_d2it("d2it-xl", 1152, 16, 22, 6),
    "dit-b/2": _ref_dit("dit-b/2", 768, 12, 12, 2),
    "dit-b/1": _ref_dit("dit-b/1", 768, 12, 12, 1),
    "dit-l/2": _ref_dit("dit-l/2", 1024, 16, 24, 2),
    "dit-l/1": _ref_dit("dit-l/1", 1024, 16, 24, 1),
    "dit-xl/2": _ref_dit("dit-xl/2", 1152, 16, 28, 2),
    "dit-xl/1": _ref_dit("dit-xl/1", 1152, 16, 28, 1),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(PRESETS[name], **overrides)


# -- token plumbing -----------------------------------------------------------------

@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (B, N, D)
    grid: tuple[int, int]
    patch: int

    @property
    def coords(self) -> np.ndarray:
        """(N, 2) origin grid coordinates, row-major."""
        r, c = np.divmod(np.arange(self.grid[0] * self.grid[1]), self.grid[1])
        return np.stack([r, c], axis=1)


def patchify(z: torch.Tensor, patch: int) -> TokenSequence:
    """(B, C, H, W) -> (B, H/P * W/P, P*P*C) with features ordered (p, q, c)."""
    B, C, H, W = z.shape
    if H % patch or W % patch:
        raise ShapeError(f"patch size {patch} does not divide the grid", (H, W))
    h, w = H // patch, W // patch
    x = z.reshape(B, C, h, patch, w, patch).permute(0, 2, 4, 3, 5, 1)
    return TokenSequence(x.reshape(B, h * w, patch * patch * C), (h, w), patch)


def unpatchify(tokens: torch.Tensor, grid: tuple[int, int], patch: int, channels: int) -> torch.Tensor:
    B = tokens.shape[0]
    h, w = grid
    x = tokens.reshape(B, h, w, patch, patch, channels).permute(0, 5, 1, 3, 2, 4)
    return x.reshape(B, channels, h * patch, w * patch)


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, D) -> (B * nW, window*window, D), windows row-major."""
    B, H, W, D = x.shape
    if H % window or W % window:
        raise ShapeError(f"window {window} does not divide the grid", (H, W))
    x = x.reshape(B, H // window, window, W // window, window, D).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, window * window, D)


def window_reverse(windows: torch.Tensor, window: int, H: int, W: int) -> torch.Tensor:
    D = windows.shape[-1]
    x = windows.reshape(-1, H // window, W // window, window, window, D).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, H, W, D)


def sincos_2d(dim: int, h: int, w: int) -> np.ndarray:
    """Fixed 2-D sine-cosine position table of shape (h*w, dim)."""

    def one_axis(d, pos):
        omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
        out = np.einsum("m,d->md", pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    gh, gw = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.concatenate([one_axis(dim // 2, gh), one_axis(dim // 2, gw)], axis=1).astype(np.float32)


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


# -- embedders ------------------------------------------------------------------------

class TimestepEmbedder(nn.Module):
    def __init__(self, hidden: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.fc1 = nn.Linear(freq_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)

    @staticmethod
    def frequencies(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
        args = t.float()[:, None] * freqs[None]
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)

    def forward(self, t):
        h = T.linear(self.frequencies(t, self.freq_dim), self.fc1, "adaln")
        return T.linear(F.silu(h), self.fc2, "adaln")


# -- attention ---------------------------------------------------------------------------

class Attention(nn.Module):
    """Multi-head self-attention with an optional additive N x N score bias."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
        B, N, D = x.shape
        if bias is not None and tuple(bias.shape) != (N, N):
            raise ShapeError("relative position bias must be N x N", tuple(bias.shape), (N, N))
        qkv = T.linear(x, self.qkv, "proj").reshape(B, N, 3, self.heads, D // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        scores = T.matmul(q, k.transpose(-2, -1), tag="attn") * self.scale
        if bias is not None:
            scores = scores + bias
        attn = T.softmax(scores, dim=-1, check_finite=False)
        out = T.matmul(attn, v, tag="attn").transpose(1, 2).reshape(B, N, D)
        return T.linear(out, self.proj, "proj")


class WindowAttention(nn.Module):
    """W-MSA: attention inside non-overlapping windows plus a learnable N x N bias.

    One bias matrix per block, shared by every window and head.
    """

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.window = window
        self.attn = Attention(dim, heads)
        n = window * window
        self.rel_bias = nn.Parameter(torch.zeros(n, n))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, H, W, D) token grid."""
        B, H, W, D = x.shape
        windows = window_partition(x, self.window)
        out = self.attn(windows, self.rel_bias)
        return window_reverse(out, self.window, H, W)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return T.linear(T.gelu(T.linear(x, self.fc1, "mlp")), self.fc2, "mlp")


class DiTBlock(nn.Module):
    """Pre-norm transformer block with adaLN-Zero conditioning."""

    def __init__(self, dim: int, heads: int, mlp_hidden: int, window: int | None = None):
        super().__init__()
        self.attn = WindowAttention(dim, heads, window) if window else Attention(dim, heads)
        self.mlp = Mlp(dim, mlp_hidden)
        self.ada = nn.Linear(dim, 6 * dim)

    def forward(self, x: torch.Tensor, c: torch.Tensor, grid: tuple[int, int] | None = None) -> torch.Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = T.linear(F.silu(c), self.ada, "adaln").chunk(6, dim=1)
        h = modulate(T.layer_norm(x), shift1, scale1)
        if isinstance(self.attn, WindowAttention):
            B, N, D = h.shape
            h = self.attn(h.reshape(B, grid[0], grid[1], D)).reshape(B, N, D)
        else:
            h = self.attn(h)
        x = x + gate1.unsqueeze(1) * h
        x = x + gate2.unsqueeze(1) * self.mlp(modulate(T.layer_norm(x), shift2, scale2))
        return x


class FinalLayer(nn.Module):
    def __init__(self, dim: int, out_features: int | tuple[int, ...]):
        super().__init__()
        self.ada = nn.Linear(dim, 2 * dim)
        outs = out_features if isinstance(out_features, tuple) else (out_features,)
        self.heads = nn.ModuleList(nn.Linear(dim, o) for o in outs)

    def forward(self, x, c):
        shift, scale = T.linear(F.silu(c), self.ada, "adaln").chunk(2, dim=1)
        h = modulate(T.layer_norm(x), shift, scale)
        return [T.linear(h, head, "heads") for head in self.heads]


def _init_weights(model: nn.Module) -> None:
    for m in model.modules():
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            nn.init.zeros_(m.bias)
    for m in model.modules():
        if isinstance(m, (DiTBlock, FinalLayer)):
            nn.init.zeros_(m.ada.weight)
            nn.init.zeros_(m.ada.bias)
        if isinstance(m, FinalLayer):
            for head in m.heads:
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)
        if isinstance(m, TimestepEmbedder):
            nn.init.normal_(m.fc1.weight, std=0.02)
            nn.init.normal_(m.fc2.weight, std=0.02)
        if isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=0.02)


# -- routing and recombination ---------------------------------------------------------------

@dataclass
class RoutedNoise:
    eps_coarse: torch.Tensor  # (B, C, rows, cols); meaningful at coarse regions
    eps_fine: torch.Tensor  # (B, C, H, W); meaningful at fine cells
    grain: torch.Tensor

    @property
    def coarse_regions(self) -> torch.Tensor:
        return self.grain == COARSE

    @property
    def fine_regions(self) -> torch.Tensor:
        return self.grain == FINE

    def fine_cells(self) -> torch.Tensor:
        ratio = self.eps_fine.shape[-1] // self.grain.shape[-1]
        return upsample_nearest(self.fine_regions, ratio)


def check_alignment(tokens: torch.Tensor, grain: torch.Tensor) -> None:
    if tokens.shape[0] != grain.shape[0] or tokens.shape[1] != grain.shape[1] * grain.shape[2]:
        raise ShapeError("tokens are not aligned one-per-region with the grain map",
                         tuple(tokens.shape[:2]), tuple(grain.shape))


def route(coarse_codes: torch.Tensor, fine_codes: torch.Tensor, grain: torch.Tensor, channels: int,
          patch: int = 2) -> RoutedNoise:
    """Scatter per-token head outputs onto the coarse and fine grids.

    ``coarse_codes``: (B, N, C), one code per region token.
    ``fine_codes``: (B, N, patch*patch*C), unpatchified onto the fine grid.
    """
    check_alignment(coarse_codes, grain)
    check_alignment(fine_codes, grain)
    B, rows, cols = grain.shape
    eps1 = coarse_codes.transpose(1, 2).reshape(B, channels, rows, cols)
    eps2 = unpatchify(fine_codes, (rows, cols), patch, channels)
    return RoutedNoise(eps1, eps2, grain)


def combine(eps_coarse: torch.Tensor, eps_fine: torch.Tensor, grain: torch.Tensor) -> torch.Tensor:
    """Fine cells take ``eps_fine``; coarse regions take ``eps_coarse`` replicated."""
    ratio = eps_fine.shape[-1] // grain.shape[-1]
    fine = upsample_nearest(grain == FINE, ratio)
    coarse = upsample_nearest(grain == COARSE, ratio)
    writes = fine.to(torch.int8) + coarse.to(torch.int8)
    if not bool((writes == 1).all()):
        raise PartitionError("grain map does not partition the fine grid into coarse and fine cells")
    return torch.where(fine[:, None], eps_fine, upsample_nearest(eps_coarse, ratio))


def loss_weights(k: int) -> list[float]:
    """Per-granularity weights 1/(2^(k-i))^2, ordered coarsest (i=1) to finest (i=k)."""
    return [1.0 / (2 ** (k - i) * 2 ** (k - i)) for i in range(1, k + 1)]


def multi_grained_loss(targets, preds, grain: torch.Tensor) -> torch.Tensor:
    """Weighted per-granularity noise MSE.

    ``targets`` and ``preds`` are (coarse, fine) pairs: coarse tensors live on
    the region grid, fine tensors on the fine grid. Each granularity's term
    is the squared error averaged over its own cells and channels.
    """
    (t_coarse, t_fine), (p_coarse, p_fine) = targets, preds
    if t_coarse.shape != p_coarse.shape or t_fine.shape != p_fine.shape:
        raise ShapeError("prediction/target shapes differ", tuple(p_coarse.shape), tuple(t_coarse.shape))
    if tuple(t_coarse.shape[-2:]) != tuple(grain.shape[-2:]):
        raise ShapeError("coarse noise is not on the region grid", tuple(t_coarse.shape), tuple(grain.shape))
    alpha_coarse, alpha_fine = loss_weights(2)
    ratio = t_fine.shape[-1] // grain.shape[-1]
    coarse_mask = (grain == COARSE)[:, None].to(t_coarse.dtype)
    fine_mask = upsample_nearest(grain == FINE, ratio)[:, None].to(t_fine.dtype)
    loss = t_fine.new_zeros(())
    channels = t_fine.shape[1]
    n_coarse = coarse_mask.sum()
    if n_coarse > 0:
        loss = loss + alpha_coarse * ((p_coarse - t_coarse).square() * coarse_mask).sum() / (n_coarse * channels)
    n_fine = fine_mask.sum()
    if n_fine > 0:
        loss = loss + alpha_fine * ((p_fine - t_fine).square() * fine_mask).sum() / (n_fine * channels)
    return loss


# -- models ------------------------------------------------------------------------------------------

class RefineNet(nn.Module):
    """Patch-1 windowed transformer that corrects the rough fine noise."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, s = cfg.hidden, cfg.latent_size
        self.cfg = cfg
        self.embed = nn.Linear(2 * cfg.latent_channels, d)
        self.pos_embed = nn.Parameter(torch.from_numpy(sincos_2d(d, s, s))[None].clone())
        self.blocks = nn.ModuleList(
            DiTBlock(d, cfg.heads, cfg.mlp_hidden, window=cfg.window) for _ in range(cfg.refine_layers)
        )
        self.final = FinalLayer(d, cfg.latent_channels)

    def forward(self, eps_fine, z_noised, fine_cells, c, grain_tokens=None):
        B, C, H, W = z_noised.shape
        masked = torch.where(fine_cells[:, None], eps_fine, torch.zeros_like(eps_fine))
        x = patchify(torch.cat([masked, z_noised], dim=1), 1).tokens
        x = T.linear(x, self.embed, "patchify") + self.pos_embed
        if grain_tokens is not None:
            x = x + grain_tokens
        for block in self.blocks:
            x = block(x, c, (H, W))
        (corr,) = self.final(x, c)
        return eps_fine + unpatchify(corr, (H, W), 1, C)


@dataclass
class ContentOutput:
    eps: torch.Tensor  # combined prediction on the fine grid
    eps_coarse: torch.Tensor  # region grid
    eps_fine: torch.Tensor  # corrected fine prediction, fine grid
    eps_fine_rough: torch.Tensor
    extras: dict = field(default_factory=dict)


class DynamicContentTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.arch != "d2it":
            raise ValueError("DynamicContentTransformer needs a d2it config")
        self.cfg = cfg
        d, C, P = cfg.hidden, cfg.latent_channels, cfg.patch_large
        g = cfg.backbone_grid
        self.x_embed = nn.Linear(P * P * C, d)
        self.register_buffer("pos_embed", torch.from_numpy(sincos_2d(d, g, g))[None], persistent=False)
        self.t_embed = TimestepEmbedder(d)
        self.y_embed = nn.Embedding(cfg.num_classes + 1, d)
        self.grain_embed = nn.Embedding(cfg.k, d) if cfg.grain_cond else None
        self.blocks = nn.ModuleList(DiTBlock(d, cfg.heads, cfg.mlp_hidden) for _ in range(cfg.backbone_layers))
        self.router = FinalLayer(d, (C, P * P * C))
        self.refine = RefineNet(cfg) if cfg.refine_layers > 0 else None
        _init_weights(self)

    @property
    def null_class(self) -> int:
        return self.cfg.num_classes

    def condition(self, t, y, grain):
        c = self.t_embed(t) + self.y_embed(y)
        grain_tokens = None
        if self.grain_embed is not None:
            grain_tokens = self.grain_embed(grain.flatten(1) - 1)
            c = c + grain_tokens.mean(dim=1)
        return c, grain_tokens

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, y: torch.Tensor, grain: torch.Tensor) -> ContentOutput:
        cfg = self.cfg
        B, C, H, W = z_t.shape
        if H != cfg.latent_size or W != cfg.latent_size or C != cfg.latent_channels:
            raise ShapeError("latent does not match the model config", tuple(z_t.shape),
                             (B, cfg.latent_channels, cfg.latent_size, cfg.latent_size))
        seq = patchify(z_t, cfg.patch_large)
        check_alignment(seq.tokens, grain)
        c, grain_tokens = self.condition(t, y, grain)
        x = T.linear(seq.tokens, self.x_embed, "patchify") + self.pos_embed
        if grain_tokens is not None:
            x = x + grain_tokens
        for block in self.blocks:
            x = block(x, c)
        coarse_codes, fine_codes = self.router(x, c)
        routed = route(coarse_codes, fine_codes, grain, C, cfg.patch_large)
        eps_fine = routed.eps_fine
        if self.refine is not None:
            fine_cells = routed.fine_cells()
            cell_grain = None
            if grain_tokens is not None:
                cell_grain = self.grain_embed(upsample_nearest(grain, cfg.patch_large).flatten(1) - 1)
            eps_fine = self.refine(routed.eps_fine, z_t, fine_cells, c, cell_grain)
        eps = combine(routed.eps_coarse, eps_fine, grain)
        return ContentOutput(eps, routed.eps_coarse, eps_fine, routed.eps_fine)


class DiT(nn.Module):
    """Fixed-grain DiT baseline (single patch size, no routing)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, C, P = cfg.hidden, cfg.latent_channels, cfg.patch_large
        g = cfg.backbone_grid
        self.out_channels = 2 * C if cfg.learn_sigma else C
        self.x_embed = nn.Linear(P * P * C, d)
        self.register_buffer("pos_embed", torch.from_numpy(sincos_2d(d, g, g))[None], persistent=False)
        self.t_embed = TimestepEmbedder(d)
        self.y_embed = nn.Embedding(cfg.num_classes + 1, d)
        self.blocks = nn.ModuleList(DiTBlock(d, cfg.heads, cfg.mlp_hidden) for _ in range(cfg.backbone_layers))
        self.final = FinalLayer(d, P * P * self.out_channels)
        _init_weights(self)

    def forward(self, z_t, t, y):
        cfg = self.cfg
        seq = patchify(z_t, cfg.patch_large)
        c = self.t_embed(t) + self.y_embed(y)
        x = T.linear(seq.tokens, self.x_embed, "patchify") + self.pos_embed
        for block in self.blocks:
            x = block(x, c)
        (out,) = self.final(x, c)
        return unpatchify(out, seq.grid, cfg.patch_large, self.out_channels)


def build_model(cfg: ModelConfig) -> nn.Module:
    return DynamicContentTransformer(cfg) if cfg.arch == "d2it" else DiT(cfg)
