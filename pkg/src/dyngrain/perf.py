"""Analytic parameter and FLOP accounting.

FLOPs follow the DiT convention: one multiply-accumulate counts as one
FLOP, which is also the unit of the MSA / W-MSA complexity formulas.
Elementwise work (norms, softmax, activations, residual adds) is ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from . import tensor as T
from .content import ModelConfig, WindowAttention, preset


def omega_msa(h: int, w: int, C: int) -> int:
    """Global self-attention cost: 4hwC^2 + 2(hw)^2 C."""
    h, w, C = int(h), int(w), int(C)
    if min(h, w, C) <= 0:
        raise ValueError("extents must be positive")
    return 4 * h * w * C * C + 2 * (h * w) ** 2 * C


def omega_wmsa(h: int, w: int, C: int, window: int) -> int:
    """Window self-attention cost: 4hwC^2 + 2 M^2 hw C."""
    h, w, C, window = int(h), int(w), int(C), int(window)
    if min(h, w, C, window) <= 0:
        raise ValueError("extents must be positive")
    if h % window or w % window:
        raise ValueError(f"window {window} does not divide {h}x{w}")
    return 4 * h * w * C * C + 2 * window * window * h * w * C


def _linear(i: int, o: int) -> int:
    return i * o + o


@dataclass
class CostReport:
    name: str
    params: int
    flops: int
    params_breakdown: dict = field(default_factory=dict)
    flops_breakdown: dict = field(default_factory=dict)

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    @property
    def gflops(self) -> float:
        return self.flops / 1e9


def model_cost(cfg: ModelConfig) -> CostReport:
    """Exact parameter count and MAC count (batch 1) of ``build_model(cfg)``."""
    d, C, P = cfg.hidden, cfg.latent_channels, cfg.patch_large
    hid = cfg.mlp_hidden
    g = cfg.backbone_grid
    n_b = g * g
    block_params = _linear(d, 3 * d) + _linear(d, d) + _linear(d, hid) + _linear(hid, d) + _linear(d, 6 * d)

    params = {
        "patchify": _linear(P * P * C, d),
        "embedders": _linear(256, d) + _linear(d, d) + (cfg.num_classes + 1) * d,
        "backbone": cfg.backbone_layers * block_params,
    }
    flops = {
        "patchify": n_b * P * P * C * d,
        "attention": cfg.backbone_layers * omega_msa(g, g, d),
        "mlp": cfg.backbone_layers * n_b * 2 * d * hid,
        "adaln": 256 * d + d * d + cfg.backbone_layers * 6 * d * d + 2 * d * d,
    }
    if cfg.arch == "dit":
        out_c = 2 * C if cfg.learn_sigma else C
        params["heads"] = _linear(d, 2 * d) + _linear(d, P * P * out_c)
        flops["heads"] = n_b * d * P * P * out_c
    else:
        n_f = cfg.latent_size ** 2
        if cfg.grain_cond:
            params["embedders"] += cfg.k * d
        params["heads"] = _linear(d, 2 * d) + _linear(d, C) + _linear(d, P * P * C)
        flops["heads"] = n_b * d * (C + P * P * C)
        if cfg.refine_layers:
            params["patchify"] += _linear(2 * C, d) + n_f * d
            params["refine"] = cfg.refine_layers * (block_params + cfg.window ** 4)
            params["heads"] += _linear(d, 2 * d) + _linear(d, C)
            s = cfg.latent_size
            flops["patchify"] += n_f * 2 * C * d
            flops["attention"] += cfg.refine_layers * omega_wmsa(s, s, d, cfg.window)
            flops["mlp"] += cfg.refine_layers * n_f * 2 * d * hid
            flops["adaln"] += cfg.refine_layers * 6 * d * d + 2 * d * d
            flops["heads"] += n_f * d * C
    return CostReport(cfg.name, sum(params.values()), sum(flops.values()), params, flops)


def measured_macs(h: int, w: int, C: int, window: int, heads: int = 1, seed: int = 0) -> dict:
    """MACs counted during a real W-MSA forward over an h x w token grid.

    Returns ``{"attention": ..., "projection": ...}``; under the cost model
    these equal 2 M^2 hwC and 4 hwC^2.
    """
    torch.manual_seed(seed)
    layer = WindowAttention(C, heads, window)
    x = T.Rng(seed, "measured-macs").normal(1, h, w, C)
    with torch.no_grad(), T.count_macs() as macs:
        layer(x)
    return {"attention": macs["attn"], "projection": macs["proj"]}


# reference (preset, layers label, patch label, params in M, GFLOPs) at
# latent 32x32x4; reproduce_table compares model_cost against these
REFERENCE_COSTS = [
    ("dit-b/2", "12", "2", 130, 23.01),
    ("dit-b/1", "12", "1", 130, 87.07),
    ("d2it-b", "10+2", "2 & 1", 136, 35.93),
    ("dit-l/2", "24", "2", 458, 80.71),
    ("dit-l/1", "24", "1", 457, 309.51),
    ("d2it-l", "20+4", "2 & 1", 467, 102.25),
    ("dit-xl/2", "28", "2", 675, 118.64),
    ("dit-xl/1", "28", "1", 674, 456.98),
    ("d2it-xl", "22+6", "2 & 1", 687, 145.60),
]


def reproduce_table(param_tol: float = 0.03, flop_tol: float = 0.10) -> list[dict]:
    rows = []
    for name, layers, patch, ref_params, ref_gflops in REFERENCE_COSTS:
        report = model_cost(preset(name))
        p_err = report.params_m / ref_params - 1
        f_err = report.gflops / ref_gflops - 1
        rows.append({
            "method": name,
            "layers": layers,
            "patch": patch,
            "params_m": round(report.params_m, 2),
            "gflops": round(report.gflops, 2),
            "ref_params_m": ref_params,
            "ref_gflops": ref_gflops,
            "params_rel_err": p_err,
            "flops_rel_err": f_err,
            "params_ok": abs(p_err) <= param_tol,
            "flops_ok": abs(f_err) <= flop_tol,
        })
    return rows


def format_table(rows: list[dict]) -> str:
    header = f"{'Method':<10} {'Layers':>6} {'Patch size':>10} {'Param(M)':>9} {'FLOPs(G)':>9}   {'ref':>14}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['method']:<10} {r['layers']:>6} {r['patch']:>10} {r['params_m']:>9.1f} {r['gflops']:>9.2f}"
            f"   {r['ref_params_m']:>5}/{r['ref_gflops']:<8} "
            f"{'' if r['params_ok'] else 'P!'}{'' if r['flops_ok'] else 'F!'}"
        )
    return "\n".join(lines)
