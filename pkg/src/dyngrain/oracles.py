"""Slow reference implementations used to cross-check the vectorized code.

Nothing here shares code with the routines under test: loops run per tile,
per cell or per parameter element, and bins/indices are rebuilt from their
closed forms.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch


def naive_entropy_map(gray: np.ndarray, region_size: int, sigma: float = 0.01) -> np.ndarray:
    """Per-tile KDE entropy with bins b_j = j / (S^2 - 1), one bin at a time."""
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim == 3:
        g = g[..., 0]
    s = region_size
    n_bins = s * s
    rows, cols = g.shape[0] // s, g.shape[1] // s
    out = np.zeros((rows, cols))
    for r in range(rows):
        for c in range(cols):
            tile = g[r * s : (r + 1) * s, c * s : (c + 1) * s].ravel()
            h = 0.0
            for j in range(n_bins):
                b = j / (n_bins - 1)
                p = float(np.mean(np.exp(-0.5 * ((tile - b) / sigma) ** 2)))
                if p > 0:
                    h -= p * math.log(p)
            out[r, c] = h
    return out


def top_m_split(values, is_fine) -> int | None:
    """``m`` if the fine set is exactly the ``m`` largest values, else None."""
    ranked = sorted(zip(values, is_fine), key=lambda p: p[0], reverse=True)
    m = sum(1 for _, f in ranked if f)
    if all(f for _, f in ranked[:m]) and not any(f for _, f in ranked[m:]):
        return m
    return None


def neighbor_copy(coarse: np.ndarray, fine: np.ndarray, grain: np.ndarray) -> np.ndarray:
    """Cell-by-cell mixture: coarse regions replicate their single coarse value."""
    C, H, W = fine.shape
    rows, cols = grain.shape
    rh, rw = H // rows, W // cols
    out = np.empty_like(fine)
    for r in range(rows):
        for c in range(cols):
            for y in range(rh):
                for x in range(rw):
                    src = fine[:, r * rh + y, c * rw + x] if grain[r, c] == 1 else coarse[:, r, c]
                    out[:, r * rh + y, c * rw + x] = src
    return out


def write_counts(grain: np.ndarray, ratio: int) -> np.ndarray:
    """How many times each fine-grid cell is written by the region-wise routing."""
    rows, cols = grain.shape
    counts = np.zeros((rows * ratio, cols * ratio), dtype=np.int64)
    for r in range(rows):
        for c in range(cols):
            block = counts[r * ratio : (r + 1) * ratio, c * ratio : (c + 1) * ratio]
            if grain[r, c] == 1:
                block += 1  # one write per fine cell from the fine head
            if grain[r, c] == 2:
                block += 1  # one replicated coarse value per cell
    return counts


def central_difference(fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor],
                       h: float = 1e-6, max_per_tensor: int | None = None, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Central finite differences of the scalar ``fn()`` w.r.t. entries of ``tensors``.

    Tensors are perturbed in place (and restored). Returns, per tensor,
    the flat indices probed and the numeric derivatives there.
    """
    gen = np.random.default_rng(seed)
    results = []
    with torch.no_grad():
        for t in tensors:
            flat = t.view(-1)
            n = flat.numel()
            idx = np.arange(n) if max_per_tensor is None or n <= max_per_tensor else np.sort(
                gen.choice(n, max_per_tensor, replace=False))
            grads = np.empty(len(idx))
            for k, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                grads[k] = (fp - fm) / (2 * h)
            results.append((idx, grads))
    return results


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def ddpm_forward(z0: np.ndarray, eps: np.ndarray, alpha_bar: float) -> np.ndarray:
    return math.sqrt(alpha_bar) * z0 + math.sqrt(1 - alpha_bar) * eps


def ddpm_invert(zt: np.ndarray, eps: np.ndarray, alpha_bar: float) -> np.ndarray:
    return (zt - math.sqrt(1 - alpha_bar) * eps) / math.sqrt(alpha_bar)


def omega_msa_direct(h: int, w: int, C: int) -> int:
    return 4 * h * w * C**2 + 2 * (h * w) ** 2 * C


def omega_wmsa_direct(h: int, w: int, C: int, M: int) -> int:
    return 4 * h * w * C**2 + 2 * M**2 * h * w * C
