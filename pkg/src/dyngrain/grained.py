"""Entropy-driven grain assignment.

Images are split into S x S regions (S = the coarsest downsampling factor).
Each region gets a Gaussian-KDE intensity profile evaluated on S*S bins, the
Shannon entropy of that profile, and finally a granularity index: 1 for the
finest factor up to k for the coarsest. Thresholds are calibrated once on a
corpus so that a requested share of regions lands at each granularity.

All math here runs in float64 numpy; nothing in this module is trained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_SIGMA = 0.01
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class RegionGrid:
    region_size: int
    rows: int
    cols: int

    @classmethod
    def for_image(cls, height: int, width: int, region_size: int) -> "RegionGrid":
        if height % region_size or width % region_size:
            raise ValueError(
                f"image {height}x{width} is not divisible into {region_size}px regions"
            )
        return cls(region_size, height // region_size, width // region_size)

    @property
    def n_regions(self) -> int:
        return self.rows * self.cols


def to_grayscale(image) -> np.ndarray:
    """(..., H, W, 3) in [0, 1] -> (..., H, W, 1) luma."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[-1] != 3:
        raise ValueError(f"expected 3 channels, got shape {img.shape}")
    return (img @ LUMA)[..., None]


def bin_centers(region_size: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, region_size * region_size)


def region_pdf(region, bins, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Unnormalized Gaussian KDE of the region's pixels evaluated at ``bins``.

    The mean of kernel values is returned as-is (no 1/(sigma*sqrt(2 pi)) and
    no bin width), so every entry lies in [0, 1].
    """
    x = np.asarray(region, dtype=np.float64).ravel()
    b = np.asarray(bins, dtype=np.float64).ravel()
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if x.size != b.size:
        raise ValueError(f"region has {x.size} pixels but {b.size} bins were given")
    z = (x[:, None] - b[None, :]) / sigma
    return np.exp(-0.5 * z * z).mean(axis=0)


def region_entropy(pdf) -> float:
    p = np.asarray(pdf, dtype=np.float64)
    if (p < 0).any():
        raise ValueError("pdf has negative entries")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy_map(gray, region_size: int, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Per-region entropy of a single-channel image, shape (rows, cols)."""
    g = np.asarray(gray, dtype=np.float64)
    if g.ndim == 3:
        if g.shape[-1] != 1:
            raise ValueError(f"expected a single-channel image, got shape {g.shape}")
        g = g[..., 0]
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    grid = RegionGrid.for_image(g.shape[0], g.shape[1], region_size)
    s = region_size
    tiles = (
        g.reshape(grid.rows, s, grid.cols, s)
        .transpose(0, 2, 1, 3)
        .reshape(grid.n_regions, s * s)
    )
    bins = bin_centers(s)
    out = np.empty(grid.n_regions)
    # chunked to bound the (regions, pixels, bins) temporary
    step = max(1, 2**22 // (s**4))
    for lo in range(0, grid.n_regions, step):
        z = (tiles[lo : lo + step, :, None] - bins[None, None, :]) / sigma
        pdf = np.exp(-0.5 * z * z).mean(axis=1)
        logp = np.log(np.where(pdf > 0, pdf, 1.0))
        out[lo : lo + step] = -(pdf * logp).sum(axis=1)
    return out.reshape(grid.rows, grid.cols)


def image_entropy_map(image, region_size: int, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    return entropy_map(to_grayscale(image), region_size, sigma)


def validate_ratios(ratios: Sequence[float]) -> np.ndarray:
    r = np.asarray(ratios, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("need at least two grain ratios")
    if (r < 0).any() or (r > 1).any() or abs(r.sum() - 1.0) > 1e-9:
        raise ValueError(f"grain ratios must lie in [0, 1] and sum to 1, got {ratios}")
    return r


def calibrate_thresholds(entropy_maps: Iterable, ratios: Sequence[float]) -> np.ndarray:
    """Entropy cut points T_1 >= ... >= T_k realizing ``ratios`` on a corpus.

    ``ratios`` run from finest to coarsest. A region gets granularity i when
    T_i < E <= T_{i-1} (T_0 = +inf); the last threshold is always -inf.
    Cut points are lower order statistics of the pooled entropies, so ties
    land on the coarser side.
    """
    r = validate_ratios(ratios)
    pool = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in entropy_maps])
    if pool.size == 0:
        raise ValueError("cannot calibrate thresholds on an empty corpus")
    pool.sort()
    n = pool.size
    cumulative = np.cumsum(r)
    thresholds = np.empty(r.size)
    for i, c in enumerate(cumulative):
        if i == r.size - 1 or c >= 1.0 - 1e-12:
            thresholds[i] = -np.inf
        elif c <= 1e-12:
            thresholds[i] = np.inf
        else:
            idx = min(max(math.ceil((1.0 - c) * n - 1e-9) - 1, 0), n - 1)
            thresholds[i] = pool[idx]
    return thresholds


def assign_grain_map(em, thresholds) -> np.ndarray:
    """Granularity index per region: 1 (finest) .. k (coarsest)."""
    e = np.asarray(em, dtype=np.float64)
    t = np.asarray(thresholds, dtype=np.float64)
    # count the cut points the entropy fails to exceed; T_k = -inf never counts
    return 1 + (e[..., None] <= t[None, :-1]).sum(axis=-1)


def grain_maps_for_corpus(
    entropy_maps: Sequence, ratios: Sequence[float], per_image: bool = False
) -> list[np.ndarray]:
    """Assign grain maps for a corpus, pooling thresholds or per image."""
    if per_image:
        return [assign_grain_map(m, calibrate_thresholds([m], ratios)) for m in entropy_maps]
    thresholds = calibrate_thresholds(entropy_maps, ratios)
    return [assign_grain_map(m, thresholds) for m in entropy_maps]


def fine_fraction(grain) -> float:
    g = np.asarray(grain)
    return float((g == 1).mean())
