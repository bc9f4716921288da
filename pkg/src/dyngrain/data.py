"""Synthetic image corpus and on-disk image ingestion."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter

from .tensor import Rng


@dataclass(frozen=True)
class SyntheticSpec:
    """Smooth backgrounds with a few noisy textured rectangles.

    Rectangles cluster around the image centre, so the fine-grain share
    varies by position the way object-centred photos do. The class id picks
    the texture's frequency band (class 0 = raw white noise, higher classes
    are box-blurred more).
    """

    image_size: int = 64
    count: int = 512
    min_patches: int = 1
    max_patches: int = 4
    min_extent: int = 10
    max_extent: int = 24
    center_spread: float = 0.18
    gradient_strength: float = 0.3
    sine_amplitude: float = 0.08
    num_classes: int = 4
    seed: int = 0


def generate_synthetic(spec: SyntheticSpec, index: int, with_mask: bool = False):
    """Image (H, W, 3) float32 in [0, 1] and class id; pure in (spec, index).

    With ``with_mask`` a boolean (H, W) map of textured pixels is appended.
    """
    if not 0 <= index < spec.count:
        raise IndexError(f"index {index} outside [0, {spec.count})")
    gen = Rng(spec.seed, f"synthetic:{index}").numpy()
    n = spec.image_size
    label = int(gen.integers(spec.num_classes))
    yy, xx = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing="ij")

    base = gen.uniform(0.25, 0.75, size=3)
    slope = gen.uniform(-1, 1, size=2) * spec.gradient_strength
    freq = gen.uniform(0.3, 1.0, size=2)
    phase = gen.uniform(0, 2 * np.pi)
    shade = slope[0] * (xx - 0.5) + slope[1] * (yy - 0.5)
    shade = shade + spec.sine_amplitude * np.sin(2 * np.pi * (freq[0] * xx + freq[1] * yy) + phase)
    img = base[None, None, :] + shade[..., None]
    mask = np.zeros((n, n), dtype=bool)

    for _ in range(int(gen.integers(spec.min_patches, spec.max_patches + 1))):
        h, w = gen.integers(spec.min_extent, spec.max_extent + 1, size=2)
        cy, cx = np.clip(gen.normal(0.5, spec.center_spread, size=2), 0, 1) * n
        top = int(np.clip(cy - h / 2, 0, n - h))
        left = int(np.clip(cx - w / 2, 0, n - w))
        noise = gen.random((h, w))
        if label:
            noise = uniform_filter(noise, size=label + 1, mode="reflect")
            lo, hi = noise.min(), noise.max()
            noise = (noise - lo) / max(hi - lo, 1e-8)
        tint = gen.uniform(0.6, 1.0, size=3)
        region = img[top : top + h, left : left + w]
        img[top : top + h, left : left + w] = 0.5 * region + 0.5 * noise[..., None] * tint
        mask[top : top + h, left : left + w] = True
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return (img, label, mask) if with_mask else (img, label)


def synthetic_corpus(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    images, labels = zip(*(generate_synthetic(spec, i) for i in range(spec.count)))
    return np.stack(images), np.array(labels, dtype=np.int64)


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm"}


def load_image_dir(path, image_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Centre-crop and resize every image under ``path``.

    Labels come from the first-level subdirectory name (sorted), or 0 when
    images sit directly in ``path``.
    """
    root = Path(path)
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images under {root}")
    classes = sorted({p.relative_to(root).parts[0] for p in files if len(p.relative_to(root).parts) > 1})
    class_ids = {c: i for i, c in enumerate(classes)}
    images, labels = [], []
    for p in files:
        im = Image.open(p).convert("RGB")
        s = min(im.size)
        left, top = (im.width - s) // 2, (im.height - s) // 2
        im = im.crop((left, top, left + s, top + s)).resize((image_size, image_size), Image.BICUBIC)
        images.append(np.asarray(im, dtype=np.float32) / 255.0)
        parts = p.relative_to(root).parts
        labels.append(class_ids[parts[0]] if len(parts) > 1 else 0)
    return np.stack(images), np.array(labels, dtype=np.int64)
