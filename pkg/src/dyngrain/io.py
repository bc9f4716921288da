"""Images, grain heatmaps, and GFT1 checkpoints with JSON manifests."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .tensor import load_tensors, save_tensors

FINE_RGB = np.array([255, 0, 0], dtype=np.float64)
COARSE_RGB = np.array([0, 0, 255], dtype=np.float64)


def to_uint8(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, image) -> None:
    """Write an (H, W, 3) or (H, W) array in [0, 1] as an 8-bit PNG."""
    arr = to_uint8(image)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def save_pgm(path, gray) -> None:
    arr = to_uint8(np.squeeze(np.asarray(gray)))
    Image.fromarray(arr, mode="L").save(path, format="PPM")


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def render_grain(grain, k: int = 2, cell: int = 8) -> np.ndarray:
    """Heatmap (rows*cell, cols*cell, 3) uint8; finest = red, coarsest = blue."""
    g = np.asarray(grain)
    t = (g - 1) / max(k - 1, 1)
    rgb = (1 - t)[..., None] * FINE_RGB + t[..., None] * COARSE_RGB
    rgb = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    return np.round(rgb).astype(np.uint8)


def save_grain_png(path, grain, k: int = 2, cell: int = 8) -> None:
    Image.fromarray(render_grain(grain, k, cell)).save(path, format="PNG")


def load_grain_png(path, rows: int, cols: int, k: int = 2) -> np.ndarray:
    """Inverse of ``render_grain``: sample each cell's centre and snap to a level."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    ch, cw = arr.shape[0] // rows, arr.shape[1] // cols
    centres = arr[ch // 2 :: ch, cw // 2 :: cw][:rows, :cols]
    t = centres[..., 2] / 255.0
    return 1 + np.round(t * (k - 1)).astype(np.int64)


def side_by_side(image, grain, k: int = 2) -> np.ndarray:
    img = to_uint8(image)
    cell = img.shape[0] // np.asarray(grain).shape[0]
    heat = render_grain(grain, k, cell)
    return np.concatenate([img, heat], axis=1)


# -- checkpoints -----------------------------------------------------------------

def _flatten(obj, tensors: list):
    if isinstance(obj, torch.Tensor):
        tensors.append(obj.detach().cpu().float())
        return {"__tensor__": len(tensors) - 1, "dtype": str(obj.dtype).replace("torch.", "")}
    if isinstance(obj, dict):
        return {"__dict__": [[_key(k), _flatten(v, tensors)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return {"__list__": [_flatten(v, tensors) for v in obj]}
    if isinstance(obj, float) and not math.isfinite(obj):
        return {"__float__": repr(obj)}
    return obj


def _key(k):
    return k if isinstance(k, str) else {"__int__": k}


def _unflatten(obj, tensors: list):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            return tensors[obj["__tensor__"]].to(getattr(torch, obj["dtype"]))
        if "__dict__" in obj:
            return {(k["__int__"] if isinstance(k, dict) else k): _unflatten(v, tensors) for k, v in obj["__dict__"]}
        if "__list__" in obj:
            return [_unflatten(v, tensors) for v in obj["__list__"]]
        if "__float__" in obj:
            return float(obj["__float__"])
    return obj


def save_checkpoint(directory, state: dict, manifest: dict | None = None) -> Path:
    """Write ``params.gft1`` (all tensors, in order) and ``manifest.json``.

    The manifest lists every tensor's name and shape next to the caller's
    metadata (config echo, step, ...).
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    tensors: list[torch.Tensor] = []
    tree = _flatten(state, tensors)
    names = [None] * len(tensors)

    def walk(node, prefix):
        if isinstance(node, dict):
            if "__tensor__" in node:
                names[node["__tensor__"]] = prefix
            for k, v in node.get("__dict__", []):
                walk(v, f"{prefix}.{k['__int__'] if isinstance(k, dict) else k}".lstrip("."))
            for i, v in enumerate(node.get("__list__", [])):
                walk(v, f"{prefix}.{i}".lstrip("."))

    walk(tree, "")
    save_tensors(d / "params.gft1", tensors)
    body = dict(manifest or {})
    body["tensors"] = [{"name": n, "shape": list(t.shape)} for n, t in zip(names, tensors)]
    body["state"] = tree
    (d / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True))
    return d


def load_checkpoint(directory) -> tuple[dict, dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    tensors = load_tensors(d / "params.gft1")
    for spec, t in zip(manifest["tensors"], tensors):
        if list(t.shape) != spec["shape"]:
            raise ValueError(f"checkpoint tensor {spec['name']} has shape {list(t.shape)}, manifest says {spec['shape']}")
    return _unflatten(manifest["state"], tensors), manifest
