"""Thin tensor layer over torch.

Autodiff itself is torch's tape; this module adds the pieces the rest of the
package relies on: strict trailing-dimension broadcasting with readable
errors, a MAC counter around the matmuls that matter for cost accounting,
a counter-based RNG that is reproducible across platforms, and the GFT1
binary tensor format.
"""

from __future__ import annotations

import contextlib
import hashlib
import io
import math
import struct
from collections import defaultdict
from typing import BinaryIO, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, message: str, *shapes: Sequence[int]):
        self.shapes = tuple(tuple(s) for s in shapes)
        if shapes:
            message = f"{message}: " + " vs ".join(str(s) for s in self.shapes)
        super().__init__(message)


class NonFiniteError(ValueError):
    pass


def broadcast_shape(a: Sequence[int], b: Sequence[int]) -> tuple[int, ...]:
    """Result shape of trailing-aligned broadcasting, or ShapeError."""
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        x = a[-i] if i <= len(a) else 1
        y = b[-i] if i <= len(b) else 1
        if x != y and x != 1 and y != 1:
            raise ShapeError("shapes do not broadcast", a, b)
        out.append(max(x, y))
    return tuple(reversed(out))


_BINARY = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "div": torch.div,
    "max": torch.maximum,
    "min": torch.minimum,
}
_UNARY = {
    "neg": torch.neg,
    "exp": torch.exp,
    "log": torch.log,
    "sqrt": torch.sqrt,
    "square": torch.square,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "relu": torch.relu,
    "silu": F.silu,
    "abs": torch.abs,
}


def elementwise(op: str, a: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    if b is None:
        if op not in _UNARY:
            raise ValueError(f"unknown unary op {op!r}")
        return _UNARY[op](a)
    if op not in _BINARY:
        raise ValueError(f"unknown binary op {op!r}")
    broadcast_shape(tuple(a.shape), tuple(b.shape))
    return _BINARY[op](a, b)


# -- MAC instrumentation ------------------------------------------------------

_counters: list[defaultdict] = []


@contextlib.contextmanager
def count_macs():
    """Collect multiply-accumulate counts of ``matmul``/``linear`` per tag.

    >>> with count_macs() as macs:
    ...     _ = matmul(torch.ones(2, 3), torch.ones(3, 4), tag="demo")
    >>> macs["demo"]
    24
    """
    counter: defaultdict = defaultdict(int)
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _record(tag: str, macs: int) -> None:
    for c in _counters:
        c[tag] += macs


def matmul(a: torch.Tensor, b: torch.Tensor, tag: str = "matmul") -> torch.Tensor:
    """Batched matrix product ``a @ b`` with MAC accounting."""
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError("matmul needs rank >= 2 operands", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul inner dimensions differ", a.shape, b.shape)
    batch = broadcast_shape(tuple(a.shape[:-2]), tuple(b.shape[:-2]))
    if _counters:
        m, p, n = a.shape[-2], a.shape[-1], b.shape[-1]
        _record(tag, math.prod(batch) * m * p * n)
    return torch.matmul(a, b)


def linear(x: torch.Tensor, layer: torch.nn.Linear, tag: str = "linear") -> torch.Tensor:
    if _counters:
        rows = x.numel() // x.shape[-1]
        _record(tag, rows * layer.in_features * layer.out_features)
    return layer(x)


# -- nonlinearities and reductions ---------------------------------------------

def softmax(x: torch.Tensor, dim: int = -1, check_finite: bool = True) -> torch.Tensor:
    """Softmax with max-subtraction."""
    if check_finite and not torch.isfinite(x).all():
        raise NonFiniteError("softmax input contains non-finite values")
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=dim, keepdim=True))


def layer_norm(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    # no affine parameters; DiT blocks supply scale/shift through modulation
    return F.layer_norm(x, x.shape[-1:], eps=eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x, approximate="tanh")


def backward(root: torch.Tensor) -> None:
    if root.numel() != 1:
        raise ShapeError("backward root must be a scalar", root.shape)
    root.backward()


def gather(x: torch.Tensor, idx: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Select entries of ``x`` along ``dim`` by an integer index vector."""
    return torch.index_select(x, dim, idx)


def scatter(src: torch.Tensor, idx: torch.Tensor, size: int, dim: int = 0) -> torch.Tensor:
    """Inverse of ``gather`` for unique indices: place ``src`` slices at ``idx``."""
    shape = list(src.shape)
    shape[dim] = size
    out = src.new_zeros(shape)
    return out.index_copy(dim, idx, src)


# -- RNG ------------------------------------------------------------------------

def _stream_key(stream: int | str) -> int:
    if isinstance(stream, str):
        return int.from_bytes(hashlib.sha256(stream.encode()).digest()[:8], "little")
    return int(stream) & 0xFFFFFFFFFFFFFFFF


class Rng:
    """Philox counter-based generator keyed by ``(seed, stream)``.

    Draw sequences depend only on the key and the number of draws, so every
    named stream is reproducible on any platform numpy supports.
    """

    def __init__(self, seed: int, stream: int | str = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = _stream_key(stream)
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def child(self, *names: int | str) -> "Rng":
        """Independent stream derived from this one and ``names``."""
        label = ":".join([str(self.stream)] + [str(n) for n in names])
        return Rng(self.seed, label)

    def normal(self, *shape: int) -> torch.Tensor:
        return torch.from_numpy(self._gen.standard_normal(shape, dtype=np.float32))

    def uniform(self, *shape: int) -> torch.Tensor:
        return torch.from_numpy(self._gen.random(shape, dtype=np.float32))

    def integers(self, low: int, high: int, *shape: int) -> torch.Tensor:
        return torch.from_numpy(self._gen.integers(low, high, size=shape, dtype=np.int64))

    def numpy(self) -> np.random.Generator:
        return self._gen


# -- GFT1 serialization -----------------------------------------------------------

MAGIC = b"GFT1"


def write_gft1(f: BinaryIO, t: torch.Tensor | np.ndarray) -> None:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
    f.write(MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes(order="C"))


def read_gft1(f: BinaryIO) -> torch.Tensor:
    magic = f.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad GFT1 magic {magic!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    count = math.prod(shape)
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError("truncated GFT1 payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return torch.from_numpy(arr.astype(np.float32))


def to_gft1_bytes(t: torch.Tensor | np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_gft1(buf, t)
    return buf.getvalue()


def from_gft1_bytes(data: bytes) -> torch.Tensor:
    return read_gft1(io.BytesIO(data))


def save_tensors(path, tensors: Iterable[torch.Tensor]) -> None:
    with open(path, "wb") as f:
        for t in tensors:
            write_gft1(f, t)


def load_tensors(path) -> list[torch.Tensor]:
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    out = []
    while buf.tell() < len(data):
        out.append(read_gft1(buf))
    return out
