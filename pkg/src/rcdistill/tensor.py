"""Dense float64 tensors and the ``.rcdt`` binary tensor format.

Tensors are plain :class:`numpy.ndarray` objects of dtype float64, rank 1-4,
row-major, channel-last for H x W x C maps.  The helpers here validate that
contract and provide the few spatial operations the losses need.

File layout (all little-endian)::

    magic    4 bytes   b"RCDT"
    version  uint16    1
    rank     uint16    1..4
    dims     rank x uint32
    payload  prod(dims) x float64
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence, Union

import numpy as np

MAGIC = b"RCDT"
VERSION = 1
MAX_RANK = 4


class ShapeError(ValueError):
    """Raised for invalid shapes or mismatched operands."""


class TensorFormatError(ValueError):
    """Base class for malformed ``.rcdt`` content."""


class BadMagicError(TensorFormatError):
    pass


class VersionError(TensorFormatError):
    pass


class TruncatedError(TensorFormatError):
    pass


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= MAX_RANK:
        raise ShapeError(f"rank must be 1..{MAX_RANK}, got {len(shape)}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float64 array, validating rank and extents."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    _check_shape(arr.shape)
    return arr


def ones(shape: Sequence[int]) -> np.ndarray:
    return np.ones(_check_shape(shape), dtype=np.float64)


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=np.float64)


def require_rank3(t: np.ndarray, name: str = "tensor") -> np.ndarray:
    if t.ndim != 3:
        raise ShapeError(f"{name} must be H x W x C, got shape {t.shape}")
    return t


def require_same_shape(a: np.ndarray, b: np.ndarray, names=("a", "b")) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {names[0]} {a.shape} vs {names[1]} {b.shape}")


def nearest_upsample(t: np.ndarray, factor: int) -> np.ndarray:
    """Replicate every pixel of an H x W x C map into a factor x factor block."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsampling factor must be a positive integer, got {factor}")
    require_rank3(t)
    factor = int(factor)
    if factor == 1:
        return t.copy()
    return np.repeat(np.repeat(t, factor, axis=0), factor, axis=1)


def nearest_upsample_adjoint(g: np.ndarray, factor: int) -> np.ndarray:
    """Block-sum: the transpose of :func:`nearest_upsample`, used in backprop."""
    h, w, c = g.shape
    return g.reshape(h // factor, factor, w // factor, factor, c).sum(axis=(1, 3))


def block_subsample(t: np.ndarray, factor: int) -> np.ndarray:
    return t[::factor, ::factor]


def avg_pool(t: np.ndarray, factor: int) -> np.ndarray:
    """Mean over non-overlapping factor x factor blocks (H, W divisible by factor)."""
    h, w, c = t.shape
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} not divisible by pooling factor {factor}")
    return t.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def flatten_spatial(t: np.ndarray) -> np.ndarray:
    """H x W x C -> (H*W) x C with pixel (y, x) on row y*W + x."""
    require_rank3(t)
    h, w, c = t.shape
    return t.reshape(h * w, c)


def unflatten_spatial(rows: np.ndarray, h: int, w: int) -> np.ndarray:
    return rows.reshape(h, w, rows.shape[1])


def write_tensor(t) -> bytes:
    t = as_tensor(t)
    header = MAGIC + struct.pack("<HH", VERSION, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + t.astype("<f8", copy=False).tobytes(order="C")


def read_tensor(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise TruncatedError(f"header needs 8 bytes, got {len(data)}")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, rank = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise VersionError(f"unsupported version {version}")
    if not 1 <= rank <= MAX_RANK:
        raise TensorFormatError(f"rank {rank} outside 1..{MAX_RANK}")
    end = 8 + 4 * rank
    if len(data) < end:
        raise TruncatedError("truncated dimension table")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"zero extent in dims {dims}")
    n = int(np.prod(dims))
    expected = end + 8 * n
    if len(data) < expected:
        raise TruncatedError(f"payload has {len(data) - end} bytes, dims {dims} need {8 * n}")
    if len(data) > expected:
        raise TensorFormatError(f"{len(data) - expected} trailing bytes after payload")
    arr = np.frombuffer(data, dtype="<f8", count=n, offset=end).astype(np.float64)
    return arr.reshape(dims)


PathLike = Union[str, Path]


def save(path: PathLike, t) -> None:
    Path(path).write_bytes(write_tensor(t))


def load(path: PathLike) -> np.ndarray:
    return read_tensor(Path(path).read_bytes())
