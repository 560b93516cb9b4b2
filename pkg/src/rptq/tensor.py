"""Dense float/integer tensors with a bit-exact binary file format.

Conventions used throughout the toolkit: activations are (sample, token,
channel) with the channel axis last, weights are (out_channels, in_channels).
Storage is row-major float32 / int32; tensors are immutable after
construction, so they can be shared freely across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ValidationError

MAGIC = b"RPTQTNSR"
FORMAT_VERSION = 1

_DTYPE_F32 = 0
_DTYPE_I32 = 1
_HEADER = struct.Struct("<8sIII")  # magic, version, dtype code, ndim


def _validate_shape(shape: tuple[int, ...]) -> None:
    if len(shape) == 0:
        raise ValidationError("tensor must have at least one axis")
    if any(int(s) <= 0 for s in shape):
        raise ValidationError(f"zero axis in shape {tuple(shape)}")


@dataclass(frozen=True, eq=False)
class Tensor:
    """Contiguous float32 tensor. All values must be finite."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float32, order="C")
        _validate_shape(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise ValidationError("non-finite value in tensor")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


@dataclass(frozen=True, eq=False)
class IntTensor:
    """Contiguous int32 tensor whose elements respect a logical bit width.

    Elements are stored in full 32-bit containers regardless of `bits`;
    sub-word packing is deliberately out of scope.
    """

    data: np.ndarray
    bits: int

    def __post_init__(self) -> None:
        bits = int(self.bits)
        if not 2 <= bits <= 32:
            raise ValidationError(f"bit width {bits} outside [2, 32]")
        arr = np.array(self.data, dtype=np.int32, order="C")
        _validate_shape(arr.shape)
        lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
        if arr.size and (arr.min() < lo or arr.max() > hi):
            raise ValidationError(f"element outside [{lo}, {hi}] for {bits}-bit tensor")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "bits", bits)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def with_bits(self, bits: int) -> "IntTensor":
        """Re-brand with a narrower logical width (revalidates the range)."""
        return IntTensor(self.data, bits)


AnyTensor = Union[Tensor, IntTensor]


def save_tensor(t: AnyTensor, path: str | Path) -> None:
    """Write a tensor in the binary format (see `load_tensor`)."""
    if isinstance(t, IntTensor):
        code, payload = _DTYPE_I32, t.data.astype("<i4", copy=False)
    else:
        code, payload = _DTYPE_F32, t.data.astype("<f4", copy=False)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, code, payload.ndim))
        f.write(struct.pack(f"<{payload.ndim}Q", *payload.shape))
        f.write(payload.tobytes())


def load_tensor(path: str | Path) -> AnyTensor:
    """Read a tensor file: magic "RPTQTNSR", u32 version, u32 dtype code
    (0=f32, 1=i32), u32 ndim, ndim x u64 dims, then the raw LE payload.

    Integer files load as 32-bit-wide IntTensors; use `with_bits` to narrow.
    """
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"truncated header in {path}")
    magic, version, code, ndim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValidationError(f"bad magic {magic!r} in {path}")
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported format version {version} in {path}")
    if code not in (_DTYPE_F32, _DTYPE_I32):
        raise ValidationError(f"unknown dtype code {code} in {path}")
    dims_end = _HEADER.size + 8 * ndim
    if len(raw) < dims_end:
        raise ValidationError(f"truncated dims in {path}")
    shape = struct.unpack_from(f"<{ndim}Q", raw, _HEADER.size)
    _validate_shape(shape)
    count = int(np.prod(shape))
    expected = dims_end + 4 * count
    if len(raw) < expected:
        raise ValidationError(f"truncated payload in {path}")
    if len(raw) > expected:
        raise ValidationError(f"payload length mismatch in {path}")
    dt = "<f4" if code == _DTYPE_F32 else "<i4"
    arr = np.frombuffer(raw, dtype=dt, offset=dims_end, count=count).reshape(shape)
    if code == _DTYPE_F32:
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"non-finite value in {path}")
        return Tensor(arr)
    return IntTensor(arr, bits=32)


def check_permutation(s: np.ndarray, n: int) -> np.ndarray:
    """Validate that `s` is a permutation of 0..n-1 and return it as int64."""
    s = np.asarray(s, dtype=np.int64)
    if s.ndim != 1 or len(s) != n:
        raise ValidationError(f"permutation length {s.shape} does not match axis {n}")
    seen = np.zeros(n, dtype=bool)
    if s.size and (s.min() < 0 or s.max() >= n):
        raise ValidationError("permutation entry out of range")
    seen[s] = True
    if not seen.all():
        raise ValidationError("not a bijection: repeated or missing indices")
    return s


def inverse_permutation(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.int64)
    inv = np.empty_like(s)
    inv[s] = np.arange(len(s), dtype=np.int64)
    return inv


def permute_last_axis(x: AnyTensor, s: np.ndarray) -> AnyTensor:
    """Reorder channels: output[..., i] == x[..., s[i]], bit-identical movement."""
    s = check_permutation(s, x.shape[-1])
    if isinstance(x, IntTensor):
        return IntTensor(x.data[..., s], x.bits)
    return Tensor(x.data[..., s])
