"""Tensor encoding helpers: 32-bit little-endian arrays in base64.

Training math is 64-bit throughout; everything that crosses a process
boundary (wire frames, checkpoint files) is quantized to 32 bits.
"""

from __future__ import annotations

import base64
import binascii

import numpy as np

from .errors import NumericError, ProtocolError

SCHEMA_VERSION = 1

_WIRE_DTYPE = np.dtype("<f4")  # little-endian float32


def encode_f32(arr: np.ndarray) -> str:
    """Base64 of the array's float32 little-endian bytes, C order."""
    a = np.ascontiguousarray(arr, dtype=_WIRE_DTYPE)
    return base64.b64encode(a.tobytes()).decode("ascii")


def decode_f32(data: str, shape) -> np.ndarray:
    """Inverse of encode_f32; returns a float64 array of the given shape."""
    try:
        raw = base64.b64decode(data.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise ProtocolError(f"invalid base64 tensor data: {exc}") from exc
    n = int(np.prod(shape)) if shape else 1
    if len(raw) != n * _WIRE_DTYPE.itemsize:
        raise ProtocolError(
            f"tensor byte length {len(raw)} does not match shape {tuple(shape)}"
        )
    flat = np.frombuffer(raw, dtype=_WIRE_DTYPE)
    return flat.astype(np.float64).reshape(shape)


def quantize_f32(arr: np.ndarray) -> np.ndarray:
    """Round-trip an array through the 32-bit wire precision."""
    return np.asarray(arr, dtype=np.float64).astype(np.float32).astype(np.float64)


def require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
