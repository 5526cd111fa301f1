"""Dense tensor/matrix primitives and the GDT1 binary file format.

Tensors are plain numpy arrays with a fixed (n, c, h, w) axis convention and
row-major storage; matrices are 2-D arrays.  Everything downstream builds on
the small set of checked operations here.  There is no broadcasting: any
shape mismatch is a hard error so the numeric core stays auditable.
"""

from __future__ import annotations

import struct

import numpy as np

DEFAULT_DTYPE = np.float64

GDT1_MAGIC = b"GDT1"


class ShapeError(ValueError):
    """Raised when operand shapes or indices do not line up."""


class FormatError(ValueError):
    """Raised for malformed binary or text files."""


def zeros(shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)


def as_tensor(a, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Validate and return a 4-D (n, c, h, w) tensor, row-major, all dims >= 1."""
    x = np.ascontiguousarray(a, dtype=dtype)
    if x.ndim != 4:
        raise ShapeError(f"tensor must be 4-D (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"tensor dims must all be >= 1, got {x.shape}")
    return x


def as_matrix(a, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Validate and return a 2-D row-major matrix."""
    m = np.ascontiguousarray(a, dtype=dtype)
    if m.ndim != 2:
        raise ShapeError(f"matrix must be 2-D, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D matrix, got {a.shape}")
    return np.ascontiguousarray(a.T)


_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(a: np.ndarray, b: np.ndarray, op: str) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise shape mismatch: {a.shape} vs {b.shape}")
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return a * s


def slice_channel(x: np.ndarray, n: int, c: int) -> np.ndarray:
    """Copy out one (h, w) feature map as a matrix."""
    _check_nc(x, n, c)
    return x[n, c].copy()


def set_channel(x: np.ndarray, n: int, c: int, m: np.ndarray) -> None:
    """Write a matrix into one (h, w) feature map in place."""
    _check_nc(x, n, c)
    if m.shape != x.shape[2:]:
        raise ShapeError(f"channel shape {x.shape[2:]} cannot take matrix {m.shape}")
    x[n, c] = m


def _check_nc(x: np.ndarray, n: int, c: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected 4-D tensor, got shape {x.shape}")
    if not (0 <= n < x.shape[0] and 0 <= c < x.shape[1]):
        raise ShapeError(f"index (n={n}, c={c}) out of range for shape {x.shape}")


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise FloatingPointError(f"{what} contains NaN or Inf")
    return x


# ---------------------------------------------------------------------------
# GDT1: magic "GDT1", four little-endian uint32 dims (n, c, h, w), then
# n*c*h*w little-endian float64 values, row-major.  Matrices are stored as
# (1, 1, rows, cols).


def write_gdt1(f, array: np.ndarray) -> int:
    """Write one GDT1 record to a binary file object. Returns bytes written."""
    if array.ndim == 2:
        array = array[None, None]
    if array.ndim != 4:
        raise ShapeError(f"GDT1 stores 4-D tensors, got shape {array.shape}")
    if min(array.shape) < 1:
        raise ShapeError(f"GDT1 dims must be >= 1, got {array.shape}")
    header = GDT1_MAGIC + struct.pack("<4I", *array.shape)
    payload = np.ascontiguousarray(array, dtype="<f8").tobytes()
    f.write(header)
    f.write(payload)
    return len(header) + len(payload)


def read_gdt1(f) -> np.ndarray:
    """Read one GDT1 record from a binary file object."""
    magic = f.read(4)
    if magic != GDT1_MAGIC:
        raise FormatError(f"bad GDT1 magic: {magic!r}")
    raw = f.read(16)
    if len(raw) != 16:
        raise FormatError("truncated GDT1 header")
    shape = struct.unpack("<4I", raw)
    if min(shape) < 1:
        raise FormatError(f"GDT1 dims must be >= 1, got {shape}")
    count = int(np.prod([int(d) for d in shape]))
    payload = f.read(count * 8)
    if len(payload) != count * 8:
        raise FormatError(f"truncated GDT1 payload: wanted {count * 8} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def save_gdt1(path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_gdt1(f, array)


def load_gdt1(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_gdt1(f)
