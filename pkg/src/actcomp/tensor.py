"""Dense ND tensors, statistics, binary serialization, and comparison.

Everything downstream (codec, error studies, training) moves data around as
:class:`Tensor`: a frozen, C-contiguous, row-major float array with an
explicit storage precision (4 = float32, 8 = float64).  NaN/Inf are rejected
at construction so numeric contracts never have to re-check.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .errors import DataError, DimensionError, FormatError, ParameterError

MAGIC_TENSOR = b"CMTT"
TENSOR_FORMAT_VERSION = 1

_PRECISION_DTYPES = {4: np.float32, 8: np.float64}


def _validate_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if len(dims) == 0:
        raise DimensionError("tensor rank must be >= 1")
    if any(d < 1 for d in dims):
        raise DimensionError(f"all extents must be >= 1, got {dims}")
    if len(dims) > 255:
        raise DimensionError("rank exceeds 255")
    return dims


class Tensor:
    """Immutable dense tensor: shape + flat row-major data.

    ``precision`` is the element size in bytes (4 or 8).  The backing array
    is made read-only; derive mutated copies via :meth:`astype` or by
    constructing a new Tensor from ``view()`` copies.
    """

    __slots__ = ("_array",)

    def __init__(self, array, precision: int | None = None):
        arr = np.asarray(array)
        if precision is not None:
            if precision not in _PRECISION_DTYPES:
                raise ParameterError(f"precision must be 4 or 8, got {precision}")
            arr = arr.astype(_PRECISION_DTYPES[precision])
        elif arr.dtype == np.float32:
            pass
        else:
            arr = arr.astype(np.float64)
        _validate_dims(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise DataError("tensor contains NaN or Inf")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self._array = arr

    @property
    def dims(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def rank(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def precision(self) -> int:
        return self._array.dtype.itemsize

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view (read-only)."""
        return self._array.reshape(-1)

    def view(self) -> np.ndarray:
        """Shaped read-only view of the backing array."""
        return self._array

    def astype(self, precision: int) -> "Tensor":
        if precision == self.precision:
            return self
        return Tensor(self._array, precision=precision)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.precision == other.precision
            and np.array_equal(self._array, other._array)
        )

    def __hash__(self):
        return id(self)

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, precision={self.precision})"


@dataclass(frozen=True)
class TensorStats:
    """Scan statistics used by the error model and the controller."""

    nonzero_ratio: float
    mean_abs: float
    max_abs: float
    per_sample_max_abs: tuple[float, ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class ErrorReport:
    """Element-wise difference summary of two same-shaped tensors."""

    eb: float
    max_abs_diff: float
    mean_abs_diff: float
    count_exceeding: int
    flushed_zero_count: int


def make_tensor(
    dims: Sequence[int],
    fill: str,
    *,
    value: float = 0.0,
    lo: float = -1.0,
    hi: float = 1.0,
    sparsity: float = 0.5,
    seed: int = 0,
    precision: int = 8,
) -> Tensor:
    """Build a tensor from a fill specification.

    fill:
      - ``constant``: every element equals ``value``.
      - ``uniform``: i.i.d. U[lo, hi), deterministic under ``seed``.
      - ``relu-sparse``: exactly ``round(sparsity * n)`` elements are 0, the
        rest strictly positive (post-ReLU lookalike), deterministic under
        ``seed``.
    """
    dims = _validate_dims(dims)
    n = int(np.prod(dims))
    if fill == "constant":
        flat = np.full(n, float(value), dtype=np.float64)
    elif fill == "uniform":
        if not hi >= lo:
            raise ParameterError(f"uniform fill needs hi >= lo, got [{lo}, {hi}]")
        rng = np.random.default_rng(seed)
        flat = rng.uniform(lo, hi, size=n)
    elif fill == "relu-sparse":
        if not 0.0 <= sparsity <= 1.0:
            raise ParameterError(f"sparsity must be in [0, 1], got {sparsity}")
        rng = np.random.default_rng(seed)
        flat = 1.0 - rng.random(n)  # in (0, 1], strictly positive
        n_zero = int(round(sparsity * n))
        zero_at = rng.permutation(n)[:n_zero]
        flat[zero_at] = 0.0
    else:
        raise ParameterError(f"unknown fill spec {fill!r}")
    return Tensor(flat.reshape(dims), precision=precision)


def compute_stats(t: Tensor, batch_dim: int | None = None) -> TensorStats:
    """Nonzero ratio, mean/max magnitude, and optional per-sample maxima.

    ``nonzero_ratio`` is the exact count of nonzero elements over the total.
    With ``batch_dim`` set, ``per_sample_max_abs`` holds one max-|x| per
    slice along that axis and ``max_abs`` equals their maximum.
    """
    arr = t.view()
    absd = np.abs(arr)
    n = arr.size
    nonzero_ratio = int(np.count_nonzero(arr)) / n
    mean_abs = float(absd.mean())
    max_abs = float(absd.max())
    per_sample: tuple[float, ...] = ()
    if batch_dim is not None:
        if not 0 <= batch_dim < arr.ndim:
            raise DimensionError(
                f"batch_dim {batch_dim} out of range for rank {arr.ndim}"
            )
        moved = np.moveaxis(absd, batch_dim, 0).reshape(arr.shape[batch_dim], -1)
        per_sample = tuple(float(x) for x in moved.max(axis=1))
    return TensorStats(nonzero_ratio, mean_abs, max_abs, per_sample)


def compare(a: Tensor, b: Tensor, eb: float) -> ErrorReport:
    """Exact difference statistics; ``count_exceeding`` counts |a-b| > eb.

    ``flushed_zero_count`` counts positions where ``b`` is exactly zero but
    ``a`` is not (the decompressor's re-zero filter produces these).
    """
    if a.dims != b.dims:
        raise DimensionError(f"shape mismatch: {a.dims} vs {b.dims}")
    if eb < 0:
        raise ParameterError("eb must be >= 0")
    da = a.data.astype(np.float64)
    db = b.data.astype(np.float64)
    diff = np.abs(da - db)
    return ErrorReport(
        eb=float(eb),
        max_abs_diff=float(diff.max()),
        mean_abs_diff=float(diff.mean()),
        count_exceeding=int(np.count_nonzero(diff > eb)),
        flushed_zero_count=int(np.count_nonzero((db == 0.0) & (da != 0.0))),
    )


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated stream: wanted {n} bytes, got {len(buf)}")
    return buf


def write_tensor(t: Tensor, sink) -> int:
    """Serialize ``t``; returns the number of bytes written.

    Layout: magic ``CMTT`` | version u8 | precision u8 (4 or 8) | rank u8 |
    rank x extent u64 LE | payload as little-endian IEEE-754, row-major.
    ``sink`` is a path or a writable binary stream.
    """
    if isinstance(sink, (str, bytes)) or hasattr(sink, "__fspath__"):
        with open(sink, "wb") as fh:
            return write_tensor(t, fh)
    header = MAGIC_TENSOR + struct.pack(
        "<BBB", TENSOR_FORMAT_VERSION, t.precision, t.rank
    )
    header += struct.pack(f"<{t.rank}Q", *t.dims)
    payload = t.data.astype(f"<f{t.precision}").tobytes()
    sink.write(header)
    sink.write(payload)
    return len(header) + len(payload)


def read_tensor(source) -> Tensor:
    """Inverse of :func:`write_tensor`; raises FormatError on malformed input."""
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, "rb") as fh:
            t = read_tensor(fh)
            if fh.read(1):
                raise FormatError("trailing bytes after tensor payload")
            return t
    magic = _read_exact(source, 4)
    if magic != MAGIC_TENSOR:
        raise FormatError(f"bad magic {magic!r}")
    version, precision, rank = struct.unpack("<BBB", _read_exact(source, 3))
    if version != TENSOR_FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    if precision not in _PRECISION_DTYPES:
        raise FormatError(f"bad precision code {precision}")
    if rank == 0:
        raise FormatError("rank must be >= 1")
    dims = struct.unpack(f"<{rank}Q", _read_exact(source, 8 * rank))
    if any(d < 1 for d in dims):
        raise FormatError(f"bad extents {dims}")
    n = 1
    for d in dims:
        n *= d
    payload = _read_exact(source, n * precision)
    flat = np.frombuffer(payload, dtype=f"<f{precision}").astype(
        _PRECISION_DTYPES[precision]
    )
    try:
        return Tensor(flat.reshape(dims), precision=precision)
    except DataError as exc:
        raise FormatError(f"payload holds non-finite values: {exc}") from exc
