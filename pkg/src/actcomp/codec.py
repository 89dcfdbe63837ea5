"""Error-bounded lossy compressor for activation tensors.

Pipeline: quantize values onto an integer lattice of spacing 2*eb (dual
quantization, so encode/decode are integer-exact), predict each lattice
point from its predecessor (1-D Lorenzo over the flattened row-major
stream), entropy-code the bounded prediction deltas with canonical Huffman,
and store unpredictable elements verbatim as outliers.

Guarantee per element: |x - x_hat| <= eb, or the element is an outlier
stored exactly, or the decompressor's re-zero filter flushed a value with
|x| <= 2*eb to exactly 0.  Zeros always reconstruct to exactly zero.

The compressor is strict about storage precision: inputs must be 32-bit
tensors (convert with ``Tensor.astype(4)``), matching what activation data
is in practice.  Reconstruction is returned at 64-bit precision so the
lattice arithmetic is preserved exactly.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError
from .huffman import huffman_decode, huffman_encode, stream_entropy_bits
from .tensor import Tensor

MAGIC_COMPRESSED = b"CMTZ"
COMPRESSED_FORMAT_VERSION = 1
PREDICTOR_IDS = {"lorenzo-1d": 1}
_PREDICTOR_NAMES = {v: k for k, v in PREDICTOR_IDS.items()}

# Lattice values are saturated here so that neighbor deltas stay inside
# int64; saturated elements always end up as outliers.
_LATTICE_LIMIT = 1 << 61

DEFAULT_RADIUS = 1 << 15


@dataclass(frozen=True)
class CodecParams:
    """User-facing knobs: absolute error bound and code alphabet size."""

    eb: float
    radius: int = DEFAULT_RADIUS
    predictor: str = "lorenzo-1d"
    preserve_zeros: bool = True

    def __post_init__(self):
        if not (self.eb > 0 and np.isfinite(self.eb)):
            raise ParameterError(f"eb must be a positive finite real, got {self.eb}")
        if self.radius < 2:
            raise ParameterError(f"radius must be >= 2, got {self.radius}")
        if self.predictor not in PREDICTOR_IDS:
            raise ParameterError(f"unknown predictor {self.predictor!r}")

    @property
    def alphabet_size(self) -> int:
        return 2 * self.radius


@dataclass(frozen=True)
class CompressionReport:
    original_bytes: int
    compressed_bytes: int
    ratio: float
    outlier_fraction: float
    codes_entropy_bits_per_symbol: float
    outlier_warning: bool


@dataclass(frozen=True)
class CompressedActivation:
    """Self-describing compressed container (header + outliers + payload)."""

    dims: tuple[int, ...]
    precision: int
    params: CodecParams
    outlier_indices: np.ndarray  # uint64, ascending
    outlier_values: np.ndarray  # float32, exact originals
    symbol_count: int
    code_lengths: np.ndarray  # uint16 per alphabet symbol
    payload: bytes
    payload_bits: int

    @property
    def element_count(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    def to_bytes(self) -> bytes:
        flags = 1 if self.params.preserve_zeros else 0
        head = MAGIC_COMPRESSED + struct.pack(
            "<Bd I BB",
            COMPRESSED_FORMAT_VERSION,
            self.params.eb,
            self.params.radius,
            PREDICTOR_IDS[self.params.predictor],
            flags,
        )
        head += struct.pack("<BB", self.precision, len(self.dims))
        head += struct.pack(f"<{len(self.dims)}Q", *self.dims)
        out = bytearray(head)
        out += struct.pack("<Q", len(self.outlier_indices))
        if len(self.outlier_indices):
            pairs = np.empty(len(self.outlier_indices), dtype=[("i", "<u8"), ("v", "<f4")])
            pairs["i"] = self.outlier_indices
            pairs["v"] = self.outlier_values
            out += pairs.tobytes()
        out += struct.pack("<Q", self.symbol_count)
        out += _rle_encode_lengths(self.code_lengths)
        out += struct.pack("<Q", self.payload_bits)
        out += self.payload
        out += struct.pack("<I", zlib.crc32(bytes(out)))
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CompressedActivation":
        if len(blob) < 4 + 1 + 8 + 4 + 2 + 2 + 4:
            raise FormatError("compressed stream too short")
        body, (stored_crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) != stored_crc:
            raise FormatError("checksum mismatch")
        cur = _Cursor(body)
        if cur.take(4) != MAGIC_COMPRESSED:
            raise FormatError("bad magic")
        version, eb, radius, predictor_id, flags = struct.unpack(
            "<Bd I BB", cur.take(15)
        )
        if version != COMPRESSED_FORMAT_VERSION:
            raise FormatError(f"unsupported version {version}")
        if predictor_id not in _PREDICTOR_NAMES:
            raise FormatError(f"unknown predictor id {predictor_id}")
        try:
            params = CodecParams(
                eb=eb,
                radius=radius,
                predictor=_PREDICTOR_NAMES[predictor_id],
                preserve_zeros=bool(flags & 1),
            )
        except ParameterError as exc:
            raise FormatError(f"invalid codec params in header: {exc}") from exc
        precision, rank = struct.unpack("<BB", cur.take(2))
        if rank == 0:
            raise FormatError("rank must be >= 1")
        dims = struct.unpack(f"<{rank}Q", cur.take(8 * rank))
        if any(d < 1 for d in dims):
            raise FormatError(f"bad extents {dims}")
        (n_out,) = struct.unpack("<Q", cur.take(8))
        if n_out:
            pairs = np.frombuffer(
                cur.take(12 * n_out), dtype=[("i", "<u8"), ("v", "<f4")]
            )
            out_idx = pairs["i"].astype(np.uint64)
            out_val = pairs["v"].astype(np.float32)
        else:
            out_idx = np.empty(0, dtype=np.uint64)
            out_val = np.empty(0, dtype=np.float32)
        (symbol_count,) = struct.unpack("<Q", cur.take(8))
        lengths = _rle_decode_lengths(cur, 2 * radius)
        (payload_bits,) = struct.unpack("<Q", cur.take(8))
        payload = cur.take((payload_bits + 7) // 8)
        if cur.remaining():
            raise FormatError("trailing bytes in compressed stream")
        return cls(
            dims=tuple(int(d) for d in dims),
            precision=precision,
            params=params,
            outlier_indices=out_idx,
            outlier_values=out_val,
            symbol_count=int(symbol_count),
            code_lengths=lengths,
            payload=bytes(payload),
            payload_bits=int(payload_bits),
        )


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated compressed stream")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def remaining(self) -> int:
        return len(self.buf) - self.pos


_MAX_RUN = 0xFFFF


def _rle_encode_lengths(lengths: np.ndarray) -> bytes:
    """Runs of (u16 run length, u16 code length); long runs are split."""
    lengths = np.asarray(lengths, dtype=np.uint16)
    if lengths.size == 0:
        return struct.pack("<I", 0)
    change = np.flatnonzero(np.diff(lengths)) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [lengths.size]))
    run_lens = ends - starts
    values = lengths[starts]
    if run_lens.max() > _MAX_RUN:
        split_lens = []
        split_vals = []
        for rl, v in zip(run_lens, values):
            while rl > _MAX_RUN:
                split_lens.append(_MAX_RUN)
                split_vals.append(v)
                rl -= _MAX_RUN
            split_lens.append(rl)
            split_vals.append(v)
        run_lens = np.asarray(split_lens)
        values = np.asarray(split_vals)
    runs = np.empty(len(run_lens), dtype=[("l", "<u2"), ("v", "<u2")])
    runs["l"] = run_lens
    runs["v"] = values
    return struct.pack("<I", len(run_lens)) + runs.tobytes()


def _rle_decode_lengths(cur: _Cursor, alphabet_size: int) -> np.ndarray:
    (n_runs,) = struct.unpack("<I", cur.take(4))
    runs = np.frombuffer(cur.take(4 * n_runs), dtype=[("l", "<u2"), ("v", "<u2")])
    run_lens = runs["l"].astype(np.int64)
    if int(run_lens.sum()) != alphabet_size:
        raise FormatError("code-length table does not cover alphabet")
    return np.repeat(runs["v"], run_lens).astype(np.uint16)


def prequantize(t, eb: float) -> np.ndarray:
    """Round values onto the integer lattice of spacing 2*eb.

    Rounding is half-away-from-zero, so quantization never flips the sign
    of a value larger than eb.  Values whose lattice index would overflow
    are saturated (they become outliers downstream).
    """
    if not (eb > 0 and np.isfinite(eb)):
        raise ParameterError(f"eb must be a positive finite real, got {eb}")
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    v = data.astype(np.float64) / (2.0 * eb)
    q = np.sign(v) * np.floor(np.abs(v) + 0.5)
    q = np.clip(q, -float(_LATTICE_LIMIT), float(_LATTICE_LIMIT))
    return q.astype(np.int64)


def lorenzo_encode(
    lattice: np.ndarray, radius: int, force_outlier: np.ndarray | None = None
):
    """Delta-code a lattice stream against its predecessor.

    Returns ``(symbols, outlier_indices)``.  Predictable elements emit
    symbol ``delta + radius`` in [1, 2*radius); symbol 0 marks an outlier.
    The prediction chain always continues with the element's own lattice
    value, so outliers do not desynchronize encoder and decoder.
    """
    if radius < 2:
        raise ParameterError(f"radius must be >= 2, got {radius}")
    lattice = np.asarray(lattice, dtype=np.int64)
    delta = np.diff(lattice, prepend=np.int64(0))
    outlier = np.abs(delta) >= radius
    if force_outlier is not None:
        outlier |= force_outlier
    symbols = np.where(outlier, np.int64(0), delta + np.int64(radius))
    return symbols, np.flatnonzero(outlier).astype(np.int64)


def lorenzo_decode(
    symbols: np.ndarray, outlier_lattice: np.ndarray, radius: int
) -> np.ndarray:
    """Rebuild the lattice from delta symbols plus outlier lattice values."""
    symbols = np.asarray(symbols, dtype=np.int64)
    pos = np.flatnonzero(symbols == 0)
    if len(pos) != len(outlier_lattice):
        raise FormatError(
            f"outlier count mismatch: {len(pos)} markers, "
            f"{len(outlier_lattice)} stored values"
        )
    eff = np.where(symbols == 0, np.int64(0), symbols - np.int64(radius))
    out = np.cumsum(eff)
    if len(pos):
        vals = np.asarray(outlier_lattice, dtype=np.int64)
        # From each outlier onward, rebase the chain on the outlier's value.
        segment_len = np.diff(np.append(pos, len(symbols)))
        out[pos[0] :] += np.repeat(vals - out[pos], segment_len)
    return out


def compress(t: Tensor, params: CodecParams):
    """Compress a 32-bit tensor; returns (CompressedActivation, report).

    Deterministic: identical (tensor, params) produce identical bytes.
    Elements whose reconstruction would violate the error bound (lattice
    saturation, float rounding at the quantization boundary) are forced to
    outliers, which makes the bound hold by construction.
    """
    if t.precision != 4:
        raise ParameterError(
            "compress expects a 32-bit tensor; convert explicitly with astype(4)"
        )
    values = t.data.astype(np.float64)
    eb = float(params.eb)
    lattice = prequantize(values, eb)
    recon = lattice.astype(np.float64) * (2.0 * eb)
    bound_violation = np.abs(values - recon) > eb
    symbols, outlier_idx = lorenzo_encode(
        lattice, params.radius, force_outlier=bound_violation
    )
    lengths, payload, payload_bits = huffman_encode(symbols, params.alphabet_size)
    compressed = CompressedActivation(
        dims=t.dims,
        precision=t.precision,
        params=params,
        outlier_indices=outlier_idx.astype(np.uint64),
        outlier_values=t.data[outlier_idx].astype(np.float32),
        symbol_count=int(symbols.size),
        code_lengths=lengths,
        payload=payload,
        payload_bits=payload_bits,
    )
    blob_len = len(compressed.to_bytes())
    n = t.size
    freqs = np.bincount(symbols, minlength=params.alphabet_size)
    outlier_fraction = len(outlier_idx) / n
    report = CompressionReport(
        original_bytes=n * 4,
        compressed_bytes=blob_len,
        ratio=(n * 4) / blob_len,
        outlier_fraction=outlier_fraction,
        codes_entropy_bits_per_symbol=stream_entropy_bits(freqs),
        outlier_warning=outlier_fraction > 0.5,
    )
    return compressed, report


def decompress(c: CompressedActivation) -> Tensor:
    """Reconstruct the tensor a container describes.

    The re-zero filter (when the container was built with preserve_zeros)
    runs after reconstruction: any value within eb of zero becomes exactly
    zero.  The prediction chain itself always uses unfiltered values.
    """
    n = c.element_count
    if c.symbol_count != n:
        raise FormatError(
            f"symbol count {c.symbol_count} != element count {n}"
        )
    symbols = huffman_decode(c.code_lengths, c.payload, c.payload_bits, n)
    marker_pos = np.flatnonzero(symbols == 0)
    idx = c.outlier_indices.astype(np.int64)
    if len(marker_pos) != len(idx) or not np.array_equal(marker_pos, idx):
        raise FormatError("outlier markers disagree with stored indices")
    eb = float(c.params.eb)
    outlier_values = c.outlier_values.astype(np.float64)
    outlier_lattice = prequantize(outlier_values, eb)
    lattice = lorenzo_decode(symbols, outlier_lattice, c.params.radius)
    recon = lattice.astype(np.float64) * (2.0 * eb)
    if len(idx):
        recon[idx] = outlier_values
    if c.params.preserve_zeros:
        recon[np.abs(recon) <= eb] = 0.0
    return Tensor(recon.reshape(c.dims), precision=8)


def write_compressed(c: CompressedActivation, sink) -> int:
    blob = c.to_bytes()
    if isinstance(sink, (str, bytes)) or hasattr(sink, "__fspath__"):
        with open(sink, "wb") as fh:
            fh.write(blob)
    else:
        sink.write(blob)
    return len(blob)


def read_compressed(source) -> CompressedActivation:
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, "rb") as fh:
            return CompressedActivation.from_bytes(fh.read())
    return CompressedActivation.from_bytes(source.read())
