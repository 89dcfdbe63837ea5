"""Canonical Huffman coding over a bounded integer alphabet.

The code is fully described by its per-symbol code lengths: codes are
assigned in (length, symbol) order, so encoder and decoder only ever
exchange the length table.  Bit order is MSB-first within each byte.

Encoding is vectorized with numpy; the decoder's bit loop is JIT-compiled
with numba when available and falls back to pure Python otherwise.
"""
from __future__ import annotations

import heapq

import numpy as np

from .errors import FormatError, ParameterError

try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via forced fallback
    _HAVE_NUMBA = False

    def _njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


MAX_CODE_LENGTH = 63  # codes are manipulated as uint64 bit patterns


def build_code_lengths(freqs: np.ndarray) -> np.ndarray:
    """Huffman code lengths (uint16) from symbol frequencies.

    Symbols with zero frequency get length 0 (no code).  A degenerate
    alphabet with a single distinct symbol gets a 1-bit code so the payload
    stays self-delimiting.  Tie-breaking is deterministic (symbol order).
    """
    freqs = np.asarray(freqs)
    n = len(freqs)
    live = np.flatnonzero(freqs > 0)
    lengths = np.zeros(n, dtype=np.uint16)
    if live.size == 0:
        return lengths
    if live.size == 1:
        lengths[live[0]] = 1
        return lengths

    # heap entries: (freq, tiebreak, node); leaves are ints, internal nodes
    # are (left, right) tuples.  tiebreak keeps the build deterministic.
    heap = [(int(freqs[s]), int(s), int(s)) for s in live]
    heapq.heapify(heap)
    counter = n
    while len(heap) > 1:
        f1, _, n1 = heapq.heappop(heap)
        f2, _, n2 = heapq.heappop(heap)
        heapq.heappush(heap, (f1 + f2, counter, (n1, n2)))
        counter += 1

    stack = [(heap[0][2], 0)]
    while stack:
        node, depth = stack.pop()
        if isinstance(node, tuple):
            stack.append((node[0], depth + 1))
            stack.append((node[1], depth + 1))
        else:
            lengths[node] = max(1, depth)
    if int(lengths.max()) > MAX_CODE_LENGTH:
        raise ParameterError("Huffman code length exceeds 63 bits")
    return lengths


def canonical_codes(lengths: np.ndarray) -> np.ndarray:
    """Per-symbol canonical code values (uint64); 0 where length is 0."""
    lengths = np.asarray(lengths, dtype=np.int64)
    codes = np.zeros(len(lengths), dtype=np.uint64)
    coded = np.flatnonzero(lengths > 0)
    if coded.size == 0:
        return codes
    order = coded[np.lexsort((coded, lengths[coded]))]
    code = 0
    prev_len = int(lengths[order[0]])
    for sym in order:
        length = int(lengths[sym])
        code <<= length - prev_len
        codes[sym] = code
        code += 1
        prev_len = length
    return codes


def _decode_tables(lengths: np.ndarray):
    """first_code / symbol-count / base-index per code length, plus the
    symbol list in canonical order."""
    lengths = np.asarray(lengths, dtype=np.int64)
    max_len = int(lengths.max(initial=0))
    counts = np.zeros(max_len + 1, dtype=np.int64)
    for l in lengths[lengths > 0]:
        counts[l] += 1
    first_code = np.zeros(max_len + 1, dtype=np.int64)
    base = np.zeros(max_len + 1, dtype=np.int64)
    code = 0
    idx = 0
    for l in range(1, max_len + 1):
        code <<= 1
        first_code[l] = code
        base[l] = idx
        code += counts[l]
        idx += counts[l]
    coded = np.flatnonzero(lengths > 0)
    order = coded[np.lexsort((coded, lengths[coded]))]
    return first_code, counts, base, order.astype(np.int64)


@_njit(cache=True)
def _decode_bits(payload, bit_length, count, first_code, counts, base, syms, out):
    """Sequential canonical decode; returns bits consumed or -1/-2 on error."""
    max_len = len(counts) - 1
    code = 0
    length = 0
    emitted = 0
    for pos in range(bit_length):
        byte = payload[pos >> 3]
        bit = (byte >> (7 - (pos & 7))) & 1
        code = (code << 1) | bit
        length += 1
        if length > max_len:
            return -2
        offset = code - first_code[length]
        if 0 <= offset < counts[length]:
            out[emitted] = syms[base[length] + offset]
            emitted += 1
            if emitted == count:
                return pos + 1
            code = 0
            length = 0
    return -1


def _decode_bits_py(payload, bit_length, count, first_code, counts, base, syms, out):
    max_len = len(counts) - 1
    code = 0
    length = 0
    emitted = 0
    for pos in range(bit_length):
        byte = payload[pos >> 3]
        bit = (byte >> (7 - (pos & 7))) & 1
        code = (code << 1) | bit
        length += 1
        if length > max_len:
            return -2
        offset = code - first_code[length]
        if 0 <= offset < counts[length]:
            out[emitted] = syms[base[length] + offset]
            emitted += 1
            if emitted == count:
                return pos + 1
            code = 0
            length = 0
    return -1


_ENCODE_CHUNK = 1 << 18


def huffman_encode(symbols: np.ndarray, alphabet_size: int):
    """Encode a symbol stream.

    Returns ``(lengths, payload, bit_length)`` where ``lengths`` is the
    uint16 canonical code-length table indexed by symbol, ``payload`` the
    packed bitstream, and ``bit_length`` the number of meaningful bits.
    """
    symbols = np.asarray(symbols, dtype=np.int64)
    if alphabet_size < 1:
        raise ParameterError("alphabet_size must be >= 1")
    if symbols.size and (symbols.min() < 0 or symbols.max() >= alphabet_size):
        raise ParameterError("symbol out of alphabet range")
    freqs = np.bincount(symbols, minlength=alphabet_size)
    lengths = build_code_lengths(freqs)
    if symbols.size == 0:
        return lengths, b"", 0
    codes = canonical_codes(lengths)
    lens64 = lengths.astype(np.int64)
    total_bits = int(lens64[symbols].sum())
    bits = np.empty(total_bits, dtype=np.uint8)
    filled = 0
    for start in range(0, symbols.size, _ENCODE_CHUNK):
        chunk = symbols[start : start + _ENCODE_CHUNK]
        clens = lens64[chunk]
        ccodes = codes[chunk]
        nbits = int(clens.sum())
        rep_codes = np.repeat(ccodes, clens)
        rep_lens = np.repeat(clens, clens)
        ends = np.cumsum(clens)
        within = np.arange(nbits, dtype=np.int64) - np.repeat(ends - clens, clens)
        shift = (rep_lens - 1 - within).astype(np.uint64)
        bits[filled : filled + nbits] = ((rep_codes >> shift) & np.uint64(1)).astype(
            np.uint8
        )
        filled += nbits
    payload = np.packbits(bits).tobytes()
    return lengths, payload, total_bits


def huffman_decode(
    lengths: np.ndarray, payload: bytes, bit_length: int, count: int
) -> np.ndarray:
    """Decode ``count`` symbols; raises FormatError on a malformed stream."""
    if count == 0:
        return np.empty(0, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if not np.any(lengths > 0):
        raise FormatError("empty code table with nonzero symbol count")
    if bit_length > len(payload) * 8:
        raise FormatError("payload shorter than declared bit length")
    first_code, counts, base, syms = _decode_tables(lengths)
    out = np.empty(count, dtype=np.int64)
    buf = np.frombuffer(payload, dtype=np.uint8)
    kernel = _decode_bits if _HAVE_NUMBA else _decode_bits_py
    consumed = kernel(
        buf, int(bit_length), int(count), first_code, counts, base, syms, out
    )
    if consumed == -1:
        raise FormatError("bitstream exhausted before all symbols decoded")
    if consumed == -2:
        raise FormatError("invalid code in bitstream")
    if consumed != bit_length:
        raise FormatError(
            f"bitstream length mismatch: consumed {consumed} of {bit_length} bits"
        )
    return out


def stream_entropy_bits(freqs: np.ndarray) -> float:
    """Empirical Shannon entropy of a symbol stream, in bits/symbol."""
    freqs = np.asarray(freqs, dtype=np.float64)
    total = freqs.sum()
    if total == 0:
        return 0.0
    p = freqs[freqs > 0] / total
    return float(-(p * np.log2(p)).sum())
