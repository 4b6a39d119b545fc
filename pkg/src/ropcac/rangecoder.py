"""Byte-oriented range coder over 16-bit quantized CDF tables.

Pure-integer arithmetic: 32-bit range, byte renormalization at 2^24, and
explicit carry propagation through a cached byte plus a run of pending
0xFF bytes.  Identical inputs produce identical bytes on any platform.
"""

from __future__ import annotations

import numpy as np

CDF_BITS = 16
CDF_TOTAL = 1 << CDF_BITS
MAX_ALPHABET = 1 << 15
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class CdfTable:
    """Cumulative counts summing to 2^16, every symbol at least 1 count."""

    __slots__ = ("counts", "cum", "escape")

    def __init__(self, counts: np.ndarray, escape: int | None = None):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 1 or len(counts) == 0:
            raise ValueError("counts must be a non-empty 1-D array")
        if len(counts) > MAX_ALPHABET:
            raise ValueError(f"alphabet {len(counts)} exceeds {MAX_ALPHABET}")
        if counts.min() < 1:
            raise ValueError("every symbol needs at least one count")
        if counts.sum() != CDF_TOTAL:
            raise ValueError(f"counts must sum to {CDF_TOTAL}")
        self.counts = counts
        self.cum = np.concatenate(([0], np.cumsum(counts)))
        self.escape = escape

    def __len__(self) -> int:
        return len(self.counts)


def quantize_cdf(masses: np.ndarray, escape: int | None = None) -> CdfTable:
    """Largest-remainder allocation of 2^16 counts, floor one per symbol."""
    m = np.asarray(masses, dtype=np.float64)
    if m.ndim != 1 or len(m) == 0:
        raise ValueError("masses must be a non-empty 1-D array")
    if len(m) > MAX_ALPHABET:
        raise ValueError(f"alphabet {len(m)} exceeds {MAX_ALPHABET}")
    if not np.isfinite(m).all() or (m <= 0).any():
        raise ValueError("masses must be positive and finite")
    ideal = m / m.sum() * CDF_TOTAL
    counts = np.floor(ideal).astype(np.int64)
    deficit = CDF_TOTAL - int(counts.sum())
    if deficit:
        order = np.argsort(-(ideal - counts), kind="stable")
        counts[order[:deficit]] += 1
    zero = counts == 0
    take = int(zero.sum())
    counts[zero] = 1
    while take > 0:
        i = int(np.argmax(counts))
        counts[i] -= 1
        take -= 1
    return CdfTable(counts, escape)


def quantize_cdf_rows(masses: np.ndarray) -> np.ndarray:
    """Vectorized quantize_cdf over rows; returns (M, A) int64 counts."""
    m = np.asarray(masses, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] == 0 or m.shape[1] > MAX_ALPHABET:
        raise ValueError("masses must be M x A with 0 < A <= 2^15")
    if not np.isfinite(m).all() or (m <= 0).any():
        raise ValueError("masses must be positive and finite")
    ideal = m / m.sum(axis=1, keepdims=True) * CDF_TOTAL
    counts = np.floor(ideal).astype(np.int64)
    deficit = CDF_TOTAL - counts.sum(axis=1)
    order = np.argsort(-(ideal - counts), axis=1, kind="stable")
    rank = np.empty_like(order)
    rows = np.arange(m.shape[0])[:, None]
    rank[rows, order] = np.arange(m.shape[1])[None, :]
    counts[rank < deficit[:, None]] += 1
    zero = counts == 0
    need = zero.sum(axis=1)
    counts[zero] = 1
    for r in np.flatnonzero(need):
        take = int(need[r])
        row = counts[r]
        while take > 0:
            i = int(np.argmax(row))
            row[i] -= 1
            take -= 1
    return counts


_UNIFORM_256 = CdfTable(np.full(256, CDF_TOTAL // 256, dtype=np.int64))


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1  # the first flushed byte is a dummy zero
        self.out = bytearray()

    def _shift_low(self):
        low32 = self.low & _MASK32
        if low32 < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            self.out.append((self.cache + carry) & 0xFF)
            for _ in range(self.cache_size - 1):
                self.out.append((0xFF + carry) & 0xFF)
            self.cache_size = 0
            self.cache = low32 >> 24
        self.cache_size += 1
        self.low = (low32 << 8) & _MASK32

    def encode_symbol(self, table: CdfTable, sym: int):
        if not 0 <= sym < len(table):
            raise ValueError(f"symbol {sym} outside alphabet of {len(table)}")
        cum = table.cum
        r = self.range >> CDF_BITS
        self.low += r * int(cum[sym])
        self.range = r * int(cum[sym + 1] - cum[sym])
        while self.range < _TOP:
            self._shift_low()
            self.range = (self.range << 8) & _MASK32

    def encode_raw_u32(self, value: int):
        if not 0 <= value <= _MASK32:
            raise ValueError("raw payload must fit in 32 bits")
        for shift in (24, 16, 8, 0):
            self.encode_symbol(_UNIFORM_256, (value >> shift) & 0xFF)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.code = 0
        self.range = _MASK32
        for _ in range(5):
            self.code = (self.code << 8) | self._byte()
        self.code &= _MASK32  # drop the encoder's dummy leading byte

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise ValueError("truncated range-coded stream")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_symbol(self, table: CdfTable) -> int:
        cum = table.cum
        r = self.range >> CDF_BITS
        target = min(self.code // r, CDF_TOTAL - 1)
        sym = int(np.searchsorted(cum, target, side="right")) - 1
        self.code -= r * int(cum[sym])
        self.range = r * int(cum[sym + 1] - cum[sym])
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range = (self.range << 8) & _MASK32
        return sym

    def decode_raw_u32(self) -> int:
        value = 0
        for _ in range(4):
            value = (value << 8) | self.decode_symbol(_UNIFORM_256)
        return value


def encode(symbols, tables) -> bytes:
    """Encode a symbol sequence; ``tables`` is one CdfTable or one per symbol."""
    symbols = list(symbols)
    if isinstance(tables, CdfTable):
        tables = [tables] * len(symbols)
    if len(tables) != len(symbols):
        raise ValueError(f"{len(symbols)} symbols but {len(tables)} tables")
    enc = RangeEncoder()
    for sym, table in zip(symbols, tables):
        enc.encode_symbol(table, int(sym))
    return enc.finish()


def decode(data: bytes, tables, n: int) -> list[int]:
    if isinstance(tables, CdfTable):
        tables = [tables] * n
    if len(tables) != n:
        raise ValueError(f"{n} symbols requested but {len(tables)} tables")
    dec = RangeDecoder(data)
    return [dec.decode_symbol(table) for table in tables]
