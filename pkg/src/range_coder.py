"""
Carry-less range coder (Subbotin style) over 16-bit quantised CDFs.

State is a 64-bit low/range pair; renormalisation emits 16-bit words, so
every frequency total up to 2^16 can be coded without carries. All state
arithmetic is integer-only, which keeps encoder and decoder bit-exact on
every platform.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np

from codec_errors import BitstreamError

logger = logging.getLogger(__name__)

PRECISION_BITS = 16
CDF_TOTAL = 1 << PRECISION_BITS

_MASK = (1 << 64) - 1
_TOP = 1 << 48
_BOT = 1 << 32
_WORD_SHIFT = 48
_FLUSH_WORDS = 4


@dataclass(frozen=True)
class CodedCdf:
    """Integer symbol frequencies summing to 2^16, every symbol at least 1."""
    frequencies: np.ndarray

    @property
    def cumulative(self) -> np.ndarray:
        """Upper cumulative bounds, ending at 2^16."""
        return np.cumsum(self.frequencies)

    @property
    def starts(self) -> np.ndarray:
        return self.cumulative - self.frequencies

    def __len__(self) -> int:
        return len(self.frequencies)

    def probabilities(self) -> np.ndarray:
        return self.frequencies / CDF_TOTAL


def quantize_cdf(probabilities: Sequence[float]) -> CodedCdf:
    """
    Deterministic 16-bit frequency table for a probability vector.

    Frequencies start at floor(p * 2^16), raised to at least 1. Missing
    counts go to the largest remainders, surplus counts are taken from the
    most over-allocated symbols still above 1 (ties go to the lower index).
    For p >= 2^-16 every frequency is the floor or ceiling of p * 2^16.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    n = p.size
    if n == 0 or n > CDF_TOTAL:
        raise ValueError(f"Alphabet size {n} not codable with {PRECISION_BITS}-bit frequencies")
    total = p.sum()
    if not np.isfinite(total) or total <= 0 or np.any(p < 0):
        raise ValueError("Probabilities must be non-negative with a positive finite sum")
    scaled = p / total * CDF_TOTAL
    freq = np.maximum(np.floor(scaled).astype(np.int64), 1)
    leftover = CDF_TOTAL - int(freq.sum())
    if leftover > 0:
        order = np.argsort(-(scaled - freq), kind="stable")
        freq[order[:leftover]] += 1
    while leftover < 0:
        candidates = np.flatnonzero(freq > 1)
        order = candidates[np.argsort((scaled - freq)[candidates], kind="stable")]
        take = order[:-leftover]
        freq[take] -= 1
        leftover += len(take)
    return CodedCdf(freq)


class RangeEncoder:
    """Accumulates symbols into 16-bit words; call finish() to flush."""

    def __init__(self):
        self.low = 0
        self.range = _MASK
        self._words: List[int] = []
        self._finished = False
        self.symbols = 0

    def encode_freq(self, start: int, freq: int, total: int) -> None:
        if self._finished:
            raise RuntimeError("Encoder already finished")
        if not (0 <= start and freq > 0 and start + freq <= total <= CDF_TOTAL):
            raise ValueError(f"Invalid frequency interval [{start}, {start + freq}) of {total}")
        r = self.range // total
        self.low = (self.low + start * r) & _MASK
        self.range = freq * r
        self.symbols += 1
        self._normalize()

    def encode_symbol(self, symbol: int, cdf: CodedCdf) -> None:
        freq = int(cdf.frequencies[symbol])
        start = int(cdf.cumulative[symbol]) - freq
        self.encode_freq(start, freq, CDF_TOTAL)

    def encode_literal(self, value: int, bits: int = 16) -> None:
        """Raw value in [0, 2^bits) with a flat distribution (bits <= 16)."""
        if not 0 < bits <= PRECISION_BITS or not 0 <= value < (1 << bits):
            raise ValueError(f"Literal {value} does not fit in {bits} bits")
        self.encode_freq(value, 1, 1 << bits)

    def _normalize(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range)) < _TOP:
                pass
            elif self.range < _BOT:
                self.range = (-self.low) & (_BOT - 1)
            else:
                break
            self._words.append(self.low >> _WORD_SHIFT)
            self.low = (self.low << 16) & _MASK
            self.range = (self.range << 16) & _MASK

    def finish(self) -> bytes:
        if not self._finished:
            for _ in range(_FLUSH_WORDS):
                self._words.append(self.low >> _WORD_SHIFT)
                self.low = (self.low << 16) & _MASK
            self._finished = True
        return self.getvalue()

    def getvalue(self) -> bytes:
        return np.asarray(self._words, dtype=">u2").tobytes()

    @property
    def bit_count(self) -> int:
        return 16 * len(self._words)


class RangeDecoder:
    """Mirror of RangeEncoder; raises BitstreamError when the payload runs out."""

    def __init__(self, payload: bytes):
        if len(payload) % 2:
            raise BitstreamError("Range-coded payload must hold whole 16-bit words")
        self._words = np.frombuffer(payload, dtype=">u2").astype(np.int64).tolist()
        self._pos = 0
        self.low = 0
        self.range = _MASK
        self.code = 0
        for _ in range(_FLUSH_WORDS):
            self.code = (self.code << 16) | self._read_word()

    def _read_word(self) -> int:
        if self._pos >= len(self._words):
            raise BitstreamError("Range-coded payload truncated")
        word = self._words[self._pos]
        self._pos += 1
        return word

    def _normalize(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range)) < _TOP:
                pass
            elif self.range < _BOT:
                self.range = (-self.low) & (_BOT - 1)
            else:
                break
            self.code = ((self.code << 16) | self._read_word()) & _MASK
            self.low = (self.low << 16) & _MASK
            self.range = (self.range << 16) & _MASK

    def decode_freq(self, total: int) -> int:
        """Target cumulative count; must be followed by update()."""
        self._r = self.range // total
        value = ((self.code - self.low) & _MASK) // self._r
        if value >= total:
            raise BitstreamError("Corrupt range-coded payload")
        return value

    def update(self, start: int, freq: int) -> None:
        self.low = (self.low + start * self._r) & _MASK
        self.range = freq * self._r
        self._normalize()

    def decode_symbol(self, cdf: CodedCdf) -> int:
        value = self.decode_freq(CDF_TOTAL)
        cumulative = cdf.cumulative
        symbol = int(np.searchsorted(cumulative, value, side="right"))
        freq = int(cdf.frequencies[symbol])
        self.update(int(cumulative[symbol]) - freq, freq)
        return symbol

    def decode_literal(self, bits: int = 16) -> int:
        value = self.decode_freq(1 << bits)
        self.update(value, 1)
        return value

    @property
    def words_consumed(self) -> int:
        return self._pos


def encode_symbols(symbols: Iterable[int], cdfs: Iterable[CodedCdf]) -> bytes:
    encoder = RangeEncoder()
    for symbol, cdf in zip(symbols, cdfs):
        encoder.encode_symbol(symbol, cdf)
    return encoder.finish()


def decode_symbols(payload: bytes, cdfs: Iterable[CodedCdf]) -> List[int]:
    decoder = RangeDecoder(payload)
    return [decoder.decode_symbol(cdf) for cdf in cdfs]
