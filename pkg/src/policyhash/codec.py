"""Binary codes: bit packing, thresholding, Bernoulli sampling and log-likelihood.

Bit ``k`` of a ``K``-bit code lives at bit position ``k % 64`` of 64-bit word
``k // 64`` (little-endian within words). Padding bits above ``K`` are zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EPS


def num_words(code_bits: int) -> int:
    return (code_bits + 63) // 64


@dataclass(frozen=True, eq=False)
class PackedCode:
    """One code (``words`` of shape ``(W,)``) or a stack of them (``(n, W)``)."""

    words: np.ndarray
    code_bits: int

    def __post_init__(self):
        w = np.asarray(self.words, dtype=np.uint64)
        if w.ndim not in (1, 2) or w.shape[-1] != num_words(self.code_bits):
            raise ValueError(f"{self.code_bits}-bit code needs {num_words(self.code_bits)} words, got {w.shape}")
        pad = _padding_mask(self.code_bits)
        if np.any(w[..., -1] & pad):
            raise ValueError("padding bits must be zero")
        object.__setattr__(self, "words", w)

    def __len__(self) -> int:
        return 1 if self.words.ndim == 1 else self.words.shape[0]

    def __getitem__(self, idx) -> "PackedCode":
        if self.words.ndim == 1:
            raise TypeError("single code is not indexable")
        return PackedCode(self.words[idx], self.code_bits)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PackedCode)
            and self.code_bits == other.code_bits
            and np.array_equal(self.words, other.words)
        )

    def bits(self) -> np.ndarray:
        return unpack_bits(self.words, self.code_bits)

    def complement(self) -> "PackedCode":
        return pack_bits(1 - self.bits())


def _padding_mask(code_bits: int) -> np.uint64:
    used = code_bits % 64
    if used == 0:
        return np.uint64(0)
    return np.uint64(~((1 << used) - 1) & 0xFFFFFFFFFFFFFFFF)


_SHIFTS = np.arange(64, dtype=np.uint64)


def pack_bits(bits: np.ndarray) -> PackedCode:
    """Pack a ``(..., K)`` array of 0/1 values."""
    b = np.asarray(bits)
    if b.ndim not in (1, 2):
        raise ValueError(f"expected 1-D or 2-D bits, got shape {b.shape}")
    k = b.shape[-1]
    w = num_words(k)
    padded = np.zeros(b.shape[:-1] + (w * 64,), dtype=np.uint64)
    padded[..., :k] = b != 0
    padded = padded.reshape(b.shape[:-1] + (w, 64))
    words = np.bitwise_or.reduce(padded << _SHIFTS, axis=-1)
    return PackedCode(words, k)


def unpack_bits(words: np.ndarray, code_bits: int) -> np.ndarray:
    """Inverse of :func:`pack_bits`; returns ``uint8`` of shape ``(..., K)``."""
    w = np.asarray(words, dtype=np.uint64)
    bits = (w[..., :, None] >> _SHIFTS) & np.uint64(1)
    return bits.reshape(w.shape[:-1] + (-1,))[..., :code_bits].astype(np.uint8)


def threshold(s: np.ndarray) -> PackedCode:
    """Bit ``k`` is 1 iff ``s_k >= 0.5``."""
    return pack_bits(np.asarray(s) >= 0.5)


def sample(s: np.ndarray, rng: np.random.Generator) -> PackedCode:
    """Draw ``q ~ Bernoulli(s)`` independently per bit.

    One uniform is consumed per bit in row-major order (bit 0 first), and bit
    ``k`` is set iff ``u_k < s_k``, so ``s_k = 1`` always yields 1 and
    ``s_k = 0`` always yields 0.
    """
    s = np.asarray(s, dtype=np.float64)
    u = rng.random(s.shape)
    return pack_bits(u < s)


def _clamp(s: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(s, dtype=np.float64), EPS, 1.0 - EPS)


def _bits_of(q: PackedCode | np.ndarray, k: int) -> np.ndarray:
    if isinstance(q, PackedCode):
        if q.code_bits != k:
            raise ValueError(f"code has {q.code_bits} bits, relaxed code has {k}")
        return q.bits().astype(np.float64)
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != k:
        raise ValueError(f"code has {q.shape[-1]} bits, relaxed code has {k}")
    return q


def log_prob(s: np.ndarray, q: PackedCode | np.ndarray) -> np.ndarray | float:
    """``sum_k q_k log s_k + (1 - q_k) log(1 - s_k)`` with ``s`` clamped to ``[EPS, 1-EPS]``.

    Batched inputs give one value per row.
    """
    sc = _clamp(s)
    qb = _bits_of(q, sc.shape[-1])
    out = np.sum(qb * np.log(sc) + (1.0 - qb) * np.log1p(-sc), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def log_prob_grad(s: np.ndarray, q: PackedCode | np.ndarray) -> np.ndarray:
    """Elementwise derivative of :func:`log_prob` with respect to ``s``."""
    sc = _clamp(s)
    qb = _bits_of(q, sc.shape[-1])
    return qb / sc - (1.0 - qb) / (1.0 - sc)
