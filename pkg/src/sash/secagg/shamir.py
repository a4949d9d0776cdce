"""Shamir secret sharing of byte strings over GF(2^64 - 59).

A secret is read as a little-endian integer and cut into 61-bit chunks, each
shared with its own degree ``t - 1`` polynomial; a share therefore holds one
field element per chunk.  Chunks always fit below the prime, so round trips
are exact for any byte string.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .. import _kernels
from .._kernels import FIELD_PRIME

CHUNK_BITS = 61
_CHUNK_MASK = (1 << CHUNK_BITS) - 1
_HEADER = struct.Struct("<IHHH")


@dataclass(frozen=True)
class ShamirShare:
    """One party's share: evaluation point ``index`` and one value per chunk."""

    index: int
    values: tuple[int, ...]
    threshold: int
    length: int

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(self.index, self.threshold, self.length, len(self.values))
        return head + np.asarray(self.values, dtype="<u8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ShamirShare":
        index, threshold, length, count = _HEADER.unpack_from(raw)
        body = raw[_HEADER.size :]
        if len(body) != 8 * count:
            raise ValueError("truncated share")
        values = tuple(int(v) for v in np.frombuffer(body, dtype="<u8"))
        return cls(index=index, values=values, threshold=threshold, length=length)


def chunk_count(length: int) -> int:
    return max(1, -(-length * 8 // CHUNK_BITS))


def _to_chunks(secret: bytes) -> list[int]:
    value = int.from_bytes(secret, "little")
    return [(value >> (CHUNK_BITS * i)) & _CHUNK_MASK for i in range(chunk_count(len(secret)))]


def _from_chunks(chunks: Iterable[int], length: int) -> bytes:
    value = 0
    for i, chunk in enumerate(chunks):
        if chunk >> CHUNK_BITS:
            raise ValueError("reconstructed chunk exceeds 61 bits")
        value |= chunk << (CHUNK_BITS * i)
    if value >> (8 * length):
        raise ValueError("reconstructed secret longer than declared length")
    return value.to_bytes(length, "little")


def shamir_share(
    secret: bytes,
    t: int,
    n: int,
    rng: np.random.Generator,
    indices: Sequence[int] | None = None,
) -> list[ShamirShare]:
    """Split ``secret`` into ``n`` shares, any ``t`` of which reconstruct it.

    ``indices`` overrides the default evaluation points ``1..n``.
    """
    if not 1 < t <= n:
        raise ValueError(f"need 1 < t <= n, got t={t}, n={n}")
    if indices is None:
        indices = range(1, n + 1)
    xs = np.asarray(list(indices), dtype=np.uint64)
    if xs.shape[0] != n or len(set(xs.tolist())) != n or np.any(xs == 0):
        raise ValueError("need n distinct nonzero evaluation indices")
    if len(secret) > 0xFFFF:
        raise ValueError("secret too long")
    chunks = _to_chunks(secret)
    coeffs = np.empty((len(chunks), t), dtype=np.uint64)
    coeffs[:, 0] = chunks
    coeffs[:, 1:] = rng.integers(0, FIELD_PRIME, size=(len(chunks), t - 1), dtype=np.uint64)
    values = _kernels.poly_eval(coeffs, xs)
    return [
        ShamirShare(index=int(x), values=tuple(row.tolist()), threshold=t, length=len(secret))
        for x, row in zip(xs.tolist(), values)
    ]


@lru_cache(maxsize=256)
def _lagrange(indices: tuple[int, ...]) -> np.ndarray:
    return _kernels.lagrange_at_zero(np.asarray(indices, dtype=np.uint64))


def shamir_reconstruct(shares: Sequence[ShamirShare]) -> bytes:
    """Recover the secret from at least ``threshold`` distinct shares.

    Only the ``threshold`` shares with the smallest indices are used, so a
    caller reconstructing many secrets from the same index set pays for the
    Lagrange coefficients once.
    """
    if not shares:
        raise ValueError("no shares given")
    t = shares[0].threshold
    length = shares[0].length
    width = len(shares[0].values)
    seen = set()
    for share in shares:
        if share.index in seen:
            raise ValueError(f"duplicate share index {share.index}")
        seen.add(share.index)
        if share.threshold != t or share.length != length or len(share.values) != width:
            raise ValueError("shares belong to different sharings")
    if len(shares) < t:
        raise ValueError(f"need {t} shares, got {len(shares)}")
    chosen = sorted(shares, key=lambda s: s.index)[:t]
    lams = _lagrange(tuple(s.index for s in chosen))
    values = np.array([s.values for s in chosen], dtype=np.uint64)
    chunks = _kernels.combine(lams, values)
    return _from_chunks(chunks.tolist(), length)
