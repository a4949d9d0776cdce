"""Seed expansion into residue vectors with AES-128 in counter mode."""

from __future__ import annotations

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from ..shprg import reduce_mod, residue_dtype

_IV = bytes(16)
_zeros = bytearray()


def _zero_bytes(n: int) -> memoryview:
    global _zeros
    if len(_zeros) < n:
        _zeros = bytearray(max(n, 2 * len(_zeros)))
    return memoryview(_zeros)[:n]


def prg_expand(seed: bytes, length: int, modulus_bits: int) -> np.ndarray:
    """Expand a 16-byte seed to ``length`` uniform residues mod ``2^modulus_bits``.

    Words are 4 bytes for moduli up to 2^32 and 8 bytes above, little-endian;
    the returned array is read-only.
    """
    if len(seed) != 16:
        raise ValueError("PRG seeds are 16 bytes")
    dtype = residue_dtype(modulus_bits)
    enc = Cipher(algorithms.AES(seed), modes.CTR(_IV)).encryptor()
    raw = enc.update(_zero_bytes(length * dtype.itemsize))
    out = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).view(dtype)
    if modulus_bits < dtype.itemsize * 8:
        out = reduce_mod(out.copy(), modulus_bits)
    return out
