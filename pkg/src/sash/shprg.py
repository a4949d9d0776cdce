"""Almost seed-homomorphic PRG built on Learning With Rounding.

``G(s) = round(A^T s * p / q) mod p`` with a public ``mu x M`` matrix ``A``
over ``Z_q``.  Because the inner product is linear mod ``q`` and rounding
loses at most half a unit on each side, ``G(s1) + G(s2) - G(s1 + s2)`` has
every coordinate in ``{-1, 0, 1}`` mod ``p``; for ``n`` seeds the residual is
bounded by ``n - 1``.

Both moduli are powers of two so all arithmetic mod ``q`` is native uint64
wrapping.  The matrix is expanded from a 32-byte public seed with AES-256 in
counter mode, so every party derives identical bits without exchanging it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from . import _kernels
from .errors import ConfigError, NoSurvivorsError
from .records import dump_record, parse_record

# Bytes of keystream produced per AES call while filling the matrix.
_DERIVE_CHUNK = 1 << 22

# Column block for the batched kernel: 64 columns x 512 x 8 B = 256 KiB.
_BATCH_BLOCK = 64


@dataclass(frozen=True)
class ShprgParams:
    """Public parameters of the generator.

    ``output_len`` is the number of mask coordinates (the model size ``M``).
    """

    output_len: int
    mu: int = 512
    big_modulus_log2: int = 64
    small_modulus_log2: int = 32
    matrix_seed: bytes = bytes(32)

    def __post_init__(self) -> None:
        if self.mu < 1 or self.output_len < 1:
            raise ConfigError("mu and output_len must be positive")
        if not 0 < self.small_modulus_log2 < self.big_modulus_log2 <= 64:
            raise ConfigError(
                f"need 0 < log2 p < log2 q <= 64, got p=2^{self.small_modulus_log2}, "
                f"q=2^{self.big_modulus_log2}"
            )
        if self.mu >= self.output_len:
            raise ConfigError(f"mu={self.mu} must be smaller than output_len={self.output_len}")
        gap = self.big_modulus_log2 - self.small_modulus_log2
        if gap < math.ceil(math.log2(math.sqrt(self.mu))):
            raise ConfigError(f"q/p = 2^{gap} is below sqrt(mu) for mu={self.mu}")
        if len(self.matrix_seed) != 32:
            raise ConfigError("matrix_seed must be exactly 32 bytes")

    @property
    def q(self) -> int:
        return 1 << self.big_modulus_log2

    @property
    def p(self) -> int:
        return 1 << self.small_modulus_log2

    @property
    def mask_dtype(self) -> np.dtype:
        return residue_dtype(self.small_modulus_log2)

    def to_record(self) -> str:
        return dump_record(
            {
                "mu": self.mu,
                "big_modulus_log2": self.big_modulus_log2,
                "small_modulus_log2": self.small_modulus_log2,
                "output_len": self.output_len,
                "matrix_seed": self.matrix_seed,
            }
        )

    @classmethod
    def from_record(cls, text: str) -> "ShprgParams":
        raw = parse_record(text)
        return cls(
            output_len=int(raw["output_len"]),
            mu=int(raw.get("mu", 512)),
            big_modulus_log2=int(raw.get("big_modulus_log2", 64)),
            small_modulus_log2=int(raw.get("small_modulus_log2", 32)),
            matrix_seed=bytes.fromhex(raw.get("matrix_seed", "00" * 32)),
        )


def residue_dtype(bits: int) -> np.dtype:
    """Smallest unsigned dtype whose native wrapping is a multiple of ``2^bits``."""
    if not 0 < bits <= 64:
        raise ConfigError(f"modulus 2^{bits} unsupported")
    return np.dtype(np.uint32) if bits <= 32 else np.dtype(np.uint64)


def reduce_mod(values: np.ndarray, bits: int) -> np.ndarray:
    """Reduce a wrapped uint array mod ``2^bits`` in place and return it."""
    if bits < values.dtype.itemsize * 8:
        values &= values.dtype.type((1 << bits) - 1)
    return values


@dataclass(frozen=True, eq=False)
class PublicMatrix:
    """The public matrix ``A``, stored column-major.

    ``columns[j]`` is column ``j`` of ``A`` (length ``mu``), contiguous, so
    evaluation streams over output coordinates.  ``eval_count`` counts
    length-``M`` evaluations performed against this matrix (instrumentation
    only; it never affects the entries).
    """

    params: ShprgParams
    columns: np.ndarray
    _stats: dict = field(default_factory=lambda: {"evals": 0}, repr=False)

    @property
    def entries(self) -> np.ndarray:
        """``mu x M`` view of ``A`` (no copy)."""
        return self.columns.T

    @property
    def eval_count(self) -> int:
        return self._stats["evals"]

    def column(self, j: int) -> np.ndarray:
        return self.columns[j]


def derive_matrix(params: ShprgParams) -> PublicMatrix:
    """Expand ``params.matrix_seed`` into ``A``.

    Entry ``(i, j)`` is little-endian keystream word ``j * mu + i`` of
    AES-256-CTR (key = seed, initial counter block zero), reduced mod ``q``.
    """
    if not isinstance(params, ShprgParams):
        raise ConfigError("derive_matrix needs ShprgParams")
    count = params.mu * params.output_len
    words = np.empty(count, dtype="<u8")
    out = words.view(np.uint8)
    encryptor = Cipher(algorithms.AES(params.matrix_seed), modes.CTR(bytes(16))).encryptor()
    zeros = bytes(_DERIVE_CHUNK)
    pos = 0
    total = out.shape[0]
    while pos < total:
        n = min(_DERIVE_CHUNK, total - pos)
        out[pos : pos + n] = np.frombuffer(encryptor.update(zeros[:n]), dtype=np.uint8)
        pos += n
    columns = words.view(np.uint64).reshape(params.output_len, params.mu)
    if params.big_modulus_log2 < 64:
        columns &= np.uint64(params.q - 1)
    columns.setflags(write=False)
    return PublicMatrix(params=params, columns=columns)


def round_scale(x, params: ShprgParams):
    """``round(x * p / q) mod p`` with ties rounded up.

    Accepts a Python int or a uint64 array of residues mod ``q``.
    """
    shift = params.big_modulus_log2 - params.small_modulus_log2
    half = 1 << (shift - 1)
    if isinstance(x, np.ndarray):
        arr = np.asarray(x, dtype=np.uint64)
        # Wrapping the addition mod 2^64 is harmless: 2^64 / 2^shift is a
        # multiple of p, so the shifted value stays correct mod p.
        scaled = (arr + np.uint64(half)) >> np.uint64(shift)
        return (scaled & np.uint64(params.p - 1)).astype(params.mask_dtype)
    if not 0 <= x < params.q:
        raise ValueError("x must be a residue mod q")
    return ((x + half) >> shift) % params.p


def _check_key(matrix: PublicMatrix, key: np.ndarray) -> np.ndarray:
    key = np.ascontiguousarray(key, dtype=np.uint64)
    if key.ndim != 1 or key.shape[0] != matrix.params.mu:
        raise ConfigError(f"key length {key.shape} does not match mu={matrix.params.mu}")
    return key


def evaluate(matrix: PublicMatrix, key: np.ndarray) -> np.ndarray:
    """Compute the mask ``G(key)`` of length ``M`` (dtype per ``p``)."""
    key = _check_key(matrix, key)
    acc = _kernels.inner_products(matrix.columns, key)
    matrix._stats["evals"] += 1
    return _round_inner(acc, matrix.params)


def evaluate_many(matrix: PublicMatrix, keys: np.ndarray) -> np.ndarray:
    """Evaluate a ``(B, mu)`` stack of keys; row ``b`` equals ``evaluate(keys[b])``."""
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    if keys.ndim != 2 or keys.shape[1] != matrix.params.mu:
        raise ConfigError(f"keys shape {keys.shape} does not match mu={matrix.params.mu}")
    acc = _kernels.inner_products_many(matrix.columns, keys, _BATCH_BLOCK)
    matrix._stats["evals"] += keys.shape[0]
    return _round_inner(acc, matrix.params)


def _round_inner(acc: np.ndarray, params: ShprgParams) -> np.ndarray:
    if params.big_modulus_log2 < 64:
        acc &= np.uint64(params.q - 1)
    return round_scale(acc, params)


def random_key(params: ShprgParams, rng: np.random.Generator) -> np.ndarray:
    """Sample a uniform masking key in ``Z_q^mu``."""
    key = rng.integers(0, 1 << 64, size=params.mu, dtype=np.uint64, endpoint=False)
    if params.big_modulus_log2 < 64:
        key &= np.uint64(params.q - 1)
    return key


def key_sum(keys: Sequence[np.ndarray], params: ShprgParams) -> np.ndarray:
    """Coordinate-wise sum of masking keys mod ``q``."""
    if len(keys) == 0:
        raise NoSurvivorsError("no masking keys to sum")
    total = np.zeros(params.mu, dtype=np.uint64)
    for key in keys:
        key = np.asarray(key, dtype=np.uint64)
        if key.shape != (params.mu,):
            raise ConfigError(f"key length {key.shape} does not match mu={params.mu}")
        total += key
    if params.big_modulus_log2 < 64:
        total &= np.uint64(params.q - 1)
    return total


def centered(diff: np.ndarray, bits: int) -> np.ndarray:
    """Interpret residues mod ``2^bits`` as signed values in ``[-2^(bits-1), 2^(bits-1))``."""
    modulus = 1 << bits
    vals = np.asarray(diff, dtype=np.uint64) & np.uint64(modulus - 1)
    signed = vals.astype(np.int64) if bits < 64 else vals.view(np.int64)
    if bits < 64:
        signed = np.where(signed >= modulus // 2, signed - modulus, signed)
    return signed
