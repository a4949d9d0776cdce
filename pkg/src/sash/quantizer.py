"""Fixed-point encoding of real updates into w-bit integers and back.

A value in ``[m_min, m_max)`` maps to ``floor(2^w (m - m_min) / (m_max - m_min))``.
A sum of ``n`` such integers decodes with ``step * x + n * m_min`` where
``step = (m_max - m_min) / 2^w``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CorruptionError
from .records import dump_record, parse_record


@dataclass(frozen=True)
class QuantConfig:
    """Quantization range and width.

    ``n_max`` is the largest number of quantized vectors that will ever be
    summed; it drives the overflow check against the masking modulus.
    """

    n_max: int
    w: int = 16
    m_min: float = -1.0
    m_max: float = 1.0

    def __post_init__(self) -> None:
        if not 1 <= self.w <= 32:
            raise ConfigError(f"bit width w={self.w} outside [1, 32]")
        if not (np.isfinite(self.m_min) and np.isfinite(self.m_max)) or self.m_min >= self.m_max:
            raise ConfigError(f"need finite m_min < m_max, got [{self.m_min}, {self.m_max})")
        if self.n_max < 1:
            raise ConfigError("n_max must be positive")

    @property
    def levels(self) -> int:
        return 1 << self.w

    @property
    def step(self) -> float:
        return (self.m_max - self.m_min) / self.levels

    def max_sum(self, n: int) -> int:
        return n * (self.levels - 1)

    def to_record(self) -> str:
        return dump_record({"w": self.w, "m_min": self.m_min, "m_max": self.m_max, "n_max": self.n_max})

    @classmethod
    def from_record(cls, text: str) -> "QuantConfig":
        raw = parse_record(text)
        return cls(
            n_max=int(raw["n_max"]),
            w=int(raw.get("w", 16)),
            m_min=float(raw.get("m_min", -1.0)),
            m_max=float(raw.get("m_max", 1.0)),
        )


def validate_modulus(cfg: QuantConfig, p: int) -> None:
    """Reject a modulus that a sum of ``n_max`` quantized vectors could overflow."""
    needed = cfg.max_sum(cfg.n_max) + 1
    if p < needed:
        raise ConfigError(
            f"modulus {p} too small: {cfg.n_max} clients at w={cfg.w} need p >= {needed}"
        )


def quantize(m: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Quantize a real vector; out-of-range values are clipped first."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("cannot quantize non-finite values")
    upper = np.nextafter(cfg.m_max, cfg.m_min)
    clipped = np.clip(m, cfg.m_min, upper)
    # TwoSum: clipped - m_min == hi + lo exactly.
    neg_min = -cfg.m_min
    hi = clipped + neg_min
    b_virtual = hi - clipped
    lo = (clipped - (hi - b_virtual)) + (neg_min - b_virtual)
    scale = cfg.levels / (cfg.m_max - cfg.m_min)
    t = hi * scale
    q = np.floor(t)
    # With a power-of-two range the product is exact, so a negative residual
    # on an integral t means the true value sits just below it.
    q -= (t == q) & (lo * scale < 0)
    np.clip(q, 0, cfg.levels - 1, out=q)
    return q.astype(np.uint32)


def dequantize_sum(x: np.ndarray, n2: int, cfg: QuantConfig) -> np.ndarray:
    """Decode a sum of ``n2`` quantized vectors back to the real domain."""
    if n2 < 1:
        raise ValueError("n2 must be at least 1")
    x = np.asarray(x, dtype=np.float64)
    return cfg.step * x + n2 * cfg.m_min


def center_correct(x0: np.ndarray, n2: int, cfg: QuantConfig, p: int) -> np.ndarray:
    """Map a demasked sum mod ``p`` back into ``[0, n2 (2^w - 1)]``.

    The homomorphism residual can push a coordinate up to ``n2 - 1`` units
    outside the valid range in either direction; below zero it wraps to the
    top of ``Z_p``.  Both excursions are clamped.  Anything further away can
    only come from a wrong key sum or tampering and raises ``CorruptionError``.
    """
    if n2 < 1:
        raise ValueError("n2 must be at least 1")
    x0 = np.asarray(x0, dtype=np.uint64)
    top = cfg.max_sum(n2)
    slack = n2 - 1
    vals = x0.astype(np.int64) if p <= (1 << 62) else x0.view(np.int64)
    in_range = x0 <= np.uint64(top + slack)
    wrapped = (x0 >= np.uint64(p - slack)) & ~in_range if slack else np.zeros(x0.shape, bool)
    bad = ~(in_range | wrapped)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise CorruptionError(
            f"coordinate {idx} = {int(x0[idx])} lies outside every valid window "
            f"(n2={n2}, p={p}); wrong key sum or tampered update"
        )
    out = np.where(wrapped, 0, np.minimum(vals, top))
    return out.astype(np.int64)
