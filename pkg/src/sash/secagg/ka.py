"""Pairwise key agreement: ECDH over NIST P-256 hashed to a 16-byte seed."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ec

from ..errors import InvalidPublicKeyError

CURVE = ec.SECP256R1()
GROUP_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
SECRET_BYTES = 32
PUBLIC_BYTES = 65
SEED_BYTES = 16
_DOMAIN = b"sash/ka/v1"


@dataclass(frozen=True, eq=False)
class KaKeyPair:
    """A P-256 secret scalar with its uncompressed SEC1 public point."""

    secret: int
    public: bytes
    _key: ec.EllipticCurvePrivateKey = field(repr=False)

    @classmethod
    def from_secret(cls, secret: int) -> "KaKeyPair":
        if not 0 < secret < GROUP_ORDER:
            raise ValueError("secret scalar out of range")
        key = ec.derive_private_key(secret, CURVE)
        public = key.public_key().public_bytes(
            serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint
        )
        return cls(secret=secret, public=public, _key=key)

    def secret_bytes(self) -> bytes:
        return self.secret.to_bytes(SECRET_BYTES, "big")

    @classmethod
    def from_secret_bytes(cls, raw: bytes) -> "KaKeyPair":
        return cls.from_secret(int.from_bytes(raw, "big"))


def ka_gen(rng: np.random.Generator) -> KaKeyPair:
    """Draw a key pair from ``rng`` (48 bytes reduced mod the order, bias < 2^-128)."""
    scalar = int.from_bytes(rng.bytes(48), "big") % (GROUP_ORDER - 1) + 1
    return KaKeyPair.from_secret(scalar)


def load_public(raw: bytes) -> ec.EllipticCurvePublicKey:
    if len(raw) != PUBLIC_BYTES or raw[0] != 0x04:
        raise InvalidPublicKeyError("expected a 65-byte uncompressed P-256 point")
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(CURVE, raw)
    except ValueError as exc:
        raise InvalidPublicKeyError(str(exc)) from exc


def ka_agree(own: KaKeyPair, peer_public: bytes) -> bytes:
    shared = own._key.exchange(ec.ECDH(), load_public(peer_public))
    return hashlib.sha256(_DOMAIN + shared).digest()[:SEED_BYTES]
