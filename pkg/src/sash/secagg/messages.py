"""Binary wire format for protocol messages.

Every message is one tag byte followed by length-prefixed fields
(``uint32`` little-endian length, then the bytes).  Integers inside fields
are fixed-width little-endian; residue vectors use 4-byte words for moduli
up to 2^32 and 8-byte words above.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Union

import numpy as np

from ..shprg import residue_dtype
from .shamir import ShamirShare

_LEN = struct.Struct("<I")
_U32 = struct.Struct("<I")


class Tag(IntEnum):
    ADVERTISE_KEYS = 1
    ENCRYPTED_SHARES = 2
    MASKED_INPUT = 3
    UNMASKING_SHARES = 4
    MASKED_UPDATE = 5
    ROSTER = 6
    SURVIVORS = 7


@dataclass(frozen=True)
class AdvertiseKeys:
    pk_ka: bytes
    pk_enc: bytes


@dataclass(frozen=True)
class EncryptedShares:
    """Shares from ``sender`` for ``recipient``, routed through the server.

    Confidentiality is provided by the transport's point-to-point channel;
    ``ciphertext`` carries the serialized :class:`SharePayload`.
    """

    sender: int
    recipient: int
    ciphertext: bytes


@dataclass(frozen=True)
class SharePayload:
    b_share: ShamirShare
    sk_share: ShamirShare

    def to_bytes(self) -> bytes:
        return _pack_fields([self.b_share.to_bytes(), self.sk_share.to_bytes()])

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SharePayload":
        b, sk = _unpack_fields(raw, 2)
        return cls(ShamirShare.from_bytes(b), ShamirShare.from_bytes(sk))


@dataclass(frozen=True, eq=False)
class MaskedInput:
    values: np.ndarray
    modulus_bits: int

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, MaskedInput)
            and self.modulus_bits == other.modulus_bits
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class MaskedUpdate(MaskedInput):
    """``y_u = x_u + G(k_u) mod p`` as uploaded in the model-masking phase."""


@dataclass(frozen=True)
class UnmaskingShares:
    """Self-mask shares of surviving peers and key shares of dropped peers."""

    b_shares: dict[int, ShamirShare] = field(default_factory=dict)
    sk_shares: dict[int, ShamirShare] = field(default_factory=dict)


@dataclass(frozen=True)
class Roster:
    keys: dict[int, AdvertiseKeys]


@dataclass(frozen=True)
class Survivors:
    ids: tuple[int, ...]


Message = Union[
    AdvertiseKeys, EncryptedShares, MaskedInput, MaskedUpdate, UnmaskingShares, Roster, Survivors
]


def _pack_fields(fields: list[bytes]) -> bytes:
    parts = []
    for f in fields:
        parts.append(_LEN.pack(len(f)))
        parts.append(f)
    return b"".join(parts)


def _unpack_fields(raw: bytes, expected: int | None = None) -> list[bytes]:
    out = []
    pos = 0
    view = memoryview(raw)
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise ValueError("truncated length prefix")
        (n,) = _LEN.unpack_from(raw, pos)
        pos += 4
        if pos + n > len(raw):
            raise ValueError("truncated field")
        out.append(bytes(view[pos : pos + n]))
        pos += n
    if expected is not None and len(out) != expected:
        raise ValueError(f"expected {expected} fields, got {len(out)}")
    return out


def _encode_vector(values: np.ndarray, bits: int) -> list[bytes]:
    dtype = residue_dtype(bits).newbyteorder("<")
    return [bytes([bits]), np.ascontiguousarray(values, dtype=dtype).tobytes()]


def _decode_vector(fields: list[bytes]) -> tuple[np.ndarray, int]:
    bits = fields[0][0]
    dtype = residue_dtype(bits)
    values = np.frombuffer(fields[1], dtype=dtype.newbyteorder("<")).view(dtype)
    return values, bits


def _encode_share_map(shares: dict[int, ShamirShare]) -> bytes:
    return _pack_fields([_U32.pack(k) + v.to_bytes() for k, v in sorted(shares.items())])


def _decode_share_map(raw: bytes) -> dict[int, ShamirShare]:
    out = {}
    for f in _unpack_fields(raw):
        (owner,) = _U32.unpack_from(f)
        out[owner] = ShamirShare.from_bytes(f[4:])
    return out


def encode(msg: Message) -> bytes:
    if isinstance(msg, AdvertiseKeys):
        tag, fields = Tag.ADVERTISE_KEYS, [msg.pk_ka, msg.pk_enc]
    elif isinstance(msg, EncryptedShares):
        tag = Tag.ENCRYPTED_SHARES
        fields = [_U32.pack(msg.sender), _U32.pack(msg.recipient), msg.ciphertext]
    elif isinstance(msg, MaskedUpdate):
        tag, fields = Tag.MASKED_UPDATE, _encode_vector(msg.values, msg.modulus_bits)
    elif isinstance(msg, MaskedInput):
        tag, fields = Tag.MASKED_INPUT, _encode_vector(msg.values, msg.modulus_bits)
    elif isinstance(msg, UnmaskingShares):
        tag = Tag.UNMASKING_SHARES
        fields = [_encode_share_map(msg.b_shares), _encode_share_map(msg.sk_shares)]
    elif isinstance(msg, Roster):
        tag = Tag.ROSTER
        fields = [
            _U32.pack(cid) + _pack_fields([keys.pk_ka, keys.pk_enc])
            for cid, keys in sorted(msg.keys.items())
        ]
    elif isinstance(msg, Survivors):
        tag, fields = Tag.SURVIVORS, [np.asarray(msg.ids, dtype="<u4").tobytes()]
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    return bytes([tag]) + _pack_fields(fields)


def decode(raw: bytes) -> Message:
    if not raw:
        raise ValueError("empty message")
    tag = Tag(raw[0])
    fields = _unpack_fields(raw[1:])
    if tag is Tag.ADVERTISE_KEYS:
        return AdvertiseKeys(fields[0], fields[1])
    if tag is Tag.ENCRYPTED_SHARES:
        return EncryptedShares(
            _U32.unpack(fields[0])[0], _U32.unpack(fields[1])[0], fields[2]
        )
    if tag is Tag.MASKED_INPUT:
        return MaskedInput(*_decode_vector(fields))
    if tag is Tag.MASKED_UPDATE:
        return MaskedUpdate(*_decode_vector(fields))
    if tag is Tag.UNMASKING_SHARES:
        return UnmaskingShares(_decode_share_map(fields[0]), _decode_share_map(fields[1]))
    if tag is Tag.ROSTER:
        keys = {}
        for f in fields:
            (cid,) = _U32.unpack_from(f)
            pk_ka, pk_enc = _unpack_fields(f[4:], 2)
            keys[cid] = AdvertiseKeys(pk_ka, pk_enc)
        return Roster(keys)
    if tag is Tag.SURVIVORS:
        return Survivors(tuple(int(v) for v in np.frombuffer(fields[0], dtype="<u4")))
    raise ValueError(f"unhandled tag {tag}")
