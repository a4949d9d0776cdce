"""Semi-honest SecAgg: pairwise plus self masking with Shamir dropout recovery.

The engine is generic over the vector length ``L`` and a power-of-two
modulus ``R``.  Four rounds run over a :class:`~sash.simnet.SimNet`:

0. advertise   clients publish two P-256 public keys
1. share-keys  clients Shamir-share their self-mask seed ``b_u`` and their
               key-agreement secret, one share per roster member
2. masked-input  ``y_u = x_u + PRG(b_u) + sum_{v<u} PRG(s_uv) - sum_{v>u} PRG(s_uv)``
3. unmask      online clients reveal ``b`` shares of peers whose ``y`` arrived
               and key shares of peers whose ``y`` did not

The output is the sum over clients whose masked input arrived.  A client
that drops during round 3 is still counted: its ``b_u`` is rebuilt from its
peers' shares.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from ..errors import ConfigError, CorruptionError, UnrecoverableRoundError
from ..shprg import reduce_mod, residue_dtype
from ..simnet import SECAGG_PHASES, SERVER, DropoutSchedule, RoundTranscript, SimNet, party_rng
from . import messages as wire
from .ka import SECRET_BYTES, KaKeyPair, ka_agree, ka_gen
from .prg import prg_expand
from .shamir import shamir_reconstruct, shamir_share


def default_threshold(n: int) -> int:
    return (2 * n) // 3 + 1


@dataclass(frozen=True)
class SecAggConfig:
    """``threshold`` of 0 selects the default ``floor(2n/3) + 1``."""

    n: int
    vec_len: int
    modulus_bits: int
    threshold: int = 0
    seed_len: int = 16

    def __post_init__(self) -> None:
        if self.threshold == 0:
            object.__setattr__(self, "threshold", default_threshold(self.n))
        if not 1 < self.threshold <= self.n:
            raise ConfigError(f"need 1 < t <= n, got t={self.threshold}, n={self.n}")
        if self.vec_len < 1:
            raise ConfigError("vec_len must be positive")
        if not 0 < self.modulus_bits <= 64:
            raise ConfigError("modulus must be 2^k with 0 < k <= 64")
        if self.seed_len != 16:
            raise ConfigError("PRG seeds are 16 bytes")

    @property
    def max_dropouts(self) -> int:
        return self.n - self.threshold

    @property
    def dtype(self) -> np.dtype:
        return residue_dtype(self.modulus_bits)


def _expand(seed: bytes, cfg: SecAggConfig) -> np.ndarray:
    return prg_expand(seed, cfg.vec_len, cfg.modulus_bits)


def _require(count: int, cfg: SecAggConfig, stage: str) -> None:
    if count < cfg.threshold:
        raise UnrecoverableRoundError(
            f"{stage}: {count} clients online, threshold is {cfg.threshold}"
        )


def client_mask_input(
    cid: int,
    x: np.ndarray,
    self_seed: bytes,
    pair_seeds: Mapping[int, bytes],
    cfg: SecAggConfig,
    peers: Iterable[int] | None = None,
) -> np.ndarray:
    """Apply the self mask and the antisymmetric pairwise masks to ``x``.

    ``peers`` lists the live clients; each must have an entry in
    ``pair_seeds``.
    """
    if peers is not None:
        missing = sorted(set(peers) - set(pair_seeds) - {cid})
        if missing:
            raise ValueError(f"client {cid} has no pairwise seed for live peers {missing}")
    y = np.array(x, dtype=cfg.dtype, copy=True)
    y += _expand(self_seed, cfg)
    for v in sorted(pair_seeds):
        if v == cid:
            continue
        mask = _expand(pair_seeds[v], cfg)
        if v < cid:
            y += mask
        else:
            y -= mask
    return reduce_mod(y, cfg.modulus_bits)


class SecAggClient:
    def __init__(self, cid: int, cfg: SecAggConfig, rng: np.random.Generator) -> None:
        self.cid = cid
        self.cfg = cfg
        self._rng = rng
        self._ka: KaKeyPair | None = None
        self._enc: KaKeyPair | None = None
        self._roster: dict[int, wire.AdvertiseKeys] = {}
        self._b: bytes | None = None
        self._held: dict[int, wire.SharePayload] = {}

    def advertise(self) -> wire.AdvertiseKeys:
        self._ka = ka_gen(self._rng)
        self._enc = ka_gen(self._rng)
        return wire.AdvertiseKeys(self._ka.public, self._enc.public)

    def share_keys(self, roster: wire.Roster) -> list[wire.EncryptedShares]:
        _require(len(roster.keys), self.cfg, "share-keys")
        if self.cid not in roster.keys:
            raise CorruptionError(f"client {self.cid} missing from roster")
        self._roster = dict(roster.keys)
        self._b = self._rng.bytes(self.cfg.seed_len)
        ids = sorted(self._roster)
        xs = [v + 1 for v in ids]
        t = self.cfg.threshold
        b_shares = shamir_share(self._b, t, len(ids), self._rng, xs)
        sk_shares = shamir_share(self._ka.secret_bytes(), t, len(ids), self._rng, xs)
        out = []
        for v, bs, ks in zip(ids, b_shares, sk_shares):
            payload = wire.SharePayload(bs, ks)
            if v == self.cid:
                self._held[v] = payload
            else:
                out.append(wire.EncryptedShares(self.cid, v, payload.to_bytes()))
        return out

    def masked_input(
        self, x: np.ndarray, inbox: list[wire.EncryptedShares]
    ) -> wire.MaskedInput:
        for msg in inbox:
            if msg.recipient != self.cid or msg.sender not in self._roster:
                raise CorruptionError(f"misrouted share {msg.sender}->{msg.recipient}")
            self._held[msg.sender] = wire.SharePayload.from_bytes(msg.ciphertext)
        _require(len(self._held), self.cfg, "masked-input")
        x = np.asarray(x)
        if x.shape != (self.cfg.vec_len,):
            raise ConfigError(f"input length {x.shape} != {self.cfg.vec_len}")
        seeds = {
            v: ka_agree(self._ka, self._roster[v].pk_ka) for v in self._held if v != self.cid
        }
        y = client_mask_input(self.cid, x, self._b, seeds, self.cfg, peers=self._held)
        return wire.MaskedInput(y, self.cfg.modulus_bits)

    def unmask(self, survivors: wire.Survivors) -> wire.UnmaskingShares:
        alive = set(survivors.ids)
        _require(len(alive), self.cfg, "unmask")
        if self.cid not in alive:
            raise CorruptionError(f"client {self.cid} asked to unmask but not listed")
        b = {v: p.b_share for v, p in self._held.items() if v in alive}
        sk = {v: p.sk_share for v, p in self._held.items() if v not in alive}
        return wire.UnmaskingShares(b, sk)


class SecAggServer:
    def __init__(self, cfg: SecAggConfig) -> None:
        self.cfg = cfg
        self.roster: dict[int, wire.AdvertiseKeys] = {}
        self.shared: set[int] = set()
        self.masked: dict[int, np.ndarray] = {}
        self.responders: set[int] = set()

    def collect_advertise(self, msgs: Mapping[int, wire.AdvertiseKeys]) -> wire.Roster:
        _require(len(msgs), self.cfg, "advertise")
        self.roster = dict(sorted(msgs.items()))
        return wire.Roster(self.roster)

    def collect_shares(
        self, msgs: list[wire.EncryptedShares]
    ) -> dict[int, list[wire.EncryptedShares]]:
        senders = {m.sender for m in msgs}
        _require(len(senders), self.cfg, "share-keys")
        self.shared = senders
        routed: dict[int, list[wire.EncryptedShares]] = {v: [] for v in sorted(senders)}
        for m in msgs:
            if m.recipient in routed:
                routed[m.recipient].append(m)
        return routed

    def collect_masked(self, msgs: Mapping[int, wire.MaskedInput]) -> wire.Survivors:
        ids = sorted(set(msgs) & self.shared)
        _require(len(ids), self.cfg, "masked-input")
        for cid in ids:
            vec = msgs[cid].values
            if vec.shape != (self.cfg.vec_len,) or msgs[cid].modulus_bits != self.cfg.modulus_bits:
                raise CorruptionError(f"masked input from {cid} has wrong shape or modulus")
            self.masked[cid] = vec
        return wire.Survivors(tuple(ids))

    def collect_unmask(self, msgs: Mapping[int, wire.UnmaskingShares]) -> np.ndarray:
        survivors = sorted(self.masked)
        responders = sorted(set(msgs) & set(survivors))
        _require(len(responders), self.cfg, "unmask")
        self.responders = set(responders)
        dropped = sorted(self.shared - set(survivors))
        cfg = self.cfg

        total = np.zeros(cfg.vec_len, dtype=cfg.dtype)
        for cid in survivors:
            total += self.masked[cid]
        for u in survivors:
            b = self._reconstruct(u, [msgs[r].b_shares.get(u) for r in responders], cfg.seed_len)
            total -= _expand(b, cfg)
        for v in dropped:
            raw = self._reconstruct(v, [msgs[r].sk_shares.get(v) for r in responders], SECRET_BYTES)
            try:
                sk = KaKeyPair.from_secret_bytes(raw)
            except ValueError as exc:
                raise CorruptionError(f"key of client {v} reconstructs to garbage") from exc
            if sk.public != self.roster[v].pk_ka:
                raise CorruptionError(f"key of client {v} does not match its advertised point")
            for u in survivors:
                mask = _expand(ka_agree(sk, self.roster[u].pk_ka), cfg)
                # u added the mask for v < u and subtracted it for v > u.
                if v < u:
                    total -= mask
                else:
                    total += mask
        return reduce_mod(total, cfg.modulus_bits)

    def _reconstruct(self, owner: int, shares: list, length: int) -> bytes:
        present = [s for s in shares if s is not None]
        if len(present) < self.cfg.threshold:
            raise UnrecoverableRoundError(
                f"only {len(present)} shares of client {owner}'s secret, need {self.cfg.threshold}"
            )
        try:
            secret = shamir_reconstruct(present)
        except ValueError as exc:
            raise CorruptionError(f"inconsistent shares for client {owner}: {exc}") from exc
        if len(secret) != length:
            raise CorruptionError(f"secret of client {owner} has {len(secret)} bytes, not {length}")
        return secret


class SecAggResult(NamedTuple):
    total: np.ndarray
    survivors: tuple[int, ...]
    transcript: RoundTranscript


def run_secagg(
    inputs: Mapping[int, np.ndarray],
    cfg: SecAggConfig,
    schedule: DropoutSchedule | None = None,
    net: SimNet | None = None,
    *,
    seed: int = 0,
    rng_path: tuple[int, ...] = (),
    phase_offset: int = 0,
) -> SecAggResult:
    """Run all four rounds and return the sum over surviving clients mod ``R``.

    ``inputs`` maps client id (``0 <= id < 2^32 - 1``) to its vector.  Round
    ``r`` executes as network phase ``phase_offset + r`` so the engine can be
    embedded after other phases on a shared :class:`SimNet`.  Client ``u``
    draws its randomness from ``party_rng(seed, *rng_path, u)``.
    """
    if net is None:
        net = SimNet(schedule, SECAGG_PHASES)
    elif schedule is not None and schedule != net.schedule:
        raise ValueError("schedule conflicts with the one carried by net")
    if len(inputs) > cfg.n:
        raise ConfigError(f"{len(inputs)} inputs for a {cfg.n}-client configuration")
    clients = {
        cid: SecAggClient(cid, cfg, party_rng(seed, *rng_path, cid)) for cid in sorted(inputs)
    }
    server = SecAggServer(cfg)

    # Round 0: advertise keys.
    net.begin_phase(phase_offset)
    up = []
    for cid, client in clients.items():
        if net.online(cid):
            with net.compute(cid):
                up.append(net.envelope(cid, SERVER, wire.encode(client.advertise())))
    delivered = net.exchange(up)
    with net.compute(SERVER):
        roster = server.collect_advertise({e.sender: wire.decode(e.payload) for e in delivered})
        roster_raw = wire.encode(roster)

    # Round 1: share keys.
    net.begin_phase(phase_offset + 1)
    net.exchange([net.envelope(SERVER, cid, roster_raw) for cid in roster.keys])
    up = []
    for cid in roster.keys:
        if net.online(cid):
            with net.compute(cid):
                for msg in clients[cid].share_keys(wire.decode(roster_raw)):
                    up.append(net.envelope(cid, SERVER, wire.encode(msg)))
    delivered = net.exchange(up)
    with net.compute(SERVER):
        routed = server.collect_shares([wire.decode(e.payload) for e in delivered])

    # Round 2: masked input.
    net.begin_phase(phase_offset + 2)
    down = [
        net.envelope(SERVER, cid, wire.encode(msg)) for cid, box in routed.items() for msg in box
    ]
    inbox: dict[int, list[bytes]] = {cid: [] for cid in routed}
    for env in net.exchange(down):
        inbox[env.receiver].append(env.payload)
    up = []
    for cid in routed:
        if net.online(cid):
            with net.compute(cid):
                msg = clients[cid].masked_input(
                    inputs[cid], [wire.decode(raw) for raw in inbox[cid]]
                )
                up.append(net.envelope(cid, SERVER, wire.encode(msg)))
    delivered = net.exchange(up)
    with net.compute(SERVER):
        survivors = server.collect_masked({e.sender: wire.decode(e.payload) for e in delivered})
        survivors_raw = wire.encode(survivors)

    # Round 3: unmask.
    net.begin_phase(phase_offset + 3)
    net.exchange([net.envelope(SERVER, cid, survivors_raw) for cid in survivors.ids])
    up = []
    for cid in survivors.ids:
        if net.online(cid):
            with net.compute(cid):
                msg = clients[cid].unmask(wire.decode(survivors_raw))
                up.append(net.envelope(cid, SERVER, wire.encode(msg)))
    delivered = net.exchange(up)
    with net.compute(SERVER):
        total = server.collect_unmask({e.sender: wire.decode(e.payload) for e in delivered})

    tr = net.transcript
    tr.record_set("secagg.advertised", roster.keys)
    tr.record_set("secagg.shared", server.shared)
    tr.record_set("secagg.survivors", survivors.ids)
    tr.record_set("secagg.responders", server.responders)
    return SecAggResult(total, survivors.ids, tr)
