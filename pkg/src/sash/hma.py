"""Homomorphic model aggregation: one SHPRG mask per client, one demask per epoch.

Each epoch a client quantizes its update ``m_u`` to ``x_u``, samples a fresh
key ``k_u`` in ``Z_q^mu`` and uploads ``y_u = x_u + G(k_u) mod p``.  The
keys are then summed by a SecAgg instance over length-``mu`` vectors mod
``q`` (the masking key agreement, MKA).  With ``k_0`` the key sum over the
MKA survivors ``U2`` the server recovers

    x_0 = sum_{u in U2} y_u - G(k_0) = sum_{u in U2} x_u + e_0   (mod p)

where every coordinate of ``e_0`` lies in ``[-(|U2| - 1), |U2| - 1]``.

Client sets follow the epoch: ``U0`` everyone, ``U1`` those whose masked
update arrived, ``U2`` those whose masked key arrived during MKA.  Updates
from ``U1 \\ U2`` are held but never summed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from . import shprg
from .errors import ConfigError, NoSurvivorsError
from .quantizer import QuantConfig, center_correct, dequantize_sum, quantize, validate_modulus
from .records import dump_record, parse_record
from .secagg import SecAggConfig, run_secagg
from .secagg import messages as wire
from .shprg import PublicMatrix, ShprgParams
from .simnet import SASH_PHASES, SERVER, DropoutSchedule, RoundTranscript, SimNet, party_rng

# Server-only tail after the MKA; nobody can drop out of it meaningfully.
EPOCH_PHASES = SASH_PHASES + ("demask",)
UPLOAD_PHASE = 0
MKA_OFFSET = 1
DEMASK_PHASE = len(SASH_PHASES)


@dataclass(frozen=True)
class HmaConfig:
    shprg: ShprgParams
    quant: QuantConfig
    secagg: SecAggConfig
    n: int

    def __post_init__(self) -> None:
        if self.secagg.n != self.n:
            raise ConfigError(f"MKA configured for {self.secagg.n} clients, epoch has {self.n}")
        if self.secagg.vec_len != self.shprg.mu:
            raise ConfigError("MKA vector length must equal mu")
        if self.secagg.modulus_bits != self.shprg.big_modulus_log2:
            raise ConfigError("MKA modulus must equal q")
        if self.quant.n_max < self.n:
            raise ConfigError(f"quantizer sized for {self.quant.n_max} clients, not {self.n}")
        validate_modulus(self.quant, self.shprg.p)

    @classmethod
    def create(
        cls,
        n: int,
        model_len: int,
        *,
        w: int = 16,
        m_min: float = -1.0,
        m_max: float = 1.0,
        mu: int = 512,
        big_modulus_log2: int = 64,
        small_modulus_log2: int = 32,
        threshold: int = 0,
        matrix_seed: bytes = bytes(32),
    ) -> "HmaConfig":
        params = ShprgParams(model_len, mu, big_modulus_log2, small_modulus_log2, matrix_seed)
        quant = QuantConfig(n_max=n, w=w, m_min=m_min, m_max=m_max)
        mka = SecAggConfig(n=n, vec_len=mu, modulus_bits=big_modulus_log2, threshold=threshold)
        return cls(shprg=params, quant=quant, secagg=mka, n=n)

    @property
    def model_len(self) -> int:
        return self.shprg.output_len

    def to_record(self) -> str:
        p, qc = self.shprg, self.quant
        return dump_record(
            {
                "n": self.n,
                "M": p.output_len,
                "mu": p.mu,
                "big_modulus_log2": p.big_modulus_log2,
                "small_modulus_log2": p.small_modulus_log2,
                "matrix_seed": p.matrix_seed,
                "w": qc.w,
                "m_min": qc.m_min,
                "m_max": qc.m_max,
                "threshold": self.secagg.threshold,
            }
        )

    @classmethod
    def from_record(cls, text: str) -> "HmaConfig":
        raw = parse_record(text)
        return cls.create(
            int(raw["n"]),
            int(raw["M"]),
            w=int(raw.get("w", 16)),
            m_min=float(raw.get("m_min", -1.0)),
            m_max=float(raw.get("m_max", 1.0)),
            mu=int(raw.get("mu", 512)),
            big_modulus_log2=int(raw.get("big_modulus_log2", 64)),
            small_modulus_log2=int(raw.get("small_modulus_log2", 32)),
            threshold=int(raw.get("threshold", 0)),
            matrix_seed=bytes.fromhex(raw.get("matrix_seed", "00" * 32)),
        )


@dataclass
class HmaClient:
    """Per-client masking state; ``evals`` counts SHPRG evaluations made."""

    cid: int
    cfg: HmaConfig
    matrix: PublicMatrix
    rng: np.random.Generator
    key: np.ndarray | None = None
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    evals: int = 0
    _previous_key: np.ndarray | None = field(default=None, repr=False)

    def new_epoch(self) -> None:
        self._previous_key = self.key
        self.key = shprg.random_key(self.cfg.shprg, self.rng)
        if self._previous_key is not None and np.array_equal(self.key, self._previous_key):
            raise RuntimeError("masking key repeated across epochs")
        self.x = self.y = None

    def mask(self, m_u: np.ndarray) -> wire.MaskedUpdate:
        if self.key is None:
            raise RuntimeError("call new_epoch before mask")
        if self.matrix.params != self.cfg.shprg:
            raise ConfigError("public matrix built for different parameters")
        m_u = np.asarray(m_u, dtype=np.float64)
        if m_u.shape != (self.cfg.model_len,):
            raise ConfigError(f"update length {m_u.shape} != M={self.cfg.model_len}")
        self.x = quantize(m_u, self.cfg.quant)
        g = shprg.evaluate(self.matrix, self.key)
        self.evals += 1
        self.y = shprg.reduce_mod(self.x + g, self.cfg.shprg.small_modulus_log2)
        return wire.MaskedUpdate(self.y, self.cfg.shprg.small_modulus_log2)


def client_mask(m_u: np.ndarray, state: HmaClient) -> wire.MaskedUpdate:
    return state.mask(m_u)


def server_aggregate(masked: Mapping[int, np.ndarray] | list, p_bits: int = 32) -> np.ndarray:
    """Coordinate-wise sum of masked updates mod ``2^p_bits``."""
    vectors = list(masked.values()) if isinstance(masked, Mapping) else list(masked)
    if not vectors:
        raise NoSurvivorsError("no masked updates to aggregate")
    length = vectors[0].shape
    total = np.zeros(length, dtype=shprg.residue_dtype(p_bits))
    for vec in vectors:
        if vec.shape != length:
            raise ConfigError("masked updates differ in length")
        total += vec
    return shprg.reduce_mod(total, p_bits)


def server_unmask(
    y0: np.ndarray, k0: np.ndarray, n2: int, cfg: HmaConfig, matrix: PublicMatrix
) -> np.ndarray:
    """Integer sum ``x_0`` of the surviving quantized updates (with residual ``e_0``)."""
    g = shprg.evaluate(matrix, k0)
    raw = shprg.reduce_mod(np.asarray(y0, dtype=g.dtype) - g, cfg.shprg.small_modulus_log2)
    return center_correct(raw, n2, cfg.quant, cfg.shprg.p)


def server_demask(
    y0: np.ndarray, k0: np.ndarray, n2: int, cfg: HmaConfig, matrix: PublicMatrix
) -> np.ndarray:
    """Real-valued sum of the surviving updates."""
    return dequantize_sum(server_unmask(y0, k0, n2, cfg, matrix), n2, cfg.quant)


class HmaServer:
    def __init__(self, cfg: HmaConfig, matrix: PublicMatrix) -> None:
        self.cfg = cfg
        self.matrix = matrix
        self.masked: dict[int, np.ndarray] = {}
        self.u0: tuple[int, ...] = ()
        self.u1: tuple[int, ...] = ()
        self.u2: tuple[int, ...] = ()
        self.evals = 0

    def collect(self, updates: Mapping[int, wire.MaskedUpdate]) -> None:
        bits = self.cfg.shprg.small_modulus_log2
        for cid, msg in updates.items():
            if msg.modulus_bits != bits or msg.values.shape != (self.cfg.model_len,):
                raise ConfigError(f"masked update from {cid} has wrong shape or modulus")
            self.masked[cid] = msg.values
        self.u1 = tuple(sorted(self.masked))

    def finish(self, k0: np.ndarray, survivors: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(x0, real_sum)`` over ``survivors``."""
        if not survivors:
            raise NoSurvivorsError("MKA finished with no survivors")
        missing = set(survivors) - set(self.masked)
        if missing:
            raise ConfigError(f"MKA survivors {sorted(missing)} never uploaded a masked update")
        self.u2 = tuple(sorted(survivors))
        y0 = server_aggregate([self.masked[u] for u in self.u2], self.cfg.shprg.small_modulus_log2)
        x0 = server_unmask(y0, k0, len(self.u2), self.cfg, self.matrix)
        self.evals += 1
        return x0, dequantize_sum(x0, len(self.u2), self.cfg.quant)


class EpochResult(NamedTuple):
    average: np.ndarray
    total: np.ndarray
    x0: np.ndarray
    survivors: tuple[int, ...]
    transcript: RoundTranscript
    server_evals: int


def make_clients(
    cfg: HmaConfig, matrix: PublicMatrix, ids, seed: int = 0
) -> dict[int, HmaClient]:
    """Long-lived client states whose key streams persist across epochs."""
    return {cid: HmaClient(cid, cfg, matrix, party_rng(seed, 0, cid)) for cid in ids}


def run_epoch(
    updates: Mapping[int, np.ndarray],
    cfg: HmaConfig,
    schedule: DropoutSchedule | None = None,
    net: SimNet | None = None,
    *,
    matrix: PublicMatrix | None = None,
    clients: Mapping[int, HmaClient] | None = None,
    seed: int = 0,
    epoch: int = 0,
) -> EpochResult:
    """One full aggregation epoch; returns the survivor average ``m_0 / N_2``.

    ``matrix`` is derived when omitted; pass it to amortize derivation over
    epochs.  ``clients`` carries key state between epochs; without it fresh
    states are seeded from ``(seed, epoch)``.
    """
    if net is None:
        net = SimNet(schedule, EPOCH_PHASES)
    elif schedule is not None and schedule != net.schedule:
        raise ValueError("schedule conflicts with the one carried by net")
    if len(updates) > cfg.n:
        raise ConfigError(f"{len(updates)} updates for an {cfg.n}-client configuration")
    if matrix is None:
        matrix = shprg.derive_matrix(cfg.shprg)
    if clients is None:
        clients = {
            cid: HmaClient(cid, cfg, matrix, party_rng(seed, 1, epoch, cid))
            for cid in sorted(updates)
        }
    server = HmaServer(cfg, matrix)
    server.u0 = tuple(sorted(updates))

    net.begin_phase(UPLOAD_PHASE)
    up = []
    for cid in server.u0:
        if net.online(cid):
            client = clients[cid]
            with net.compute(cid):
                client.new_epoch()
                up.append(net.envelope(cid, SERVER, wire.encode(client.mask(updates[cid]))))
    delivered = net.exchange(up)
    with net.compute(SERVER):
        server.collect({e.sender: wire.decode(e.payload) for e in delivered})

    mka = run_secagg(
        {cid: clients[cid].key for cid in server.u1},
        cfg.secagg,
        net=net,
        seed=seed,
        rng_path=(2, epoch),
        phase_offset=MKA_OFFSET,
    )

    net.begin_phase(DEMASK_PHASE)
    with net.compute(SERVER):
        x0, total = server.finish(mka.total, mka.survivors)
        average = total / len(server.u2)

    tr = net.transcript
    tr.record_set("U0", server.u0)
    tr.record_set("U1", server.u1)
    tr.record_set("U2", server.u2)
    tr.meta.update({"protocol": "sash", "M": cfg.model_len, "n": cfg.n, "epoch": epoch})
    return EpochResult(average, total, x0, server.u2, tr, server.evals)
