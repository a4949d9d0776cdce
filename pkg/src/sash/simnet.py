"""Deterministic round-based in-memory network.

Parties advance through a fixed sequence of phases.  Messages produced in a
phase are committed at the phase barrier, in sender order; a client whose
drop phase is ``k`` delivers nothing in phase ``k`` or later.  Every
delivered message and every timed computation lands in a
:class:`RoundTranscript`.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

SERVER = -1

SECAGG_PHASES = ("advertise", "share-keys", "masked-input", "unmask")
SASH_PHASES = ("mask-upload",) + tuple(f"mka-{name}" for name in SECAGG_PHASES)


@dataclass(frozen=True)
class Envelope:
    sender: int
    receiver: int
    phase: int
    payload: bytes


@dataclass(frozen=True)
class DropoutSchedule:
    """Drop events as ``(client_id, phase_index)`` pairs, at most one per client."""

    events: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        events = tuple(sorted((int(c), int(p)) for c, p in self.events))
        clients = [c for c, _ in events]
        if len(set(clients)) != len(clients):
            raise ValueError("a client may drop at most once")
        if any(p < 0 for _, p in events):
            raise ValueError("phase indices are non-negative")
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "_by_client", dict(events))

    @classmethod
    def from_mapping(cls, drops: Mapping[int, int]) -> "DropoutSchedule":
        return cls(tuple(drops.items()))

    def __len__(self) -> int:
        return len(self.events)

    def drop_phase(self, cid: int) -> int | None:
        return self._by_client.get(cid)

    def is_dropped(self, cid: int, phase: int) -> bool:
        k = self._by_client.get(cid)
        return k is not None and phase >= k

    def dropped_by(self, phase: int) -> set[int]:
        return {c for c, p in self.events if p <= phase}

    def to_text(self) -> str:
        return "".join(f"{c},{p}\n" for c, p in self.events)

    @classmethod
    def from_text(cls, text: str) -> "DropoutSchedule":
        pairs = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            c, p = line.split(",")
            pairs.append((int(c), int(p)))
        return cls(tuple(pairs))


def deliver_phase(
    messages: Iterable[Envelope], schedule: DropoutSchedule, phase: int
) -> list[Envelope]:
    """Messages that survive the barrier of ``phase``, ordered by sender id."""
    kept = [m for m in messages if m.sender == SERVER or not schedule.is_dropped(m.sender, phase)]
    kept.sort(key=lambda m: m.sender)
    return kept


def worst_case_count(n: int, max_drops: int, n_phases: int, mixed: bool = False) -> int:
    per_subset = (lambda k: n_phases**k) if mixed else (lambda k: n_phases)
    return 1 + sum(math.comb(n, k) * per_subset(k) for k in range(1, max_drops + 1))


def enumerate_worst_case(
    n: int,
    max_drops: int,
    n_phases: int = len(SASH_PHASES),
    *,
    mixed: bool = False,
    exhaustive_limit: int = 8,
    samples: int = 200,
    seed: int = 0,
) -> Iterator[DropoutSchedule]:
    """Yield dropout schedules with at most ``max_drops`` dropped clients.

    Up to ``exhaustive_limit`` clients every subset is paired with every
    phase (all clients of a subset drop at the same barrier, or at every
    combination of barriers when ``mixed``).  Beyond that the space explodes
    (sum of C(n, k) * phases) and ``samples`` seeded random schedules are
    yielded instead.  The empty schedule always comes first.
    """
    max_drops = min(max_drops, n)
    yield DropoutSchedule()
    if max_drops <= 0:
        return
    if n <= exhaustive_limit:
        for k in range(1, max_drops + 1):
            for subset in itertools.combinations(range(n), k):
                if mixed:
                    for phases in itertools.product(range(n_phases), repeat=k):
                        yield DropoutSchedule(tuple(zip(subset, phases)))
                else:
                    for phase in range(n_phases):
                        yield DropoutSchedule(tuple((c, phase) for c in subset))
        return
    rng = np.random.default_rng(seed)
    for _ in range(samples):
        k = int(rng.integers(1, max_drops + 1))
        subset = rng.choice(n, size=k, replace=False).tolist()
        if mixed:
            phases = rng.integers(0, n_phases, size=k).tolist()
        else:
            phases = [int(rng.integers(0, n_phases))] * k
        yield DropoutSchedule(tuple(zip(subset, phases)))


@dataclass
class MessageRecord:
    sender: int
    receiver: int
    phase: int
    byte_count: int
    digest: str
    wall_time: float = 0.0


@dataclass
class ComputeRecord:
    party: int
    phase: int
    duration: float


@dataclass
class PartyTotals:
    bytes_sent: int = 0
    bytes_received: int = 0
    messages_sent: int = 0
    compute_s: float = 0.0


@dataclass
class RoundTranscript:
    """Ordered message and computation records for one protocol run."""

    phase_names: tuple[str, ...] = ()
    messages: list[MessageRecord] = field(default_factory=list)
    compute: list[ComputeRecord] = field(default_factory=list)
    sets: dict[str, tuple[int, ...]] = field(default_factory=dict)
    meta: dict[str, object] = field(default_factory=dict)

    def record_message(self, env: Envelope, wall_time: float = 0.0) -> None:
        self.messages.append(
            MessageRecord(
                sender=env.sender,
                receiver=env.receiver,
                phase=env.phase,
                byte_count=len(env.payload),
                digest=hashlib.sha256(env.payload).hexdigest()[:32],
                wall_time=wall_time,
            )
        )

    def record_compute(self, party: int, phase: int, duration: float) -> None:
        self.compute.append(ComputeRecord(party, phase, duration))

    def record_set(self, name: str, members: Iterable[int]) -> None:
        self.sets[name] = tuple(sorted(members))

    def totals(self) -> dict[int, PartyTotals]:
        out: dict[int, PartyTotals] = {}
        for rec in self.messages:
            s = out.setdefault(rec.sender, PartyTotals())
            s.bytes_sent += rec.byte_count
            s.messages_sent += 1
            out.setdefault(rec.receiver, PartyTotals()).bytes_received += rec.byte_count
        for rec in self.compute:
            out.setdefault(rec.party, PartyTotals()).compute_s += rec.duration
        return out

    def bytes_sent(self, party: int, phases: Sequence[int] | None = None) -> int:
        return sum(
            r.byte_count
            for r in self.messages
            if r.sender == party and (phases is None or r.phase in phases)
        )

    def compute_time(self, party: int, phases: Sequence[int] | None = None) -> float:
        return sum(
            r.duration
            for r in self.compute
            if r.party == party and (phases is None or r.phase in phases)
        )

    def phase_durations(self) -> dict[int, float]:
        """Per-phase critical-path estimate: mean client time plus server time."""
        per_phase: dict[int, dict[int, float]] = {}
        for r in self.compute:
            per_phase.setdefault(r.phase, {}).setdefault(r.party, 0.0)
            per_phase[r.phase][r.party] += r.duration
        out = {}
        for phase, parties in per_phase.items():
            server = parties.pop(SERVER, 0.0)
            clients = list(parties.values())
            out[phase] = server + (sum(clients) / len(clients) if clients else 0.0)
        return out

    def iter_lines(self, timing: bool = True) -> Iterator[str]:
        head = {"kind": "header", "phases": list(self.phase_names), "meta": self.meta}
        yield json.dumps(head, sort_keys=True)
        for r in self.messages:
            rec = {
                "kind": "msg",
                "sender": r.sender,
                "receiver": r.receiver,
                "phase": r.phase,
                "bytes": r.byte_count,
                "digest": r.digest,
            }
            if timing:
                rec["wall_time"] = r.wall_time
            yield json.dumps(rec, sort_keys=True)
        for r in self.compute:
            rec = {"kind": "compute", "party": r.party, "phase": r.phase}
            if timing:
                rec["duration"] = r.duration
            yield json.dumps(rec, sort_keys=True)
        for name, members in sorted(self.sets.items()):
            yield json.dumps({"kind": "set", "name": name, "members": list(members)})

    def to_jsonl(self, timing: bool = True) -> str:
        return "\n".join(self.iter_lines(timing)) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "RoundTranscript":
        tr = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec["kind"]
            if kind == "header":
                tr.phase_names = tuple(rec["phases"])
                tr.meta = rec["meta"]
            elif kind == "msg":
                tr.messages.append(
                    MessageRecord(
                        rec["sender"], rec["receiver"], rec["phase"], rec["bytes"],
                        rec["digest"], rec.get("wall_time", 0.0),
                    )
                )
            elif kind == "compute":
                tr.compute.append(ComputeRecord(rec["party"], rec["phase"], rec.get("duration", 0.0)))
            elif kind == "set":
                tr.sets[rec["name"]] = tuple(rec["members"])
            else:
                raise ValueError(f"unknown record kind {kind!r}")
        return tr

    def fingerprint(self) -> str:
        """Digest of everything except wall-clock fields."""
        h = hashlib.sha256()
        for line in self.iter_lines(timing=False):
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()


def party_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for one party, derived from a run seed and a path."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(path)))


class SimNet:
    """Phase-synchronous bus with dropout injection and accounting."""

    def __init__(
        self,
        schedule: DropoutSchedule | None = None,
        phase_names: Sequence[str] = (),
        clock: Callable[[], float] = time.perf_counter,
    ) -> None:
        self.schedule = schedule or DropoutSchedule()
        self.transcript = RoundTranscript(phase_names=tuple(phase_names))
        self.phase = -1
        self._clock = clock
        self._t0 = clock()

    def begin_phase(self, phase: int) -> None:
        if phase <= self.phase:
            raise ValueError(f"phase {phase} does not advance past {self.phase}")
        self.phase = phase

    def online(self, cid: int) -> bool:
        return cid == SERVER or not self.schedule.is_dropped(cid, self.phase)

    @contextmanager
    def compute(self, party: int) -> Iterator[None]:
        start = self._clock()
        try:
            yield
        finally:
            self.transcript.record_compute(party, self.phase, self._clock() - start)

    def exchange(self, messages: Iterable[Envelope]) -> list[Envelope]:
        """Commit the current phase's messages and return those delivered."""
        delivered = deliver_phase(messages, self.schedule, self.phase)
        now = self._clock() - self._t0
        for env in delivered:
            if env.phase != self.phase:
                raise ValueError(f"message tagged phase {env.phase} sent in phase {self.phase}")
            self.transcript.record_message(env, now)
        return delivered

    def envelope(self, sender: int, receiver: int, payload: bytes) -> Envelope:
        return Envelope(sender, receiver, self.phase, payload)
