"""Benchmark harness: SASH vs. the full-vector SecAgg baseline vs. plain upload.

Each scenario synthesizes random updates in ``[-1, 1)`` (outside the timed
region), runs the selected protocol end to end on a :class:`SimNet` and
reads per-party compute time and bytes back from the transcript.

Timing columns, all in milliseconds and averaged over repetitions:

``client_mask_ms``  per-client masking work (SHPRG mask, or the PRG masking
                    round of the baseline, or plain quantization)
``server_ms``       all server computation in the epoch
``mka_ms``          SASH only: mean client time in the MKA rounds plus the
                    server's MKA time
``total_ms``        mean per-client time over all phases plus server time

Client means are taken over clients that never dropped.  Matrix derivation
is a one-time cost and reported separately as ``derive_ms``.

Dropouts: ``round(d * N)`` seeded victims each drop at one phase, chosen
with probability proportional to that phase's client cost.  The default
``cost`` model prices phases from operation counts with fixed unit costs so
schedules (and so ``d0``) are reproducible; ``timed`` calibrates weights
from a dropout-free run and ``uniform`` ignores cost.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels, shprg
from .errors import ConfigError, UnrecoverableRoundError
from .hma import EPOCH_PHASES, HmaConfig, run_epoch
from .quantizer import QuantConfig, dequantize_sum, quantize, validate_modulus
from .secagg import SecAggConfig, run_secagg
from .simnet import SECAGG_PHASES, SERVER, DropoutSchedule, RoundTranscript, SimNet, party_rng

MODES = ("sash", "secagg-baseline", "plain")
DROP_MODELS = ("cost", "timed", "uniform")
PLAIN_PHASES = ("upload",)

COLUMNS = (
    "mode", "M", "N", "d", "rep_count",
    "client_mask_ms_mean", "client_mask_ms_std",
    "server_ms_mean", "server_ms_std",
    "mka_ms_mean", "total_ms_mean", "bytes_per_client", "d0",
    "derive_ms", "error",
)

# Unit costs (seconds) for the deterministic drop model, measured once on a
# single AVX-512 core.  Only their ratios matter.
SHPRG_MAC = 1.1e-9
PRG_BYTE = 0.35e-9
VEC_OP = 1.0e-9
KA_GEN = 70e-6
KA_AGREE = 110e-6
SHARE_PER_PEER = 10e-6
UNMASK_PER_PEER = 2e-6


@dataclass(frozen=True)
class BenchScenario:
    mode: str
    M: int
    N: int
    d: float = 0.0
    reps: int = 5
    seed: int = 0
    w: int = 16
    mu: int = 512
    drop_model: str = "cost"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; pick one of {MODES}")
        if self.drop_model not in DROP_MODELS:
            raise ConfigError(f"unknown drop model {self.drop_model!r}")
        if not 0.0 <= self.d < 1.0:
            raise ConfigError("dropout fraction must lie in [0, 1)")
        if self.reps < 1 or self.N < 2 or self.M < 1:
            raise ConfigError("need reps >= 1, N >= 2, M >= 1")

    @property
    def n_drop(self) -> int:
        return int(round(self.d * self.N))

    @property
    def max_dropouts(self) -> int:
        if self.mode == "plain":
            return self.N - 1
        return self.N - SecAggConfig(self.N, 1, 32).threshold

    @property
    def expected_failure(self) -> bool:
        return self.n_drop > self.max_dropouts

    @property
    def phases(self) -> tuple[str, ...]:
        return {"sash": EPOCH_PHASES, "secagg-baseline": SECAGG_PHASES, "plain": PLAIN_PHASES}[
            self.mode
        ]


@dataclass
class BenchRecord:
    scenario: BenchScenario
    rep_count: int = 0
    client_mask_ms_mean: float = math.nan
    client_mask_ms_std: float = math.nan
    server_ms_mean: float = math.nan
    server_ms_std: float = math.nan
    mka_ms_mean: float = math.nan
    total_ms_mean: float = math.nan
    total_ms_std: float = math.nan
    bytes_per_client: float = math.nan
    d0: float = math.nan
    derive_ms: float = math.nan
    error: str = ""
    transcripts: list[RoundTranscript] = field(default_factory=list, repr=False)

    def row(self) -> dict[str, object]:
        s = self.scenario
        out = {"mode": s.mode, "M": s.M, "N": s.N, "d": s.d}
        for name in COLUMNS[4:]:
            out[name] = getattr(self, name)
        return out


def cost_weights(s: BenchScenario) -> np.ndarray:
    """Modelled client seconds spent in each droppable phase."""
    n, m, mu = s.N, s.M, s.mu
    if s.mode == "plain":
        return np.array([1.0])
    if s.mode == "sash":
        w = [
            m * mu * SHPRG_MAC + 3 * m * VEC_OP,
            2 * KA_GEN,
            n * SHARE_PER_PEER,
            (n - 1) * (KA_AGREE + mu * 8 * PRG_BYTE + mu * VEC_OP) + mu * 8 * PRG_BYTE,
            n * UNMASK_PER_PEER,
        ]
    else:
        w = [
            2 * KA_GEN,
            n * SHARE_PER_PEER,
            (n - 1) * (KA_AGREE + m * 4 * PRG_BYTE + m * VEC_OP) + m * 4 * PRG_BYTE + 5 * m * VEC_OP,
            n * UNMASK_PER_PEER,
        ]
    return np.asarray(w, dtype=np.float64)


def measured_weights(transcript: RoundTranscript, n_phases: int) -> np.ndarray:
    clients = {r.party for r in transcript.compute if r.party != SERVER}
    w = np.zeros(n_phases)
    for r in transcript.compute:
        if r.party != SERVER and r.phase < n_phases:
            w[r.phase] += r.duration
    return w / max(len(clients), 1)


def drop_schedule(s: BenchScenario, rep: int, weights: np.ndarray) -> DropoutSchedule:
    if s.n_drop == 0:
        return DropoutSchedule()
    rng = party_rng(s.seed, 4, rep)
    victims = rng.choice(s.N, size=s.n_drop, replace=False)
    probs = weights / weights.sum()
    phases = rng.choice(len(weights), size=s.n_drop, p=probs)
    return DropoutSchedule(tuple(zip(victims.tolist(), phases.tolist())))


def effective_dropout(transcript: RoundTranscript) -> float:
    """``|U1 \\ U2| / |U0|`` from the survivor sets of a SASH transcript."""
    try:
        u0, u1, u2 = (set(transcript.sets[k]) for k in ("U0", "U1", "U2"))
    except KeyError:
        raise ValueError("transcript carries no U0/U1/U2 sets; not a SASH epoch") from None
    if not u0:
        raise ValueError("empty U0")
    return len(u1 - u2) / len(u0)


_ALIGNED = {8: "<u1", 16: "<u2", 32: "<u4"}


def _pack(x: np.ndarray, w: int) -> bytes:
    if w in _ALIGNED:
        return x.astype(_ALIGNED[w]).tobytes()
    bits = ((x[:, None].astype(np.uint64) >> np.arange(w, dtype=np.uint64)) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def _unpack(raw: bytes, w: int, m: int) -> np.ndarray:
    if w in _ALIGNED:
        return np.frombuffer(raw, dtype=_ALIGNED[w]).astype(np.uint64)
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")[: m * w]
    weights = np.left_shift(np.uint64(1), np.arange(w, dtype=np.uint64))
    return (bits.reshape(m, w).astype(np.uint64) * weights).sum(axis=1)


def run_plain(
    updates: dict[int, np.ndarray], quant: QuantConfig, net: SimNet
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Unprotected FedAvg upload: ``ceil(M w / 8)`` bytes per client, bit-packed."""
    net.begin_phase(0)
    up = []
    for cid in sorted(updates):
        if net.online(cid):
            with net.compute(cid):
                up.append(net.envelope(cid, SERVER, _pack(quantize(updates[cid], quant), quant.w)))
    delivered = net.exchange(up)
    if not delivered:
        raise UnrecoverableRoundError("no plain uploads arrived")
    m = next(iter(updates.values())).shape[0]
    with net.compute(SERVER):
        total = np.zeros(m, dtype=np.uint64)
        for env in delivered:
            total += _unpack(env.payload, quant.w, m)
        ids = tuple(e.sender for e in delivered)
        avg = dequantize_sum(total, len(ids), quant) / len(ids)
    net.transcript.record_set("survivors", ids)
    return avg, ids


def _updates(s: BenchScenario, rep: int) -> dict[int, np.ndarray]:
    rng = party_rng(s.seed, 3, rep)
    return {cid: rng.uniform(-1.0, 1.0, s.M) for cid in range(s.N)}


def _run_once(s: BenchScenario, rep: int, schedule: DropoutSchedule, matrix) -> RoundTranscript:
    updates = _updates(s, rep)
    net = SimNet(schedule, s.phases)
    if s.mode == "sash":
        cfg = HmaConfig.create(s.N, s.M, w=s.w, mu=s.mu)
        run_epoch(updates, cfg, net=net, matrix=matrix, seed=s.seed, epoch=rep)
    elif s.mode == "secagg-baseline":
        quant = QuantConfig(n_max=s.N, w=s.w)
        validate_modulus(quant, 1 << 32)
        inputs = {cid: quantize(u, quant) for cid, u in updates.items()}
        run_secagg(inputs, SecAggConfig(s.N, s.M, 32), net=net, seed=s.seed, rng_path=(rep,))
    else:
        run_plain(updates, QuantConfig(n_max=s.N, w=s.w), net)
    net.transcript.meta.update({"mode": s.mode, "rep": rep})
    return net.transcript


def _client_phase_times(tr: RoundTranscript, clients: Iterable[int], phases) -> np.ndarray:
    return np.array([tr.compute_time(c, phases) for c in clients])


def _measure(s: BenchScenario, tr: RoundTranscript, schedule: DropoutSchedule) -> dict[str, float]:
    full = [c for c in range(s.N) if schedule.drop_phase(c) is None] or list(range(s.N))
    all_phases = list(range(len(s.phases)))
    mask_phase = {"sash": [0], "secagg-baseline": [2], "plain": [0]}[s.mode]
    out = {
        "mask": 1e3 * _client_phase_times(tr, full, mask_phase).mean(),
        "server": 1e3 * tr.compute_time(SERVER),
        "total": 1e3 * (_client_phase_times(tr, full, all_phases).mean() + tr.compute_time(SERVER)),
        "bytes": float(np.mean([tr.bytes_sent(c) for c in full])),
        "mka": math.nan,
        "d0": math.nan,
    }
    if s.mode == "sash":
        mka = [1, 2, 3, 4]
        out["mka"] = 1e3 * (_client_phase_times(tr, full, mka).mean() + tr.compute_time(SERVER, mka))
        out["d0"] = effective_dropout(tr)
    return out


def run_scenario(s: BenchScenario, keep_transcripts: bool = False) -> BenchRecord:
    """Run ``s.reps`` repetitions; protocol failures land in ``error``."""
    rec = BenchRecord(scenario=s)
    _kernels.warm_up()
    matrix = None
    if s.mode == "sash":
        t0 = time.perf_counter()
        matrix = shprg.derive_matrix(HmaConfig.create(s.N, s.M, w=s.w, mu=s.mu).shprg)
        rec.derive_ms = 1e3 * (time.perf_counter() - t0)
    if s.drop_model == "cost":
        weights = cost_weights(s)
    elif s.drop_model == "uniform":
        weights = np.ones(len(cost_weights(s)))
    else:
        calib = _run_once(s, -1, DropoutSchedule(), matrix)
        weights = measured_weights(calib, len(cost_weights(s)))

    rows = []
    for rep in range(s.reps):
        schedule = drop_schedule(s, rep, weights)
        try:
            tr = _run_once(s, rep, schedule, matrix)
        except UnrecoverableRoundError as exc:
            tag = "expected-failure: " if s.expected_failure else ""
            rec.error = f"{tag}{type(exc).__name__}: {exc}"
            continue
        rows.append(_measure(s, tr, schedule))
        if keep_transcripts:
            rec.transcripts.append(tr)
    rec.rep_count = len(rows)
    if not rows:
        return rec
    col = {k: np.array([r[k] for r in rows]) for k in rows[0]}
    rec.client_mask_ms_mean = float(col["mask"].mean())
    rec.client_mask_ms_std = float(col["mask"].std(ddof=1)) if len(rows) > 1 else 0.0
    rec.server_ms_mean = float(col["server"].mean())
    rec.server_ms_std = float(col["server"].std(ddof=1)) if len(rows) > 1 else 0.0
    rec.mka_ms_mean = float(col["mka"].mean())
    rec.total_ms_mean = float(col["total"].mean())
    rec.total_ms_std = float(col["total"].std(ddof=1)) if len(rows) > 1 else 0.0
    rec.bytes_per_client = float(col["bytes"].mean())
    rec.d0 = float(col["d0"].mean())
    return rec


def _safe_run(s: BenchScenario) -> BenchRecord:
    try:
        return run_scenario(s)
    except Exception as exc:  # recorded per row so the sweep keeps going
        return BenchRecord(scenario=s, error=f"{type(exc).__name__}: {exc}")


def sweep(scenarios: Sequence[BenchScenario], out=None, jobs: int = 1) -> list[BenchRecord]:
    """Run every scenario and write one CSV row each (header always written).

    ``jobs > 1`` runs whole scenarios in separate processes; parties of one
    scenario always share a process so timings stay attributable.
    """
    if jobs > 1 and len(scenarios) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_safe_run, scenarios))
    else:
        records = [_safe_run(s) for s in scenarios]
    if out is not None:
        write_csv(records, out)
    return records


def write_csv(records: Sequence[BenchRecord], out) -> None:
    own = isinstance(out, (str, Path))
    fh = open(out, "w", newline="") if own else out
    try:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.row())
    finally:
        if own:
            fh.close()


def csv_text(records: Sequence[BenchRecord]) -> str:
    buf = io.StringIO()
    write_csv(records, buf)
    return buf.getvalue()


def parse_grid(text: str) -> list[BenchScenario]:
    """One scenario per line: whitespace-separated ``key=value`` pairs."""
    types = {f: type(v) for f, v in asdict(BenchScenario("plain", 1, 2)).items()}
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kw = {}
        for item in line.split():
            key, _, value = item.partition("=")
            if key not in types:
                raise ValueError(f"grid line {lineno}: unknown field {key!r}")
            kw[key] = types[key](value)
        out.append(BenchScenario(**kw))
    return out


def _csv_list(kind):
    return lambda text: [kind(v) for v in text.split(",") if v]


def build_grid(args: argparse.Namespace) -> list[BenchScenario]:
    if args.grid:
        base = parse_grid(Path(args.grid).read_text())
        return [replace(s, seed=args.seed) if args.seed is not None else s for s in base]
    return [
        BenchScenario(mode, m, n, d, args.reps, args.seed or 0, args.width, drop_model=args.drop_model)
        for mode in args.mode
        for m in args.params
        for n in args.clients
        for d in args.dropout
    ]


def main(argv: Sequence[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="sash-bench", description=__doc__.split("\n")[0])
    ap.add_argument("--mode", type=_csv_list(str), default=["sash", "secagg-baseline"],
                    help="comma list of sash, secagg-baseline, plain")
    ap.add_argument("--clients", type=_csv_list(int), default=[50], help="comma list of N")
    ap.add_argument("--params", type=_csv_list(int), default=[100_000],
                    help="comma list of model sizes M")
    ap.add_argument("--dropout", type=_csv_list(float), default=[0.0], help="comma list of d")
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--width", type=int, default=16, help="quantization bits w")
    ap.add_argument("--drop-model", choices=DROP_MODELS, default="cost")
    ap.add_argument("--jobs", type=int, default=1, help="scenarios run in parallel processes")
    ap.add_argument("--grid", help="file with one key=value scenario per line")
    ap.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    args = ap.parse_args(argv)
    try:
        grid = build_grid(args)
    except (ValueError, OSError) as exc:
        print(f"sash-bench: {exc}", file=sys.stderr)
        return 2
    out = sys.stdout if args.out == "-" else args.out
    sweep(grid, out, jobs=args.jobs)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
