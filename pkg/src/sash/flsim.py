"""Small FedAvg simulator comparing plain averaging with SASH aggregation.

Models are deliberately tiny and written out by hand (binary logistic
regression, or one tanh hidden layer) so that the only moving part under
test is aggregation.  Both modes start from the same parameters and use the
same data order; the only difference is how the round's client deltas are
averaged.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import shprg
from .errors import DivergenceError
from .hma import HmaConfig, make_clients, run_epoch
from .records import dump_record, parse_bool, parse_record
from .simnet import DropoutSchedule, party_rng

MODES = ("plain", "sash")


@dataclass(frozen=True)
class FlConfig:
    n_clients: int = 20
    rounds: int = 30
    features: int = 600
    samples_per_client: int = 100
    test_size: int = 2000
    model: str = "logistic"
    hidden: int = 16
    local_epochs: int = 1
    lr: float = 0.02
    batch: int = 20
    separation: float = 2.0
    init_scale: float = 0.05
    label_skew: bool = False
    w: int = 16
    m_min: float = -1.0
    m_max: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.model not in ("logistic", "mlp"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.n_clients < 2 or self.samples_per_client < 1 or self.batch < 1:
            raise ValueError("need at least two clients and non-empty shards")

    def to_record(self) -> str:
        return dump_record({f.name: getattr(self, f.name) for f in fields(self)})

    @classmethod
    def from_record(cls, text: str) -> "FlConfig":
        raw = parse_record(text)
        kw = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            kind = type(f.default)
            kw[f.name] = parse_bool(raw[f.name]) if kind is bool else kind(raw[f.name])
        return cls(**kw)


class Shard(NamedTuple):
    X: np.ndarray
    y: np.ndarray


@dataclass
class FederatedDataset:
    shards: list[Shard]
    test: Shard

    @property
    def shard_sizes(self) -> list[int]:
        return [len(s.y) for s in self.shards]


def make_dataset(cfg: FlConfig) -> FederatedDataset:
    """Two overlapping Gaussian classes split into per-client shards.

    With ``label_skew`` each shard is sorted by label before splitting, so
    most clients see mostly one class.
    """
    rng = party_rng(cfg.seed, 10)
    # Feature scales spread over two decades make the problem ill-conditioned,
    # so gradient descent needs many rounds instead of a single step.
    scales = np.exp(rng.uniform(np.log(0.05), np.log(5.0), cfg.features))
    direction = rng.standard_normal(cfg.features)
    direction /= np.linalg.norm(direction)
    # Whitened half-distance between the class means is ``separation``.
    shift = cfg.separation * direction * scales

    def draw(n: int) -> Shard:
        y = rng.integers(0, 2, n)
        X = rng.standard_normal((n, cfg.features)) * scales + np.where(y[:, None] == 1, shift, -shift)
        return Shard(X, y.astype(np.float64))

    n_train = cfg.n_clients * cfg.samples_per_client
    train = draw(n_train)
    test = draw(cfg.test_size)
    order = np.argsort(train.y, kind="stable") if cfg.label_skew else rng.permutation(n_train)
    parts = np.array_split(order, cfg.n_clients)
    return FederatedDataset([Shard(train.X[p], train.y[p]) for p in parts], test)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bce(logits: np.ndarray, y: np.ndarray) -> float:
    # log(1 + e^z) - y z, written to stay finite for large |z|.
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


class ToyModel:
    """Flat-parameter binary classifier with hand-written gradients."""

    def __init__(self, features: int, family: str = "logistic", hidden: int = 16) -> None:
        self.features = features
        self.family = family
        self.hidden = hidden
        if family == "logistic":
            self.size = features + 1
        elif family == "mlp":
            self.size = hidden * features + 2 * hidden + 1
        else:
            raise ValueError(f"unknown model family {family!r}")

    def init(self, rng: np.random.Generator, scale: float = 0.05) -> np.ndarray:
        theta = np.zeros(self.size)
        if self.family == "logistic":
            theta[:-1] = scale * rng.standard_normal(self.size - 1)
            return theta
        d, h = self.features, self.hidden
        theta[: h * d] = rng.standard_normal(h * d) / np.sqrt(d)
        theta[h * d + h : h * d + 2 * h] = rng.standard_normal(h) / np.sqrt(h)
        return theta

    def _split(self, theta: np.ndarray):
        d, h = self.features, self.hidden
        W1 = theta[: h * d].reshape(h, d)
        b1 = theta[h * d : h * d + h]
        w2 = theta[h * d + h : h * d + 2 * h]
        return W1, b1, w2, theta[-1]

    def logits(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        if self.family == "logistic":
            return X @ theta[:-1] + theta[-1]
        W1, b1, w2, b2 = self._split(theta)
        return np.tanh(X @ W1.T + b1) @ w2 + b2

    def loss(self, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        return _bce(self.logits(theta, X), y)

    def loss_grad(self, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        n = len(y)
        if self.family == "logistic":
            z = X @ theta[:-1] + theta[-1]
            r = (_sigmoid(z) - y) / n
            return _bce(z, y), np.concatenate([X.T @ r, [r.sum()]])
        W1, b1, w2, b2 = self._split(theta)
        a = np.tanh(X @ W1.T + b1)
        z = a @ w2 + b2
        r = (_sigmoid(z) - y) / n
        da = np.outer(r, w2) * (1.0 - a * a)
        grad = np.concatenate([(da.T @ X).ravel(), da.sum(axis=0), a.T @ r, [r.sum()]])
        return _bce(z, y), grad

    def accuracy(self, theta: np.ndarray, shard: Shard) -> float:
        return float(np.mean((self.logits(theta, shard.X) > 0) == (shard.y > 0.5)))


def local_train(
    model: ToyModel,
    theta: np.ndarray,
    shard: Shard,
    epochs: int,
    lr: float,
    batch: int = 20,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Minibatch SGD from ``theta``; returns the parameter delta."""
    if not np.all(np.isfinite(theta)):
        raise DivergenceError("starting parameters are not finite")
    rng = rng or np.random.default_rng(0)
    local = theta.copy()
    n = len(shard.y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            loss, grad = model.loss_grad(local, shard.X[idx], shard.y[idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite loss {loss} during local training")
            local -= lr * grad
    delta = local - theta
    if not np.all(np.isfinite(delta)):
        raise DivergenceError("local update overflowed")
    return delta


def clip_update(delta: np.ndarray, cfg: FlConfig) -> np.ndarray:
    return np.clip(delta, cfg.m_min, np.nextafter(cfg.m_max, cfg.m_min))


class RoundOutput(NamedTuple):
    update: np.ndarray
    survivors: tuple[int, ...]
    fingerprint: str


def fedavg_round(
    deltas: Mapping[int, np.ndarray],
    mode: str,
    cfg: FlConfig,
    *,
    hma: HmaConfig | None = None,
    matrix=None,
    clients=None,
    schedule: DropoutSchedule | None = None,
    epoch: int = 0,
) -> RoundOutput:
    """Average the clipped client deltas, in the clear or through SASH."""
    clipped = {cid: clip_update(d, cfg) for cid, d in sorted(deltas.items())}
    if mode == "plain":
        schedule = schedule or DropoutSchedule()
        ids = tuple(c for c in clipped if schedule.drop_phase(c) is None)
        return RoundOutput(np.mean([clipped[c] for c in ids], axis=0), ids, "")
    if mode != "sash":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    if hma is None:
        size = next(iter(clipped.values())).shape[0]
        hma = HmaConfig.create(len(clipped), size, w=cfg.w, m_min=cfg.m_min, m_max=cfg.m_max)
    res = run_epoch(
        clipped, hma, schedule, matrix=matrix, clients=clients, seed=cfg.seed, epoch=epoch
    )
    return RoundOutput(res.average, res.survivors, res.transcript.fingerprint())


class Curve(NamedTuple):
    round: int
    mode: str
    accuracy: float
    loss: float


def run_experiment(
    cfg: FlConfig, modes: Sequence[str] = MODES
) -> tuple[list[Curve], dict[str, list[str]]]:
    """Train ``cfg.rounds`` FedAvg rounds per mode from a shared start.

    Returns test metrics for rounds ``0..rounds`` and, per mode, the list of
    per-round SASH transcript fingerprints (empty strings for plain).
    """
    data = make_dataset(cfg)
    model = ToyModel(cfg.features, cfg.model, cfg.hidden)
    theta0 = model.init(party_rng(cfg.seed, 11), cfg.init_scale)
    hma = HmaConfig.create(
        cfg.n_clients, model.size, w=cfg.w, m_min=cfg.m_min, m_max=cfg.m_max
    )
    matrix = shprg.derive_matrix(hma.shprg) if "sash" in modes else None
    curves: list[Curve] = []
    prints: dict[str, list[str]] = {}
    for mode in modes:
        theta = theta0.copy()
        clients = make_clients(hma, matrix, range(cfg.n_clients), cfg.seed) if mode == "sash" else None
        curves.append(Curve(0, mode, model.accuracy(theta, data.test), model.loss(theta, *data.test)))
        prints[mode] = []
        for r in range(1, cfg.rounds + 1):
            deltas = {
                cid: local_train(
                    model, theta, shard, cfg.local_epochs, cfg.lr, cfg.batch,
                    party_rng(cfg.seed, 12, r, cid),
                )
                for cid, shard in enumerate(data.shards)
            }
            out = fedavg_round(
                deltas, mode, cfg, hma=hma, matrix=matrix, clients=clients, epoch=r
            )
            theta = theta + out.update
            prints[mode].append(out.fingerprint)
            curves.append(
                Curve(r, mode, model.accuracy(theta, data.test), model.loss(theta, *data.test))
            )
    return curves, prints


def rounds_to_fraction(curves: Sequence[Curve], mode: str, fraction: float = 0.9) -> int:
    """First round whose accuracy reaches ``fraction`` of the mode's peak."""
    acc = [c for c in curves if c.mode == mode]
    peak = max(c.accuracy for c in acc)
    return next(c.round for c in acc if c.accuracy >= fraction * peak)


def final_accuracy(curves: Sequence[Curve], mode: str) -> float:
    return [c for c in curves if c.mode == mode][-1].accuracy


def write_curves(curves: Sequence[Curve], out) -> None:
    own = isinstance(out, (str, Path))
    fh = open(out, "w", newline="") if own else out
    try:
        writer = csv.writer(fh)
        writer.writerow(["round", "mode", "accuracy", "loss"])
        for c in curves:
            writer.writerow([c.round, c.mode, f"{c.accuracy:.6f}", f"{c.loss:.6f}"])
    finally:
        if own:
            fh.close()


def main(argv: Sequence[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="sash-flsim", description=__doc__.split("\n")[0])
    ap.add_argument("--config", help="flat key=value experiment record")
    ap.add_argument("--rounds", type=int)
    ap.add_argument("--clients", type=int)
    ap.add_argument("--model", choices=("logistic", "mlp"))
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    args = ap.parse_args(argv)
    cfg = FlConfig.from_record(Path(args.config).read_text()) if args.config else FlConfig()
    overrides = {
        "rounds": args.rounds, "n_clients": args.clients, "model": args.model, "seed": args.seed,
    }
    cfg = FlConfig(**{**cfg.__dict__, **{k: v for k, v in overrides.items() if v is not None}})
    curves, _ = run_experiment(cfg)
    write_curves(curves, sys.stdout if args.out == "-" else args.out)
    for mode in MODES:
        print(
            f"{mode}: final accuracy {final_accuracy(curves, mode):.4f}, "
            f"rounds to 90% of peak {rounds_to_fraction(curves, mode)}",
            file=sys.stderr,
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
