import csv
import io
import math

import numpy as np
import pytest

from sash import bench
from sash.bench import BenchScenario, effective_dropout, run_scenario, sweep
from sash.errors import ConfigError
from sash.simnet import RoundTranscript


def test_scenario_validation():
    with pytest.raises(ConfigError):
        BenchScenario("nope", 10, 5)
    with pytest.raises(ConfigError):
        BenchScenario("sash", 10, 5, d=1.0)
    s = BenchScenario("sash", 1000, 10, d=0.4)
    assert s.n_drop == 4 and s.max_dropouts == 3 and s.expected_failure
    assert not BenchScenario("sash", 1000, 10, d=0.3).expected_failure


@pytest.mark.parametrize("w", [16, 11])
def test_plain_bytes_are_raw_quantized_size(w):
    rec = run_scenario(BenchScenario("plain", 3000, 6, reps=2, w=w))
    assert rec.bytes_per_client == math.ceil(3000 * w / 8)
    assert rec.rep_count == 2 and not rec.error


def test_pack_round_trip():
    rng = np.random.default_rng(0)
    for w in (3, 8, 11, 16, 32):
        x = rng.integers(0, 2**w, 101, dtype=np.uint64).astype(np.uint32)
        assert bench._unpack(bench._pack(x, w), w, 101).tolist() == x.tolist()


def test_sash_and_baseline_rows():
    for mode in ("sash", "secagg-baseline"):
        rec = run_scenario(BenchScenario(mode, 2000, 8, d=0.25, reps=2))
        assert not rec.error and rec.rep_count == 2
        assert rec.total_ms_mean >= rec.server_ms_mean > 0
        assert (mode == "sash") == (not math.isnan(rec.d0))
        assert (mode == "sash") == (not math.isnan(rec.mka_ms_mean))


def test_expected_failure_reported_not_raised():
    s = BenchScenario("secagg-baseline", 1000, 6, d=0.5, reps=3, drop_model="uniform")
    rec = run_scenario(s)
    assert s.expected_failure
    assert rec.rep_count < 3
    assert rec.error.startswith("expected-failure")


def test_effective_dropout():
    tr = RoundTranscript()
    with pytest.raises(ValueError):
        effective_dropout(tr)
    tr.sets.update({"U0": (0, 1, 2, 3), "U1": (0, 1, 2), "U2": (0, 1)})
    assert effective_dropout(tr) == 0.25
    tr.sets.update({"U1": (0, 1), "U2": (0, 1)})
    assert effective_dropout(tr) == 0.0


def test_cost_model_mostly_drops_during_masking():
    s = BenchScenario("sash", 100_000, 50, d=0.3)
    w = bench.cost_weights(s)
    share_mka = w[1:4].sum() / w.sum()
    assert 0 < share_mka < 0.2
    base = bench.cost_weights(BenchScenario("secagg-baseline", 100_000, 50, d=0.3))
    assert base[2] / base.sum() > 0.9


def test_sweep_empty_grid_writes_header_only():
    buf = io.StringIO()
    sweep([], buf)
    assert buf.getvalue().strip() == ",".join(bench.COLUMNS)


def test_sweep_deterministic_non_timing_columns():
    grid = [BenchScenario("sash", 1500, 6, d=0.2, reps=2, seed=4),
            BenchScenario("plain", 1500, 6, reps=1)]
    rows = []
    for _ in range(2):
        text = bench.csv_text(sweep(grid))
        rows.append(list(csv.DictReader(io.StringIO(text))))
    keep = ("mode", "M", "N", "d", "rep_count", "bytes_per_client", "d0", "error")
    for a, b in zip(*rows):
        assert {k: a[k] for k in keep} == {k: b[k] for k in keep}


def test_sweep_records_harness_errors_and_continues(monkeypatch):
    def boom(s, keep_transcripts=False):
        if s.mode == "plain":
            raise RuntimeError("synthetic")
        return bench.BenchRecord(scenario=s)

    monkeypatch.setattr(bench, "run_scenario", boom)
    recs = sweep([BenchScenario("plain", 10, 2), BenchScenario("sash", 1000, 2)])
    assert recs[0].error == "RuntimeError: synthetic" and recs[1].error == ""


def test_grid_parsing():
    grid = bench.parse_grid("# comment\nmode=sash M=1000 N=5 d=0.2\n\nmode=plain M=10 N=3 reps=2\n")
    assert grid[0] == BenchScenario("sash", 1000, 5, 0.2)
    assert grid[1].reps == 2
    with pytest.raises(ValueError):
        bench.parse_grid("mode=sash M=1 N=2 bogus=1")


def test_cli_writes_csv(tmp_path):
    out = tmp_path / "b.csv"
    code = bench.main(["--mode", "plain,secagg-baseline", "--clients", "4", "--params", "600",
                       "--dropout", "0,0.25", "--reps", "1", "--seed", "1", "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 4 and list(rows[0]) == list(bench.COLUMNS)


def test_cli_bad_grid_file_is_harness_error(tmp_path):
    assert bench.main(["--grid", str(tmp_path / "missing.txt")]) == 2
