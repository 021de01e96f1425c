"""
Unit tests for the benchmark harness.
Scaling-slope checks are marked slow and skipped by default.
"""

import json

import pytest

from src.bench_service import CSV_HEADER, BenchmarkService, BenchRecord, fit_scaling_exponent
from src.config import Config
from src.errors import ConfigurationError, PropertyFailure


def record(n, ms, impl="sliced_relu"):
    return BenchRecord(n, 8, 1, impl, "f64", ms, 0.0, 3, ms)


class TestBenchRecord:
    """Tests for benchmark records."""

    def test_csv_row_order(self):
        """Rows follow the fixed header."""
        row = record(256, 1.5).csv_row()
        assert len(row) == len(CSV_HEADER)
        assert row[:5] == ["256", "8", "1", "sliced_relu", "f64"]
        assert row[-1] == "3"

    def test_rejects_nonpositive_time(self):
        """Mean time must be positive."""
        with pytest.raises(ConfigurationError):
            record(256, 0.0)

    def test_rejects_few_reps(self):
        """At least three repetitions."""
        with pytest.raises(ConfigurationError):
            BenchRecord(256, 8, 1, "sliced_relu", "f64", 1.0, 0.0, 2, 1.0)

    def test_rejects_unknown_impl(self):
        """Implementations come from a fixed set."""
        with pytest.raises(ConfigurationError):
            record(256, 1.0, impl="flash")


class TestScalingFit:
    """Tests for the log-log slope fit."""

    def test_recovers_power_law(self):
        """t = c n^2 gives slope 2."""
        rows = [record(n, 1e-6 * n ** 2, "naive_relu") for n in (256, 512, 1024, 2048)]
        assert fit_scaling_exponent(rows, "naive_relu") == pytest.approx(2.0)

    def test_filters_by_impl(self):
        """Only rows of the requested implementation are fitted."""
        rows = [record(n, 0.01 * n) for n in (100, 1000)] + [record(100, 5.0, "naive_relu")]
        assert fit_scaling_exponent(rows, "sliced_relu") == pytest.approx(1.0)

    def test_needs_two_lengths(self):
        """One sequence length has no slope."""
        with pytest.raises(ConfigurationError):
            fit_scaling_exponent([record(256, 1.0)], "sliced_relu")


class TestBenchmarkService:
    """Tests for the timing sweep."""

    def test_small_sweep(self, tmp_path):
        """Every (impl, n) cell is timed and written with the fixed header."""
        service = BenchmarkService(reps=3, warmup=0, seed=0)
        records = service.run([32, 64], d=4, heads=2, impls=["sliced_relu", "naive_relu", "sliced_bump"])
        assert [(r.impl, r.n) for r in records] == [
            ("sliced_relu", 32), ("sliced_relu", 64),
            ("naive_relu", 32), ("naive_relu", 64),
            ("sliced_bump", 32), ("sliced_bump", 64),
        ]
        assert all(r.mean_ms > 0 and r.reps == 3 for r in records)

        csv_path = service.write_csv(records, tmp_path / "bench.csv")
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "n,d,heads,impl,dtype,mean_ms,std_ms,reps"
        assert len(lines) == 7

        summary = json.loads(service.write_summary(records, tmp_path / "bench.json").read_text())
        assert summary["threads"] == service.threads
        assert set(summary["slopes"]) == {"sliced_relu", "naive_relu", "sliced_bump"}
        assert summary["gate"]["passed"]
        assert set(summary["gate"]["max_rel_error"]) == {"32", "64"}

    def test_correctness_gate(self):
        """Sliced and dense layers agree before timing."""
        service = BenchmarkService(reps=3, warmup=0, seed=1)
        assert service.check_correctness(128, 4, 2) <= Config.BENCH_GATE_TOLERANCE

    def test_gate_failure_aborts(self, monkeypatch):
        """A failing gate raises instead of timing."""
        monkeypatch.setattr(Config, "BENCH_GATE_TOLERANCE", -1.0)
        service = BenchmarkService(reps=3, warmup=0)
        with pytest.raises(PropertyFailure):
            service.run([16], d=2)

    def test_gate_runs_when_grid_exceeds_cap(self, monkeypatch, tmp_path):
        """Grids above the gate cap are checked on an instance of the cap size."""
        monkeypatch.setattr(Config, "BENCH_GATE_MAX_N", 64)
        service = BenchmarkService(reps=3, warmup=0, seed=2)
        records = service.run([128, 256], d=2, impls=["sliced_relu"])
        assert set(service.gate_results) == {"64"}
        assert service.gate_passed
        summary = json.loads(service.write_summary(records, tmp_path / "bench.json").read_text())
        assert summary["gate"]["passed"] is True
        assert summary["gate"]["max_rel_error"]["64"] <= Config.BENCH_GATE_TOLERANCE

    def test_summary_without_gate_is_not_passed(self, tmp_path):
        """No gate result means the summary does not claim a pass."""
        service = BenchmarkService(reps=3, warmup=0)
        assert not service.gate_passed
        summary = json.loads(service.write_summary([record(64, 1.0), record(128, 2.0)],
                                                   tmp_path / "bench.json").read_text())
        assert summary["gate"]["passed"] is False

    def test_naive_cap(self):
        """Dense runs above the cap are refused unless forced."""
        with pytest.raises(ConfigurationError):
            BenchmarkService(reps=3, naive_cap=16).run([32], d=2, impls=["naive_softmax"])
        records = BenchmarkService(reps=3, warmup=0, naive_cap=16, force_naive=True).run(
            [32], d=2, impls=["naive_softmax"])
        assert records[0].impl == "naive_softmax"

    def test_threaded_heads(self):
        """Thread count is recorded and does not break the sweep."""
        service = BenchmarkService(reps=3, warmup=0, threads=2)
        records = service.run([64], d=4, heads=3, impls=["sliced_relu"])
        assert records[0].heads == 3 and service.threads == 2

    def test_rejects_few_reps(self):
        """The service needs three repetitions."""
        with pytest.raises(ConfigurationError):
            BenchmarkService(reps=2)


@pytest.mark.slow
class TestScaling:
    """Empirical scaling of the sliced and dense kernels."""

    def test_sliced_is_near_linear(self):
        """Log-log slope of the sliced kernel stays below 1.3."""
        service = BenchmarkService(reps=5, seed=0)
        records = service.run([2 ** k for k in range(10, 19)], d=16, impls=["sliced_relu"])
        assert fit_scaling_exponent(records, "sliced_relu") <= 1.3

    def test_naive_is_quadratic(self):
        """Log-log slope of the dense kernel is at least 1.8."""
        service = BenchmarkService(reps=5, seed=0)
        records = service.run([2 ** k for k in range(8, 14)], d=16, impls=["naive_relu"])
        assert fit_scaling_exponent(records, "naive_relu") >= 1.8
