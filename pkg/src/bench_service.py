"""
Benchmark service for the sliced kernels.
Times forward passes over a grid of sequence lengths, gates timing on a
correctness check against the dense oracle, and fits log-log scaling slopes.
"""

import csv
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .config import Config, KernelConfig, numpy_dtype
from .errors import ConfigurationError, PropertyFailure
from .kernel_core import multi_head_layer
from .params import HeadParams, TokenSequence, random_head, random_tokens
from .reference_oracle import bump_attention_naive, relu_attention_naive, softmax_attention_naive
from .utils.io import write_json

logger = logging.getLogger(__name__)

CSV_HEADER = ("n", "d", "heads", "impl", "dtype", "mean_ms", "std_ms", "reps")
IMPLS = ("sliced_relu", "naive_relu", "naive_softmax", "sliced_bump")
NAIVE_IMPLS = ("naive_relu", "naive_softmax")


@dataclass(frozen=True)
class BenchRecord:
    """Wall-clock statistics of one (n, d, heads, impl) cell."""

    n: int
    d: int
    heads: int
    impl: str
    dtype: str
    mean_ms: float
    std_ms: float
    reps: int
    median_ms: float

    def __post_init__(self):
        if self.impl not in IMPLS:
            raise ConfigurationError("bench", f"unknown implementation {self.impl!r}")
        if not self.mean_ms > 0:
            raise ConfigurationError("bench", f"mean time must be > 0, got {self.mean_ms}")
        if self.reps < 3:
            raise ConfigurationError("bench", f"at least 3 repetitions are needed, got {self.reps}")

    def csv_row(self) -> List[str]:
        return [str(self.n), str(self.d), str(self.heads), self.impl, self.dtype,
                f"{self.mean_ms:.6f}", f"{self.std_ms:.6f}", str(self.reps)]


def fit_scaling_exponent(records: Sequence[BenchRecord], impl: str) -> float:
    """
    Least-squares slope of log(median time) against log(n) for ``impl``.

    Raises:
        ConfigurationError: fewer than two distinct sequence lengths.
    """
    rows = [r for r in records if r.impl == impl]
    ns = np.array([r.n for r in rows], dtype=np.float64)
    if np.unique(ns).size < 2:
        raise ConfigurationError("bench", f"need at least two sequence lengths to fit {impl}")
    times = np.array([r.median_ms for r in rows], dtype=np.float64)
    slope, _ = np.polyfit(np.log(ns), np.log(times), 1)
    return float(slope)


class BenchmarkService:
    """Runs timing sweeps for the sliced and dense attention implementations."""

    def __init__(self, reps: Optional[int] = None, warmup: Optional[int] = None, threads: Optional[int] = None,
                 naive_cap: Optional[int] = None, force_naive: bool = False, seed: Optional[int] = None,
                 dtype: str = "f64", bandwidth: float = Config.DEFAULT_BANDWIDTH):
        """Initialize the service from explicit values or the configuration defaults."""
        self.reps = Config.BENCH_REPS if reps is None else reps
        self.warmup = Config.BENCH_WARMUP if warmup is None else warmup
        self.threads = Config.THREADS if threads is None else threads
        self.naive_cap = Config.NAIVE_CAP if naive_cap is None else naive_cap
        self.force_naive = force_naive
        self.seed = Config.resolve_seed(seed)
        self.dtype = dtype
        self.bandwidth = bandwidth
        numpy_dtype(dtype)
        if self.reps < 3:
            raise ConfigurationError("bench", f"at least 3 repetitions are needed, got {self.reps}")
        self.gate_results: Dict[str, float] = {}

    def _instance(self, n: int, d: int, heads: int, impl: str):
        rng = np.random.default_rng([self.seed, n, d, heads])
        kind = "linear" if impl.endswith("bump") else "mlp1"
        seq = random_tokens(n, d, rng)
        return seq, [random_head(d, rng, kind=kind, mixer=True) for _ in range(heads)]

    def _layer(self, impl: str, cfg: KernelConfig) -> Callable[[TokenSequence, List[HeadParams]], np.ndarray]:
        if impl == "sliced_relu":
            return lambda seq, hs: multi_head_layer(seq, hs, cfg, "relu", threads=self.threads).data
        if impl == "sliced_bump":
            return lambda seq, hs: multi_head_layer(seq, hs, cfg, "bump", threads=self.threads).data
        naive = {"naive_relu": relu_attention_naive, "naive_softmax": None}[impl]

        def dense(seq: TokenSequence, hs: List[HeadParams]) -> np.ndarray:
            out = seq.data.astype(cfg.np_dtype)
            for head in hs:
                head_out = softmax_attention_naive(seq, head) if naive is None else naive(seq, head, cfg)
                out = out + head_out @ head.mixer.T
            return out

        return dense

    def check_correctness(self, n: int, d: int, heads: int) -> float:
        """
        Compare sliced and dense outputs in float64 before any timing.

        Returns:
            float: the largest relative error over both kernels

        Raises:
            PropertyFailure: the error exceeds ``Config.BENCH_GATE_TOLERANCE``.
        """
        worst = 0.0
        for sliced, naive, variant in (("sliced_relu", relu_attention_naive, "relu"),
                                       ("sliced_bump", bump_attention_naive, "bump")):
            seq, hs = self._instance(n, d, heads, sliced)
            cfg = KernelConfig(dtype="f64", bandwidth=self.bandwidth)
            got = multi_head_layer(seq, hs, cfg, variant, residual=False).data
            want = sum(naive(seq, h, cfg.resolved(variant)) @ h.mixer.T for h in hs)
            scale = max(float(np.abs(want).max()), np.finfo(np.float64).tiny)
            worst = max(worst, float(np.abs(got - want).max()) / scale)
        if worst > Config.BENCH_GATE_TOLERANCE:
            raise PropertyFailure("bench", f"sliced and dense outputs differ by {worst:.3e} at n={n}")
        return worst

    def _time(self, fn: Callable[[], np.ndarray]) -> np.ndarray:
        for _ in range(self.warmup):
            fn()
        samples = []
        for _ in range(self.reps):
            start = time.perf_counter()
            fn()
            samples.append((time.perf_counter() - start) * 1e3)
        return np.asarray(samples)

    def run(self, n_grid: Sequence[int], d: int, heads: int = 1,
            impls: Sequence[str] = ("sliced_relu", "naive_relu")) -> List[BenchRecord]:
        """
        Time every implementation at every n.

        The gate runs once per distinct size min(n, Config.BENCH_GATE_MAX_N),
        so grids beyond the cap are still checked on a smaller instance.

        Raises:
            ConfigurationError: a dense run above the cap without ``force_naive``.
            PropertyFailure: the correctness gate failed.
        """
        unknown = [impl for impl in impls if impl not in IMPLS]
        if unknown:
            raise ConfigurationError("bench", f"unknown implementations {unknown}; choose from {IMPLS}")
        for impl in impls:
            too_big = [n for n in n_grid if impl in NAIVE_IMPLS and n > self.naive_cap]
            if too_big and not self.force_naive:
                raise ConfigurationError(
                    "bench", f"{impl} at n={too_big[0]} exceeds the dense cap {self.naive_cap}; pass --force-naive"
                )

        for size in sorted({min(n, Config.BENCH_GATE_MAX_N) for n in n_grid}):
            self.gate_results[str(size)] = self.check_correctness(size, d, heads)

        cfg = KernelConfig(dtype=self.dtype, bandwidth=self.bandwidth)
        records = []
        for impl in impls:
            layer = self._layer(impl, cfg)
            for n in n_grid:
                seq, hs = self._instance(n, d, heads, impl)
                seq = TokenSequence(seq.data.astype(cfg.np_dtype))
                samples = self._time(lambda: layer(seq, hs))
                record = BenchRecord(n, d, heads, impl, self.dtype, float(samples.mean()),
                                     float(samples.std()), self.reps, float(np.median(samples)))
                logger.info("%s n=%d: %.3f ms", impl, n, record.median_ms)
                records.append(record)
        return records

    def write_csv(self, records: Sequence[BenchRecord], path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(CSV_HEADER)
            for record in records:
                writer.writerow(record.csv_row())
        return path

    @property
    def gate_passed(self) -> bool:
        """True once at least one gate ran and every error is within tolerance."""
        return bool(self.gate_results) and all(
            err <= Config.BENCH_GATE_TOLERANCE for err in self.gate_results.values()
        )

    def write_summary(self, records: Sequence[BenchRecord], path: Union[str, Path]) -> Path:
        """JSON sidecar with medians, thread count, fitted slopes and gate errors."""
        slopes = {}
        for impl in sorted({r.impl for r in records}):
            try:
                slopes[impl] = fit_scaling_exponent(records, impl)
            except ConfigurationError:
                slopes[impl] = None
        return write_json(path, {
            "records": [asdict(r) for r in records],
            "threads": self.threads,
            "seed": self.seed,
            "slopes": slopes,
            "gate": {
                "passed": self.gate_passed,
                "tolerance": Config.BENCH_GATE_TOLERANCE,
                "max_rel_error": self.gate_results,
            },
        })
