"""
Configuration management for the sliced attention toolkit.
Handles environment-driven settings, kernel configuration and run configuration.
"""

import logging
import os
from dataclasses import dataclass, replace
from typing import Literal, Optional

import numpy as np
from dotenv import load_dotenv

from .errors import ConfigurationError

load_dotenv()

Variant = Literal["relu", "bump"]
DType = Literal["f32", "f64"]

VARIANTS = ("relu", "bump")
DTYPES = ("f32", "f64")


class Config:
    """Central configuration class for the toolkit."""

    # Reproducibility
    SEED: int = int(os.getenv("SLICED_ATTN_SEED", "0"))

    # Logging
    LOG_LEVEL: str = os.getenv("SLICED_ATTN_LOG_LEVEL", "WARNING")
    LOG_FORMAT: str = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"

    # Kernel defaults
    EPSILON_F64: float = 1e-12
    EPSILON_F32: float = 1e-6
    DEFAULT_BANDWIDTH: float = 1.0

    # Benchmark harness
    NAIVE_CAP: int = int(os.getenv("SLICED_ATTN_NAIVE_CAP", str(2**13)))
    BENCH_REPS: int = int(os.getenv("SLICED_ATTN_BENCH_REPS", "5"))
    BENCH_WARMUP: int = int(os.getenv("SLICED_ATTN_BENCH_WARMUP", "1"))
    BENCH_GATE_MAX_N: int = 2048
    BENCH_GATE_TOLERANCE: float = 1e-10
    THREADS: int = int(os.getenv("SLICED_ATTN_THREADS", "1"))

    # Gradient checks
    GRADCHECK_STEP: float = 1e-5
    GRADCHECK_MIN_GAP: float = 1e-3
    GRADCHECK_TOLERANCE: float = 1e-5
    GRADCHECK_DIRECTIONS: int = 20
    TIE_GAP: float = 1e-6

    # Expressivity engine
    DIRECTION_DRAWS: int = int(os.getenv("SLICED_ATTN_DIRECTION_DRAWS", "1000"))
    DIRECTION_MIN_GAP: float = 1e-9
    MATCH_TOLERANCE: float = 1e-6
    GAMMA_TOLERANCE: float = 1e-12
    RESIDUAL_TOLERANCE: float = 1e-12

    # Diagnostics
    CPD_TRIALS: int = 1000
    CPD_TOLERANCE: float = 1e-12
    ZERO_SUM_TOLERANCE: float = 1e-12

    # Report files
    DEFAULT_OUTPUT: str = "output.json"
    DEFAULT_BENCH_OUTPUT: str = "bench.csv"
    DEFAULT_HEATMAP_OUTPUT: str = "heatmap.csv"

    @classmethod
    def epsilon_for(cls, dtype: str) -> float:
        """
        Default denominator floor for a dtype.

        Returns:
            float: 1e-12 for f64, 1e-6 for f32
        """
        return cls.EPSILON_F32 if dtype == "f32" else cls.EPSILON_F64

    @classmethod
    def resolve_seed(cls, seed: Optional[int] = None) -> int:
        """
        Resolve a seed: explicit value, then SLICED_ATTN_SEED, then 0.

        Returns:
            int: the seed to use
        """
        if seed is not None:
            return int(seed)
        return int(os.getenv("SLICED_ATTN_SEED", str(cls.SEED)))

    @classmethod
    def configure_logging(cls, level: Optional[str] = None) -> None:
        """Install a single stream handler on the root logger."""
        name = (level or cls.LOG_LEVEL).upper()
        logging.basicConfig(
            level=getattr(logging, name, logging.WARNING),
            format=cls.LOG_FORMAT,
        )

    @classmethod
    def validate_config(cls) -> tuple[bool, str]:
        """
        Validate configuration settings.

        Returns:
            tuple: (is_valid, error_message)
        """
        if cls.NAIVE_CAP < 1:
            return False, "SLICED_ATTN_NAIVE_CAP must be positive"

        if cls.BENCH_REPS < 3:
            return False, "SLICED_ATTN_BENCH_REPS must be at least 3"

        if cls.BENCH_WARMUP < 0:
            return False, "SLICED_ATTN_BENCH_WARMUP cannot be negative"

        if cls.THREADS < 1:
            return False, "SLICED_ATTN_THREADS must be at least 1"

        if cls.DIRECTION_DRAWS < 1:
            return False, "SLICED_ATTN_DIRECTION_DRAWS must be positive"

        if cls.LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            return False, f"unknown log level {cls.LOG_LEVEL!r}"

        return True, ""


def numpy_dtype(dtype: str) -> np.dtype:
    """Map a dtype name to the numpy dtype."""
    if dtype not in DTYPES:
        raise ConfigurationError("config", f"dtype must be one of {DTYPES}, got {dtype!r}")
    return np.dtype(np.float32 if dtype == "f32" else np.float64)


@dataclass(frozen=True)
class KernelConfig:
    """
    Settings for one forward evaluation.

    ``epsilon`` and ``centering`` may be left as None and are then resolved
    per dtype and per variant by :meth:`resolved`.
    """

    epsilon: Optional[float] = None
    centering: Optional[bool] = None
    dtype: DType = "f64"
    bandwidth: float = Config.DEFAULT_BANDWIDTH

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigurationError("config", f"epsilon must be > 0, got {self.epsilon}")
        if not self.bandwidth > 0:
            raise ConfigurationError("config", f"bandwidth must be > 0, got {self.bandwidth}")
        numpy_dtype(self.dtype)

    @property
    def eps(self) -> float:
        return self.epsilon if self.epsilon is not None else Config.epsilon_for(self.dtype)

    @property
    def np_dtype(self) -> np.dtype:
        return numpy_dtype(self.dtype)

    def resolved(self, variant: str) -> "KernelConfig":
        """Return a copy with epsilon and centering made concrete for ``variant``."""
        if variant not in VARIANTS:
            raise ConfigurationError("config", f"variant must be one of {VARIANTS}, got {variant!r}")
        if variant == "bump":
            if self.centering:
                raise ConfigurationError("config", "bump attention does not center values")
            centering = False
        else:
            centering = True if self.centering is None else self.centering
        return replace(self, epsilon=self.eps, centering=centering)


@dataclass(frozen=True)
class RunConfig:
    """Settings shared by every CLI command."""

    seed: int = 0
    epsilon: Optional[float] = None
    bandwidth: float = Config.DEFAULT_BANDWIDTH
    centering: Optional[bool] = None
    dtype: DType = "f64"
    variant: Variant = "relu"
    threads: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError("config", f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.threads < 1:
            raise ConfigurationError("config", f"threads must be >= 1, got {self.threads}")
        self.kernel_config()

    def kernel_config(self) -> KernelConfig:
        return KernelConfig(
            epsilon=self.epsilon,
            centering=self.centering,
            dtype=self.dtype,
            bandwidth=self.bandwidth,
        ).resolved(self.variant)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)
