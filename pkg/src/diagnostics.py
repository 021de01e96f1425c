"""
Property checks behind the kernel design: the conditionally positive
definite quadratic form of the ReLU kernel, its Energy-Distance identity,
and kernel weight fields over a 2-D lattice for external plotting.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .config import Config
from .errors import ConfigurationError, DegenerateInputError, ShapeMismatchError
from .params import Projection

logger = logging.getLogger(__name__)

HEATMAP_HEADER = ("x", "y", "weight")


@dataclass(frozen=True)
class CPDForm:
    relu_form: float
    energy_form: float


def cpd_quadratic_form(x, gamma) -> CPDForm:
    """
    -sum_ij gamma_i gamma_j ReLU(x_i - x_j) for zero-sum gamma.

    Also returns -1/2 sum_ij gamma_i gamma_j |x_i - x_j|; the two agree because
    the antisymmetric part of ReLU cancels when gamma sums to zero.

    Raises:
        DegenerateInputError: gamma does not sum to zero or x repeats a value.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    if x.shape != gamma.shape:
        raise ShapeMismatchError("diagnostics", f"{x.size} points but {gamma.size} coefficients")
    total = gamma.sum()
    if abs(total) > Config.ZERO_SUM_TOLERANCE * max(1.0, np.abs(gamma).sum()):
        raise DegenerateInputError("diagnostics", f"coefficients sum to {total}, expected 0")
    if np.unique(x).size < x.size:
        raise DegenerateInputError("diagnostics", "points must be pairwise distinct")
    delta = x[:, None] - x[None, :]
    relu_form = -float(gamma @ np.maximum(delta, 0.0) @ gamma)
    energy_form = -0.5 * float(gamma @ np.abs(delta) @ gamma)
    return CPDForm(relu_form, energy_form)


@dataclass(frozen=True)
class CPDReport:
    trials: int
    min_form: float
    min_normalized_form: float
    max_form_gap: float
    zero_form: float
    tolerance: float = Config.CPD_TOLERANCE

    @property
    def passed(self) -> bool:
        return (self.min_form >= -self.tolerance
                and self.min_normalized_form > self.tolerance
                and self.max_form_gap <= self.tolerance
                and self.zero_form == 0.0)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "trials": self.trials,
            "min_form": self.min_form,
            "min_normalized_form": self.min_normalized_form,
            "max_form_gap": self.max_form_gap,
            "zero_form": self.zero_form,
            "tolerance": self.tolerance,
        }


def run_cpd_trials(trials: int = Config.CPD_TRIALS, rng: Optional[np.random.Generator] = None,
                   max_points: int = 16) -> CPDReport:
    """
    Evaluate the quadratic form on random distinct points and zero-sum coefficients.

    Tracks the smallest form, the smallest form divided by |gamma|^2, and the
    largest gap between the ReLU and Energy-Distance forms.
    """
    rng = rng or np.random.default_rng(Config.resolve_seed())
    min_form = min_norm = np.inf
    max_gap = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, max_points + 1))
        x = rng.normal(size=n)
        gamma = rng.normal(size=n)
        gamma -= gamma.mean()
        form = cpd_quadratic_form(x, gamma)
        min_form = min(min_form, form.relu_form)
        min_norm = min(min_norm, form.relu_form / float(gamma @ gamma))
        max_gap = max(max_gap, abs(form.relu_form - form.energy_form))
    zero = cpd_quadratic_form(np.arange(3.0), np.zeros(3)).relu_form
    logger.info("cpd: %d trials, min form %.3e, max form gap %.3e", trials, min_form, max_gap)
    return CPDReport(trials, float(min_form), float(min_norm), float(max_gap), zero)


def relu_energy_identity_check(samples) -> float:
    """
    max |ReLU(x - y) - |x - y|/2 - (x - y)/2| over (x, y) pairs.

    ``samples`` is an (m, 2) array or a sequence of pairs.
    """
    pairs = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        return 0.0
    t = pairs[:, 0] - pairs[:, 1]
    return float(np.abs(np.maximum(t, 0.0) - np.abs(t) / 2 - t / 2).max())


@dataclass(frozen=True)
class GridSpec:
    """Regular nx x ny lattice on [x_min, x_max] x [y_min, y_max]."""

    x_min: float = -2.0
    x_max: float = 2.0
    y_min: float = -2.0
    y_max: float = 2.0
    nx: int = 41
    ny: int = 41

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ConfigurationError("diagnostics", f"grid needs at least one point per axis, got {self.nx}x{self.ny}")
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ConfigurationError("diagnostics", "grid bounds are reversed")

    def axes(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.linspace(self.x_min, self.x_max, self.nx), np.linspace(self.y_min, self.y_max, self.ny)

    def points(self) -> np.ndarray:
        """Lattice points, row-major: y is the outer index."""
        xs, ys = self.axes()
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


@dataclass(frozen=True)
class HeatmapField:
    xs: np.ndarray
    ys: np.ndarray
    weights: np.ndarray  # (ny, nx)

    def rows(self):
        for j, y in enumerate(self.ys):
            for i, x in enumerate(self.xs):
                yield float(x), float(y), float(self.weights[j, i])


def kernel_heatmap(proj: Projection, grid: GridSpec, variant: str = "relu", bandwidth: float = Config.DEFAULT_BANDWIDTH,
                   query: Optional[Sequence[float]] = None, head: int = 0, normalize: bool = False,
                   epsilon: float = Config.EPSILON_F64) -> HeatmapField:
    """
    Weight that a query at ``query`` (origin by default) gives each lattice point as a key.

    relu: ReLU(Pi(q) - Pi(z)); bump: ReLU(1 - |Pi(q) - Pi(z)| / b). With
    ``normalize`` the relu field is divided by the lattice sum of |Pi(q) - Pi(z)|
    plus epsilon, and the bump field by the lattice size, as attention would.
    """
    if proj.d != 2:
        raise ShapeMismatchError("diagnostics", f"heatmaps need a projection on R^2, got R^{proj.d}")
    if variant not in ("relu", "bump"):
        raise ConfigurationError("diagnostics", f"unknown variant {variant!r}")
    if variant == "bump":
        if proj.kind != "linear":
            raise ConfigurationError("diagnostics", "bump attention requires a linear projection")
        if not bandwidth > 0:
            raise ConfigurationError("diagnostics", f"bandwidth must be > 0, got {bandwidth}")
    q = np.zeros((1, 2)) if query is None else np.asarray(query, dtype=np.float64).reshape(1, 2)
    points = grid.points()
    delta = proj.apply(q)[0, head] - proj.apply(points)[:, head]
    if variant == "relu":
        weights = np.maximum(delta, 0.0)
        if normalize:
            weights = weights / (np.abs(delta).sum() + epsilon)
    else:
        weights = np.maximum(1.0 - np.abs(delta) / bandwidth, 0.0)
        if normalize:
            weights = weights / points.shape[0]
    xs, ys = grid.axes()
    return HeatmapField(xs, ys, weights.reshape(grid.ny, grid.nx))


def write_heatmap_csv(heatmap: HeatmapField, path: Union[str, Path]) -> Path:
    """Write the field row-major with header x,y,weight."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(HEATMAP_HEADER)
        for x, y, w in heatmap.rows():
            writer.writerow((repr(x), repr(y), repr(w)))
    return path
