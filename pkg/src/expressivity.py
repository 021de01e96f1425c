"""
Constructive expressivity engine.

Builds explicit stacks of unnormalized ReLU self-attention layers that move
a group of token sequences onto a group of target sequences, and verifies
them numerically. Three stages:

1. Along a direction eta the sequences are pushed into disjoint intervals,
   one layer per split or placement step (:func:`disentangle_1d`).
2. Bump layers correct the components orthogonal to eta, one token at a time.
3. Bump layers correct the eta components.

Layers here are deliberately raw: no denominator, no centering. They are a
separate layer type from the production kernels in :mod:`kernel_core`.

Also provides the elementary contextual map gamma_lambda and its
factorisation through a token-wise affine MLP and a mean-field attention head.
"""

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .config import Config
from .errors import (
    ConfigurationError,
    ConstructionError,
    ContractViolationError,
    DegenerateInputError,
    ShapeMismatchError,
)
from .kernel_core import pointwise_mlp, relu_convolution
from .params import MLPParams, TokenSequence

logger = logging.getLogger(__name__)

Term = Tuple[float, np.ndarray]


@dataclass(frozen=True)
class ConstructiveLayer:
    """
    x_k <- x_k + sum_m sum_t ReLU(s_k - (slope * s_m + intercept) + c_t) v_t

    with s = <direction, x>, applied within one sequence using the
    pre-layer scores for both queries and keys.
    """

    direction: np.ndarray
    slope: float
    intercept: float
    terms: Tuple[Term, ...]
    phase: str = "plain"

    def __post_init__(self):
        direction = np.asarray(self.direction, dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(direction)
        if not abs(norm - 1.0) <= 1e-9:
            raise ConfigurationError("expressivity", f"layer direction must be a unit vector, norm is {norm}")
        if not self.terms:
            raise ConfigurationError("expressivity", "constructive layer needs at least one term")
        terms = []
        for shift, value in self.terms:
            value = np.asarray(value, dtype=np.float64).reshape(-1)
            if value.shape != direction.shape:
                raise ShapeMismatchError(
                    "expressivity", f"term value has {value.size} entries, direction has {direction.size}"
                )
            terms.append((float(shift), value))
        object.__setattr__(self, "direction", direction)
        object.__setattr__(self, "slope", float(self.slope))
        object.__setattr__(self, "intercept", float(self.intercept))
        object.__setattr__(self, "terms", tuple(terms))

    @property
    def d(self) -> int:
        return self.direction.shape[0]

    def support(self) -> Optional[Tuple[float, float]]:
        """
        Open score interval outside of which the update vanishes, or None.

        Only layers with slope 0 whose terms cancel in both weight and
        weight * shift are compactly supported.
        """
        if self.slope != 0.0:
            return None
        weights = np.stack([v for _, v in self.terms])
        shifts = np.array([c for c, _ in self.terms])
        scale = np.abs(weights).sum() * (1.0 + np.abs(shifts).max())
        if np.abs(weights.sum(axis=0)).max() > 1e-12 * scale:
            return None
        if np.abs((weights * shifts[:, None]).sum(axis=0)).max() > 1e-12 * scale:
            return None
        kinks = self.intercept - shifts
        return float(kinks.min()), float(kinks.max())

    def scores(self, x: np.ndarray) -> np.ndarray:
        return np.sum(x * self.direction, axis=-1)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Apply the layer to one sequence of shape (n, d)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ShapeMismatchError("expressivity", f"layer acts on R^{self.d}, got tokens of shape {x.shape}")
        s = self.scores(x)
        rows = np.arange(s.shape[0])
        hull = self.support()
        if hull is not None:
            rows = np.flatnonzero((s > hull[0]) & (s < hull[1]))
        out = x.copy()
        if rows.size == 0:
            return out
        # ascending key order so sequences sharing leading entries get identical sums
        keys = np.sort(self.slope * s + self.intercept)
        update = np.zeros((rows.size, self.d))
        for shift, value in self.terms:
            coef = np.maximum(s[rows, None] - keys[None, :] + shift, 0.0).sum(axis=1)
            update += coef[:, None] * value[None, :]
        out[rows] += update
        return out

    def lift(self, direction: np.ndarray, phase: Optional[str] = None) -> "ConstructiveLayer":
        """Turn a one-dimensional layer into one acting along ``direction`` in R^d."""
        if self.d != 1:
            raise ShapeMismatchError("expressivity", "only one-dimensional layers can be lifted")
        direction = np.asarray(direction, dtype=np.float64)
        terms = tuple((c, float(v[0]) * direction) for c, v in self.terms)
        return ConstructiveLayer(direction, self.slope, self.intercept, terms, phase or self.phase)


@dataclass(frozen=True)
class SequenceGroup:
    """p token sequences sharing n and d."""

    sequences: Tuple[TokenSequence, ...]

    def __post_init__(self):
        seqs = tuple(s if isinstance(s, TokenSequence) else TokenSequence(s) for s in self.sequences)
        if not seqs:
            raise ShapeMismatchError("expressivity", "a sequence group needs at least one sequence")
        n, d = seqs[0].n, seqs[0].d
        for i, seq in enumerate(seqs):
            if (seq.n, seq.d) != (n, d):
                raise ShapeMismatchError(
                    "expressivity", f"sequence {i} has shape {(seq.n, seq.d)}, sequence 0 has {(n, d)}"
                )
        object.__setattr__(self, "sequences", seqs)

    @classmethod
    def from_array(cls, arr) -> "SequenceGroup":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ShapeMismatchError("expressivity", f"expected a (p, n, d) array, got shape {arr.shape}")
        return cls(tuple(TokenSequence(a) for a in arr))

    @property
    def p(self) -> int:
        return len(self.sequences)

    @property
    def n(self) -> int:
        return self.sequences[0].n

    @property
    def d(self) -> int:
        return self.sequences[0].d

    def stack(self) -> np.ndarray:
        return np.stack([s.data.astype(np.float64) for s in self.sequences])

    def project(self, direction: np.ndarray) -> np.ndarray:
        """(p, n) scores along ``direction``."""
        return np.sum(self.stack() * np.asarray(direction, dtype=np.float64), axis=-1)

    def require_distinct_tokens(self, label: str = "sequence") -> None:
        for i, seq in enumerate(self.sequences):
            rows = np.unique(seq.data, axis=0)
            if rows.shape[0] < seq.n:
                raise DegenerateInputError("expressivity", f"{label} {i} repeats a token")

    def require_distinct_sequences(self, label: str = "sequence") -> None:
        canon = [_canonical(seq.data) for seq in self.sequences]
        for i in range(len(canon)):
            for j in range(i + 1, len(canon)):
                if np.array_equal(canon[i], canon[j]):
                    raise DegenerateInputError("expressivity", f"{label}s {i} and {j} hold the same tokens")


def _canonical(tokens: np.ndarray) -> np.ndarray:
    """Tokens sorted lexicographically, so equal multisets compare equal."""
    tokens = np.asarray(tokens)
    return tokens[np.lexsort(tokens.T[::-1])]


@dataclass
class MatchPlan:
    layers: List[ConstructiveLayer]
    phase_counts: Tuple[int, int, int]
    bound: int
    direction: Optional[np.ndarray] = None
    threshold: Optional[float] = None
    delta: Optional[float] = None
    max_error: float = 0.0
    tolerance: float = Config.MATCH_TOLERANCE

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def passed(self) -> bool:
        return self.layer_count <= self.bound and self.max_error <= self.tolerance

    def to_dict(self) -> dict:
        split, orthogonal, axial = self.phase_counts
        return {
            "passed": self.passed,
            "layers": self.layer_count,
            "bound": self.bound,
            "split_layers": split,
            "orthogonal_layers": orthogonal,
            "axial_layers": axial,
            "max_error": self.max_error,
            "direction": None if self.direction is None else self.direction.tolist(),
            "threshold": self.threshold,
            "delta": self.delta,
        }


# ---------------------------------------------------------------------------
# Bumps
# ---------------------------------------------------------------------------

def bump_coefficients(x0: float, delta: float) -> Tuple[Tuple[float, float], ...]:
    """
    (shift, weight) pairs with phi(x) = sum_w w ReLU(x - x0 + shift).

    phi(x0) = 1 and phi vanishes outside (x0 - delta, x0 + delta).
    """
    if not delta > 0:
        raise ConfigurationError("expressivity", f"bump half-width must be > 0, got {delta}")
    return ((delta, 1.0 / delta), (-delta, 1.0 / delta), (0.0, -2.0 / delta))


def evaluate_bump(x, x0: float, delta: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return sum(w * np.maximum(x - x0 + c, 0.0) for c, w in bump_coefficients(x0, delta))


def bump_layer(direction: np.ndarray, x0: float, delta: float, value: np.ndarray, n: int,
               phase: str = "bump") -> ConstructiveLayer:
    """Layer moving exactly the tokens scored x0 by ``value``; the key sum contributes n copies."""
    value = np.asarray(value, dtype=np.float64)
    terms = tuple((c, w / n * value) for c, w in bump_coefficients(x0, delta))
    return ConstructiveLayer(direction, 0.0, x0, terms, phase)


# ---------------------------------------------------------------------------
# One-dimensional disentanglement
# ---------------------------------------------------------------------------

_UNIT = np.ones(1)


class SplitResult(NamedTuple):
    layer: ConstructiveLayer
    first: List[int]
    second: List[int]
    position: int
    # (alpha1, beta1, alpha2, beta2): the affine maps induced on each block
    coefficients: Tuple[float, float, float, float]


def _scalar_rows(group) -> np.ndarray:
    if isinstance(group, SequenceGroup):
        if group.d != 1:
            raise ShapeMismatchError("expressivity", f"expected one-dimensional tokens, got d={group.d}")
        return group.stack()[:, :, 0]
    rows = np.asarray(group, dtype=np.float64)
    if rows.ndim == 3 and rows.shape[2] == 1:
        rows = rows[:, :, 0]
    if rows.ndim != 2:
        raise ShapeMismatchError("expressivity", f"expected (p, n) scalar sequences, got shape {rows.shape}")
    return rows


def _apply_rows(layer: ConstructiveLayer, rows: np.ndarray) -> np.ndarray:
    return np.stack([layer.apply(row[:, None])[:, 0] for row in rows])


def _require_distinct_rows(rows: np.ndarray) -> None:
    ordered = np.sort(rows, axis=1)
    for i in range(rows.shape[0]):
        if np.any(np.diff(ordered[i]) == 0):
            raise DegenerateInputError("expressivity", f"sequence {i} repeats a point")
        for j in range(i + 1, rows.shape[0]):
            if np.array_equal(ordered[i], ordered[j]):
                raise DegenerateInputError("expressivity", f"sequences {i} and {j} hold the same points")


def split_layer(sequences, protected: Sequence[float]) -> SplitResult:
    """
    One layer splitting scalar sequences into two lexicographic blocks.

    Sequences are compared as sorted tuples; l is the first position at which
    they disagree and the first block holds those with the smallest entry
    there. The key map a(t) = slope * t + intercept sends that entry to L,
    below every point, and the next larger entry to R = max K + 1, so the
    protected set K is left untouched. After the layer both blocks are affine
    images of themselves, the first entirely left of the second, and both
    still left of K.

    Raises:
        ContractViolationError: fewer than two sequences, or points not left of K.
        DegenerateInputError: two sequences are identical.
    """
    rows = _scalar_rows(sequences)
    p = rows.shape[0]
    if p < 2:
        raise ContractViolationError("expressivity", "splitting needs at least two sequences")
    protected = np.asarray(protected, dtype=np.float64).reshape(-1)
    if protected.size == 0:
        raise ContractViolationError("expressivity", "splitting needs a nonempty protected set")
    _require_distinct_rows(rows)

    ordered = np.sort(rows, axis=1)
    low, high = ordered.min(), ordered.max()
    k_min, k_max = protected.min(), protected.max()
    if not high < k_min:
        raise ContractViolationError("expressivity", f"points reach {high}, protected set starts at {k_min}")

    column = int(np.flatnonzero(np.any(ordered != ordered[0], axis=0))[0])
    l = column + 1
    t1 = ordered[:, column].min()
    first = [i for i in range(p) if ordered[i, column] == t1]
    second = [i for i in range(p) if ordered[i, column] != t1]
    above = ordered[ordered > t1]
    t2 = min(above.min() if above.size else k_min, k_min)

    right = k_max + 1.0
    left = min(low - 1.0, -(l - 1) * high + l * low - 1.0)
    v = 0.5 * (-1.0 / l - (high - low) / (high - left))
    slope = (right - left) / (t2 - t1)
    intercept = left - slope * t1

    # the layer computes its keys the same way, so these are the exact key values
    key_values = slope * ordered[first[0], :l] + intercept
    alpha1 = 1.0 + l * v
    beta1 = -v * key_values.sum()
    alpha2 = 1.0 + column * v
    beta2 = -v * key_values[:column].sum()
    tol = 1e-12 * max(abs(high), abs(low), abs(left), 1.0)
    if not (-tol <= alpha1 <= 1.0 + tol
            and alpha1 * high + beta1 < alpha2 * low + beta2
            and alpha2 * high + beta2 <= high + tol):
        raise ConstructionError(
            "expressivity",
            f"split at position {l} violates its inequalities (alpha1={alpha1}, beta1={beta1}, "
            f"alpha2={alpha2}, beta2={beta2})",
        )
    logger.debug("split at position %d: %d | %d sequences, slope %.3e", l, len(first), len(second), slope)
    layer = ConstructiveLayer(_UNIT, slope, intercept, ((0.0, np.array([v])),), "split")
    return SplitResult(layer, first, second, l, (alpha1, beta1, alpha2, beta2))


def placement_layer(sequence, protected: Sequence[float]) -> ConstructiveLayer:
    """
    One layer sending a single scalar sequence strictly right of the protected set.

    Only the smallest point acts as a key, so the sequence is mapped by an
    increasing affine map whose image starts at max K + 1.
    """
    row = np.asarray(sequence, dtype=np.float64).reshape(-1)
    protected = np.asarray(protected, dtype=np.float64).reshape(-1)
    k_min, k_max = protected.min(), protected.max()
    if not row.max() < k_min:
        raise ContractViolationError("expressivity", f"points reach {row.max()}, protected set starts at {k_min}")
    t1 = row.min()
    above = row[row > t1]
    t2 = min(above.min() if above.size else k_min, k_min)
    right = k_max + 1.0
    left = t1 - 1.0
    slope = (right - left) / (t2 - t1)
    intercept = left - slope * t1
    v = right - t1
    return ConstructiveLayer(_UNIT, slope, intercept, ((0.0, np.array([v])),), "place")


def disentangle_1d(sequences, threshold: float) -> List[ConstructiveLayer]:
    """
    Layers placing p scalar sequences in p pairwise disjoint intervals right of ``threshold``.

    Keeps a working set U, a stack F of parked blocks (the top is the leftmost)
    and a protected set K made of the threshold, the parked blocks and the
    placed sequences. Every layer is the identity on K. A working set of one
    sequence is placed right of K; a larger one is split, its right block
    parked. Uses exactly p - 1 splits and p placements.

    Raises:
        ContractViolationError: some point is not strictly left of ``threshold``.
        DegenerateInputError: a sequence repeats a point or two sequences coincide.
    """
    pos = _scalar_rows(sequences).copy()
    p = pos.shape[0]
    _require_distinct_rows(pos)
    if not pos.max() < threshold:
        raise ContractViolationError("expressivity", f"points reach {pos.max()}, threshold is {threshold}")

    working = list(range(p))
    parked: List[List[int]] = []
    placed: List[int] = []
    layers: List[ConstructiveLayer] = []
    splits = placements = 0

    while working:
        guarded = [m for block in parked for m in block] + placed
        protected = np.concatenate([[threshold], pos[guarded].ravel()])
        if len(working) == 1:
            layer = placement_layer(pos[working[0]], protected)
            placed.append(working[0])
            working = parked.pop() if parked else []
            placements += 1
        else:
            split = split_layer(pos[working], protected)
            layer = split.layer
            parked.append([working[i] for i in split.second])
            working = [working[i] for i in split.first]
            splits += 1
        moved = _apply_rows(layer, pos)
        if guarded and not np.array_equal(moved[guarded], pos[guarded]):
            raise ConstructionError("expressivity", f"{layer.phase} layer moved a protected sequence")
        pos = moved
        layers.append(layer)

    if splits != p - 1 or placements != p:
        raise ConstructionError(
            "expressivity", f"disentangling {p} sequences took {splits} splits and {placements} placements"
        )
    intervals = np.stack([pos.min(axis=1), pos.max(axis=1)], axis=1)
    if not _disjoint(intervals):
        raise ConstructionError("expressivity", "final intervals overlap")
    logger.info("disentangled %d sequences with %d layers", p, len(layers))
    return layers


def _disjoint(intervals: np.ndarray) -> bool:
    ordered = intervals[np.argsort(intervals[:, 0])]
    return bool(np.all(ordered[1:, 0] > ordered[:-1, 1]))


def sequence_intervals(group: SequenceGroup, direction: Optional[np.ndarray] = None) -> np.ndarray:
    """(p, 2) array of [min, max] projected scores per sequence."""
    if direction is None:
        scores = _scalar_rows(group)
    else:
        scores = group.project(direction)
    return np.stack([scores.min(axis=1), scores.max(axis=1)], axis=1)


def intervals_disjoint(intervals: np.ndarray) -> bool:
    return _disjoint(np.asarray(intervals, dtype=np.float64))


# ---------------------------------------------------------------------------
# Matching in R^d
# ---------------------------------------------------------------------------

def _unique_gap(scores: np.ndarray) -> float:
    values = np.unique(np.asarray(scores).ravel())
    return float(np.diff(values).min()) if values.size > 1 else float("inf")


def is_valid_direction(direction: np.ndarray, sources: SequenceGroup, targets: SequenceGroup,
                       min_gap: float = Config.DIRECTION_MIN_GAP) -> Tuple[bool, float]:
    """
    Whether projecting on ``direction`` separates every distinct token of both groups.

    This makes the projection injective within each sequence and gives
    distinct sequences distinct score sets. Returns the smallest gap between
    distinct projected tokens alongside.
    """
    direction = np.asarray(direction, dtype=np.float64)
    tokens = np.unique(np.concatenate([sources.stack(), targets.stack()]).reshape(-1, sources.d), axis=0)
    scores = np.sort(np.sum(tokens * direction, axis=-1))
    gap = float(np.diff(scores).min()) if scores.size > 1 else float("inf")
    return gap > min_gap, gap


def choose_direction(sources: SequenceGroup, targets: SequenceGroup, rng: Optional[np.random.Generator] = None,
                     draws: int = Config.DIRECTION_DRAWS) -> Tuple[np.ndarray, float]:
    """
    Draw unit directions uniformly on the sphere until one is valid.

    Raises:
        ConstructionError: no valid direction within ``draws`` attempts.
    """
    rng = rng or np.random.default_rng(Config.resolve_seed())
    best = 0.0
    for attempt in range(draws):
        eta = rng.normal(size=sources.d)
        eta /= np.linalg.norm(eta)
        valid, gap = is_valid_direction(eta, sources, targets)
        if valid:
            logger.debug("direction accepted after %d draws, gap %.3e", attempt + 1, gap)
            return eta, gap
        best = max(best, gap)
    raise ConstructionError(
        "expressivity", f"no separating direction in {draws} draws (best gap {best:.3e})"
    )


def apply_constructive_layers(group: SequenceGroup, layers: Sequence[ConstructiveLayer]) -> SequenceGroup:
    """Apply ``layers`` in order to every sequence of ``group``."""
    state = group.stack()
    for layer in layers:
        state = np.stack([layer.apply(seq) for seq in state])
    return SequenceGroup.from_array(state)


def _apply_all(layer: ConstructiveLayer, state: np.ndarray) -> np.ndarray:
    return np.stack([layer.apply(seq) for seq in state])


def match_sequences(sources: SequenceGroup, targets: SequenceGroup, rng: Optional[np.random.Generator] = None,
                    draws: int = Config.DIRECTION_DRAWS) -> MatchPlan:
    """
    Layers mapping every source sequence onto its target, token by token.

    At most 2p(n + 1) - 1 layers: 2p - 1 to disentangle along a direction
    eta, then at most pn bump layers for the components orthogonal to eta
    and pn for the components along it. Bumps with a negligible residual
    are skipped.

    Raises:
        ShapeMismatchError: the groups differ in p, n or d.
        DegenerateInputError: d < 2, a repeated token, or two identical sources.
        ConstructionError: an internal step failed.
    """
    if (sources.p, sources.n, sources.d) != (targets.p, targets.n, targets.d):
        raise ShapeMismatchError(
            "expressivity",
            f"sources are {(sources.p, sources.n, sources.d)}, targets are {(targets.p, targets.n, targets.d)}",
        )
    p, n, d = sources.p, sources.n, sources.d
    if d < 2:
        raise DegenerateInputError("expressivity", "matching needs tokens of dimension at least 2")
    sources.require_distinct_tokens("source")
    targets.require_distinct_tokens("target")
    sources.require_distinct_sequences("source")
    bound = 2 * p * (n + 1) - 1

    src, tgt = sources.stack(), targets.stack()
    if np.array_equal(src, tgt):
        return MatchPlan([], (0, 0, 0), bound)

    eta, _ = choose_direction(sources, targets, rng, draws)
    threshold = float(max(sources.project(eta).max(), targets.project(eta).max()) + 1.0)
    layers = [layer.lift(eta, "split") for layer in disentangle_1d(sources.project(eta), threshold)]
    state = src
    for layer in layers:
        state = _apply_all(layer, state)

    current = np.sum(state * eta, axis=-1)
    if np.unique(current).size < current.size:
        raise ConstructionError("expressivity", "disentangled tokens share a projected score")
    delta = 0.5 * _unique_gap(np.concatenate([current.ravel(), targets.project(eta).ravel()]))
    if not delta > 0 or not np.isfinite(delta):
        raise ConstructionError("expressivity", f"post-disentanglement score gap is {delta}")

    orthogonal = axial = 0
    for i in range(p):
        for k in range(n):
            x = state[i, k]
            residual = (tgt[i, k] - x) - np.dot(eta, tgt[i, k] - x) * eta
            if np.linalg.norm(residual) > Config.RESIDUAL_TOLERANCE * (1.0 + np.linalg.norm(tgt[i, k])):
                layer = bump_layer(eta, float(np.sum(x * eta)), delta, residual, n, "orthogonal")
                state = _apply_all(layer, state)
                layers.append(layer)
                orthogonal += 1
    for i in range(p):
        for k in range(n):
            x = state[i, k]
            c = float(np.dot(eta, tgt[i, k] - x))
            if abs(c) > Config.RESIDUAL_TOLERANCE * (1.0 + np.linalg.norm(tgt[i, k])):
                layer = bump_layer(eta, float(np.sum(x * eta)), delta, c * eta, n, "axial")
                state = _apply_all(layer, state)
                layers.append(layer)
                axial += 1

    if len(layers) > bound:
        raise ConstructionError("expressivity", f"plan uses {len(layers)} layers, bound is {bound}")
    splits = len(layers) - orthogonal - axial
    max_error = float(np.abs(state - tgt).max())
    logger.info("matched %d sequences: %d + %d + %d layers, max error %.3e",
                p, splits, orthogonal, axial, max_error)
    return MatchPlan(layers, (splits, orthogonal, axial), bound, eta, threshold, delta, max_error)


# ---------------------------------------------------------------------------
# Elementary contextual maps
# ---------------------------------------------------------------------------

class GammaParams(NamedTuple):
    """lambda = (a, b, c, v) of the elementary map gamma_lambda."""

    a: np.ndarray
    b: float
    c: float
    v: float


@dataclass(frozen=True)
class MeanFieldTheta:
    """One-head scalar attention parameters (a_q, b_q, a_k, b_k, a_v, b_v)."""

    a_q: float = 1.0
    b_q: float = 0.0
    a_k: float = 1.0
    b_k: float = 0.0
    a_v: float = 0.0
    b_v: float = 0.0

    @classmethod
    def for_gamma(cls, c: float, v: float) -> "MeanFieldTheta":
        return cls(1.0, c, 1.0, 0.0, 0.0, v)


def gamma_lambda(x, tokens: TokenSequence, lam: GammaParams) -> np.ndarray:
    """
    <x, a> + b + 1/n sum_j v ReLU(<x, a> - <y_j, a> + c) over the tokens y_j.

    ``x`` may be one point (d,) or a batch (m, d).
    """
    a = np.asarray(lam.a, dtype=np.float64).reshape(-1)
    if a.shape[0] != tokens.d:
        raise ShapeMismatchError("expressivity", f"a has {a.shape[0]} entries, tokens live in R^{tokens.d}")
    points = np.atleast_2d(np.asarray(x, dtype=np.float64))
    u = np.sum(points * a, axis=-1)
    w = np.sum(tokens.data * a, axis=-1)
    kernel = np.maximum(u[:, None] - w[None, :] + lam.c, 0.0).mean(axis=1)
    out = u + lam.b + lam.v * kernel
    return out if np.ndim(x) > 1 else out[0]


def mean_field_attention(points, measure, theta: MeanFieldTheta) -> np.ndarray:
    """
    Scalar attention of each point against the uniform measure on ``measure``.

    u + 1/n sum_j (a_v w_j + b_v) ReLU(a_q u + b_q - a_k w_j - b_k),
    evaluated with one sorted scan.
    """
    u = np.asarray(points, dtype=np.float64).reshape(-1)
    w = np.asarray(measure, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise ShapeMismatchError("expressivity", "mean-field attention needs a nonempty measure")
    values = (theta.a_v * w + theta.b_v)[:, None]
    conv = relu_convolution(theta.a_q * u + theta.b_q, theta.a_k * w + theta.b_k, values)[:, 0]
    return u + conv / w.size


def compose_gamma(x, tokens: TokenSequence, lam: GammaParams) -> np.ndarray:
    """gamma_lambda built as a mean-field attention head after a token-wise affine MLP."""
    a = np.asarray(lam.a, dtype=np.float64).reshape(1, -1)
    affine = MLPParams.affine(a, [lam.b])
    points = np.atleast_2d(np.asarray(x, dtype=np.float64))
    u = pointwise_mlp(TokenSequence(points), affine).data[:, 0]
    w = pointwise_mlp(tokens, affine).data[:, 0]
    out = mean_field_attention(u, w, MeanFieldTheta.for_gamma(lam.c, lam.v))
    return out if np.ndim(x) > 1 else out[0]
