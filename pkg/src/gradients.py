"""
Analytic backward passes for sliced ReLU and ReLU-bump attention, plus a
finite-difference harness to verify them.

The scalar objective is L = <upstream, output>. Gradients are first taken
with respect to the projected scores and the values, then pushed through the
projection and the affine Q/K/V maps. The score-level step has two
implementations: one built from the same sorted scans as the forward pass
and a dense O(n^2) one. Both return identical bundles away from score ties;
at a tie the kernel is not differentiable and the backward refuses to run.

ReLU'(0) is taken as 0 throughout.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .config import Config, KernelConfig
from .errors import ConfigurationError, PropertyFailure, ScoreTieError, ShapeMismatchError
from .kernel_core import (
    abs_diff_normalizer,
    center_values,
    head_forward,
    head_scores,
    heaviside_convolution,
    recenter_scores,
    relu_convolution,
    require_linear_projection,
)
from .params import AffineMap, HeadParams, Projection, TokenSequence, random_head, random_tokens
from .reference_oracle import naive_forward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradBundle:
    """Gradients of L with respect to every input, shaped like the inputs."""

    d_tokens: np.ndarray
    d_Q: AffineMap
    d_K: AffineMap
    d_V: AffineMap
    d_W: np.ndarray
    d_projection: Projection
    d_values: np.ndarray

    def arrays(self) -> List[np.ndarray]:
        """Gradient arrays in the order of :func:`parameter_arrays`."""
        arrays = [
            self.d_tokens,
            self.d_Q.matrix, self.d_Q.bias,
            self.d_K.matrix, self.d_K.bias,
            self.d_V.matrix, self.d_V.bias,
            self.d_projection.weight, self.d_projection.bias,
        ]
        if self.d_projection.kind == "mlp1":
            arrays += [self.d_projection.hidden_weight, self.d_projection.hidden_bias]
        return arrays

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


@dataclass(frozen=True)
class LayerGradients:
    """Per-head bundles of a residual multi-head layer and the total token gradient."""

    heads: List[GradBundle]
    d_tokens: np.ndarray


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_coordinate: int
    step_size: float
    min_score_gap: float
    checked: int
    skipped: int
    mode: str
    tolerance: float = Config.GRADCHECK_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "worst_coordinate": self.worst_coordinate,
            "step_size": self.step_size,
            "min_score_gap": self.min_score_gap,
            "checked": self.checked,
            "skipped": self.skipped,
            "mode": self.mode,
            "tolerance": self.tolerance,
        }


# ---------------------------------------------------------------------------
# Score ties
# ---------------------------------------------------------------------------

def kernel_shifts(variant: str, bandwidth: float) -> Tuple[float, ...]:
    """Offsets t such that the kernel has a kink at s^q - s^k + t = 0."""
    return (0.0,) if variant == "relu" else (0.0, bandwidth, -bandwidth)


def min_score_gap(query_scores: np.ndarray, key_scores: np.ndarray,
                  shifts: Sequence[float] = (0.0,)) -> Tuple[float, Tuple[int, int]]:
    """
    Smallest |s^q_i - s^k_j + t| over all pairs and shifts, with its (i, j).

    Sorts the keys once and binary-searches every query, so it stays
    O(n log n).
    """
    q = np.asarray(query_scores, dtype=np.float64).reshape(-1)
    k = np.asarray(key_scores, dtype=np.float64).reshape(-1)
    order = np.argsort(k, kind="stable")
    ks = k[order]
    best, pair = np.inf, (-1, -1)
    for shift in shifts:
        target = q + shift
        pos = np.searchsorted(ks, target)
        for cand in (np.clip(pos - 1, 0, ks.size - 1), np.clip(pos, 0, ks.size - 1)):
            gaps = np.abs(target - ks[cand])
            i = int(np.argmin(gaps))
            if gaps[i] < best:
                best, pair = float(gaps[i]), (i, int(order[cand[i]]))
    return best, pair


def check_score_ties(query_scores: np.ndarray, key_scores: np.ndarray, shifts: Sequence[float],
                     required: float = Config.TIE_GAP) -> float:
    """
    Raises:
        ScoreTieError: some query/key pair sits closer than ``required`` to a kink.
    """
    gap, pair = min_score_gap(query_scores, key_scores, shifts)
    if gap < required:
        raise ScoreTieError("gradients", pair, gap, required)
    return gap


# ---------------------------------------------------------------------------
# Score-level gradients
# ---------------------------------------------------------------------------

def _relu_score_grads_sliced(sq, sk, gamma, upstream, eps):
    n = sq.shape[0]
    sq, sk = recenter_scores(sq, sk)
    normalizer = abs_diff_normalizer(sq, sk) + eps
    out = relu_convolution(sq, sk, gamma) / normalizer[:, None]
    up = upstream / normalizer[:, None]
    g = -(upstream * out).sum(axis=1) / normalizer

    ones = np.ones((n, 1))
    below = heaviside_convolution(sq, sk, ones)[:, 0]
    above = heaviside_convolution(-sq, -sk, ones)[:, 0]
    d_gamma = relu_convolution(-sk, -sq, up)
    d_sq = (up * heaviside_convolution(sq, sk, gamma)).sum(axis=1) + g * (below - above)
    g_col = g[:, None]
    sign_sum = heaviside_convolution(-sk, -sq, g_col)[:, 0] - heaviside_convolution(sk, sq, g_col)[:, 0]
    d_sk = -(gamma * heaviside_convolution(-sk, -sq, up)).sum(axis=1) - sign_sum
    return d_sq, d_sk, d_gamma


def _relu_score_grads_dense(sq, sk, gamma, upstream, eps):
    delta = sq[:, None] - sk[None, :]
    relu = np.maximum(delta, 0.0)
    step = (delta > 0).astype(np.float64)
    sign = np.sign(delta)
    normalizer = np.abs(delta).sum(axis=1) + eps
    out = relu @ gamma / normalizer[:, None]
    up = upstream / normalizer[:, None]
    g = -(upstream * out).sum(axis=1) / normalizer

    pair = step * (up @ gamma.T)
    d_gamma = relu.T @ up
    d_sq = pair.sum(axis=1) + g * sign.sum(axis=1)
    d_sk = -pair.sum(axis=0) - (g[:, None] * sign).sum(axis=0)
    return d_sq, d_sk, d_gamma


def _bump_score_grads_sliced(sq, sk, gamma, upstream, b):
    n = sq.shape[0]
    sq, sk = recenter_scores(sq, sk)
    up = upstream / (n * b)
    d_gamma = (relu_convolution(-sk, -sq - b, up) + relu_convolution(-sk, -sq + b, up)
               - 2 * relu_convolution(-sk, -sq, up))
    slope_q = (heaviside_convolution(sq, sk - b, gamma) + heaviside_convolution(sq, sk + b, gamma)
               - 2 * heaviside_convolution(sq, sk, gamma))
    slope_k = (heaviside_convolution(-sk, -sq - b, up) + heaviside_convolution(-sk, -sq + b, up)
               - 2 * heaviside_convolution(-sk, -sq, up))
    d_sq = (up * slope_q).sum(axis=1)
    d_sk = -(gamma * slope_k).sum(axis=1)
    return d_sq, d_sk, d_gamma


def _bump_score_grads_dense(sq, sk, gamma, upstream, b):
    n = sq.shape[0]
    delta = sq[:, None] - sk[None, :]
    kernel = np.maximum(delta + b, 0.0) + np.maximum(delta - b, 0.0) - 2 * np.maximum(delta, 0.0)
    slope = (delta + b > 0).astype(np.float64) + (delta - b > 0) - 2.0 * (delta > 0)
    up = upstream / (n * b)
    pair = slope * (up @ gamma.T)
    return pair.sum(axis=1), -pair.sum(axis=0), kernel.T @ up


# ---------------------------------------------------------------------------
# Chain rule through projection and affine maps
# ---------------------------------------------------------------------------

def _projection_backward(proj: Projection, head: int, u: np.ndarray, d_scores: np.ndarray):
    d_weight = np.zeros_like(proj.weight)
    d_bias = np.zeros_like(proj.bias)
    d_bias[head] = d_scores.sum()
    w = proj.weight[head]
    if proj.kind == "linear":
        d_weight[head] = d_scores @ u
        return d_scores[:, None] * w, (d_weight, d_bias, None, None)
    pre = proj.hidden(u)
    d_weight[head] = d_scores @ np.maximum(pre, 0.0)
    d_pre = d_scores[:, None] * w * (pre > 0)
    return d_pre @ proj.hidden_weight, (d_weight, d_bias, d_pre.T @ u, d_pre.sum(axis=0))


def _add_projection_grads(proj: Projection, first, second) -> Projection:
    parts = [None if a is None else a + b for a, b in zip(first, second)]
    return Projection(proj.kind, *parts)


def _affine_backward(amap: AffineMap, x: np.ndarray, d_out: np.ndarray) -> Tuple[AffineMap, np.ndarray]:
    return AffineMap(d_out.T @ x, d_out.sum(axis=0)), d_out @ amap.matrix


def _assemble(seq: TokenSequence, head: HeadParams, d_sq: np.ndarray, d_sk: np.ndarray,
              d_values: np.ndarray) -> GradBundle:
    x = seq.data.astype(np.float64)
    proj, h = head.projection, head.head_index
    du_q, proj_q = _projection_backward(proj, h, head.query.apply(x), d_sq)
    du_k, proj_k = _projection_backward(proj, h, head.key.apply(x), d_sk)
    d_Q, dx_q = _affine_backward(head.query, x, du_q)
    d_K, dx_k = _affine_backward(head.key, x, du_k)
    d_V, dx_v = _affine_backward(head.value, x, d_values)
    return GradBundle(
        d_tokens=dx_q + dx_k + dx_v,
        d_Q=d_Q,
        d_K=d_K,
        d_V=d_V,
        d_W=np.zeros((seq.d, seq.d)),
        d_projection=_add_projection_grads(proj, proj_q, proj_k),
        d_values=d_values,
    )


def _prepare(seq: TokenSequence, head: HeadParams, upstream: np.ndarray):
    if head.d != seq.d:
        raise ShapeMismatchError("gradients", f"head acts on R^{head.d}, tokens live in R^{seq.d}")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != seq.data.shape:
        raise ShapeMismatchError("gradients", f"upstream has shape {upstream.shape}, output is {seq.data.shape}")
    x = seq.data.astype(np.float64)
    sq, sk = head_scores(x, x, head)
    return x, sq, sk, upstream


def _relu_backward(seq, head, cfg, upstream, score_grads) -> GradBundle:
    cfg = (cfg or KernelConfig()).resolved("relu")
    x, sq, sk, upstream = _prepare(seq, head, upstream)
    check_score_ties(sq, sk, kernel_shifts("relu", cfg.bandwidth))
    gamma = head.value.apply(x)
    if cfg.centering:
        gamma = center_values(gamma)
    d_sq, d_sk, d_gamma = score_grads(sq, sk, gamma, upstream, cfg.eps)
    if cfg.centering:
        d_gamma = center_values(d_gamma)
    return _assemble(seq, head, d_sq, d_sk, d_gamma)


def _bump_backward(seq, head, cfg, upstream, score_grads) -> GradBundle:
    cfg = (cfg or KernelConfig()).resolved("bump")
    require_linear_projection(head)
    x, sq, sk, upstream = _prepare(seq, head, upstream)
    check_score_ties(sq, sk, kernel_shifts("bump", cfg.bandwidth))
    gamma = head.value.apply(x)
    d_sq, d_sk, d_gamma = score_grads(sq, sk, gamma, upstream, cfg.bandwidth)
    return _assemble(seq, head, d_sq, d_sk, d_gamma)


def relu_attention_backward(seq: TokenSequence, head: HeadParams, cfg: Optional[KernelConfig],
                            upstream: np.ndarray) -> GradBundle:
    """
    Gradient of <upstream, relu_attention_forward(seq, head, cfg)>.

    Evaluated in float64 with sorted scans, O(n log n + n d).

    Raises:
        ScoreTieError: a query and a key score are closer than ``Config.TIE_GAP``.
    """
    return _relu_backward(seq, head, cfg, upstream, _relu_score_grads_sliced)


def relu_attention_backward_dense(seq: TokenSequence, head: HeadParams, cfg: Optional[KernelConfig],
                                  upstream: np.ndarray) -> GradBundle:
    return _relu_backward(seq, head, cfg, upstream, _relu_score_grads_dense)


def bump_attention_backward(seq: TokenSequence, head: HeadParams, cfg: Optional[KernelConfig],
                            upstream: np.ndarray) -> GradBundle:
    """
    Gradient of <upstream, bump_attention_forward(seq, head, cfg)>.

    Ties are measured against the three kinks s^k - b, s^k and s^k + b.
    """
    return _bump_backward(seq, head, cfg, upstream, _bump_score_grads_sliced)


def bump_attention_backward_dense(seq: TokenSequence, head: HeadParams, cfg: Optional[KernelConfig],
                                  upstream: np.ndarray) -> GradBundle:
    return _bump_backward(seq, head, cfg, upstream, _bump_score_grads_dense)


def head_backward(variant: str, dense: bool = False) -> Callable[..., GradBundle]:
    table = {
        ("relu", False): relu_attention_backward,
        ("relu", True): relu_attention_backward_dense,
        ("bump", False): bump_attention_backward,
        ("bump", True): bump_attention_backward_dense,
    }
    try:
        return table[(variant, dense)]
    except KeyError:
        raise ConfigurationError("gradients", f"unknown variant {variant!r}") from None


def multi_head_layer_backward(seq: TokenSequence, heads: Sequence[HeadParams], upstream: np.ndarray,
                              cfg: Optional[KernelConfig] = None, variant: str = "relu",
                              residual: bool = True) -> LayerGradients:
    """
    Backward of x_i + sum_h W^h head_h(x_i).

    Each head receives upstream @ W^h; d_W^h = sum_i upstream_i (x) head_h(x_i).
    """
    cfg = cfg or KernelConfig()
    forward = head_forward(variant)
    backward = head_backward(variant)
    upstream = np.asarray(upstream, dtype=np.float64)
    bundles = []
    d_tokens = upstream.copy() if residual else np.zeros_like(upstream)
    for head in heads:
        head_out = forward(seq, head, cfg).astype(np.float64)
        bundle = backward(seq, head, cfg, upstream @ head.mixer)
        bundles.append(replace(bundle, d_W=upstream.T @ head_out))
        d_tokens = d_tokens + bundle.d_tokens
    return LayerGradients(bundles, d_tokens)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_difference_check(forward: Callable[[np.ndarray], float], point: np.ndarray, gradient: np.ndarray,
                            h: float = Config.GRADCHECK_STEP, directions: int = Config.GRADCHECK_DIRECTIONS,
                            mode: str = "directions", rng: Optional[np.random.Generator] = None,
                            admissible: Optional[Callable[[np.ndarray], bool]] = None,
                            min_score_gap: float = float("inf"),
                            tolerance: float = Config.GRADCHECK_TOLERANCE) -> GradCheckReport:
    """
    Compare ``gradient`` with central differences of ``forward`` at ``point``.

    In ``directions`` mode each sample is a random unit vector e and the check
    is <gradient, e> against (f(x + h e) - f(x - h e)) / 2h; in ``coordinates``
    mode e is a random basis vector. Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8). Perturbations that ``admissible`` rejects
    (they cross a kink) are skipped and counted.
    """
    if not h > 0:
        raise ConfigurationError("gradients", f"step size must be > 0, got {h}")
    if mode not in ("directions", "coordinates"):
        raise ConfigurationError("gradients", f"unknown finite-difference mode {mode!r}")
    point = np.asarray(point, dtype=np.float64).ravel()
    gradient = np.asarray(gradient, dtype=np.float64).ravel()
    if point.shape != gradient.shape:
        raise ShapeMismatchError("gradients", f"gradient has {gradient.size} entries, point has {point.size}")
    rng = rng or np.random.default_rng(Config.resolve_seed())

    worst, worst_index = 0.0, -1
    checked = skipped = 0
    for _ in range(10 * directions):
        if checked == directions:
            break
        if mode == "coordinates":
            index = int(rng.integers(point.size))
            e = np.zeros_like(point)
            e[index] = 1.0
        else:
            index = checked
            e = rng.normal(size=point.size)
            e /= np.linalg.norm(e)
        plus, minus = point + h * e, point - h * e
        if admissible is not None and not (admissible(plus) and admissible(minus)):
            skipped += 1
            continue
        numeric = (forward(plus) - forward(minus)) / (2 * h)
        analytic = float(gradient @ e)
        error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        if worst_index < 0 or error > worst:
            worst, worst_index = error, index
        checked += 1

    if skipped:
        logger.info("finite differences: %d perturbations crossed a kink and were resampled", skipped)
    if checked == 0:
        raise PropertyFailure("gradients", "every perturbation crossed a kink of the kernel")
    return GradCheckReport(worst, worst_index, h, min_score_gap, checked, skipped, mode, tolerance)


def parameter_arrays(seq: TokenSequence, head: HeadParams) -> List[np.ndarray]:
    """Differentiable inputs of one head, in the order of :meth:`GradBundle.arrays`."""
    proj = head.projection
    arrays = [
        seq.data.astype(np.float64),
        head.query.matrix, head.query.bias,
        head.key.matrix, head.key.bias,
        head.value.matrix, head.value.bias,
        proj.weight, proj.bias,
    ]
    if proj.kind == "mlp1":
        arrays += [proj.hidden_weight, proj.hidden_bias]
    return arrays


def unpack_parameters(theta: np.ndarray, seq: TokenSequence, head: HeadParams) -> Tuple[TokenSequence, HeadParams]:
    """Inverse of flattening :func:`parameter_arrays`, shaped after ``seq`` and ``head``."""
    parts, offset = [], 0
    for template in parameter_arrays(seq, head):
        parts.append(theta[offset:offset + template.size].reshape(template.shape))
        offset += template.size
    tokens, qm, qb, km, kb, vm, vb, pw, pb, *hidden = parts
    projection = Projection(head.projection.kind, pw, pb, *hidden)
    rebuilt = HeadParams(AffineMap(qm, qb), AffineMap(km, kb), AffineMap(vm, vb), projection,
                         head.mixer, head.head_index)
    return TokenSequence(tokens), rebuilt


def _kink_pattern(seq: TokenSequence, head: HeadParams, variant: str, bandwidth: float) -> np.ndarray:
    x = seq.data
    proj, h = head.projection, head.head_index
    uq, uk = head.query.apply(x), head.key.apply(x)
    delta = proj.apply(uq)[:, h][:, None] - proj.apply(uk)[:, h][None, :]
    signs = [np.sign(delta + shift).ravel() for shift in kernel_shifts(variant, bandwidth)]
    if proj.kind == "mlp1":
        signs += [np.sign(proj.hidden(uq)).ravel(), np.sign(proj.hidden(uk)).ravel()]
    return np.concatenate(signs)


def check_attention_gradients(seq: TokenSequence, head: HeadParams, cfg: Optional[KernelConfig] = None,
                              variant: str = "relu", upstream: Optional[np.ndarray] = None,
                              h: float = Config.GRADCHECK_STEP, directions: int = Config.GRADCHECK_DIRECTIONS,
                              seed: Optional[int] = None, mode: str = "directions",
                              min_gap: float = Config.GRADCHECK_MIN_GAP) -> GradCheckReport:
    """
    Sliced analytic gradients against central differences of the dense forward.

    Tokens and every head parameter are perturbed together. The instance must
    keep all query/key pairs at least ``min_gap`` away from a kink.
    """
    cfg = (cfg or KernelConfig()).resolved(variant)
    rng = np.random.default_rng(Config.resolve_seed(seed))
    if upstream is None:
        upstream = rng.normal(size=seq.data.shape)

    x = seq.data.astype(np.float64)
    proj, hi = head.projection, head.head_index
    sq = proj.apply(head.query.apply(x))[:, hi]
    sk = proj.apply(head.key.apply(x))[:, hi]
    gap = check_score_ties(sq, sk, kernel_shifts(variant, cfg.bandwidth), required=min_gap)

    bundle = head_backward(variant)(seq, head, cfg, upstream)
    theta = np.concatenate([a.ravel() for a in parameter_arrays(seq, head)])
    naive = naive_forward(variant)
    base = _kink_pattern(seq, head, variant, cfg.bandwidth)

    def objective(t: np.ndarray) -> float:
        s, hp = unpack_parameters(t, seq, head)
        return float(np.sum(upstream * naive(s, hp, cfg)))

    def admissible(t: np.ndarray) -> bool:
        s, hp = unpack_parameters(t, seq, head)
        return bool(np.array_equal(_kink_pattern(s, hp, variant, cfg.bandwidth), base))

    report = finite_difference_check(objective, theta, bundle.flatten(), h=h, directions=directions,
                                     mode=mode, rng=rng, admissible=admissible, min_score_gap=gap)
    logger.info("gradcheck %s: max relative error %.3e over %d samples", variant, report.max_rel_error,
                report.checked)
    return report


def random_gradcheck_instance(n: int, d: int, rng: np.random.Generator, variant: str = "relu",
                              bandwidth: float = Config.DEFAULT_BANDWIDTH, min_gap: float = Config.GRADCHECK_MIN_GAP,
                              attempts: int = 100) -> Tuple[TokenSequence, HeadParams]:
    """
    Draw tokens and a head (linear projection for bump, mlp1 for relu) whose
    query/key scores stay ``min_gap`` away from every kink.

    Raises:
        ScoreTieError: no draw met the gap within ``attempts``.
    """
    kind = "linear" if variant == "bump" else "mlp1"
    shifts = kernel_shifts(variant, bandwidth)
    gap, pair = 0.0, (-1, -1)
    for _ in range(attempts):
        seq = random_tokens(n, d, rng)
        head = random_head(d, rng, kind=kind, with_bias=True)
        proj = head.projection
        sq = proj.apply(head.query.apply(seq.data))[:, 0]
        sk = proj.apply(head.key.apply(seq.data))[:, 0]
        gap, pair = min_score_gap(sq, sk, shifts)
        if gap >= min_gap:
            return seq, head
    raise ScoreTieError("gradients", pair, gap, min_gap)
