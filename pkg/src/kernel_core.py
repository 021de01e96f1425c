"""
Sliced ReLU and ReLU-bump attention via sort-and-scan.

Queries and keys are projected to scalar scores. For sorted scores
z_1 <= ... <= z_m with values gamma_j,

    sum_j ReLU(z_i - z_j) gamma_j = a_i z_i - b_i,
    a_i = a_{i-1} + gamma_i,  b_i = b_{i-1} + gamma_i z_i,

so one sort and two cumulative sums replace the n x n interaction matrix.
Keys and queries are concatenated into a single array (keys carry the
values, queries carry zeros) and scanned together.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .config import KernelConfig
from .errors import ConfigurationError, ContractViolationError, NumericError, ShapeMismatchError
from .params import AffineMap, HeadParams, MLPParams, Projection, TokenSequence, TransformerBlock

logger = logging.getLogger(__name__)

ReluTerms = Sequence[Tuple[float, float]]


def project_scores(seq: TokenSequence, amap: AffineMap, proj: Projection, head: int = 0) -> np.ndarray:
    """
    Score every token: Pi(map(x_i))[head].

    Raises:
        NumericError: a score is not finite (index of the first bad token).
    """
    if not 0 <= head < proj.head_count:
        raise ShapeMismatchError("kernel_core", f"head {head} out of range for {proj.head_count} heads")
    if amap.d != seq.d or proj.d != seq.d:
        raise ShapeMismatchError("kernel_core", f"parameters act on R^{amap.d}, tokens live in R^{seq.d}")
    scores = proj.apply(amap.apply(seq.data))[:, head]
    bad = np.flatnonzero(~np.isfinite(scores))
    if bad.size:
        raise NumericError("kernel_core", "projected score is not finite", index=int(bad[0]))
    return scores


def head_scores(x: np.ndarray, context: np.ndarray, head: HeadParams) -> Tuple[np.ndarray, np.ndarray]:
    """Query scores of ``x`` and key scores of ``context`` for one head."""
    sq = project_scores(TokenSequence(x), head.query, head.projection, head.head_index)
    sk = project_scores(TokenSequence(context), head.key, head.projection, head.head_index)
    return sq, sk


def center_values(values: np.ndarray) -> np.ndarray:
    """Subtract the column means, summed in sorted order so token order does not matter."""
    return values - np.sort(values, axis=0).mean(axis=0)


@dataclass(frozen=True)
class ScanPlan:
    """
    Sort permutation and prefix sums of one scan.

    ``prefix_gamma[0]`` and ``prefix_weighted[0]`` are the zero rows a_0, b_0;
    row i (1-based) holds the running sums up to the i-th sorted entry.
    """

    sort_perm: np.ndarray
    inverse_perm: np.ndarray
    sorted_scores: np.ndarray
    prefix_gamma: np.ndarray
    prefix_weighted: np.ndarray

    @property
    def size(self) -> int:
        return self.sorted_scores.shape[0]

    def evaluate(self) -> np.ndarray:
        """a_i z_i - b_i for every sorted index."""
        return _relu_from_prefix(self.sorted_scores, self.prefix_gamma, self.prefix_weighted)

    def unsort(self, sorted_rows: np.ndarray) -> np.ndarray:
        """Bring rows given in sorted order back to input order."""
        return sorted_rows[self.inverse_perm]


def _as_values(values: np.ndarray, m: int) -> np.ndarray:
    gamma = np.asarray(values)
    if gamma.ndim == 1:
        gamma = gamma.reshape(-1, 1)
    if gamma.shape[0] != m:
        raise ShapeMismatchError("kernel_core", f"{gamma.shape[0]} value rows for {m} scores")
    return gamma


def _prefix_sums(z: np.ndarray, gamma: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    zero = np.zeros((1, gamma.shape[1]), dtype=gamma.dtype)
    a = np.concatenate([zero, np.cumsum(gamma, axis=0)])
    b = np.concatenate([zero, np.cumsum(gamma * z[:, None], axis=0)])
    return a, b


def _relu_from_prefix(z: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[1:] * z[:, None] - b[1:]


def _stable_order(scores: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    perm = np.argsort(scores, kind="stable")
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.shape[0])
    return perm, inverse


def build_scan_plan(scores: np.ndarray, values: np.ndarray) -> ScanPlan:
    """Stable-sort ``scores`` and accumulate the prefix sums of ``values``."""
    scores = np.asarray(scores).reshape(-1)
    gamma = _as_values(values, scores.shape[0])
    perm, inverse = _stable_order(scores)
    z = scores[perm]
    a, b = _prefix_sums(z, gamma[perm])
    return ScanPlan(perm, inverse, z, a, b)


def relu_scan(scores: np.ndarray, values: np.ndarray) -> np.ndarray:
    """
    sum_j ReLU(z_i - z_j) gamma_j for scores already sorted ascending.

    Raises:
        ContractViolationError: the scores are not nondecreasing.
    """
    z = np.asarray(scores).reshape(-1)
    gamma = _as_values(values, z.shape[0])
    drops = np.flatnonzero(np.diff(z) < 0)
    if drops.size:
        i = int(drops[0])
        raise ContractViolationError(
            "kernel_core", f"relu_scan needs sorted scores, z[{i}]={z[i]} > z[{i + 1}]={z[i + 1]}"
        )
    a, b = _prefix_sums(z, gamma)
    return _relu_from_prefix(z, a, b)


def relu_convolution(query_scores: np.ndarray, key_scores: np.ndarray, values: np.ndarray) -> np.ndarray:
    """
    sum_j ReLU(q_i - k_j) values_j for every query, in one merged scan.

    Keys precede queries at equal scores, so a key sitting exactly on a
    query contributes ReLU(0) = 0.
    """
    q = np.asarray(query_scores).reshape(-1)
    k = np.asarray(key_scores).reshape(-1)
    gamma = _as_values(values, k.shape[0])
    merged = np.concatenate([k, q])
    carried = np.concatenate([gamma, np.zeros((q.shape[0], gamma.shape[1]), dtype=gamma.dtype)])
    perm, inverse = _stable_order(merged)
    swept = relu_scan(merged[perm], carried[perm])
    return swept[inverse][k.shape[0]:]


def heaviside_convolution(query_scores: np.ndarray, key_scores: np.ndarray, values: np.ndarray) -> np.ndarray:
    """
    sum_j 1[q_i > k_j] values_j, the derivative of :func:`relu_convolution`.

    Queries precede keys at equal scores, giving the convention H(0) = 0.
    """
    q = np.asarray(query_scores).reshape(-1)
    k = np.asarray(key_scores).reshape(-1)
    gamma = _as_values(values, k.shape[0])
    merged = np.concatenate([q, k])
    carried = np.concatenate([np.zeros((q.shape[0], gamma.shape[1]), dtype=gamma.dtype), gamma])
    plan = build_scan_plan(merged, carried)
    return plan.unsort(plan.prefix_gamma[1:])[: q.shape[0]]


def abs_diff_normalizer(query_scores: np.ndarray, key_scores: np.ndarray) -> np.ndarray:
    """
    sum_l |q_i - k_l| for every query.

    Uses |t| = ReLU(t) + ReLU(-t): one scan on the scores and one on the
    mirrored scores.
    """
    q = np.asarray(query_scores).reshape(-1)
    k = np.asarray(key_scores).reshape(-1)
    ones = np.ones((k.shape[0], 1), dtype=k.dtype)
    above = relu_convolution(q, k, ones)[:, 0]
    below = relu_convolution(-q, -k, ones)[:, 0]
    return above + below


def recenter_scores(query_scores: np.ndarray, key_scores: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # differences are shift-invariant; recentering limits cancellation in a_i z_i - b_i
    shift = np.median(np.concatenate([query_scores, key_scores]))
    return query_scores - shift, key_scores - shift


def _check_head(head: HeadParams, d: int) -> None:
    if head.d != d:
        raise ShapeMismatchError("kernel_core", f"head acts on R^{head.d}, tokens live in R^{d}")


def _relu_attention(points: np.ndarray, context: np.ndarray, head: HeadParams, cfg: KernelConfig) -> np.ndarray:
    dtype = cfg.np_dtype
    x = points.astype(dtype, copy=False)
    c = context.astype(dtype, copy=False)
    sq, sk = head_scores(x, c, head)
    gamma = head.value.apply(c)
    if cfg.centering:
        gamma = center_values(gamma)
    sq, sk = recenter_scores(sq, sk)
    numerator = relu_convolution(sq, sk, gamma)
    normalizer = abs_diff_normalizer(sq, sk)
    return numerator / (normalizer + dtype.type(cfg.eps))[:, None]


def relu_attention_forward(seq: TokenSequence, head: HeadParams, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """
    Sliced ReLU attention of every token against the whole sequence.

    out_i = sum_j ReLU(s^q_i - s^k_j) / (N_i + eps) * gamma_j with
    N_i = sum_l |s^q_i - s^k_l| and gamma_j the (optionally centered) values.
    """
    cfg = (cfg or KernelConfig()).resolved("relu")
    _check_head(head, seq.d)
    logger.debug("relu attention: n=%d d=%d centering=%s", seq.n, seq.d, cfg.centering)
    return _relu_attention(seq.data, seq.data, head, cfg)


def bump_scans(query_scores: np.ndarray, key_scores: np.ndarray, values: np.ndarray,
               bandwidth: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The three ReLU convolutions with keys shifted by -b, +b and 0."""
    return (
        relu_convolution(query_scores, key_scores - bandwidth, values),
        relu_convolution(query_scores, key_scores + bandwidth, values),
        relu_convolution(query_scores, key_scores, values),
    )


def require_linear_projection(head: HeadParams) -> None:
    if head.projection.kind != "linear":
        raise ConfigurationError("kernel_core", "bump attention requires a linear projection")


def _bump_attention(points: np.ndarray, context: np.ndarray, head: HeadParams, cfg: KernelConfig) -> np.ndarray:
    require_linear_projection(head)
    dtype = cfg.np_dtype
    x = points.astype(dtype, copy=False)
    c = context.astype(dtype, copy=False)
    sq, sk = head_scores(x, c, head)
    values = head.value.apply(c)
    sq, sk = recenter_scores(sq, sk)
    b = dtype.type(cfg.bandwidth)
    minus, plus, center = bump_scans(sq, sk, values, b)
    return (minus + plus - 2 * center) / (c.shape[0] * b)


def bump_attention_forward(seq: TokenSequence, head: HeadParams, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """
    Sliced ReLU-bump attention with 1/n normalisation and no centering.

    out_i = 1/n sum_j ReLU(1 - |s^q_i - s^k_j| / b) V x_j, evaluated as
    1/(n b) [scan(k - b) + scan(k + b) - 2 scan(k)].

    Raises:
        ConfigurationError: the projection is not linear.
    """
    cfg = (cfg or KernelConfig()).resolved("bump")
    _check_head(head, seq.d)
    return _bump_attention(seq.data, seq.data, head, cfg)


def bump_terms(bandwidth: float) -> Tuple[Tuple[float, float], ...]:
    """(shift, weight) pairs with ReLU(1 - |t|/b) = sum_w w ReLU(t + shift)."""
    return ((bandwidth, 1.0 / bandwidth), (-bandwidth, 1.0 / bandwidth), (0.0, -2.0 / bandwidth))


def relu_mixture_forward(seq: TokenSequence, head: HeadParams, terms: ReluTerms,
                         cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """
    Attention with a piecewise-linear kernel sum_t w_t ReLU(Delta + c_t), 1/n normalised.

    One scan per term; values are centered only when ``cfg.centering`` is True.
    """
    cfg = cfg or KernelConfig(centering=False)
    _check_head(head, seq.d)
    if not terms:
        raise ConfigurationError("kernel_core", "relu mixture needs at least one term")
    dtype = cfg.np_dtype
    x = seq.data.astype(dtype, copy=False)
    sq, sk = head_scores(x, x, head)
    values = head.value.apply(x)
    if cfg.centering:
        values = center_values(values)
    sq, sk = recenter_scores(sq, sk)
    out = np.zeros_like(values)
    for shift, weight in terms:
        out += dtype.type(weight) * relu_convolution(sq, sk - dtype.type(shift), values)
    return out / seq.n


_CROSS_FORWARD: Dict[str, Callable[[np.ndarray, np.ndarray, HeadParams, KernelConfig], np.ndarray]] = {
    "relu": _relu_attention,
    "bump": _bump_attention,
}


def cross_attention_forward(points: TokenSequence, context: TokenSequence, head: HeadParams,
                            cfg: Optional[KernelConfig] = None, variant: str = "relu") -> np.ndarray:
    """
    Evaluate attention at arbitrary query points against the empirical measure of ``context``.

    Keys, values and the centering mean come from ``context``; self-attention
    is the case points == context.
    """
    cfg = (cfg or KernelConfig()).resolved(variant)
    _check_head(head, points.d)
    _check_head(head, context.d)
    return _CROSS_FORWARD[variant](points.data, context.data, head, cfg)


_FORWARD: Dict[str, Callable[[TokenSequence, HeadParams, Optional[KernelConfig]], np.ndarray]] = {
    "relu": relu_attention_forward,
    "bump": bump_attention_forward,
}


def head_forward(variant: str) -> Callable[[TokenSequence, HeadParams, Optional[KernelConfig]], np.ndarray]:
    """Single-head forward pass for ``variant``."""
    try:
        return _FORWARD[variant]
    except KeyError:
        raise ConfigurationError("kernel_core", f"unknown variant {variant!r}") from None


def multi_head_layer(seq: TokenSequence, heads: Sequence[HeadParams], cfg: Optional[KernelConfig] = None,
                     variant: str = "relu", threads: int = 1, residual: bool = True) -> TokenSequence:
    """
    x_i + sum_h W^h head_h(x_i), each head evaluated independently.

    ``threads`` > 1 evaluates heads on a thread pool; the sum is always
    taken in head order.
    """
    forward = head_forward(variant)
    for h, head in enumerate(heads):
        if head.d != seq.d:
            raise ShapeMismatchError("kernel_core", f"head {h} acts on R^{head.d}, tokens live in R^{seq.d}")
    cfg = cfg or KernelConfig()
    if threads > 1 and len(heads) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(lambda head: forward(seq, head, cfg), heads))
    else:
        outputs = [forward(seq, head, cfg) for head in heads]

    dtype = cfg.np_dtype
    out = seq.data.astype(dtype) if residual else np.zeros(seq.data.shape, dtype=dtype)
    for head, head_out in zip(heads, outputs):
        out = out + head_out @ head.mixer.astype(dtype, copy=False).T
    return TokenSequence(out)


def pointwise_mlp(seq: TokenSequence, params: MLPParams) -> TokenSequence:
    """Apply the perceptron to every token independently."""
    if params.d_in != seq.d:
        raise ShapeMismatchError("kernel_core", f"mlp expects R^{params.d_in}, tokens live in R^{seq.d}")
    x = seq.data
    dtype = x.dtype
    hidden = np.maximum(x @ params.w1.astype(dtype, copy=False).T + params.b1.astype(dtype, copy=False), 0.0)
    return TokenSequence(hidden @ params.w2.astype(dtype, copy=False).T + params.b2.astype(dtype, copy=False))


def transformer_forward(seq: TokenSequence, blocks: Sequence[TransformerBlock], cfg: Optional[KernelConfig] = None,
                        variant: str = "relu", threads: int = 1) -> TokenSequence:
    """Compose attention layers and token-wise MLPs block by block."""
    for depth, block in enumerate(blocks):
        seq = multi_head_layer(seq, block.heads, cfg, variant=variant, threads=threads)
        if block.mlp is not None:
            seq = pointwise_mlp(seq, block.mlp)
        logger.debug("transformer block %d done", depth)
    return seq
