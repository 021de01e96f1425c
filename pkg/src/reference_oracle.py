"""
Dense O(n^2) attention used as ground truth for the sliced kernels.

Nothing here is fast; every output is the literal weighted sum over all
(query, key) pairs.
"""

from typing import Optional, Tuple

import numpy as np

from .config import KernelConfig
from .errors import ConfigurationError, ShapeMismatchError
from .params import HeadParams, TokenSequence


def _check_head(seq: TokenSequence, head: HeadParams) -> None:
    if head.d != seq.d:
        raise ShapeMismatchError("reference_oracle", f"head acts on R^{head.d}, tokens live in R^{seq.d}")


def score_pairs(seq: TokenSequence, head: HeadParams, cfg: KernelConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Projected query and key scores of every token, in the config dtype."""
    x = seq.data.astype(cfg.np_dtype, copy=False)
    proj = head.projection
    sq = proj.apply(head.query.apply(x))[:, head.head_index]
    sk = proj.apply(head.key.apply(x))[:, head.head_index]
    return sq, sk


def attention_values(seq: TokenSequence, head: HeadParams, cfg: KernelConfig) -> np.ndarray:
    """V x_j, minus their mean when ``cfg.centering`` is set."""
    gamma = head.value.apply(seq.data.astype(cfg.np_dtype, copy=False))
    if cfg.centering:
        gamma = gamma - np.sort(gamma, axis=0).mean(axis=0)
    return gamma


def softmax_attention_naive(seq: TokenSequence, head: HeadParams) -> np.ndarray:
    """Standard softmax attention with max-subtracted logits <Q x_i, K x_j>."""
    _check_head(seq, head)
    x = seq.data.astype(np.float64)
    logits = head.query.apply(x) @ head.key.apply(x).T
    logits = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ head.value.apply(x)


def relu_attention_weights(seq: TokenSequence, head: HeadParams, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """ReLU(s^q_i - s^k_j) / (sum_l |s^q_i - s^k_l| + eps) for every pair."""
    cfg = (cfg or KernelConfig()).resolved("relu")
    _check_head(seq, head)
    sq, sk = score_pairs(seq, head, cfg)
    delta = sq[:, None] - sk[None, :]
    normalizer = np.abs(delta).sum(axis=1) + cfg.np_dtype.type(cfg.eps)
    return np.maximum(delta, 0) / normalizer[:, None]


def relu_attention_naive(seq: TokenSequence, head: HeadParams, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    cfg = (cfg or KernelConfig()).resolved("relu")
    return relu_attention_weights(seq, head, cfg) @ attention_values(seq, head, cfg)


def bump_attention_weights(seq: TokenSequence, head: HeadParams, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """
    ReLU(1 - |s^q_i - s^k_j| / b) / n for every pair.

    Raises:
        ConfigurationError: the projection is not linear.
    """
    cfg = (cfg or KernelConfig()).resolved("bump")
    _check_head(seq, head)
    if head.projection.kind != "linear":
        raise ConfigurationError("reference_oracle", "bump attention requires a linear projection")
    sq, sk = score_pairs(seq, head, cfg)
    delta = sq[:, None] - sk[None, :]
    b = cfg.np_dtype.type(cfg.bandwidth)
    return np.maximum(1 - np.abs(delta) / b, 0) / seq.n


def bump_attention_naive(seq: TokenSequence, head: HeadParams, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    cfg = (cfg or KernelConfig()).resolved("bump")
    return bump_attention_weights(seq, head, cfg) @ attention_values(seq, head, cfg)


def naive_forward(variant: str):
    """Dense forward pass for ``variant``."""
    if variant == "relu":
        return relu_attention_naive
    if variant == "bump":
        return bump_attention_naive
    raise ConfigurationError("reference_oracle", f"unknown variant {variant!r}")
