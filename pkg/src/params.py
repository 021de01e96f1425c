"""
Token sequences and attention parameters.

All containers are frozen dataclasses over numpy arrays; they validate shape
and finiteness once at construction so the kernels can trust their inputs.
"""

from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from .errors import EmptyInputError, NumericError, ShapeMismatchError

ProjectionKind = Literal["linear", "mlp1"]


def _as_matrix(name: str, value, rows: Optional[int] = None, cols: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError("params", f"{name} must be 2-D, got shape {arr.shape}")
    if rows is not None and arr.shape[0] != rows:
        raise ShapeMismatchError("params", f"{name} must have {rows} rows, got {arr.shape[0]}")
    if cols is not None and arr.shape[1] != cols:
        raise ShapeMismatchError("params", f"{name} must have {cols} columns, got {arr.shape[1]}")
    _check_finite(name, arr)
    return arr


def _as_vector(name: str, value, size: int) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if arr.shape[0] != size:
        raise ShapeMismatchError("params", f"{name} must have length {size}, got {arr.shape[0]}")
    _check_finite(name, arr)
    return arr


def _check_finite(name: str, arr: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise NumericError("params", f"{name} has non-finite entries", index=int(bad[0]))


@dataclass(frozen=True)
class TokenSequence:
    """An n x d matrix of tokens, read as a list or as an empirical measure."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2:
            raise ShapeMismatchError("params", f"tokens must be n x d, got shape {arr.shape}")
        if arr.shape[0] == 0:
            raise EmptyInputError("params", "token sequence has no tokens")
        if arr.shape[1] == 0:
            raise ShapeMismatchError("params", "token dimension must be >= 1")
        _check_finite("tokens", arr)
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def permuted(self, perm: Sequence[int]) -> "TokenSequence":
        return TokenSequence(self.data[np.asarray(perm)])


@dataclass(frozen=True)
class AffineMap:
    """x -> matrix @ x + bias on R^d."""

    matrix: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        matrix = _as_matrix("affine matrix", self.matrix)
        if matrix.shape[0] != matrix.shape[1]:
            raise ShapeMismatchError("params", f"affine matrix must be square, got {matrix.shape}")
        d = matrix.shape[0]
        bias = np.zeros(d) if self.bias is None else _as_vector("affine bias", self.bias, d)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "bias", bias)

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        dtype = x.dtype
        return x @ self.matrix.astype(dtype, copy=False).T + self.bias.astype(dtype, copy=False)

    @classmethod
    def identity(cls, d: int) -> "AffineMap":
        return cls(np.eye(d))

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, scale: Optional[float] = None,
               with_bias: bool = False) -> "AffineMap":
        scale = 1.0 / np.sqrt(d) if scale is None else scale
        bias = rng.normal(scale=0.1, size=d) if with_bias else None
        return cls(rng.normal(scale=scale, size=(d, d)), bias)


@dataclass(frozen=True)
class Projection:
    """
    Token -> score map Pi, one score per head.

    ``linear``: weight (H, d), bias (H,).
    ``mlp1``: hidden_weight (d, d), hidden_bias (d,), ReLU, then
    weight (H, d), bias (H,) as the output layer.
    """

    kind: ProjectionKind
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    hidden_weight: Optional[np.ndarray] = None
    hidden_bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("linear", "mlp1"):
            raise ShapeMismatchError("params", f"unknown projection kind {self.kind!r}")
        weight = np.asarray(self.weight, dtype=np.float64)
        if weight.ndim == 1:
            weight = weight.reshape(1, -1)
        weight = _as_matrix("projection weight", weight)
        heads, d = weight.shape
        bias = np.zeros(heads) if self.bias is None else _as_vector("projection bias", self.bias, heads)
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)
        if self.kind == "mlp1":
            if self.hidden_weight is None:
                raise ShapeMismatchError("params", "mlp1 projection needs a hidden weight")
            hidden = _as_matrix("projection hidden weight", self.hidden_weight, rows=d, cols=d)
            hidden_bias = (np.zeros(d) if self.hidden_bias is None
                           else _as_vector("projection hidden bias", self.hidden_bias, d))
            object.__setattr__(self, "hidden_weight", hidden)
            object.__setattr__(self, "hidden_bias", hidden_bias)
        elif self.hidden_weight is not None or self.hidden_bias is not None:
            raise ShapeMismatchError("params", "linear projection takes no hidden layer")

    @property
    def d(self) -> int:
        return self.weight.shape[1]

    @property
    def head_count(self) -> int:
        return self.weight.shape[0]

    def hidden(self, u: np.ndarray) -> np.ndarray:
        """Pre-activation of the hidden layer (mlp1 only)."""
        dtype = u.dtype
        return u @ self.hidden_weight.astype(dtype, copy=False).T + self.hidden_bias.astype(dtype, copy=False)

    def apply(self, u: np.ndarray) -> np.ndarray:
        """Scores of shape (n, H) for inputs of shape (n, d)."""
        if self.kind == "mlp1":
            u = np.maximum(self.hidden(u), 0.0)
        dtype = u.dtype
        return u @ self.weight.astype(dtype, copy=False).T + self.bias.astype(dtype, copy=False)

    @classmethod
    def linear(cls, weight, bias=None) -> "Projection":
        return cls("linear", weight, bias)

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, kind: ProjectionKind = "mlp1",
               heads: int = 1) -> "Projection":
        weight = rng.normal(scale=1.0 / np.sqrt(d), size=(heads, d))
        bias = rng.normal(scale=0.1, size=heads)
        if kind == "linear":
            return cls("linear", weight, bias)
        return cls(
            "mlp1",
            weight,
            bias,
            hidden_weight=rng.normal(scale=1.0 / np.sqrt(d), size=(d, d)),
            hidden_bias=rng.normal(scale=0.5, size=d),
        )


@dataclass(frozen=True)
class HeadParams:
    """Query/key/value maps, output mixer W and projection of one head."""

    query: AffineMap
    key: AffineMap
    value: AffineMap
    projection: Projection
    mixer: Optional[np.ndarray] = None
    head_index: int = 0

    def __post_init__(self):
        d = self.query.d
        for name, amap in (("key", self.key), ("value", self.value)):
            if amap.d != d:
                raise ShapeMismatchError("params", f"{name} map is {amap.d}-dimensional, query is {d}")
        if self.projection.d != d:
            raise ShapeMismatchError("params", f"projection acts on R^{self.projection.d}, head on R^{d}")
        if not 0 <= self.head_index < self.projection.head_count:
            raise ShapeMismatchError(
                "params",
                f"head index {self.head_index} out of range for {self.projection.head_count} projection heads",
            )
        mixer = np.eye(d) if self.mixer is None else _as_matrix("mixer", self.mixer, rows=d, cols=d)
        object.__setattr__(self, "mixer", mixer)

    @property
    def d(self) -> int:
        return self.query.d


@dataclass(frozen=True)
class MLPParams:
    """Two-layer perceptron x -> w2 @ ReLU(w1 @ x + b1) + b2 applied token-wise."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        w1 = _as_matrix("mlp w1", self.w1)
        hidden, d_in = w1.shape
        w2 = _as_matrix("mlp w2", self.w2, cols=hidden)
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "b1", _as_vector("mlp b1", self.b1, hidden))
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b2", _as_vector("mlp b2", self.b2, w2.shape[0]))

    @property
    def d_in(self) -> int:
        return self.w1.shape[1]

    @property
    def d_out(self) -> int:
        return self.w2.shape[0]

    @classmethod
    def affine(cls, matrix, bias=None) -> "MLPParams":
        """
        Exact ReLU factorisation of x -> matrix @ x + bias.

        Uses ReLU(t) - ReLU(-t) = t, which holds bit-for-bit.
        """
        matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        d_out = matrix.shape[0]
        bias = np.zeros(d_out) if bias is None else np.asarray(bias, dtype=np.float64).reshape(-1)
        eye = np.eye(d_out)
        return cls(
            w1=np.vstack([matrix, -matrix]),
            b1=np.concatenate([bias, -bias]),
            w2=np.hstack([eye, -eye]),
            b2=np.zeros(d_out),
        )

    @classmethod
    def identity(cls, d: int) -> "MLPParams":
        return cls.affine(np.eye(d))

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, hidden: Optional[int] = None) -> "MLPParams":
        hidden = 2 * d if hidden is None else hidden
        return cls(
            w1=rng.normal(scale=1.0 / np.sqrt(d), size=(hidden, d)),
            b1=rng.normal(scale=0.1, size=hidden),
            w2=rng.normal(scale=1.0 / np.sqrt(hidden), size=(d, hidden)),
            b2=rng.normal(scale=0.1, size=d),
        )


@dataclass(frozen=True)
class TransformerBlock:
    """One multi-head attention layer followed by a token-wise MLP."""

    heads: Sequence[HeadParams]
    mlp: Optional[MLPParams] = None


def random_tokens(n: int, d: int, rng: np.random.Generator, scale: float = 1.0) -> TokenSequence:
    return TokenSequence(rng.normal(scale=scale, size=(n, d)))


def random_head(d: int, rng: np.random.Generator, kind: ProjectionKind = "mlp1",
                projection_heads: int = 1, head_index: int = 0,
                with_bias: bool = False, mixer: bool = False) -> HeadParams:
    """Random head with independent Q, K, V so projected query/key scores do not tie."""
    return HeadParams(
        query=AffineMap.random(d, rng, with_bias=with_bias),
        key=AffineMap.random(d, rng, with_bias=with_bias),
        value=AffineMap.random(d, rng, with_bias=with_bias),
        projection=Projection.random(d, rng, kind=kind, heads=projection_heads),
        mixer=rng.normal(scale=1.0 / np.sqrt(d), size=(d, d)) if mixer else None,
        head_index=head_index,
    )
