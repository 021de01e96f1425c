"""
Unit tests for the sort-and-scan kernels.
Sliced outputs are compared against dense sums and the dense oracle.
"""

from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.config import KernelConfig
from src.errors import (
    ConfigurationError,
    ContractViolationError,
    EmptyInputError,
    NumericError,
    ShapeMismatchError,
)
from src.kernel_core import (
    abs_diff_normalizer,
    build_scan_plan,
    bump_attention_forward,
    bump_terms,
    cross_attention_forward,
    head_forward,
    heaviside_convolution,
    multi_head_layer,
    pointwise_mlp,
    project_scores,
    relu_attention_forward,
    relu_convolution,
    relu_mixture_forward,
    relu_scan,
    transformer_forward,
)
from src.params import (
    AffineMap,
    HeadParams,
    MLPParams,
    Projection,
    TokenSequence,
    TransformerBlock,
    random_head,
    random_tokens,
)
from src.reference_oracle import bump_attention_naive, relu_attention_naive


def dense_relu(q, k, values):
    return np.maximum(q[:, None] - k[None, :], 0.0) @ values


class TestScans:
    """Tests for the scalar scan primitives."""

    def test_relu_scan_matches_dense_sum(self):
        """A scan over sorted scores equals the pairwise ReLU sum."""
        rng = np.random.default_rng(0)
        z = np.sort(rng.normal(size=50))
        gamma = rng.normal(size=(50, 3))
        assert_allclose(relu_scan(z, gamma), dense_relu(z, z, gamma), rtol=1e-12, atol=1e-12)

    def test_relu_scan_rejects_unsorted_scores(self):
        """Unsorted input is a contract violation."""
        with pytest.raises(ContractViolationError):
            relu_scan(np.array([0.0, 2.0, 1.0]), np.ones(3))

    def test_scan_plan_inverse_permutation(self):
        """unsort undoes the sort permutation."""
        rng = np.random.default_rng(1)
        scores = rng.normal(size=20)
        plan = build_scan_plan(scores, np.ones(20))
        assert_array_equal(plan.unsort(plan.sorted_scores), scores)
        assert plan.size == 20

    def test_relu_convolution_matches_dense(self):
        """Merged query/key scan equals the dense convolution."""
        rng = np.random.default_rng(2)
        q, k = rng.normal(size=30), rng.normal(size=40)
        values = rng.normal(size=(40, 2))
        assert_allclose(relu_convolution(q, k, values), dense_relu(q, k, values), rtol=1e-12, atol=1e-12)

    def test_relu_convolution_is_merged_relu_scan(self):
        """Queries equal to the keys reproduce the plain scan bit for bit."""
        rng = np.random.default_rng(29)
        z = np.sort(rng.normal(size=40))
        gamma = rng.normal(size=(40, 2))
        assert_array_equal(relu_convolution(z, z, gamma), relu_scan(z, gamma))
        perm = rng.permutation(40)
        assert_array_equal(relu_convolution(z[perm], z, gamma), relu_scan(z, gamma)[perm])

    def test_relu_convolution_with_tied_scores(self):
        """A key sitting exactly on a query contributes nothing."""
        q = np.array([0.0, 1.0, 1.0])
        k = np.array([1.0, 0.0, 1.0])
        values = np.array([[1.0], [2.0], [4.0]])
        assert_allclose(relu_convolution(q, k, values), dense_relu(q, k, values), atol=1e-15)

    def test_heaviside_convolution_zero_at_ties(self):
        """Strict inequality: H(0) = 0."""
        q = np.array([0.0, 1.0, 2.0])
        k = np.array([0.0, 1.0])
        values = np.array([[1.0], [10.0]])
        assert_array_equal(heaviside_convolution(q, k, values)[:, 0], [0.0, 1.0, 11.0])

    def test_abs_diff_normalizer_matches_dense(self):
        """Sum of absolute differences from two mirrored scans."""
        rng = np.random.default_rng(3)
        q, k = rng.normal(size=25), rng.normal(size=25)
        want = np.abs(q[:, None] - k[None, :]).sum(axis=1)
        assert_allclose(abs_diff_normalizer(q, k), want, rtol=1e-12)

    def test_value_rows_must_match_keys(self):
        """Value rows and key count must agree."""
        with pytest.raises(ShapeMismatchError):
            relu_convolution(np.zeros(3), np.zeros(4), np.ones((3, 1)))


class TestProjectScores:
    """Tests for token scoring."""

    def test_linear_first_coordinate(self):
        """A linear projection onto e1 of an identity map reads the first coordinate."""
        seq = TokenSequence(np.array([[3.0, 5.0]]))
        scores = project_scores(seq, AffineMap.identity(2), Projection.linear([[1.0, 0.0]]))
        assert_array_equal(scores, [3.0])

    def test_mlp_with_zero_weights_returns_output_bias(self):
        """Zero hidden and output weights leave only the output bias."""
        rng = np.random.default_rng(30)
        seq = random_tokens(6, 3, rng)
        proj = Projection("mlp1", np.zeros((1, 3)), [2.0], hidden_weight=np.zeros((3, 3)))
        assert_array_equal(project_scores(seq, AffineMap.random(3, rng), proj), np.full(6, 2.0))

    def test_mlp_matches_scalar_loop(self):
        """A random mlp1 projection equals the same network written entry by entry."""
        rng = np.random.default_rng(31)
        d, heads = 4, 3
        seq = random_tokens(9, d, rng)
        amap = AffineMap.random(d, rng, with_bias=True)
        proj = Projection.random(d, rng, kind="mlp1", heads=heads)
        for head in range(heads):
            want = []
            for x in seq.data:
                u = [sum(amap.matrix[r, c] * x[c] for c in range(d)) + amap.bias[r] for r in range(d)]
                hidden = [max(sum(proj.hidden_weight[r, c] * u[c] for c in range(d)) + proj.hidden_bias[r], 0.0)
                          for r in range(d)]
                want.append(sum(proj.weight[head, r] * hidden[r] for r in range(d)) + proj.bias[head])
            assert_allclose(project_scores(seq, amap, proj, head), want, rtol=1e-12, atol=1e-12)

    def test_head_out_of_range(self):
        """The head index must address a projection output."""
        rng = np.random.default_rng(32)
        with pytest.raises(ShapeMismatchError):
            project_scores(random_tokens(3, 2, rng), AffineMap.identity(2), Projection.random(2, rng, heads=2), 2)

    def test_overflowing_score_is_reported(self):
        """A score that overflows to infinity is a numeric error."""
        seq = TokenSequence(np.array([[1.0], [1e300]]))
        with np.errstate(over="ignore"):
            with pytest.raises(NumericError):
                project_scores(seq, AffineMap(np.array([[1e300]])), Projection.linear([[1.0]]))


class TestReluAttention:
    """Tests for sliced ReLU attention."""

    @pytest.mark.parametrize("kind", ["linear", "mlp1"])
    def test_matches_dense_oracle(self, kind):
        """Sliced and dense outputs agree to 1e-10 in float64."""
        rng = np.random.default_rng(4)
        seq = random_tokens(64, 4, rng)
        head = random_head(4, rng, kind=kind, with_bias=True)
        got = relu_attention_forward(seq, head)
        want = relu_attention_naive(seq, head)
        assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_without_centering_matches_dense_oracle(self):
        """Uncentered values follow the same path."""
        rng = np.random.default_rng(5)
        seq = random_tokens(32, 3, rng)
        head = random_head(3, rng)
        cfg = KernelConfig(centering=False)
        assert_allclose(relu_attention_forward(seq, head, cfg), relu_attention_naive(seq, head, cfg),
                        rtol=1e-10, atol=1e-12)

    def test_permutation_equivariance(self):
        """Permuting tokens permutes the output rows."""
        rng = np.random.default_rng(6)
        seq = random_tokens(40, 3, rng)
        head = random_head(3, rng)
        perm = rng.permutation(40)
        assert_allclose(relu_attention_forward(seq.permuted(perm), head),
                        relu_attention_forward(seq, head)[perm], rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("n", [1, 2, 3, 5, 17, 128, 1024])
    @pytest.mark.parametrize("d,heads", [(1, 1), (4, 4), (16, 8), (64, 1)])
    def test_oracle_sweep(self, n, d, heads):
        """Sliced and dense outputs agree across sizes, widths and projection heads."""
        rng = np.random.default_rng(n * 1000 + d * 10 + heads)
        seq = random_tokens(n, d, rng)
        kind = "mlp1" if heads > 1 else "linear"
        head = random_head(d, rng, kind=kind, projection_heads=heads, head_index=heads - 1, with_bias=True)
        assert_allclose(relu_attention_forward(seq, head), relu_attention_naive(seq, head), rtol=1e-10, atol=1e-12)

    def test_oracle_at_4096_tokens(self):
        """The largest sweep size, with a multi-output projection."""
        rng = np.random.default_rng(4096)
        seq = random_tokens(4096, 4, rng)
        head = random_head(4, rng, projection_heads=4, head_index=1, with_bias=True)
        assert_allclose(relu_attention_forward(seq, head), relu_attention_naive(seq, head), rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("head_index", [0, 2])
    def test_multi_output_projection(self, head_index):
        """Each head index reads its own projection output."""
        rng = np.random.default_rng(40 + head_index)
        seq = random_tokens(30, 3, rng)
        head = random_head(3, rng, projection_heads=3, head_index=head_index)
        assert_allclose(relu_attention_forward(seq, head), relu_attention_naive(seq, head), rtol=1e-10, atol=1e-12)
        other = replace(head, head_index=1)
        assert not np.allclose(relu_attention_forward(seq, head), relu_attention_forward(seq, other))

    def test_centering_ignores_value_bias_shift(self):
        """Adding a constant to every value leaves the centered output unchanged."""
        rng = np.random.default_rng(42)
        seq = random_tokens(40, 3, rng)
        head = random_head(3, rng, with_bias=True)
        shifted = replace(head, value=AffineMap(head.value.matrix, head.value.bias + rng.normal(scale=5.0, size=3)))
        assert_allclose(relu_attention_forward(seq, shifted), relu_attention_forward(seq, head), atol=1e-12)

    def test_single_token_with_centering_is_zero(self):
        """A centered single value is zero, so the output is zero."""
        rng = np.random.default_rng(7)
        seq = random_tokens(1, 3, rng)
        out = relu_attention_forward(seq, random_head(3, rng))
        assert_array_equal(out, np.zeros((1, 3)))

    def test_float32_output(self):
        """f32 runs stay in float32 and track the f64 result."""
        rng = np.random.default_rng(8)
        seq = random_tokens(64, 4, rng)
        head = random_head(4, rng)
        out32 = relu_attention_forward(seq, head, KernelConfig(dtype="f32"))
        assert out32.dtype == np.float32
        assert_allclose(out32, relu_attention_forward(seq, head), atol=1e-3)

    def test_cross_attention_reduces_to_self_attention(self):
        """points == context is self-attention."""
        rng = np.random.default_rng(9)
        seq = random_tokens(20, 3, rng)
        head = random_head(3, rng)
        assert_array_equal(cross_attention_forward(seq, seq, head), relu_attention_forward(seq, head))

    def test_cross_attention_against_dense_sum(self):
        """Queries from one set, keys and values from another."""
        rng = np.random.default_rng(10)
        points, context = random_tokens(7, 2, rng), random_tokens(15, 2, rng)
        head = random_head(2, rng, kind="linear")
        proj = head.projection
        sq = proj.apply(head.query.apply(points.data))[:, 0]
        sk = proj.apply(head.key.apply(context.data))[:, 0]
        gamma = head.value.apply(context.data)
        gamma = gamma - gamma.mean(axis=0)
        delta = sq[:, None] - sk[None, :]
        want = np.maximum(delta, 0) @ gamma / (np.abs(delta).sum(axis=1) + 1e-12)[:, None]
        assert_allclose(cross_attention_forward(points, context, head), want, rtol=1e-10, atol=1e-12)


class TestBumpAttention:
    """Tests for sliced ReLU-bump attention."""

    @pytest.mark.parametrize("bandwidth", [0.25, 1.0, 3.0])
    def test_matches_dense_oracle(self, bandwidth):
        """Three shifted scans equal the dense bump kernel."""
        rng = np.random.default_rng(11)
        seq = random_tokens(64, 3, rng)
        head = random_head(3, rng, kind="linear", with_bias=True)
        cfg = KernelConfig(bandwidth=bandwidth)
        assert_allclose(bump_attention_forward(seq, head, cfg), bump_attention_naive(seq, head, cfg),
                        rtol=1e-10, atol=1e-12)

    def test_far_apart_scores_give_zero(self):
        """Every query/key gap at least b switches the bump off."""
        rng = np.random.default_rng(43)
        seq = TokenSequence(rng.uniform(size=(12, 2)))
        proj = Projection.linear([[1.0, 0.0]])
        cfg = KernelConfig(bandwidth=1.0)
        below = HeadParams(AffineMap.identity(2), AffineMap(np.eye(2), [10.0, 0.0]), AffineMap.identity(2), proj)
        assert_array_equal(bump_attention_forward(seq, below, cfg), np.zeros((12, 2)))
        above = HeadParams(AffineMap.identity(2), AffineMap(np.eye(2), [-10.0, 0.0]), AffineMap.identity(2), proj)
        assert_allclose(bump_attention_forward(seq, above, cfg), np.zeros((12, 2)), atol=1e-12)

    def test_identical_scores_give_value_mean(self):
        """When every score coincides the kernel is 1 and the output is mean(V x)."""
        rng = np.random.default_rng(44)
        data = np.column_stack([np.full(10, 0.7), rng.normal(size=10)])
        seq = TokenSequence(data)
        value = AffineMap.random(2, rng, with_bias=True)
        head = HeadParams(AffineMap.identity(2), AffineMap.identity(2), value, Projection.linear([[1.0, 0.0]]))
        want = np.tile(value.apply(data).mean(axis=0), (10, 1))
        assert_allclose(bump_attention_forward(seq, head, KernelConfig(bandwidth=0.5)), want, atol=1e-12)

    def test_requires_linear_projection(self):
        """An mlp1 projection is refused."""
        rng = np.random.default_rng(12)
        seq = random_tokens(5, 2, rng)
        with pytest.raises(ConfigurationError):
            bump_attention_forward(seq, random_head(2, rng, kind="mlp1"))

    def test_rejects_centering(self):
        """Bump attention never centers values."""
        rng = np.random.default_rng(13)
        seq = random_tokens(5, 2, rng)
        with pytest.raises(ConfigurationError):
            bump_attention_forward(seq, random_head(2, rng, kind="linear"), KernelConfig(centering=True))

    def test_bump_terms_reproduce_kernel(self):
        """sum_w w ReLU(t + shift) is the bump ReLU(1 - |t| / b)."""
        t = np.linspace(-3, 3, 601)
        for b in (0.5, 1.0, 2.0):
            mix = sum(w * np.maximum(t + shift, 0) for shift, w in bump_terms(b))
            assert_allclose(mix, np.maximum(1 - np.abs(t) / b, 0), atol=1e-12)

    def test_relu_mixture_matches_bump_forward(self):
        """The generic piecewise-linear kernel covers the bump."""
        rng = np.random.default_rng(14)
        seq = random_tokens(48, 3, rng)
        head = random_head(3, rng, kind="linear")
        cfg = KernelConfig(bandwidth=0.7, centering=False)
        assert_allclose(relu_mixture_forward(seq, head, bump_terms(0.7), cfg),
                        bump_attention_forward(seq, head, cfg), rtol=1e-10, atol=1e-12)

    def test_relu_mixture_needs_terms(self):
        """An empty term list is refused."""
        rng = np.random.default_rng(15)
        with pytest.raises(ConfigurationError):
            relu_mixture_forward(random_tokens(3, 2, rng), random_head(2, rng), ())


class TestLayers:
    """Tests for multi-head layers and block composition."""

    def test_residual_adds_input(self):
        """The residual path adds x to the mixed head outputs."""
        rng = np.random.default_rng(16)
        seq = random_tokens(30, 4, rng)
        heads = [random_head(4, rng, mixer=True) for _ in range(3)]
        with_res = multi_head_layer(seq, heads).data
        without = multi_head_layer(seq, heads, residual=False).data
        assert_allclose(with_res - without, seq.data, atol=1e-12)

    def test_layer_sums_mixed_heads(self):
        """Each head output is mixed by its W and summed."""
        rng = np.random.default_rng(17)
        seq = random_tokens(25, 3, rng)
        heads = [random_head(3, rng, mixer=True) for _ in range(2)]
        want = sum(relu_attention_naive(seq, h) @ h.mixer.T for h in heads)
        assert_allclose(multi_head_layer(seq, heads, residual=False).data, want, rtol=1e-10, atol=1e-12)

    def test_threads_do_not_change_result(self):
        """Heads on a thread pool are summed in head order."""
        rng = np.random.default_rng(18)
        seq = random_tokens(50, 4, rng)
        heads = [random_head(4, rng, mixer=True) for _ in range(4)]
        assert_array_equal(multi_head_layer(seq, heads, threads=4).data, multi_head_layer(seq, heads).data)

    def test_head_dimension_mismatch(self):
        """Heads must act on the token dimension."""
        rng = np.random.default_rng(19)
        with pytest.raises(ShapeMismatchError):
            multi_head_layer(random_tokens(5, 3, rng), [random_head(2, rng)])

    def test_unknown_variant(self):
        """Only relu and bump exist."""
        with pytest.raises(ConfigurationError):
            head_forward("softmax")

    def test_transformer_with_identity_mlp(self):
        """An identity MLP leaves the attention layer output unchanged."""
        rng = np.random.default_rng(20)
        seq = random_tokens(16, 3, rng)
        heads = [random_head(3, rng)]
        blocks = [TransformerBlock(heads, MLPParams.identity(3))]
        assert_allclose(transformer_forward(seq, blocks).data, multi_head_layer(seq, heads).data, atol=1e-12)

    @pytest.mark.parametrize("variant", ["relu", "bump"])
    def test_layer_permutation_equivariance_is_exact(self, variant):
        """Permuting tokens permutes the layer output bit for bit."""
        rng = np.random.default_rng(45 if variant == "relu" else 46)
        kind = "mlp1" if variant == "relu" else "linear"
        for _ in range(100):
            n, d = int(rng.integers(1, 40)), int(rng.integers(1, 6))
            seq = random_tokens(n, d, rng)
            heads = [random_head(d, rng, kind=kind, with_bias=True, mixer=True) for _ in range(int(rng.integers(1, 4)))]
            perm = rng.permutation(n)
            assert_array_equal(multi_head_layer(seq.permuted(perm), heads, variant=variant).data,
                               multi_head_layer(seq, heads, variant=variant).data[perm])

    def test_pointwise_mlp_zero_weights(self):
        """Zero weights leave the output bias on every row."""
        rng = np.random.default_rng(47)
        c = np.array([1.5, -2.0, 0.25])
        mlp = MLPParams(np.zeros((5, 3)), np.zeros(5), np.zeros((3, 5)), c)
        assert_array_equal(pointwise_mlp(random_tokens(7, 3, rng), mlp).data, np.tile(c, (7, 1)))

    def test_pointwise_mlp_permutation(self):
        """The MLP acts on each token alone, so it commutes with permutations."""
        rng = np.random.default_rng(48)
        seq = random_tokens(20, 3, rng)
        mlp = MLPParams.random(3, rng)
        perm = rng.permutation(20)
        assert_array_equal(pointwise_mlp(seq.permuted(perm), mlp).data, pointwise_mlp(seq, mlp).data[perm])

    def test_pointwise_mlp_dimension(self):
        """The MLP input dimension must match the tokens."""
        rng = np.random.default_rng(21)
        with pytest.raises(ShapeMismatchError):
            pointwise_mlp(random_tokens(4, 3, rng), MLPParams.random(2, rng))


class TestTokenValidation:
    """Tests for token sequence validation."""

    def test_non_finite_tokens(self):
        """NaN entries are rejected with their index."""
        with pytest.raises(NumericError):
            TokenSequence(np.array([[0.0, np.nan]]))

    def test_empty_sequence(self):
        """A sequence needs at least one token."""
        with pytest.raises(EmptyInputError):
            TokenSequence(np.zeros((0, 2)))
