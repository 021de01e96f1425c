"""
Unit tests for the kernel diagnostics.
"""

import csv

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.errors import ConfigurationError, DegenerateInputError, ShapeMismatchError
from src.diagnostics import (
    GridSpec,
    cpd_quadratic_form,
    kernel_heatmap,
    relu_energy_identity_check,
    run_cpd_trials,
    write_heatmap_csv,
)
from src.params import Projection


class TestCPD:
    """Tests for the conditionally positive definite form."""

    def test_relu_and_energy_forms_agree(self):
        """For zero-sum gamma the two forms coincide."""
        x = np.array([0.0, 1.0, 3.0])
        gamma = np.array([1.0, -2.0, 1.0])
        form = cpd_quadratic_form(x, gamma)
        # -1/2 sum gamma_i gamma_j |x_i - x_j| = -(1*-2*1 + 1*1*3 + -2*1*2) = 3
        assert form.energy_form == pytest.approx(3.0)
        assert form.relu_form == pytest.approx(form.energy_form)

    def test_zero_gamma(self):
        """gamma = 0 gives a zero form."""
        assert cpd_quadratic_form(np.arange(4.0), np.zeros(4)).relu_form == 0.0

    def test_rejects_nonzero_sum(self):
        """gamma must sum to zero."""
        with pytest.raises(DegenerateInputError):
            cpd_quadratic_form(np.arange(3.0), np.ones(3))

    def test_rejects_repeated_points(self):
        """Points must be distinct."""
        with pytest.raises(DegenerateInputError):
            cpd_quadratic_form(np.array([0.0, 0.0, 1.0]), np.array([1.0, -1.0, 0.0]))

    def test_length_mismatch(self):
        """Points and coefficients pair up."""
        with pytest.raises(ShapeMismatchError):
            cpd_quadratic_form(np.arange(3.0), np.zeros(2))

    def test_random_trials_pass(self):
        """The form stays positive over random trials."""
        report = run_cpd_trials(200, np.random.default_rng(0))
        assert report.passed, report.to_dict()
        assert report.min_normalized_form > 0

    def test_energy_identity(self):
        """ReLU(t) = |t|/2 + t/2 to machine precision."""
        rng = np.random.default_rng(1)
        assert relu_energy_identity_check(rng.normal(size=(10_000, 2))) <= 1e-12
        assert relu_energy_identity_check(np.zeros((0, 2))) == 0.0


class TestHeatmap:
    """Tests for kernel weight fields."""

    def test_grid_is_row_major(self):
        """y is the outer index."""
        points = GridSpec(0.0, 1.0, 0.0, 2.0, nx=2, ny=3).points()
        assert_allclose(points[:3], [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        assert points.shape == (6, 2)

    def test_grid_validation(self):
        """Reversed bounds or empty axes are refused."""
        with pytest.raises(ConfigurationError):
            GridSpec(1.0, 0.0)
        with pytest.raises(ConfigurationError):
            GridSpec(nx=0)

    def test_relu_field(self):
        """ReLU(Pi(q) - Pi(z)) with Pi the first coordinate."""
        proj = Projection.linear([[1.0, 0.0]])
        field = kernel_heatmap(proj, GridSpec(-1.0, 1.0, -1.0, 1.0, nx=3, ny=2))
        assert_allclose(field.weights, [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])

    def test_bump_field(self):
        """ReLU(1 - |Pi(q) - Pi(z)| / b) peaks at the query."""
        proj = Projection.linear([[0.0, 1.0]])
        field = kernel_heatmap(proj, GridSpec(-1.0, 1.0, -1.0, 1.0, nx=2, ny=5), variant="bump", bandwidth=1.0,
                               query=[0.0, 0.5])
        assert_allclose(field.weights[:, 0], [0.0, 0.0, 0.5, 1.0, 0.5])

    def test_normalized_relu_field_sums_to_at_most_one(self):
        """Normalisation divides by the lattice sum of |Delta|."""
        rng = np.random.default_rng(2)
        field = kernel_heatmap(Projection.random(2, rng), GridSpec(nx=11, ny=11), normalize=True)
        assert field.weights.sum() <= 1.0 + 1e-12

    def test_bump_needs_linear_projection(self):
        """mlp1 projections are refused for bump fields."""
        rng = np.random.default_rng(3)
        with pytest.raises(ConfigurationError):
            kernel_heatmap(Projection.random(2, rng, kind="mlp1"), GridSpec(), variant="bump")

    def test_projection_dimension(self):
        """Heatmaps live in R^2."""
        with pytest.raises(ShapeMismatchError):
            kernel_heatmap(Projection.linear([[1.0, 0.0, 0.0]]), GridSpec())

    def test_csv_layout(self, tmp_path):
        """Header x,y,weight and one row per lattice point."""
        proj = Projection.linear([[1.0, 1.0]])
        field = kernel_heatmap(proj, GridSpec(nx=4, ny=3))
        path = write_heatmap_csv(field, tmp_path / "heat.csv")
        with path.open() as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["x", "y", "weight"]
        assert len(rows) == 1 + 12
        assert float(rows[1][0]) == -2.0 and float(rows[1][1]) == -2.0
