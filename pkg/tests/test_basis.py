"""Spline and polynomial feature construction."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuselab.basis import PolynomialMap, SplineBasis, SplineSpec, fit_basis
from fuselab.errors import ValidationError


class TestSplineSpec:
    def test_validation(self):
        with pytest.raises(ValidationError):
            SplineSpec(degree=0)
        with pytest.raises(ValidationError):
            SplineSpec(knots_per_dim=-1)


class TestSplineBasis:
    def test_feature_count(self):
        x = np.random.default_rng(0).standard_normal((50, 2))
        # per coordinate: knots + degree + 1 functions, first dropped
        for degree, knots in [(1, 0), (3, 0), (3, 3), (2, 4)]:
            basis = fit_basis(x, SplineSpec(degree=degree, knots_per_dim=knots))
            assert basis.n_features == 1 + 2 * (knots + degree)
            assert basis.transform(x).shape == (50, basis.n_features)

    def test_affine_span_at_degree_one(self):
        # degree 1, no interior knots: column is an affine function of x,
        # so [intercept, column] spans exactly the affine functions
        rng = np.random.default_rng(1)
        x = rng.standard_normal((40, 1))
        basis = fit_basis(x, SplineSpec(degree=1, knots_per_dim=0))
        phi = basis.transform(x)
        target = 3.0 - 2.0 * x[:, 0]
        coef, *_ = np.linalg.lstsq(phi, target, rcond=None)
        assert np.allclose(phi @ coef, target, atol=1e-10)

    def test_rows_sum_to_one_before_drop(self):
        # dropped first column is 1 - sum of the kept spline columns
        rng = np.random.default_rng(2)
        x = rng.standard_normal((30, 1))
        basis = fit_basis(x, SplineSpec(degree=3, knots_per_dim=2))
        phi = basis.transform(x)
        kept = phi[:, 1:]
        assert (kept.sum(axis=1) <= 1.0 + 1e-9).all()

    def test_out_of_range_clamped(self):
        x = np.linspace(0.0, 1.0, 20)[:, None]
        basis = fit_basis(x, SplineSpec(degree=3, knots_per_dim=1))
        inside = basis.transform(np.array([[0.0], [1.0]]))
        outside = basis.transform(np.array([[-5.0], [9.0]]))
        assert np.allclose(inside, outside)
        assert np.isfinite(outside).all()

    def test_constant_column_widened(self):
        x = np.full((10, 1), 2.0)
        basis = fit_basis(x, SplineSpec(degree=1, knots_per_dim=0))
        phi = basis.transform(x)
        assert np.isfinite(phi).all()

    def test_interactions_and_dim_checks(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((25, 3))
        spec = SplineSpec(degree=1, knots_per_dim=0, interaction_pairs=((0, 2),))
        basis = fit_basis(x, spec)
        phi = basis.transform(x)
        assert np.allclose(phi[:, -1], x[:, 0] * x[:, 2])
        with pytest.raises(ValidationError):
            basis.transform(rng.standard_normal((4, 2)))
        with pytest.raises(ValidationError):
            fit_basis(x, SplineSpec(degree=1, interaction_pairs=((0, 5),)))

    def test_too_few_rows(self):
        with pytest.raises(ValidationError):
            fit_basis(np.zeros((3, 1)), SplineSpec(degree=3))

    @given(
        degree=st.integers(1, 3),
        knots=st.integers(0, 3),
        seed=st.integers(0, 1000),
    )
    @settings(max_examples=25, deadline=None)
    def test_transform_is_bounded_and_reusable(self, degree, knots, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((30, 2))
        basis = fit_basis(x, SplineSpec(degree=degree, knots_per_dim=knots))
        phi = basis.transform(x)
        assert phi.shape == (30, basis.n_features)
        assert (phi >= -1e-12).all() and (phi <= 1.0 + 1e-9).all()
        assert np.array_equal(phi, basis.transform(x))


class TestPolynomialMap:
    def test_hand_features(self):
        pm = PolynomialMap(n_dim=2, degree=2, interaction_pairs=((0, 1),))
        got = pm.transform(np.array([[2.0, 3.0]]))
        assert got.tolist() == [[1.0, 2.0, 4.0, 3.0, 9.0, 6.0]]
        assert pm.n_features == 6

    def test_intercept_only(self):
        pm = PolynomialMap(n_dim=3, degree=0)
        assert pm.transform(np.zeros((4, 3))).tolist() == [[1.0]] * 4

    def test_one_dim_vector_inputs(self):
        pm = PolynomialMap(n_dim=1, degree=1)
        assert pm.transform(np.array([5.0, 6.0])).tolist() == [[1.0, 5.0], [1.0, 6.0]]

    def test_validation(self):
        with pytest.raises(ValidationError):
            PolynomialMap(n_dim=1, degree=-1)
        with pytest.raises(ValidationError):
            PolynomialMap(n_dim=2, interaction_pairs=((0, 3),))
        with pytest.raises(ValidationError):
            PolynomialMap(n_dim=2, degree=1).transform(np.zeros((3, 3)))
