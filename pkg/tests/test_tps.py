"""Tests for the thin plate spline basis and penalty construction."""

import math

import numpy as np
import pytest

from pairsmooth import tps
from pairsmooth.errors import DegenerateGeometry, TooFewPoints

import oracles


def make_points(n=200, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=(n, 2))


class TestRadialKernel:
    def test_zero_limit(self):
        assert tps.tps_radial(0.0) == 0.0

    def test_log_one(self):
        assert tps.tps_radial(1.0) == 0.0

    def test_closed_form_at_two(self):
        expected = 4.0 * math.log(2.0) / (8.0 * math.pi)
        assert tps.tps_radial(2.0) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.110318, abs=1e-6)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            tps.tps_radial(-0.1)

    def test_vectorized_and_continuous_at_zero(self):
        r = np.array([0.0, 1e-12, 1e-8, 0.5])
        vals = tps.tps_radial(r)
        assert vals[0] == 0.0
        assert abs(vals[1]) < 1e-20
        assert np.all(np.isfinite(vals))


class TestBuildBasis:
    def test_collinear_points_rejected(self):
        pts = np.column_stack([np.linspace(0, 1, 10), np.linspace(0, 2, 10)])
        with pytest.raises(DegenerateGeometry):
            tps.build_basis(pts, 5)

    def test_too_few_distinct_points(self):
        pts = make_points(12)
        with pytest.raises(TooFewPoints):
            tps.build_basis(pts, 30)

    def test_duplicates_are_deduplicated(self):
        pts = make_points(40)
        doubled = np.vstack([pts, pts])
        basis = tps.build_basis(doubled, 10)
        assert basis.basis_dim == 10

    def test_dimensions_and_penalty_definiteness(self):
        basis = tps.build_basis(make_points(1000, seed=3), 30)
        assert basis.basis_dim == 30
        assert basis.null_dim == 3
        assert basis.penalty.shape == (27, 27)
        eigvals = np.linalg.eigvalsh(0.5 * (basis.penalty + basis.penalty.T))
        assert eigvals[0] > 0

    def test_null_space_has_zero_roughness(self):
        basis = tps.build_basis(make_points(100), 12)
        coeffs = np.zeros(basis.basis_dim)
        coeffs[:3] = [2.0, -1.0, 0.5]
        assert tps.roughness(basis, coeffs) == 0.0

    def test_knots_invariant_to_point_order(self):
        pts = make_points(150, seed=5)
        b1 = tps.build_basis(pts, 15)
        rng = np.random.default_rng(9)
        b2 = tps.build_basis(pts[rng.permutation(len(pts))], 15)
        assert np.allclose(b1.knots, b2.knots)
        assert np.allclose(b1.penalty, b2.penalty)


class TestEvalBasis:
    def test_constant_column_at_knot(self):
        pts = make_points(60)
        basis = tps.build_basis(pts, 8)
        design = tps.eval_basis(basis, pts[:5])
        assert np.allclose(design[:, 0], 1.0)

    def test_null_columns_are_normalized_coordinates(self):
        pts = make_points(60, seed=1)
        basis = tps.build_basis(pts, 8)
        design = tps.eval_basis(basis, pts)
        norm = basis.normalize(pts)
        assert np.allclose(design[:, 1], norm[:, 0])
        assert np.allclose(design[:, 2], norm[:, 1])

    def test_plane_reconstruction(self):
        pts = make_points(120, seed=2)
        basis = tps.build_basis(pts, 10)
        y = 2.0 + 3.0 * pts[:, 0] - pts[:, 1]
        design = tps.eval_basis(basis, pts)
        coeffs, *_ = np.linalg.lstsq(design, y, rcond=None)
        resid = y - design @ coeffs
        assert np.max(np.abs(resid)) < 1e-8

    def test_normalized_round_trip(self):
        pts = make_points(80, seed=7)
        basis = tps.build_basis(pts, 9)
        norm = basis.normalize(pts)
        pre_normalized = tps.build_basis(norm, 9)
        assert np.allclose(tps.eval_basis(basis, pts),
                           tps.eval_basis(pre_normalized, norm), atol=1e-9)


class TestRoughness:
    def test_zero_coefficients(self):
        basis = tps.build_basis(make_points(50), 8)
        assert tps.roughness(basis, np.zeros(basis.basis_dim)) == 0.0

    def test_length_mismatch(self):
        basis = tps.build_basis(make_points(50), 8)
        with pytest.raises(ValueError):
            tps.roughness(basis, np.zeros(3))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_quadratic_form_matches_quadrature(self, seed):
        basis = tps.build_basis(make_points(80, seed=seed), 10)
        rng = np.random.default_rng(100 + seed)
        coeffs = np.zeros(basis.basis_dim)
        coeffs[3:] = rng.normal(scale=0.5, size=basis.penalized_dim)
        j_impl = tps.roughness(basis, coeffs)
        delta = tps.radial_coefficients(basis, coeffs)
        j_quad = oracles.quadrature_roughness(basis.knots, delta)
        assert j_quad == pytest.approx(j_impl, rel=0.02)

    def test_moment_conditions_hold(self):
        basis = tps.build_basis(make_points(60, seed=4), 9)
        rng = np.random.default_rng(11)
        coeffs = np.zeros(basis.basis_dim)
        coeffs[3:] = rng.normal(size=basis.penalized_dim)
        delta = tps.radial_coefficients(basis, coeffs)
        assert abs(delta.sum()) < 1e-10
        assert np.max(np.abs(delta @ basis.knots)) < 1e-10


class TestCenterConstraint:
    def test_column_sums_vanish(self):
        pts = make_points(90, seed=6)
        basis = tps.build_basis(pts, 11)
        centered = tps.center_constraint(basis, pts)
        design = tps.eval_basis(centered, pts)
        assert np.max(np.abs(design.sum(axis=0))) < 1e-10 * len(pts)

    def test_dimension_reduced_by_one(self):
        pts = make_points(90, seed=6)
        basis = tps.build_basis(pts, 11)
        centered = tps.center_constraint(basis, pts)
        assert centered.basis_dim == basis.basis_dim - 1
        assert centered.null_dim == 2

    def test_intercept_recovery(self):
        pts = make_points(150, seed=8)
        basis = tps.build_basis(pts, 12)
        centered = tps.center_constraint(basis, pts)
        rng = np.random.default_rng(3)
        y = 5.0 + np.sin(3 * pts[:, 0]) + rng.normal(scale=0.01, size=len(pts))
        y -= (np.sin(3 * pts[:, 0])).mean()
        design = np.column_stack([np.ones(len(pts)),
                                  tps.eval_basis(centered, pts)])
        coeffs, *_ = np.linalg.lstsq(design, y, rcond=None)
        assert coeffs[0] == pytest.approx(5.0, abs=0.05)


class TestLimitBehaviour:
    def test_heavy_penalty_recovers_gls_plane(self):
        pts = make_points(200, seed=12)
        rng = np.random.default_rng(13)
        y = 1.0 + 2.0 * pts[:, 0] + 0.5 * pts[:, 1] \
            + np.sin(6 * pts[:, 0]) * 0.3 + rng.normal(scale=0.05, size=len(pts))
        basis = tps.build_basis(pts, 14)
        design = tps.eval_basis(basis, pts)
        lam = 1e8
        pen = np.zeros((basis.basis_dim, basis.basis_dim))
        pen[3:, 3:] = lam * basis.penalty / 2.0
        coeffs = np.linalg.solve(design.T @ design + pen, design.T @ y)
        plane = design[:, :3]
        plane_fit = plane @ np.linalg.lstsq(plane, y, rcond=None)[0]
        assert np.max(np.abs(design @ coeffs - plane_fit)) < 1e-4

    def test_serialization_round_trip(self):
        pts = make_points(70, seed=14)
        basis = tps.build_basis(pts, 9)
        clone = tps.SurfaceBasis.from_dict(basis.to_dict())
        probe = make_points(20, seed=15)
        assert np.allclose(tps.eval_basis(basis, probe),
                           tps.eval_basis(clone, probe))
        centered = tps.center_constraint(basis, pts)
        clone_c = tps.SurfaceBasis.from_dict(centered.to_dict())
        assert np.allclose(tps.eval_basis(centered, probe),
                           tps.eval_basis(clone_c, probe))
