"""Tests for the bootstrap and adjusted-LRT surface-equality procedures."""

import numpy as np
import pytest
from scipy.stats import chi2

from pairsmooth import design, inference, lmm, simulation
from pairsmooth.errors import InvalidSpecPair


class TestMixtureChisq:
    def test_at_zero(self):
        assert inference.mixture_chisq_sf(0.0, 5) == 1.0

    def test_reference_value(self):
        val = inference.mixture_chisq_sf(3.841, 1)
        expected = 0.5 * chi2.sf(3.841, 1) + 0.5 * chi2.sf(3.841, 2)
        assert val == pytest.approx(expected, abs=1e-14)
        assert val == pytest.approx(0.0983, abs=2e-4)

    def test_monotone_decreasing(self):
        xs = np.linspace(0, 30, 40)
        vals = [inference.mixture_chisq_sf(x, 7) for x in xs]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            inference.mixture_chisq_sf(-1.0, 3)
        with pytest.raises(ValueError):
            inference.mixture_chisq_sf(1.0, 0)


class TestWildMultipliers:
    def test_empty(self):
        assert inference.wild_multiplier_stream(3, 0).shape == (0,)

    def test_values_and_moments(self):
        draws = inference.wild_multiplier_stream(11, 1_000_000)
        assert set(np.unique(draws)) == {-1.0, 1.0}
        assert abs(draws.mean()) < 4.0 / np.sqrt(1_000_000)

    def test_deterministic(self):
        a = inference.wild_multiplier_stream(42, 1000)
        b = inference.wild_multiplier_stream(42, 1000)
        assert np.array_equal(a, b)


class TestBootstrapMechanics:
    def test_p_value_counting(self):
        stats = np.array([0.5, 1.5, 2.5, 3.5])
        assert inference.bootstrap_p_value(stats, 0.0) == 1.0
        assert inference.bootstrap_p_value(stats, 2.0) == 0.5
        assert inference.bootstrap_p_value(stats, 9.0) == 0.0

    def test_resampling_preserves_pairs_and_magnitudes(self):
        cfg = simulation.SimConfig(m=12, n=5, seed=3, basis_k=8)
        ds = simulation.simulate_dataset(cfg, 0)
        null_spec, _ = design.null_and_full_specs(cfg.model_spec())
        d = design.assemble(ds, null_spec)
        fm = lmm.fit_assembled(d, criterion="ML", polish=False, n_starts=1)
        rng = np.random.default_rng(5)
        y_new, draw, signs = inference._compose_bootstrap_response(
            rng, d, fm.fitted_mu, fm.subject_effects, fm.residuals)
        # every resampled effect pair is one of the BLUP pairs, jointly
        resampled = fm.subject_effects[draw]
        blup_set = {tuple(np.round(r, 12)) for r in fm.subject_effects}
        assert all(tuple(np.round(r, 12)) in blup_set for r in resampled)
        # wild residuals keep magnitudes exactly
        u_rows = resampled[d.row_subject, d.row_outcome - 1]
        eps_new = y_new - fm.fitted_mu - u_rows
        assert np.allclose(np.abs(eps_new), np.abs(fm.residuals), atol=1e-12)

    def test_requires_seed_and_minimum_b(self):
        cfg = simulation.SimConfig(m=8, n=5, seed=3, basis_k=6)
        ds = simulation.simulate_dataset(cfg, 0)
        with pytest.raises(ValueError):
            inference.bootstrap_test(ds, cfg.model_spec(), B=50, seed=1)
        with pytest.raises(ValueError):
            inference.bootstrap_test(ds, cfg.model_spec(), B=99, seed=None)

    def test_rejects_non_group_specific_spec(self):
        shared = design.ModelSpec(
            surface_mode="shared_centered_with_group_intercepts",
            num_groups=2)
        cfg = simulation.SimConfig(m=8, n=5, seed=3, basis_k=6)
        ds = simulation.simulate_dataset(cfg, 0)
        with pytest.raises(InvalidSpecPair):
            inference.adjusted_lrt(ds, shared)
        with pytest.raises(InvalidSpecPair):
            inference.bootstrap_test(ds, shared, B=99, seed=1)


class TestBootstrapEndToEnd:
    @pytest.fixture(scope="class")
    def small_run(self):
        cfg = simulation.SimConfig(m=14, n=5, seed=19, basis_k=8)
        ds = simulation.simulate_dataset(cfg, 0)
        res = inference.bootstrap_test(ds, cfg.model_spec(), B=99, seed=7)
        return cfg, ds, res

    def test_result_consistency(self, small_run):
        _, _, res = small_run
        good = np.array([s["converged"] for s in res.per_replicate_status])
        stats = res.bootstrap_stats[good & np.isfinite(res.bootstrap_stats)]
        assert res.p_value == inference.bootstrap_p_value(stats,
                                                          res.statistic)
        assert res.B == 99
        assert 0.0 <= res.p_value <= 1.0

    def test_bitwise_determinism(self, small_run):
        cfg, ds, res = small_run
        res2 = inference.bootstrap_test(ds, cfg.model_spec(), B=99, seed=7)
        assert res2.statistic == res.statistic
        assert np.array_equal(res2.bootstrap_stats, res.bootstrap_stats)
        assert res2.p_value == res.p_value

    def test_worker_count_does_not_change_results(self, small_run):
        cfg, ds, res = small_run
        res2 = inference.bootstrap_test(ds, cfg.model_spec(), B=99, seed=7,
                                        workers=2)
        assert np.array_equal(res2.bootstrap_stats, res.bootstrap_stats)
        assert res2.p_value == res.p_value


class TestAdjustedLrt:
    def test_null_data_moderate_p(self):
        cfg = simulation.SimConfig(m=24, n=8, seed=29, basis_k=10)
        ds = simulation.simulate_dataset(cfg, 0)
        res = inference.adjusted_lrt(ds, cfg.model_spec())
        assert res.nu >= 1
        assert res.p_value > 1e-4
        assert res.details["p_chi2_nu"] <= res.p_value \
            <= res.details["p_chi2_nu1"]

    def test_alternative_detected(self):
        cfg = simulation.SimConfig(m=30, n=10, seed=31, basis_k=10,
                                   truth="group_specific_surfaces")
        ds = simulation.simulate_dataset(cfg, 0)
        res = inference.adjusted_lrt(ds, cfg.model_spec())
        assert res.p_value < 1e-3

    def test_nu_matches_column_count_difference(self):
        cfg = simulation.SimConfig(m=20, n=8, seed=37, basis_k=9)
        ds = simulation.simulate_dataset(cfg, 0)
        res = inference.adjusted_lrt(ds, cfg.model_spec())
        dims_full = res.details["unpenalized_dims_full"]
        k01, k02 = res.details["unpenalized_dims_null"]
        g = 2
        expected_nu = (sum(dims_full) - (g + k01 - 1) - (g + k02 - 1))
        assert res.nu == expected_nu

    def test_rescaling_covariate_axis_invariance(self):
        from pairsmooth import data
        cfg = simulation.SimConfig(m=16, n=6, seed=41, basis_k=8)
        ds = simulation.simulate_dataset(cfg, 0)
        scaled = data.LongitudinalDataset(
            ds.subject_ids, ds.group, ds.time, ds.y1, ds.y2,
            ds.w * 1000.0, ds.h, ds.obs_subject, ds.pcov,
            ds.covariate_names)
        r1 = inference.adjusted_lrt(ds, cfg.model_spec())
        r2 = inference.adjusted_lrt(scaled, cfg.model_spec())
        assert r1.nu == r2.nu
        assert r1.p_value == pytest.approx(r2.p_value, abs=1e-3)

    def test_statistic_zero_gives_p_one(self):
        assert inference.mixture_chisq_sf(0.0, 12) == 1.0
