"""Tests for stacked design assembly and the null/full spec pairing."""

import numpy as np
import pytest

from pairsmooth import data, design
from pairsmooth.errors import (
    DesignError,
    GroupMismatch,
    InvalidSpecPair,
    RankDeficientX,
    TooFewPoints,
)


def make_dataset(m=2, n=3, groups=None, seed=0, covariates=()):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(m):
        g = groups[i] if groups else 1
        for j in range(n):
            row = {"subject": f"s{i}", "time": float(j), "y1": rng.normal(),
                   "y2": rng.normal(), "w": rng.uniform(), "h": rng.uniform(),
                   "group": g}
            for c in covariates:
                row[c] = rng.uniform()
            rows.append(row)
    return data.LongitudinalDataset.from_rows(rows, tuple(covariates))


class TestAssembleCounts:
    def test_single_group_shapes(self):
        # m=2 subjects, 3 visits each -> 6 distinct covariate pairs for K=5
        ds = make_dataset(m=2, n=3)
        spec = design.ModelSpec(surface_mode="group_specific", num_groups=1,
                                basis=design.BasisConfig(k=5))
        d = design.assemble(ds, spec)
        assert d.y.shape == (12,)
        assert d.x.shape[1] == 2 * 3            # two null spaces
        assert d.z_subject.shape == (12, 4)     # 2m subject effects
        assert d.z_spline.shape == (12, 2 * (5 - 3))

    def test_too_few_points_for_requested_basis(self):
        # 2 subjects x 2 visits give only 4 covariate pairs: K=5 cannot build
        ds = make_dataset(m=2, n=2)
        spec = design.ModelSpec(surface_mode="group_specific", num_groups=1,
                                basis=design.BasisConfig(k=5))
        with pytest.raises(TooFewPoints):
            design.assemble(ds, spec)

    def test_two_groups_indicator_zeroing(self):
        ds = make_dataset(m=2, n=3, groups=[1, 2])
        spec = design.ModelSpec(surface_mode="group_specific", num_groups=2,
                                basis=design.BasisConfig(k=5))
        d = design.assemble(ds, spec)
        assert d.x.shape[1] == 2 * 2 * 3
        assert d.z_spline.shape[1] == 2 * 2 * (5 - 3)
        z = d.z_spline.toarray()
        rows_g2 = d.group_by_subject[d.row_subject] == 2
        for sm, blk in zip(d.smooths, d.penalty_blocks):
            cols = z[:, blk.z_start:blk.z_end]
            if sm.group == 1:
                assert np.all(cols[rows_g2] == 0)
                assert np.any(cols[~rows_g2] != 0)

    def test_application_shape_fixed_block(self):
        # four groups, one parametric covariate: 1 + 4*3 = 13 fixed columns
        # per outcome
        ds = make_dataset(m=8, n=6, groups=[1, 2, 3, 4, 1, 2, 3, 4],
                          covariates=("pulse",))
        spec = design.ModelSpec(surface_mode="group_specific", num_groups=4,
                                parametric_terms=("pulse",),
                                basis=design.BasisConfig(k=6))
        d = design.assemble(ds, spec)
        assert d.x.shape[1] == 2 * 13
        per_outcome = [lbl for lbl in d.x_labels if lbl.startswith("psi1")
                       or (lbl.startswith("f1"))]
        assert len(per_outcome) == 13

    def test_group_mismatch(self):
        ds = make_dataset(m=2, n=3, groups=[1, 2])
        spec = design.ModelSpec(surface_mode="group_specific", num_groups=3,
                                basis=design.BasisConfig(k=5))
        with pytest.raises(GroupMismatch):
            design.assemble(ds, spec)

    def test_unknown_parametric_term(self):
        ds = make_dataset(m=2, n=3)
        spec = design.ModelSpec(surface_mode="group_specific", num_groups=1,
                                parametric_terms=("pulse",),
                                basis=design.BasisConfig(k=5))
        with pytest.raises(DesignError):
            design.assemble(ds, spec)

    def test_rank_deficient_duplicate_covariate(self):
        ds = make_dataset(m=4, n=4, covariates=("a", "a2"))
        # make the two parametric columns identical
        pcov = ds.pcov.copy()
        pcov[:, 1] = pcov[:, 0]
        ds2 = data.LongitudinalDataset(
            ds.subject_ids, ds.group, ds.time, ds.y1, ds.y2, ds.w, ds.h,
            ds.obs_subject, pcov, ds.covariate_names)
        spec = design.ModelSpec(surface_mode="group_specific", num_groups=1,
                                parametric_terms=("a", "a2"),
                                basis=design.BasisConfig(k=5))
        with pytest.raises(RankDeficientX):
            design.assemble(ds2, spec)


class TestSharedMode:
    def test_shared_centered_with_intercepts(self):
        ds = make_dataset(m=4, n=5, groups=[1, 2, 1, 2])
        spec = design.ModelSpec(
            surface_mode="shared_centered_with_group_intercepts",
            num_groups=2, basis=design.BasisConfig(k=6))
        d = design.assemble(ds, spec)
        # per outcome: 2 intercepts + 2 centered null columns
        assert d.x.shape[1] == 2 * (2 + 2)
        assert d.z_spline.shape[1] == 2 * (6 - 3)
        assert d.n_smooths_outcome1 == 1

    def test_single_intercept_variant(self):
        ds = make_dataset(m=4, n=5, groups=[1, 2, 1, 2])
        spec = design.ModelSpec(
            surface_mode="shared_centered_with_group_intercepts",
            num_groups=2, group_intercepts=False,
            basis=design.BasisConfig(k=6))
        d = design.assemble(ds, spec)
        assert d.x.shape[1] == 2 * (1 + 2)


class TestNullFullSpecs:
    def test_pairing(self):
        full = design.ModelSpec(surface_mode="group_specific", num_groups=2,
                                basis=design.BasisConfig(k=5))
        null, full2 = design.null_and_full_specs(full)
        assert full2 == full
        assert null.surface_mode == "shared_centered_with_group_intercepts"
        assert null.basis == full.basis
        assert null.error_structure == full.error_structure

    def test_fixed_column_counts(self):
        ds = make_dataset(m=2, n=3, groups=[1, 2])
        full = design.ModelSpec(surface_mode="group_specific", num_groups=2,
                                basis=design.BasisConfig(k=5))
        null, _ = design.null_and_full_specs(full)
        d_full = design.assemble(ds, full)
        d_null = design.assemble(ds, null)
        assert d_full.x.shape[1] == 12
        # per outcome: 2 intercepts + (3 - 1) centered null columns
        assert d_null.x.shape[1] == 8

    def test_rejects_shared_input(self):
        shared = design.ModelSpec(
            surface_mode="shared_centered_with_group_intercepts",
            num_groups=2)
        with pytest.raises(InvalidSpecPair):
            design.null_and_full_specs(shared)


class TestUnpenalized:
    def test_all_columns_move_to_x(self):
        ds = make_dataset(m=4, n=5, groups=[1, 2, 1, 2])
        spec = design.ModelSpec(surface_mode="group_specific", num_groups=2,
                                basis=design.BasisConfig(k=8),
                                unpenalized_dims=(5, 6, 5, 6))
        d = design.assemble(ds, spec)
        assert d.z_spline is None
        assert d.penalty_blocks == ()
        assert d.x.shape[1] == 2 * (5 + 6)

    def test_dims_validation(self):
        with pytest.raises(ValueError):
            design.ModelSpec(surface_mode="group_specific", num_groups=2,
                             unpenalized_dims=(5, 6))


class TestInvariants:
    def test_subject_permutation_invariance(self):
        from pairsmooth import lmm
        ds = make_dataset(m=6, n=4, groups=[1, 2, 1, 2, 1, 2], seed=3)
        perm = [3, 0, 5, 2, 4, 1]
        rows = []
        for i in perm:
            mask = ds.obs_subject == i
            for k in np.where(mask)[0]:
                rows.append({
                    "subject": ds.subject_ids[i], "time": ds.time[k],
                    "y1": ds.y1[k], "y2": ds.y2[k], "w": ds.w[k],
                    "h": ds.h[k], "group": int(ds.group[i])})
        ds_perm = data.LongitudinalDataset.from_rows(rows)
        spec = design.ModelSpec(surface_mode="group_specific", num_groups=2,
                                basis=design.BasisConfig(k=6))
        tau = lmm.VarianceComponents(
            log_lambda=np.array([0.5, 0.1]), log_varphi=np.array([0.2, 0.4]),
            sigma1_sq=1.0, sigma2_sq=2.0, rho=0.3, sigma_eps_sq=0.5,
            delta=1.1)
        d1 = design.assemble(ds, spec)
        d2 = design.assemble(ds_perm, spec)
        assert lmm.reml_criterion(d1, tau) == pytest.approx(
            lmm.reml_criterion(d2, tau), abs=1e-8)

    def test_spec_json_round_trip(self):
        spec = design.ModelSpec(surface_mode="group_specific", num_groups=3,
                                parametric_terms=("hr",),
                                basis=design.BasisConfig(k=17),
                                error_structure="car1_on_time",
                                criterion="ML")
        assert design.ModelSpec.from_dict(spec.to_dict()) == spec

    def test_spec_unknown_key_rejected(self):
        with pytest.raises(DesignError):
            design.ModelSpec.from_dict({"surface_mode": "group_specific",
                                        "num_groups": 1, "oops": 2})
