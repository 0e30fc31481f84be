"""Tests for equality of the group-specific surfaces.

Two procedures are provided.  The wild bootstrap refits the null and
unrestricted models on responses rebuilt from resampled subject-effect
pairs and sign-flipped residuals, and refers the observed likelihood-ratio
statistic to the bootstrap distribution.  The adjusted likelihood-ratio
test refits both models with unpenalized splines whose dimensions are fixed
at the (rounded) effective degrees of freedom of the penalized fit and uses
an equal mixture of chi-square distributions with adjacent degrees of
freedom as the reference.

All likelihood comparisons use ML: the null and full models differ in their
fixed-effect structure, which REML criteria cannot compare.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import chi2

from . import lmm
from .data import LongitudinalDataset
from .design import ModelSpec, assemble, null_and_full_specs
from .errors import InvalidSpecPair, NonNested, TooManyFailures

DELTA_NEGATIVE_TOL = 0.05   # optimizer slack before a negative LR is flagged


@dataclass
class TestResult:
    """Outcome of one surface-equality test."""

    method: str                          # "bootstrap" | "adjusted_lrt"
    statistic: float                     # Delta (bootstrap) or 2 log LR
    p_value: float
    nu: int | None = None                # adjusted LRT only
    B: int | None = None                 # bootstrap only
    seed: int | None = None
    bootstrap_stats: np.ndarray | None = None
    per_replicate_status: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def as_text(self) -> str:
        lines = [f"method      {self.method}",
                 f"statistic   {self.statistic:.6g}",
                 f"p-value     {self.p_value:.6g}"]
        if self.nu is not None:
            lines.append(f"nu          {self.nu}")
        if self.B is not None:
            n_fail = sum(1 for s in self.per_replicate_status
                         if not s.get("converged", True))
            lines.append(f"B           {self.B} ({n_fail} failed replicates)")
        if self.seed is not None:
            lines.append(f"seed        {self.seed}")
        for key in ("p_chi2_nu", "p_chi2_nu1"):
            if key in self.details:
                lines.append(f"{key:<12}{self.details[key]:.6g}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "nu": self.nu,
            "B": self.B,
            "seed": self.seed,
            "bootstrap_stats": None if self.bootstrap_stats is None
            else list(map(float, self.bootstrap_stats)),
            "per_replicate_status": self.per_replicate_status,
            "details": self.details,
        }


def mixture_chisq_sf(x: float, nu: int) -> float:
    """Survival function of the equal mixture of chi2(nu) and chi2(nu+1)."""
    if x < 0:
        raise ValueError("the statistic must be nonnegative")
    if nu < 1:
        raise ValueError("nu must be a positive integer")
    return 0.5 * float(chi2.sf(x, nu)) + 0.5 * float(chi2.sf(x, nu + 1))


def wild_multiplier_stream(seed: int, count: int) -> np.ndarray:
    """Deterministic Rademacher signs: +-1 with equal probability."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    rng = np.random.default_rng(seed)
    return rng.integers(0, 2, size=count).astype(float) * 2.0 - 1.0


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def bootstrap_p_value(stats, delta_obs: float) -> float:
    """Share of bootstrap statistics at least as large as the observed one."""
    stats = np.asarray(stats, dtype=float)
    if stats.size == 0:
        raise ValueError("no bootstrap statistics")
    return float(np.sum(stats >= delta_obs)) / stats.size


# ---------------------------------------------------------------------------
# adjusted likelihood ratio test
# ---------------------------------------------------------------------------

def adjusted_lrt(ds: LongitudinalDataset, full_spec: ModelSpec,
                 seed: int | None = None, *, n_starts: int = 2,
                 polish: bool = False,
                 free_group_intercepts: bool = True) -> TestResult:
    """Three-step adjusted LRT for equality of group surfaces.

    1. Fit the unrestricted model with penalized splines by ML and read the
       per-smooth effective degrees of freedom.
    2. Refit null and unrestricted models with unpenalized splines whose
       per-smooth dimension is the rounded EDF (the shared null surface uses
       the rounded mean over groups; dimensions are floored so the null
       space stays strictly inside every basis and so the null basis nests
       in each group basis).
    3. Refer twice the log likelihood ratio to the equal mixture of
       chi-square laws with nu and nu+1 degrees of freedom, nu being the
       difference in unpenalized coefficient counts.
    """
    if full_spec.surface_mode != "group_specific":
        raise InvalidSpecPair("adjusted_lrt requires a group_specific spec")
    if not full_spec.is_penalized:
        raise InvalidSpecPair("the input spec must be penalized")

    pen_fit = lmm.fit(ds, replace(full_spec, criterion="ML"),
                      n_starts=n_starts, polish=polish)
    edf = pen_fit.edf
    g = full_spec.num_groups
    edf1, edf2 = edf[:g], edf[g:]

    floor = 4  # null-space dimension + 1
    cap = full_spec.basis.k
    k0_1 = min(max(_round_half_up(float(np.mean(edf1))), floor), cap)
    k0_2 = min(max(_round_half_up(float(np.mean(edf2))), floor), cap)
    dims1 = [min(max(_round_half_up(e), floor, k0_1), cap) for e in edf1]
    dims2 = [min(max(_round_half_up(e), floor, k0_2), cap) for e in edf2]
    floored = (any(_round_half_up(e) < floor for e in np.concatenate([edf1, edf2]))
               or any(_round_half_up(e) < k0_1 for e in edf1)
               or any(_round_half_up(e) < k0_2 for e in edf2))

    null_spec, _ = null_and_full_specs(full_spec, free_group_intercepts)
    full_unpen = replace(full_spec, criterion="ML",
                         unpenalized_dims=tuple(dims1 + dims2))
    null_unpen = replace(null_spec, criterion="ML",
                         unpenalized_dims=(k0_1, k0_2))

    d_full = assemble(ds, full_unpen)
    d_null = assemble(ds, null_unpen)
    nu = d_full.x.shape[1] - d_null.x.shape[1]
    if nu <= 0:
        raise NonNested(
            f"full model has {d_full.x.shape[1]} unpenalized coefficients, "
            f"null has {d_null.x.shape[1]}")

    fit_full = lmm.fit_assembled(d_full, criterion="ML", n_starts=n_starts,
                                 polish=polish)
    fit_null = lmm.fit_assembled(d_null, criterion="ML", n_starts=n_starts,
                                 polish=polish)
    delta2 = 2.0 * (fit_full.loglik - fit_null.loglik)
    stat = max(delta2, 0.0)
    return TestResult(
        method="adjusted_lrt",
        statistic=delta2,
        p_value=mixture_chisq_sf(stat, nu),
        nu=nu,
        seed=seed,
        details={
            "p_chi2_nu": float(chi2.sf(stat, nu)),
            "p_chi2_nu1": float(chi2.sf(stat, nu + 1)),
            "edf_full": edf.tolist(),
            "unpenalized_dims_full": dims1 + dims2,
            "unpenalized_dims_null": [k0_1, k0_2],
            "edf_floor_applied": bool(floored),
            "negative_statistic": bool(delta2 < -DELTA_NEGATIVE_TOL),
            "converged": bool(pen_fit.converged and fit_full.converged
                              and fit_null.converged),
            "loglik_full": fit_full.loglik,
            "loglik_null": fit_null.loglik,
        },
    )


# ---------------------------------------------------------------------------
# wild bootstrap test
# ---------------------------------------------------------------------------

def _compose_bootstrap_response(rng, design, mu_hat, u_hat, resid):
    """Steps 2-4: resample subject-effect pairs, sign-flip residuals."""
    m = design.num_subjects
    draw = rng.integers(0, m, size=m)
    signs = rng.integers(0, 2, size=design.y.shape[0]).astype(float) * 2 - 1
    u_new = u_hat[draw]
    rows_u = u_new[design.row_subject, design.row_outcome - 1]
    return mu_hat + rows_u + resid * signs, draw, signs


def _boot_replicate(args):
    (b, seed, payload) = args
    import numpy as _np

    ws_null, ws_full, mu_hat, u_hat, resid, tau_null, tau_full = payload
    rng = _np.random.default_rng(_np.random.SeedSequence(seed, spawn_key=(b,)))
    y_new, _, _ = _compose_bootstrap_response(
        rng, ws_null.design, mu_hat, u_hat, resid)
    status = {"replicate": b, "converged": True}
    try:
        fast = {"ftol": 1e-8, "gtol": 1e-5}
        fit_null = lmm._fit_workspace(ws_null.with_response(y_new),
                                      criterion="ML", start=tau_null,
                                      n_starts=1, polish=False,
                                      opt_options=fast)
        fit_full = lmm._fit_workspace(ws_full.with_response(y_new),
                                      criterion="ML", start=tau_full,
                                      n_starts=1, polish=False,
                                      opt_options=fast)
        delta = fit_full.loglik - fit_null.loglik
        status["converged"] = bool(fit_null.converged and fit_full.converged)
        status["negative"] = bool(delta < -DELTA_NEGATIVE_TOL)
        return b, delta, status
    except Exception as exc:  # noqa: BLE001 - replicate failures are counted
        status["converged"] = False
        status["error"] = str(exc)
        return b, math.nan, status


def bootstrap_test(ds: LongitudinalDataset, full_spec: ModelSpec, B: int,
                   seed: int, *, workers: int = 1,
                   free_group_intercepts: bool = True,
                   max_failure_fraction: float = 0.10) -> TestResult:
    """Six-step wild bootstrap test of surface equality.

    The null fit supplies restricted means, subject-effect BLUP pairs, and
    residuals; each replicate resamples whole subject-effect pairs with
    replacement, multiplies every residual by an independent Rademacher
    sign, rebuilds responses, and refits both models by ML.  Replicate b
    draws from a stream keyed by (seed, b), so results do not depend on the
    worker count or completion order.
    """
    if B < 99:
        raise ValueError("B must be at least 99")
    if seed is None:
        raise ValueError("bootstrap_test requires an explicit seed")
    null_spec, full_spec = null_and_full_specs(full_spec,
                                               free_group_intercepts)
    with lmm.single_thread_blas():
        d_null = assemble(ds, replace(null_spec, criterion="ML"))
        d_full = assemble(ds, replace(full_spec, criterion="ML"))
        ws_null = lmm._Workspace(d_null)
        ws_full = lmm._Workspace(d_full)
        fit_null = lmm._fit_workspace(ws_null, criterion="ML", n_starts=2,
                                      polish=False)
        fit_full = lmm._fit_workspace(ws_full, criterion="ML", n_starts=2,
                                      polish=False)
    delta_obs = fit_full.loglik - fit_null.loglik

    payload = (ws_null, ws_full, fit_null.fitted_mu,
               fit_null.subject_effects, fit_null.residuals,
               fit_null.tau, fit_full.tau)
    tasks = [(b, seed, payload) for b in range(1, B + 1)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_boot_replicate, tasks,
                                    chunksize=max(1, B // (8 * workers))))
    else:
        with lmm.single_thread_blas():
            results = [_boot_replicate(t) for t in tasks]
    results.sort(key=lambda r: r[0])

    stats = np.array([delta for _, delta, _ in results])
    status = [s for _, _, s in results]
    good = np.array([s["converged"] for s in status]) & np.isfinite(stats)
    n_fail = int(np.sum(~good))
    if n_fail > max_failure_fraction * B:
        raise TooManyFailures(
            f"{n_fail} of {B} bootstrap replicates failed to converge")
    b_eff = int(np.sum(good))
    p_value = bootstrap_p_value(stats[good], delta_obs)

    return TestResult(
        method="bootstrap",
        statistic=float(delta_obs),
        p_value=p_value,
        B=B,
        seed=seed,
        bootstrap_stats=stats,
        per_replicate_status=status,
        details={
            "effective_B": b_eff,
            "failed_replicates": n_fail,
            "delta_obs_negative": bool(delta_obs < -DELTA_NEGATIVE_TOL),
            "loglik_full": fit_full.loglik,
            "loglik_null": fit_null.loglik,
        },
    )
