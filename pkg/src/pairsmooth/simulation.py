"""Monte Carlo data generation and size/power studies.

Data are generated from two smooth bivariate test functions on the unit
square, centered at the realized covariate values, with shared bivariate
normal subject effects and heteroscedastic paired errors.  The first half
of the subjects form group 1, the rest group 2; group levels differ through
intercepts while the surface shapes are common under the null scenario and
swapped between groups under the alternative scenario.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .data import LongitudinalDataset
from .design import BasisConfig, ModelSpec


def test_function_f1(x, t):
    """First smooth test surface on [0,1]^2."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    return 5.0 * x ** 2 + np.log(0.5 * t + 1.0) + t + 3.0 * t ** (0.5 * x + 1.0)


def test_function_f2(x, t):
    """Second smooth test surface on [0,1]^2."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    return 1.5 * np.sqrt(x) + 1.5 * t ** 3 + 2.25 * x * np.exp(t)


TRUTHS = ("null_common_surface", "group_specific_surfaces")
TEST_METHODS = ("adjusted_lrt", "bootstrap")


@dataclass(frozen=True)
class SimConfig:
    """One Monte Carlo scenario."""

    m: int = 50
    n: int = 20
    truth: str = "null_common_surface"
    intercepts: tuple[float, float, float, float] = (10.0, 2.0, 15.0, 4.0)
    variance: tuple[float, float, float, float, float] = (2.0, 3.0, 0.5, 2.0, 0.8)
    covariate_law: str = "uniform01"
    replications: int = 200
    seed: int = 0
    test: str = "adjusted_lrt"
    bootstrap_b: int = 199
    level: float = 0.05
    basis_k: int = 30

    def __post_init__(self):
        if self.m % 2:
            raise ValueError("m must be even for the half/half group split")
        if self.truth not in TRUTHS:
            raise ValueError(f"unknown truth {self.truth!r}")
        if self.test not in TEST_METHODS:
            raise ValueError(f"unknown test {self.test!r}")
        if self.covariate_law != "uniform01":
            raise ValueError(f"unknown covariate law {self.covariate_law!r}")

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            surface_mode="group_specific",
            num_groups=2,
            basis=BasisConfig(k=self.basis_k),
            error_structure="independent",
            criterion="ML",
        )

    def to_dict(self) -> dict:
        return {
            "m": self.m, "n": self.n, "truth": self.truth,
            "intercepts": list(self.intercepts),
            "variance": list(self.variance),
            "covariate_law": self.covariate_law,
            "replications": self.replications, "seed": self.seed,
            "test": self.test, "bootstrap_b": self.bootstrap_b,
            "level": self.level, "basis_k": self.basis_k,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown simulation config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("intercepts", "variance"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def _replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed,
                                                        spawn_key=(replicate,)))


def simulate_dataset(cfg: SimConfig, replicate: int) -> LongitudinalDataset:
    """Generate one replicate dataset; deterministic in (cfg.seed, replicate).

    Draw order is fixed: subject effects, then w, then h, then the two error
    vectors.  Surfaces are centered at the realized covariate values; under
    the group-specific truth the two groups receive the two test functions
    in swapped outcome order, so the surface difference is the alternative.
    """
    rng = _replicate_rng(cfg.seed, replicate)
    m, n = cfg.m, cfg.n
    beta0, beta1, gamma0, gamma1 = cfg.intercepts
    sigma1, sigma2, rho, sigma_eps, delta = cfg.variance

    cov_u = np.array([[sigma1 ** 2, rho * sigma1 * sigma2],
                      [rho * sigma1 * sigma2, sigma2 ** 2]])
    draws = rng.standard_normal((m, 2))
    if sigma1 > 0 and sigma2 > 0:
        u_pairs = draws @ np.linalg.cholesky(cov_u).T
    else:
        # degenerate noise-free limit: keep the draw order stable
        u_pairs = draws * np.array([sigma1, sigma2])

    total = m * n
    w = rng.uniform(size=total)
    h = rng.uniform(size=total)
    eps1 = sigma_eps * rng.standard_normal(total)
    eps2 = sigma_eps * delta * rng.standard_normal(total)

    f1 = test_function_f1(w, h)
    f2 = test_function_f2(w, h)
    f1 = f1 - f1.mean()
    f2 = f2 - f2.mean()

    subj = np.repeat(np.arange(m), n)
    group = np.where(np.arange(m) < m // 2, 1, 2)
    z = (group == 2).astype(float)[subj]

    surf1 = f1.copy()
    surf2 = f2.copy()
    if cfg.truth == "group_specific_surfaces":
        in_g2 = z == 1.0
        surf1[in_g2] = f2[in_g2]
        surf2[in_g2] = f1[in_g2]

    y1 = u_pairs[subj, 0] + beta0 + beta1 * z + surf1 + eps1
    y2 = u_pairs[subj, 1] + gamma0 + gamma1 * z + surf2 + eps2
    time = np.tile(np.arange(1.0, n + 1.0), m)

    return LongitudinalDataset(
        subject_ids=[f"s{i:05d}" for i in range(m)],
        group_by_subject=group,
        time=time, y1=y1, y2=y2, w=w, h=h,
        obs_subject=subj,
    )


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------

@dataclass
class ReplicateOutcome:
    replicate: int
    statistic: float
    p_values: dict
    converged: bool
    nu: int | None = None
    error: str | None = None


@dataclass
class MonteCarloReport:
    config: SimConfig
    outcomes: list[ReplicateOutcome]
    rejection: dict            # reference -> (count, rate, lo95, hi95)
    level: float

    def as_text(self) -> str:
        lines = [
            f"m={self.config.m} n={self.config.n} truth={self.config.truth} "
            f"test={self.config.test} replications={len(self.outcomes)} "
            f"level={self.level}",
            f"{'reference':<16}{'rejects':>8}{'rate':>9}{'95% CI':>20}",
        ]
        for ref, (count, rate, lo, hi) in self.rejection.items():
            lines.append(f"{ref:<16}{count:>8}{rate:>9.3f}"
                         f"      [{lo:.3f}, {hi:.3f}]")
        n_fail = sum(1 for o in self.outcomes if not o.converged)
        lines.append(f"non-converged replicates: {n_fail}")
        return "\n".join(lines)


def exact_binomial_interval(k: int, n: int, level: float = 0.95):
    """Clopper-Pearson interval for a proportion."""
    alpha = 1.0 - level
    lo = 0.0 if k == 0 else float(stats.beta.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - alpha / 2, k + 1, n - k))
    return lo, hi


def _run_one_replicate(cfg: SimConfig, r: int) -> ReplicateOutcome:
    from . import inference
    ds = simulate_dataset(cfg, r)
    spec = cfg.model_spec()
    try:
        if cfg.test == "adjusted_lrt":
            res = inference.adjusted_lrt(ds, spec, seed=cfg.seed)
            return ReplicateOutcome(
                replicate=r,
                statistic=res.statistic,
                p_values={"chi2_nu": res.details["p_chi2_nu"],
                          "mixture": res.p_value,
                          "chi2_nu1": res.details["p_chi2_nu1"]},
                converged=res.details.get("converged", True),
                nu=res.nu)
        res = inference.bootstrap_test(
            ds, spec, B=cfg.bootstrap_b,
            seed=cfg.seed + 100003 * (r + 1))
        return ReplicateOutcome(
            replicate=r, statistic=res.statistic,
            p_values={"bootstrap": res.p_value},
            converged=True, nu=None)
    except Exception as exc:  # noqa: BLE001 - replicate failures are data
        return ReplicateOutcome(replicate=r, statistic=math.nan,
                                p_values={}, converged=False, error=str(exc))


def monte_carlo(cfg: SimConfig, workers: int = 1) -> MonteCarloReport:
    """Run the configured test on ``cfg.replications`` independent datasets
    and report rejection rates with exact binomial intervals.

    Deterministic in (cfg, seed); worker count only affects wall time.
    """
    reps = range(cfg.replications)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_mc_task, [(cfg, r) for r in reps],
                                     chunksize=max(1, cfg.replications
                                                   // (8 * workers) or 1)))
    else:
        outcomes = [_run_one_replicate(cfg, r) for r in reps]
    outcomes.sort(key=lambda o: o.replicate)

    references = (("chi2_nu", "mixture", "chi2_nu1")
                  if cfg.test == "adjusted_lrt" else ("bootstrap",))
    usable = [o for o in outcomes if o.converged and o.p_values]
    rejection = {}
    for ref in references:
        count = sum(1 for o in usable if o.p_values[ref] <= cfg.level)
        n_eff = len(usable)
        rate = count / n_eff if n_eff else math.nan
        lo, hi = exact_binomial_interval(count, n_eff) if n_eff else (0.0, 1.0)
        rejection[ref] = (count, rate, lo, hi)
    return MonteCarloReport(config=cfg, outcomes=outcomes,
                            rejection=rejection, level=cfg.level)


def _mc_task(args) -> ReplicateOutcome:
    cfg, r = args
    return _run_one_replicate(cfg, r)
