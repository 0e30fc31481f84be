"""Likelihood evaluation and variance-component optimization for the
stacked paired-outcome mixed model.

The marginal covariance is V = R* + Z_s D Z_s^T, where R* collects the
error covariance together with the shared subject effects (block diagonal
over subjects, one 2*n_i block each) and D = diag(1/lambda_g) holds each
penalized spline block.  Every likelihood quantity is computed from
per-subject Cholesky factors of R* plus one small Woodbury system in the
spline coefficients; V is never formed as a dense matrix on this path.
Subjects that share a visit-gap pattern and group are processed as one
batched block solve.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


@contextmanager
def single_thread_blas():
    """Pin BLAS to one thread: the matrices here are small, per-call thread
    fan-out costs far more than it saves, and parallelism belongs to the
    replicate level."""
    if threadpool_limits is None:
        yield
        return
    with threadpool_limits(limits=1, user_api="blas"):
        yield

from .design import AssembledDesign, ModelSpec, assemble
from .errors import (
    NoConvergence,
    NonPositiveDefinite,
    RankDeficientX,
    UnknownGroup,
    UnknownOutcome,
)

LOG_2PI = math.log(2.0 * math.pi)

# bounds on the transformed (unconstrained) scale
_BOUND_LOG_SMOOTH = (-20.0, 20.0)
_BOUND_LOG_VAR = (-23.0, 23.0)
_BOUND_ATANH_RHO = (-7.2543, 7.2543)        # |rho| <= 1 - 1e-6
_BOUND_LOG_DELTA = (-11.5, 11.5)
_BOUND_LOGIT_AR = (-20.0, 13.8)             # ar_corr <= 1 - 1e-6


@dataclass(frozen=True)
class VarianceComponents:
    """The variance parameter vector tau.

    ``log_lambda`` / ``log_varphi`` are the log smoothing parameters of the
    outcome-1 / outcome-2 surfaces (one entry per smooth); the remaining
    fields parameterize the subject-effect covariance and the error law.
    ``ar_corr`` is present exactly when the error structure is continuous
    AR(1) on time.
    """

    log_lambda: np.ndarray
    log_varphi: np.ndarray
    sigma1_sq: float
    sigma2_sq: float
    rho: float
    sigma_eps_sq: float
    delta: float
    ar_corr: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "log_lambda",
                           np.atleast_1d(np.asarray(self.log_lambda, float)))
        object.__setattr__(self, "log_varphi",
                           np.atleast_1d(np.asarray(self.log_varphi, float)))
        if self.sigma1_sq <= 0 or self.sigma2_sq <= 0 or self.sigma_eps_sq <= 0:
            raise ValueError("variances must be strictly positive")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must be inside (-1, 1)")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.ar_corr is not None and not 0.0 <= self.ar_corr < 1.0:
            raise ValueError("ar_corr must lie in [0, 1)")

    def sigma_u(self) -> np.ndarray:
        cov = self.rho * math.sqrt(self.sigma1_sq * self.sigma2_sq)
        return np.array([[self.sigma1_sq, cov], [cov, self.sigma2_sq]])

    def with_no_smooths(self) -> "VarianceComponents":
        return replace(self, log_lambda=np.zeros(0), log_varphi=np.zeros(0))

    def to_dict(self) -> dict:
        return {
            "log_lambda": self.log_lambda.tolist(),
            "log_varphi": self.log_varphi.tolist(),
            "sigma1_sq": self.sigma1_sq,
            "sigma2_sq": self.sigma2_sq,
            "rho": self.rho,
            "sigma_eps_sq": self.sigma_eps_sq,
            "delta": self.delta,
            "ar_corr": self.ar_corr,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VarianceComponents":
        return cls(
            log_lambda=np.asarray(d["log_lambda"], float),
            log_varphi=np.asarray(d["log_varphi"], float),
            sigma1_sq=float(d["sigma1_sq"]),
            sigma2_sq=float(d["sigma2_sq"]),
            rho=float(d["rho"]),
            sigma_eps_sq=float(d["sigma_eps_sq"]),
            delta=float(d["delta"]),
            ar_corr=None if d.get("ar_corr") is None else float(d["ar_corr"]),
        )


# ---------------------------------------------------------------------------
# parameter packing on the transformed scale
# ---------------------------------------------------------------------------

def _logit(p):
    return math.log(p / (1.0 - p))


def _expit(x):
    return 1.0 / (1.0 + math.exp(-x))


class ParameterMap:
    """Maps VarianceComponents to/from an unconstrained vector.

    Order: log lambda terms, log varphi terms, log sigma1^2, log sigma2^2,
    atanh(rho), log sigma_eps^2, log delta, then logit(ar_corr) when the
    error structure carries it.  Individual parameters may be pinned to
    fixed natural values and drop out of the free vector.
    """

    def __init__(self, n_smooth1: int, n_smooth2: int, has_ar: bool,
                 fixed: dict | None = None):
        self.n1, self.n2, self.has_ar = n_smooth1, n_smooth2, has_ar
        self.names = ([f"lambda[{i}]" for i in range(n_smooth1)]
                      + [f"varphi[{i}]" for i in range(n_smooth2)]
                      + ["sigma1_sq", "sigma2_sq", "rho", "sigma_eps_sq",
                         "delta"]
                      + (["ar_corr"] if has_ar else []))
        self.bounds_all = ([_BOUND_LOG_SMOOTH] * (n_smooth1 + n_smooth2)
                           + [_BOUND_LOG_VAR, _BOUND_LOG_VAR,
                              _BOUND_ATANH_RHO, _BOUND_LOG_VAR,
                              _BOUND_LOG_DELTA]
                           + ([_BOUND_LOGIT_AR] if has_ar else []))
        fixed = dict(fixed or {})
        unknown = set(fixed) - set(self.names)
        if unknown:
            raise ValueError(f"unknown fixed parameters: {sorted(unknown)}")
        self.fixed_transformed = {
            self.names.index(k): self._transform_one(self.names.index(k), v)
            for k, v in fixed.items()}
        self.free_idx = [i for i in range(len(self.names))
                         if i not in self.fixed_transformed]
        self.free_names = [self.names[i] for i in self.free_idx]
        self.free_bounds = [self.bounds_all[i] for i in self.free_idx]

    def _is_rho(self, i):
        return self.names[i] == "rho"

    def _is_ar(self, i):
        return self.names[i] == "ar_corr"

    def _transform_one(self, i, value):
        if self._is_rho(i):
            return math.atanh(min(max(value, -1 + 1e-9), 1 - 1e-9))
        if self._is_ar(i):
            return _logit(min(max(value, 1e-9), 1 - 1e-9))
        return math.log(value)

    def _untransform_one(self, i, x):
        if self._is_rho(i):
            return math.tanh(x)
        if self._is_ar(i):
            return _expit(x)
        return math.exp(x)

    def full_vector(self, tau: VarianceComponents) -> np.ndarray:
        naturals = (list(np.exp(tau.log_lambda)) + list(np.exp(tau.log_varphi))
                    + [tau.sigma1_sq, tau.sigma2_sq, tau.rho,
                       tau.sigma_eps_sq, tau.delta]
                    + ([tau.ar_corr] if self.has_ar else []))
        return np.array([self._transform_one(i, v)
                         for i, v in enumerate(naturals)])

    def pack(self, tau: VarianceComponents) -> np.ndarray:
        return self.full_vector(tau)[self.free_idx]

    def unpack(self, x_free) -> VarianceComponents:
        full = np.empty(len(self.names))
        full[self.free_idx] = x_free
        for i, v in self.fixed_transformed.items():
            full[i] = v
        vals = [self._untransform_one(i, full[i]) for i in range(len(full))]
        n1, n2 = self.n1, self.n2
        return VarianceComponents(
            log_lambda=np.log(vals[:n1]) if n1 else np.zeros(0),
            log_varphi=np.log(vals[n1:n1 + n2]) if n2 else np.zeros(0),
            sigma1_sq=vals[n1 + n2],
            sigma2_sq=vals[n1 + n2 + 1],
            rho=vals[n1 + n2 + 2],
            sigma_eps_sq=vals[n1 + n2 + 3],
            delta=vals[n1 + n2 + 4],
            ar_corr=vals[n1 + n2 + 5] if self.has_ar else None,
        )

    def clip(self, x_free) -> np.ndarray:
        lo = np.array([b[0] for b in self.free_bounds])
        hi = np.array([b[1] for b in self.free_bounds])
        return np.clip(x_free, lo, hi)


# ---------------------------------------------------------------------------
# evaluation workspace: per-pattern stacked blocks
# ---------------------------------------------------------------------------

@dataclass
class _Pattern:
    n_visits: int
    n_subjects: int
    subj_idx: np.ndarray        # (s,)
    gaps: np.ndarray            # (n, n) |t_j - t_j'|
    rows: np.ndarray            # (s, 2n) global row indices (outcome-major)
    u_mat: np.ndarray           # (2n, s*c) stacked [X | Z_active | y] columns
    c: int                      # p + act + 1
    act_cols: np.ndarray        # gram scatter indices, len p + act + 1


class _Workspace:
    """Precomputed per-pattern row blocks of [X | Z_spline | y]."""

    def __init__(self, design: AssembledDesign):
        self.design = design
        self.p = design.x.shape[1]
        self.q = design.q_spline
        self.n_total = design.y.shape[0]
        n = design.n_obs
        z_dense = design.z_spline.toarray() if design.z_spline is not None \
            else np.zeros((2 * n, 0))

        # active spline columns per group
        act_by_group = {}
        for g in range(1, design.num_groups + 1):
            cols = []
            for sm in design.smooths:
                if sm.group in (None, g) and sm.z_end > sm.z_start:
                    cols.extend(range(sm.z_start, sm.z_end))
            act_by_group[g] = np.array(sorted(cols), dtype=int)

        starts = np.concatenate([[0], np.cumsum(
            np.bincount(design.row_subject[:n],
                        minlength=design.num_subjects))])
        buckets: dict[tuple, list[int]] = {}
        for i in range(design.num_subjects):
            rows1 = np.arange(starts[i], starts[i + 1])
            times = design.row_time[rows1]
            key = (len(rows1), int(design.group_by_subject[i]),
                   tuple(np.round(np.diff(times), 9)))
            buckets.setdefault(key, []).append(i)

        self.patterns: list[_Pattern] = []
        for key in sorted(buckets):
            n_i, group, _ = key
            subj = np.array(buckets[key], dtype=int)
            act = act_by_group[group]
            c = self.p + len(act) + 1
            s = len(subj)
            rows = np.empty((s, 2 * n_i), dtype=int)
            u = np.empty((s, 2 * n_i, c))
            for j, i in enumerate(subj):
                r1 = np.arange(starts[i], starts[i + 1])
                rr = np.concatenate([r1, r1 + n])
                rows[j] = rr
                u[j, :, :self.p] = design.x[rr]
                u[j, :, self.p:self.p + len(act)] = z_dense[np.ix_(rr, act)]
                u[j, :, -1] = design.y[rr]
            t0 = design.row_time[rows[0, :n_i]]
            gaps = np.abs(t0[:, None] - t0[None, :])
            self.patterns.append(_Pattern(
                n_visits=n_i, n_subjects=s, subj_idx=subj, gaps=gaps,
                rows=rows,
                u_mat=np.ascontiguousarray(
                    u.transpose(1, 0, 2).reshape(2 * n_i, s * c)),
                c=c,
                act_cols=np.concatenate([
                    np.arange(self.p), self.p + act, [self.p + self.q]]),
            ))
        self.lam_index = self._lambda_index()

    def _lambda_index(self):
        """Map each spline column to its smoothing-parameter position in the
        concatenated (log_lambda, log_varphi) vector."""
        idx = np.zeros(self.q, dtype=int)
        pos1 = pos2 = 0
        for blk, sm in zip(self.design.penalty_blocks, self.design.smooths):
            if sm.outcome == 1:
                which = pos1
                pos1 += 1
            else:
                which = self.design.n_penalized_outcome1 + pos2
                pos2 += 1
            idx[blk.z_start:blk.z_end] = which
        return idx

    def with_response(self, y_new) -> "_Workspace":
        """Cheap copy sharing the X/Z stacks but carrying a new response."""
        import copy
        y_new = np.asarray(y_new, float)
        ws = copy.copy(self)
        ws.design = self.design.with_response(y_new)
        ws.patterns = []
        for pat in self.patterns:
            u = pat.u_mat.reshape(2 * pat.n_visits, pat.n_subjects, pat.c).copy()
            u[:, :, -1] = y_new[pat.rows.T]
            ws.patterns.append(replace(
                pat, u_mat=np.ascontiguousarray(
                    u.reshape(2 * pat.n_visits, pat.n_subjects * pat.c))))
        return ws


def _error_corr(pattern: _Pattern, tau: VarianceComponents,
                car1: bool) -> np.ndarray:
    if not car1:
        return np.eye(pattern.n_visits)
    return np.power(tau.ar_corr, pattern.gaps)


def _pattern_block(pattern: _Pattern, tau: VarianceComponents,
                   car1: bool) -> np.ndarray:
    """R* block for one subject in this pattern: subject effect + error."""
    n = pattern.n_visits
    su = tau.sigma_u()
    corr = _error_corr(pattern, tau, car1)
    v1 = tau.sigma_eps_sq
    v2 = tau.sigma_eps_sq * tau.delta ** 2
    block = np.empty((2 * n, 2 * n))
    block[:n, :n] = su[0, 0] + v1 * corr
    block[n:, n:] = su[1, 1] + v2 * corr
    block[:n, n:] = su[0, 1]
    block[n:, :n] = su[0, 1]
    return block


@dataclass
class EvalResult:
    tau: VarianceComponents
    ml: float
    reml: float
    theta: np.ndarray
    eta_spline: np.ndarray
    quad: float
    logdet_v: float
    logdet_xvx: float
    a0: np.ndarray               # [X|Z]' R*^-1 [X|Z]
    s_diag: np.ndarray           # penalty diagonal aligned with a0
    m_chol: tuple | None
    factors: list                # per-pattern cholesky factors of R* blocks

    def criterion(self, which: str) -> float:
        return self.ml if which == "ML" else self.reml


def _evaluate(ws: _Workspace, tau: VarianceComponents) -> EvalResult:
    """Profile likelihood quantities at fixed variance components."""
    design = ws.design
    car1 = design.spec.error_structure == "car1_on_time"
    if car1 and tau.ar_corr is None:
        raise ValueError("ar_corr must be set for CAR(1) error structure")
    if len(tau.log_lambda) != design.n_penalized_outcome1 \
            or len(tau.log_varphi) != design.n_penalized_outcome2:
        raise ValueError("smoothing-parameter count does not match design")

    p, q = ws.p, ws.q
    size = p + q + 1
    gram = np.zeros((size, size))
    logdet_r = 0.0
    factors = []
    for pat in ws.patterns:
        block = _pattern_block(pat, tau, car1)
        try:
            chol = sla.cholesky(block, lower=True, check_finite=False)
        except sla.LinAlgError as exc:
            raise NonPositiveDefinite(
                f"subject covariance block is not positive definite: {exc}")
        factors.append(chol)
        logdet_r += 2.0 * pat.n_subjects * float(
            np.sum(np.log(np.diag(chol))))
        t_mat = sla.solve_triangular(chol, pat.u_mat, lower=True,
                                     check_finite=False)
        t3 = t_mat.reshape(2 * pat.n_visits, pat.n_subjects, pat.c)
        tall = np.ascontiguousarray(t3.transpose(1, 0, 2)).reshape(
            pat.n_subjects * 2 * pat.n_visits, pat.c)
        gram[np.ix_(pat.act_cols, pat.act_cols)] += tall.T @ tall

    a_xx = gram[:p, :p]
    a_xz = gram[:p, p:p + q]
    a_zz = gram[p:p + q, p:p + q]
    b_x = gram[:p, -1]
    b_z = gram[p:p + q, -1]
    s_yy = gram[-1, -1]

    lam_all = np.concatenate([np.exp(tau.log_lambda), np.exp(tau.log_varphi)])
    if q:
        lam_per_col = lam_all[ws.lam_index]
        logdet_d = -float(np.sum(np.log(lam_per_col)))
        m_mat = a_zz + np.diag(lam_per_col)
        try:
            m_chol = sla.cho_factor(m_mat, lower=True, check_finite=False)
        except sla.LinAlgError as exc:
            raise NonPositiveDefinite(f"spline system not PD: {exc}")
        logdet_m = 2.0 * float(np.sum(np.log(np.diag(m_chol[0]))))
        w_mat = sla.cho_solve(m_chol, a_xz.T, check_finite=False)
        s_x = a_xx - a_xz @ w_mat
        rhs = b_x - w_mat.T @ b_z
    else:
        lam_per_col = np.zeros(0)
        logdet_d = logdet_m = 0.0
        m_chol = None
        s_x = a_xx.copy()
        rhs = b_x.copy()

    s_x = 0.5 * (s_x + s_x.T)
    try:
        sx_chol = sla.cho_factor(s_x, lower=True, check_finite=False)
    except sla.LinAlgError as exc:
        raise NonPositiveDefinite(f"X'V^-1X not PD: {exc}")
    theta = sla.cho_solve(sx_chol, rhs, check_finite=False)
    logdet_xvx = 2.0 * float(np.sum(np.log(np.diag(sx_chol[0]))))

    if q:
        r_z = b_z - a_xz.T @ theta
        eta = sla.cho_solve(m_chol, r_z, check_finite=False)
        corr_term = float(r_z @ eta)
    else:
        r_z = np.zeros(0)
        eta = np.zeros(0)
        corr_term = 0.0
    quad = float(s_yy - 2.0 * theta @ b_x + theta @ (a_xx @ theta)) - corr_term

    logdet_v = logdet_r + logdet_d + logdet_m
    n_tot = ws.n_total
    ml = -0.5 * (n_tot * LOG_2PI + logdet_v + quad)
    reml = -0.5 * (logdet_v + logdet_xvx + quad)
    s_diag = np.concatenate([np.zeros(p), lam_per_col])
    return EvalResult(tau=tau, ml=ml, reml=reml, theta=theta, eta_spline=eta,
                      quad=quad, logdet_v=logdet_v, logdet_xvx=logdet_xvx,
                      a0=gram[:p + q, :p + q], s_diag=s_diag, m_chol=m_chol,
                      factors=factors)


def _subject_blups(ws: _Workspace, tau: VarianceComponents,
                   res: EvalResult) -> np.ndarray:
    """BLUPs of the paired subject effects, one (U1, U2) row per subject."""
    design = ws.design
    resid = design.y - design.x @ res.theta
    if ws.q:
        resid = resid - design.z_spline @ res.eta_spline
    sums = np.zeros((design.num_subjects, 2))
    for pat, chol in zip(ws.patterns, res.factors):
        n = pat.n_visits
        r_blk = resid[pat.rows.T]                       # (2n, s)
        v_blk = sla.cho_solve((chol, True), r_blk, check_finite=False)
        sums[pat.subj_idx, 0] = v_blk[:n].sum(axis=0)
        sums[pat.subj_idx, 1] = v_blk[n:].sum(axis=0)
    return sums @ tau.sigma_u().T


def _edf_per_smooth(ws: _Workspace, res: EvalResult) -> np.ndarray:
    design = ws.design
    p = ws.p
    if ws.q == 0:
        return np.array([float(len(sm.x_cols)) for sm in design.smooths])
    f_mat = np.linalg.solve(res.a0 + np.diag(res.s_diag), res.a0)
    diag = np.diag(f_mat)
    out = []
    for sm in design.smooths:
        pen = diag[p + sm.z_start:p + sm.z_end]
        out.append(float(len(sm.x_cols) + pen.sum()))
    return np.array(out)


# ---------------------------------------------------------------------------
# covariance operator
# ---------------------------------------------------------------------------

class MarginalCovariance:
    """Operator view of V supporting solve, log-determinant, quadratic forms.

    Built from per-pattern factors of R* and the spline Woodbury system.
    """

    def __init__(self, ws: _Workspace, tau: VarianceComponents):
        self._ws = ws
        self.tau = tau
        self._res = _evaluate(ws, tau)

    def _apply_rinv(self, b: np.ndarray) -> np.ndarray:
        mat = b.reshape(b.shape[0], -1)
        out = np.empty_like(mat, dtype=float)
        k = mat.shape[1]
        for pat, chol in zip(self._ws.patterns, self._res.factors):
            two_n = 2 * pat.n_visits
            sub = mat[pat.rows]                              # (s, 2n, k)
            stacked = sub.transpose(1, 0, 2).reshape(two_n, -1)
            sol = sla.cho_solve((chol, True), stacked, check_finite=False)
            out[pat.rows] = sol.reshape(two_n, pat.n_subjects, k) \
                .transpose(1, 0, 2)
        return out.reshape(b.shape)

    def solve(self, b) -> np.ndarray:
        """V^{ -1} b via R*^{-1} and the spline Woodbury correction."""
        b = np.asarray(b, dtype=float)
        w = self._apply_rinv(b)
        z = self._ws.design.z_spline
        if z is None or self._ws.q == 0:
            return w
        t = z.T @ w
        u = sla.cho_solve(self._res.m_chol, t, check_finite=False)
        return w - self._apply_rinv(z @ u)

    def logdet(self) -> float:
        return self._res.logdet_v

    def quad_form(self, b) -> float:
        b = np.asarray(b, dtype=float)
        return float(b @ self.solve(b))

    def to_dense(self) -> np.ndarray:
        """Materialize V for small problems (testing, diagnostics)."""
        design = self._ws.design
        n_tot = design.y.shape[0]
        v = np.zeros((n_tot, n_tot))
        car1 = design.spec.error_structure == "car1_on_time"
        for pat in self._ws.patterns:
            block = _pattern_block(pat, self.tau, car1)
            for j in range(pat.n_subjects):
                v[np.ix_(pat.rows[j], pat.rows[j])] += block
        if design.z_spline is not None and self._ws.q:
            lam_all = np.concatenate([np.exp(self.tau.log_lambda),
                                      np.exp(self.tau.log_varphi)])
            z = design.z_spline.toarray()
            v += (z / lam_all[self._ws.lam_index]) @ z.T
        return v


def marginal_covariance(design: AssembledDesign,
                        tau: VarianceComponents) -> MarginalCovariance:
    return MarginalCovariance(_Workspace(design), tau)


def gls_fixed_effects(design, v) -> np.ndarray:
    """Generalized least squares given any covariance operator with solve()."""
    x = np.asarray(design.x, dtype=float)
    y = np.asarray(design.y, dtype=float)
    vx = v.solve(x)
    xtvx = x.T @ vx
    xtvx = 0.5 * (xtvx + xtvx.T)
    try:
        return sla.solve(xtvx, vx.T @ y, assume_a="pos")
    except sla.LinAlgError as exc:
        raise RankDeficientX(str(exc))


def profile_gaussian_criteria(x, y, v) -> tuple[np.ndarray, float, float]:
    """(theta_gls, ml, reml) for arbitrary (X, y) and covariance operator."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    vx = v.solve(x)
    xtvx = 0.5 * ((x.T @ vx) + (x.T @ vx).T)
    theta = sla.solve(xtvx, vx.T @ y, assume_a="pos")
    r = y - x @ theta
    quad = float(r @ v.solve(r))
    logdet_v = v.logdet()
    _, logdet_xvx = np.linalg.slogdet(xtvx)
    n = y.shape[0]
    ml = -0.5 * (n * LOG_2PI + logdet_v + quad)
    reml = -0.5 * (logdet_v + logdet_xvx + quad)
    return theta, ml, reml


class DenseCovariance:
    """Explicit covariance matrix wrapped as an operator (for small cases)."""

    def __init__(self, v):
        self.v = np.asarray(v, dtype=float)
        try:
            self._chol = sla.cho_factor(self.v, lower=True)
        except sla.LinAlgError as exc:
            raise NonPositiveDefinite(str(exc))

    def solve(self, b):
        return sla.cho_solve(self._chol, np.asarray(b, dtype=float))

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._chol[0]))))

    def quad_form(self, b) -> float:
        b = np.asarray(b, dtype=float)
        return float(b @ self.solve(b))


def reml_criterion(design: AssembledDesign, tau: VarianceComponents) -> float:
    return _evaluate(_Workspace(design), tau).reml


def ml_criterion(design: AssembledDesign, tau: VarianceComponents) -> float:
    return _evaluate(_Workspace(design), tau).ml


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass
class FittedModel:
    spec: ModelSpec
    design: AssembledDesign
    criterion: str
    tau: VarianceComponents
    theta: np.ndarray
    theta_labels: tuple[str, ...]
    eta_spline: np.ndarray
    subject_effects: np.ndarray          # (m, 2)
    loglik: float                        # maximized criterion value
    ml_value: float
    reml_value: float
    edf: np.ndarray
    edf_labels: tuple[str, ...]
    fitted_mu: np.ndarray                # X theta + Z_spline eta, (2N,)
    residuals: np.ndarray                # y - fitted_mu - subject effect
    posterior_cov: np.ndarray            # (A0 + S)^-1 over [X | Z_spline]
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return bool(self.diagnostics.get("converged", False))

    def smooth_coefficients(self, smooth) -> np.ndarray:
        beta = self.theta[list(smooth.x_cols)]
        pen = self.eta_spline[smooth.z_start:smooth.z_end]
        return np.concatenate([beta, pen])

    def predict_context(self) -> dict:
        return {
            "p": self.design.x.shape[1],
            "num_groups": self.design.num_groups,
            "smooths": self.design.smooths,
            "intercept_cols": self.design.intercept_cols,
            "group_points": self.design.group_points,
        }


def _moment_start(design: AssembledDesign) -> VarianceComponents:
    """Data-driven start: method of moments on subject means and spreads."""
    n = design.n_obs
    m = design.num_subjects
    y1 = design.y[:n]
    y2 = design.y[n:]
    subj = design.row_subject[:n]
    counts = np.bincount(subj, minlength=m).astype(float)
    mean1 = np.bincount(subj, weights=y1, minlength=m) / counts
    mean2 = np.bincount(subj, weights=y2, minlength=m) / counts
    dev1 = y1 - mean1[subj]
    dev2 = y2 - mean2[subj]
    with np.errstate(invalid="ignore"):
        within1 = float(np.sum(dev1 ** 2) / max(n - m, 1))
        within2 = float(np.sum(dev2 ** 2) / max(n - m, 1))
    within1 = max(within1, 1e-4 * max(np.var(y1), 1e-8), 1e-10)
    within2 = max(within2, 1e-4 * max(np.var(y2), 1e-8), 1e-10)
    nbar = counts.mean()
    floor1 = 0.05 * max(np.var(y1), 1e-8)
    floor2 = 0.05 * max(np.var(y2), 1e-8)
    s1 = max(float(np.var(mean1, ddof=1)) - within1 / nbar if m > 1 else floor1,
             floor1)
    s2 = max(float(np.var(mean2, ddof=1)) - within2 / nbar if m > 1 else floor2,
             floor2)
    if m > 2:
        c = np.corrcoef(mean1, mean2)[0, 1]
        rho = float(np.clip(c if np.isfinite(c) else 0.0, -0.8, 0.8))
    else:
        rho = 0.0
    sig_eps = within1
    delta = math.sqrt(max(within2 / within1, 1e-4))
    has_ar = design.spec.error_structure == "car1_on_time"

    # smoothing parameters giving roughly half the basis dimension as EDF
    lams1, lams2 = [], []
    for sm in design.smooths:
        if sm.z_end == sm.z_start:
            continue
        z_g = design.z_spline[:, sm.z_start:sm.z_end].toarray()
        scale = sig_eps if sm.outcome == 1 else sig_eps * delta ** 2
        eigs = np.linalg.eigvalsh(z_g.T @ z_g) / scale
        eigs = np.clip(eigs, 0.0, None)
        target = 0.5 * (sm.z_end - sm.z_start)

        def edf_of(lam):
            return float(np.sum(eigs / (eigs + lam)))

        lo, hi = 1e-9, 1e9
        for _ in range(80):
            mid = math.sqrt(lo * hi)
            if edf_of(mid) > target:
                lo = mid
            else:
                hi = mid
        (lams1 if sm.outcome == 1 else lams2).append(math.log(mid))
    return VarianceComponents(
        log_lambda=np.array(lams1), log_varphi=np.array(lams2),
        sigma1_sq=s1, sigma2_sq=s2, rho=rho, sigma_eps_sq=sig_eps,
        delta=delta, ar_corr=0.1 if has_ar else None)


def _profiled_criteria(res: EvalResult, n_tot: int, p: int):
    """Criteria with the overall error scale concentrated out.

    With every covariance component proportional to sigma_eps^2, evaluating
    at unit scale gives the profiled maximizer s = quad/n (ML) or
    quad/(n - p) (REML) in closed form.
    """
    if res.quad <= 0 or not np.isfinite(res.quad):
        return -np.inf, -np.inf, np.nan, np.nan
    s_ml = res.quad / n_tot
    ml = -0.5 * (n_tot * LOG_2PI + n_tot * math.log(s_ml)
                 + res.logdet_v + n_tot)
    df = n_tot - p
    s_reml = res.quad / df
    reml = -0.5 * (df * math.log(s_reml) + res.logdet_v
                   + res.logdet_xvx + df)
    return ml, reml, s_ml, s_reml


def _rescale_from_unit(tau_unit: VarianceComponents,
                       scale: float) -> VarianceComponents:
    """Natural components from the unit-error-scale ratios."""
    return replace(
        tau_unit,
        sigma1_sq=tau_unit.sigma1_sq * scale,
        sigma2_sq=tau_unit.sigma2_sq * scale,
        sigma_eps_sq=scale,
        log_lambda=tau_unit.log_lambda - math.log(scale),
        log_varphi=tau_unit.log_varphi - math.log(scale),
    )


def _to_unit_scale(tau: VarianceComponents) -> VarianceComponents:
    s = tau.sigma_eps_sq
    return replace(
        tau,
        sigma1_sq=tau.sigma1_sq / s,
        sigma2_sq=tau.sigma2_sq / s,
        sigma_eps_sq=1.0,
        log_lambda=tau.log_lambda + math.log(s),
        log_varphi=tau.log_varphi + math.log(s),
    )


_PROFILE_SAFE_FIXED = {"rho", "ar_corr", "delta"}


def _fd_gradient(func, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (func(x + e) - func(x - e)) / (2 * h)
    return g


def _fd_hessian(func, x, h=1e-4):
    k = len(x)
    hess = np.zeros((k, k))
    for i in range(k):
        for j in range(i, k):
            ei = np.zeros(k); ei[i] = h
            ej = np.zeros(k); ej[j] = h
            val = (func(x + ei + ej) - func(x + ei - ej)
                   - func(x - ei + ej) + func(x - ei - ej)) / (4 * h * h)
            hess[i, j] = hess[j, i] = val
    return hess


def _newton_polish(func, x, pmap: ParameterMap, max_iter=4, gtol=1e-6):
    """A few safeguarded Newton steps on finite differences to tighten the
    optimum; returns (x, grad_norm)."""
    fx = func(x)
    for _ in range(max_iter):
        grad = _fd_gradient(func, x)
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < gtol:
            return x, gnorm
        hess = _fd_hessian(func, x)
        ridge = 1e-8
        step = None
        for _ in range(8):
            try:
                chol = sla.cho_factor(hess + ridge * np.eye(len(x)))
                step = sla.cho_solve(chol, grad)
                break
            except sla.LinAlgError:
                ridge = max(ridge * 100, 1e-6)
        if step is None:
            break
        improved = False
        scale = 1.0
        for _ in range(12):
            x_new = pmap.clip(x - scale * step)
            f_new = func(x_new)
            if f_new < fx - 1e-14:
                x, fx = x_new, f_new
                improved = True
                break
            scale *= 0.5
        if not improved:
            break
    return x, float(np.max(np.abs(_fd_gradient(func, x))))


def fit_assembled(design: AssembledDesign, *, criterion: str | None = None,
                  fixed: dict | None = None,
                  start: VarianceComponents | None = None,
                  n_starts: int = 2, polish: bool = True,
                  max_iter: int = 500,
                  opt_options: dict | None = None) -> FittedModel:
    """Maximize the chosen criterion over variance components.

    Deterministic given inputs: quasi-Newton (finite-difference gradients)
    from data-driven starting points, Nelder-Mead fallback on line-search
    failure, optional Newton polish.
    """
    criterion = criterion or design.spec.criterion
    if criterion not in ("ML", "REML"):
        raise ValueError(f"criterion must be ML or REML, got {criterion!r}")
    with single_thread_blas():
        return _fit_workspace(_Workspace(design), criterion=criterion,
                              fixed=fixed, start=start, n_starts=n_starts,
                              polish=polish, max_iter=max_iter,
                              opt_options=opt_options)


def _fit_workspace(ws: _Workspace, *, criterion: str, fixed=None, start=None,
                   n_starts: int = 2, polish: bool = True,
                   max_iter: int = 500,
                   opt_options: dict | None = None) -> FittedModel:
    design = ws.design
    profiled = set(fixed or {}) <= _PROFILE_SAFE_FIXED
    eff_fixed = dict(fixed or {})
    if profiled:
        # optimize variance ratios at unit error scale; the scale itself has
        # a closed-form maximizer and is recovered afterwards
        eff_fixed["sigma_eps_sq"] = 1.0
    pmap = ParameterMap(design.n_penalized_outcome1,
                        design.n_penalized_outcome2,
                        design.spec.error_structure == "car1_on_time",
                        eff_fixed)
    n_tot, p = ws.n_total, ws.p

    n_eval = [0]

    def objective(x_free):
        n_eval[0] += 1
        try:
            tau = pmap.unpack(x_free)
            res = _evaluate(ws, tau)
            if profiled:
                ml, reml, _, _ = _profiled_criteria(res, n_tot, p)
                value = ml if criterion == "ML" else reml
            else:
                value = res.criterion(criterion)
            return -value if np.isfinite(value) else 1e10
        except (NonPositiveDefinite, ValueError, FloatingPointError):
            return 1e10

    base = start if start is not None else _moment_start(design)
    if profiled:
        base = _to_unit_scale(base)
    starts = [pmap.clip(pmap.pack(base))]
    if start is None and n_starts > 1 and (pmap.n1 + pmap.n2):
        smoother = replace(base,
                           log_lambda=base.log_lambda + 3.0,
                           log_varphi=base.log_varphi + 3.0,
                           rho=0.0 if "rho" not in (fixed or {}) else base.rho)
        starts.append(pmap.clip(pmap.pack(smoother)))
    elif start is None and n_starts > 1:
        starts.append(pmap.clip(pmap.pack(replace(base, rho=0.0))))
    starts = starts[:max(1, n_starts)]

    best_x, best_f, n_iter, any_success = None, np.inf, 0, False
    if len(starts[0]) == 0:
        best_x, best_f, any_success = starts[0], objective(starts[0]), True
        starts = []
    for x0 in starts:
        lbfgs_opts = {"maxiter": max_iter, "ftol": 1e-10,
                      "gtol": 1e-7, "maxcor": 20}
        lbfgs_opts.update(opt_options or {})
        res = minimize(objective, x0, method="L-BFGS-B",
                       bounds=pmap.free_bounds, options=lbfgs_opts)
        x_cand, f_cand, ok = res.x, res.fun, bool(res.success)
        if not ok or not np.isfinite(f_cand):
            nm = minimize(objective, x_cand if np.isfinite(f_cand) else x0,
                          method="Nelder-Mead",
                          options={"maxiter": 200 * len(x0),
                                   "xatol": 1e-7, "fatol": 1e-10})
            if nm.fun < f_cand or not np.isfinite(f_cand):
                x_cand, f_cand = nm.x, nm.fun
            ok = ok or bool(nm.success)
        n_iter += int(res.nit)
        any_success = any_success or ok
        if f_cand < best_f:
            best_x, best_f = np.asarray(x_cand, float), float(f_cand)

    if best_x is None or not np.isfinite(best_f) or best_f >= 1e10:
        raise NoConvergence("no admissible variance components found",
                            best_point=best_x)

    grad_norm = np.nan
    if polish and len(best_x):
        best_x, grad_norm = _newton_polish(objective, best_x, pmap)
        best_f = objective(best_x)

    tau_hat = pmap.unpack(best_x)
    if profiled:
        res_unit = _evaluate(ws, tau_hat)
        _, _, s_ml, s_reml = _profiled_criteria(res_unit, n_tot, p)
        tau_hat = _rescale_from_unit(tau_hat,
                                     s_ml if criterion == "ML" else s_reml)
    res_fin = _evaluate(ws, tau_hat)
    subject_effects = _subject_blups(ws, tau_hat, res_fin)
    edf = _edf_per_smooth(ws, res_fin)
    fitted_mu = design.x @ res_fin.theta
    if ws.q:
        fitted_mu = fitted_mu + design.z_spline @ res_fin.eta_spline
    u_rows = subject_effects[design.row_subject,
                             (design.row_outcome - 1)]
    residuals = design.y - fitted_mu - u_rows

    posterior = np.linalg.inv(res_fin.a0 + np.diag(res_fin.s_diag))

    lo = np.array([b[0] for b in pmap.free_bounds])
    hi = np.array([b[1] for b in pmap.free_bounds])
    bound_hits = [pmap.free_names[i] for i in range(len(best_x))
                  if best_x[i] <= lo[i] + 1e-9 or best_x[i] >= hi[i] - 1e-9]

    return FittedModel(
        spec=design.spec,
        design=design,
        criterion=criterion,
        tau=tau_hat,
        theta=res_fin.theta,
        theta_labels=design.x_labels,
        eta_spline=res_fin.eta_spline,
        subject_effects=subject_effects,
        loglik=-best_f,
        ml_value=res_fin.ml,
        reml_value=res_fin.reml,
        edf=edf,
        edf_labels=tuple(sm.label for sm in design.smooths),
        fitted_mu=fitted_mu,
        residuals=residuals,
        posterior_cov=posterior,
        diagnostics={
            "converged": bool(any_success),
            "grad_norm": None if np.isnan(grad_norm) else grad_norm,
            "iterations": n_iter,
            "evaluations": n_eval[0],
            "bound_hits": bound_hits,
            "free_parameters": pmap.free_names,
            "transformed_optimum": best_x.tolist(),
        },
    )


def fit(ds, spec: ModelSpec, **kwargs) -> FittedModel:
    """Assemble and fit in one call."""
    return fit_assembled(assemble(ds, spec), **kwargs)


def effective_df(fm: FittedModel) -> np.ndarray:
    """Per-smooth effective degrees of freedom of the fitted model."""
    return fm.edf.copy()


def observed_information(fm: FittedModel) -> tuple[list[str], np.ndarray]:
    """Negative Hessian of the criterion on the transformed scale at tau-hat."""
    ws = _Workspace(fm.design)
    fixed = {}
    pmap = ParameterMap(fm.design.n_penalized_outcome1,
                        fm.design.n_penalized_outcome2,
                        fm.design.spec.error_structure == "car1_on_time",
                        fixed)

    def neg(x_free):
        try:
            return -_evaluate(ws, pmap.unpack(x_free)).criterion(fm.criterion)
        except NonPositiveDefinite:
            return 1e10

    x_hat = pmap.pack(fm.tau)
    return pmap.free_names, _fd_hessian(neg, x_hat)


def tau_confidence_intervals(fm: FittedModel, level: float = 0.95):
    """Wald intervals for variance components from the observed information,
    computed on the transformed scale and mapped back."""
    from scipy.stats import norm

    names, info = observed_information(fm)
    cov = np.linalg.pinv(0.5 * (info + info.T))
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    pmap = ParameterMap(fm.design.n_penalized_outcome1,
                        fm.design.n_penalized_outcome2,
                        fm.design.spec.error_structure == "car1_on_time", {})
    x_hat = pmap.pack(fm.tau)
    zq = norm.ppf(0.5 + level / 2.0)
    rows = []
    for i, name in enumerate(names):
        est = pmap._untransform_one(i, x_hat[i])
        lo = pmap._untransform_one(i, x_hat[i] - zq * se[i])
        hi = pmap._untransform_one(i, x_hat[i] + zq * se[i])
        rows.append({"name": name, "estimate": est, "lower": lo, "upper": hi,
                     "se_transformed": float(se[i])})
    return rows


def theta_standard_errors(fm: FittedModel) -> np.ndarray:
    """Standard errors of the fixed effects from (X' V^-1 X)^-1."""
    ws = _Workspace(fm.design)
    res = _evaluate(ws, fm.tau)
    p = ws.p
    if ws.q:
        a_xx = res.a0[:p, :p]
        a_xz = res.a0[:p, p:]
        w_mat = sla.cho_solve(res.m_chol, a_xz.T, check_finite=False)
        s_x = a_xx - a_xz @ w_mat
    else:
        s_x = res.a0[:p, :p]
    cov = np.linalg.inv(0.5 * (s_x + s_x.T))
    return np.sqrt(np.clip(np.diag(cov), 0.0, None))


# ---------------------------------------------------------------------------
# surface prediction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SurfacePrediction:
    grid: np.ndarray
    fit: np.ndarray
    se: np.ndarray
    extrapolated: np.ndarray


def _inside_hull(points: np.ndarray, grid: np.ndarray) -> np.ndarray:
    from scipy.spatial import Delaunay, QhullError
    try:
        tri = Delaunay(points)
        return tri.find_simplex(grid) >= 0
    except (QhullError, ValueError):
        return np.zeros(len(grid), dtype=bool)


def predict_surface(model, group: int, outcome: int, grid) -> SurfacePrediction:
    """Surface value and pointwise SE on arbitrary (w, h) grid points.

    Standard errors come from the posterior covariance of the smooth's
    coefficients; grid points outside the convex hull of the group's
    observed covariates are flagged as extrapolated (still computed).
    Accepts a FittedModel or a SavedModel loaded from disk.
    """
    ctx = model.predict_context()
    if outcome not in (1, 2):
        raise UnknownOutcome(f"outcome must be 1 or 2, got {outcome}")
    if not 1 <= group <= ctx["num_groups"]:
        raise UnknownGroup(f"group {group} outside 1..{ctx['num_groups']}")
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    target = None
    for sm in ctx["smooths"]:
        if sm.outcome == outcome and sm.group in (None, group):
            target = sm
            break
    from . import tps as _tps
    basis_rows = _tps.eval_basis(target.basis, grid)

    p = ctx["p"]
    cols = list(target.x_cols) + list(range(p + target.z_start,
                                            p + target.z_end))
    c_rows = basis_rows
    if target.group is None:
        # shared surface: include the group's intercept so the predicted
        # level is comparable with group-specific surfaces
        icols = ctx["intercept_cols"][outcome - 1]
        if icols:
            icol = icols[group - 1] if len(icols) > 1 else icols[0]
            cols = [icol] + cols
            c_rows = np.column_stack([np.ones(len(grid)), basis_rows])

    coefs = np.concatenate([
        model.theta[[c for c in cols if c < p]],
        model.eta_spline[target.z_start:target.z_end]])
    fit_vals = c_rows @ coefs
    vb = model.posterior_cov[np.ix_(cols, cols)]
    se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", c_rows, vb, c_rows),
                         0.0, None))
    inside = _inside_hull(ctx["group_points"](group), grid)
    return SurfacePrediction(grid=grid, fit=fit_vals, se=se,
                             extrapolated=~inside)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

MODEL_FORMAT = "pairsmooth.fitted_model/1"


def model_to_dict(fm: FittedModel) -> dict:
    """Self-describing serializable form: spec, estimates, bases, and the
    per-group hull vertices needed for extrapolation flags."""
    from scipy.spatial import ConvexHull, QhullError

    hulls = {}
    for g in range(1, fm.design.num_groups + 1):
        pts = fm.design.group_points(g)
        try:
            hull = ConvexHull(pts)
            hulls[str(g)] = pts[hull.vertices].tolist()
        except (QhullError, ValueError):
            hulls[str(g)] = pts.tolist()
    return {
        "format": MODEL_FORMAT,
        "spec": fm.spec.to_dict(),
        "criterion": fm.criterion,
        "tau": fm.tau.to_dict(),
        "theta": fm.theta.tolist(),
        "theta_labels": list(fm.theta_labels),
        "eta_spline": fm.eta_spline.tolist(),
        "subject_effects": fm.subject_effects.tolist(),
        "loglik": fm.loglik,
        "ml_value": fm.ml_value,
        "reml_value": fm.reml_value,
        "edf": fm.edf.tolist(),
        "edf_labels": list(fm.edf_labels),
        "posterior_cov": fm.posterior_cov.tolist(),
        "p": int(fm.design.x.shape[1]),
        "num_groups": fm.design.num_groups,
        "num_subjects": fm.design.num_subjects,
        "n_obs": fm.design.n_obs,
        "intercept_cols": [list(c) for c in fm.design.intercept_cols],
        "smooths": [{
            "outcome": sm.outcome,
            "group": sm.group,
            "label": sm.label,
            "x_cols": list(sm.x_cols),
            "z_start": sm.z_start,
            "z_end": sm.z_end,
            "basis": sm.basis.to_dict(),
        } for sm in fm.design.smooths],
        "group_hulls": hulls,
        "diagnostics": fm.diagnostics,
    }


@dataclass
class SavedModel:
    """A fitted model reloaded from disk: enough for surface prediction and
    reporting, without the original data."""

    spec: ModelSpec
    criterion: str
    tau: VarianceComponents
    theta: np.ndarray
    theta_labels: tuple[str, ...]
    eta_spline: np.ndarray
    subject_effects: np.ndarray
    loglik: float
    ml_value: float
    reml_value: float
    edf: np.ndarray
    edf_labels: tuple[str, ...]
    posterior_cov: np.ndarray
    p: int
    num_groups: int
    smooths: tuple
    intercept_cols: tuple
    group_hulls: dict
    diagnostics: dict

    def predict_context(self) -> dict:
        return {
            "p": self.p,
            "num_groups": self.num_groups,
            "smooths": self.smooths,
            "intercept_cols": self.intercept_cols,
            "group_points": lambda g: np.asarray(self.group_hulls[str(g)]),
        }


def model_from_dict(d: dict) -> SavedModel:
    from . import tps as _tps
    from .design import SmoothInfo

    if d.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format {d.get('format')!r}")
    smooths = tuple(SmoothInfo(
        outcome=int(s["outcome"]),
        group=None if s["group"] is None else int(s["group"]),
        label=s["label"],
        x_cols=tuple(s["x_cols"]),
        z_start=int(s["z_start"]),
        z_end=int(s["z_end"]),
        basis=_tps.SurfaceBasis.from_dict(s["basis"]),
    ) for s in d["smooths"])
    return SavedModel(
        spec=ModelSpec.from_dict(d["spec"]),
        criterion=d["criterion"],
        tau=VarianceComponents.from_dict(d["tau"]),
        theta=np.asarray(d["theta"], float),
        theta_labels=tuple(d["theta_labels"]),
        eta_spline=np.asarray(d["eta_spline"], float),
        subject_effects=np.asarray(d["subject_effects"], float),
        loglik=float(d["loglik"]),
        ml_value=float(d["ml_value"]),
        reml_value=float(d["reml_value"]),
        edf=np.asarray(d["edf"], float),
        edf_labels=tuple(d["edf_labels"]),
        posterior_cov=np.asarray(d["posterior_cov"], float),
        p=int(d["p"]),
        num_groups=int(d["num_groups"]),
        smooths=smooths,
        intercept_cols=tuple(tuple(c) for c in d["intercept_cols"]),
        group_hulls=d["group_hulls"],
        diagnostics=d.get("diagnostics", {}),
    )


def save_model(fm: FittedModel, path) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(fm), fh)


def load_model(path) -> SavedModel:
    import json

    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
