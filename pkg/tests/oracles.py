"""Independent brute-force oracles used to verify pairsmooth numerics.

Everything here is deliberately written from first principles (explicit
dense matrices, analytic kernel derivatives, textbook formulas) rather than
reusing the library's fast paths, so that agreement between the two is a
meaningful check.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla

SIXTEEN_PI = 16.0 * np.pi


# ---------------------------------------------------------------------------
# Roughness functional by numerical quadrature of analytic second derivatives
# ---------------------------------------------------------------------------

def _kernel_second_derivs(u, v):
    """Analytic (eta_uu, eta_uv, eta_vv) for eta = q log(q) / (16 pi)."""
    q = u * u + v * v
    with np.errstate(divide="ignore", invalid="ignore"):
        logq = np.log(q)
        fuu = (2.0 * logq + 2.0 + 4.0 * u * u / q) / SIXTEEN_PI
        fvv = (2.0 * logq + 2.0 + 4.0 * v * v / q) / SIXTEEN_PI
        fuv = (4.0 * u * v / q) / SIXTEEN_PI
    bad = q == 0
    for arr in (fuu, fvv, fuv):
        arr[bad] = 0.0
    return fuu, fuv, fvv


def _surface_second_derivs(grid_u, grid_v, knots, delta):
    uu = np.zeros_like(grid_u)
    uv = np.zeros_like(grid_u)
    vv = np.zeros_like(grid_u)
    for (ku, kv), d in zip(knots, delta):
        a, b, c = _kernel_second_derivs(grid_u - ku, grid_v - kv)
        uu += d * a
        uv += d * b
        vv += d * c
    return uu, uv, vv


def _simpson_2d(f_vals, hx, hy):
    from scipy.integrate import simpson
    return simpson(simpson(f_vals, dx=hy, axis=1), dx=hx)


def _integrate_panel(knots, delta, x_lo, x_hi, y_lo, y_hi, nx, ny):
    xs = np.linspace(x_lo, x_hi, nx + 1)
    ys = np.linspace(y_lo, y_hi, ny + 1)
    gu, gv = np.meshgrid(xs, ys, indexing="ij")
    uu, uv, vv = _surface_second_derivs(gu, gv, knots, delta)
    integrand = uu * uu + 2.0 * uv * uv + vv * vv
    return _simpson_2d(integrand, xs[1] - xs[0], ys[1] - ys[0])


def quadrature_roughness(knots, delta, inner_half=8.0, outer_half=80.0,
                         n_inner=2000, n_outer=400):
    """Integral of f_uu^2 + 2 f_uv^2 + f_vv^2 over a large covering square.

    The polynomial part of the spline has zero second derivatives, so only
    the radial coefficients ``delta`` enter.  The inner square containing the
    knots (where the kernel's log^2 singularities live) is integrated on a
    fine grid; the remainder of the covering square is tiled with four
    singularity-free panels on coarser grids.
    """
    eps = 1.2345e-4  # avoid evaluating exactly on a knot
    a, big = inner_half, outer_half
    total = _integrate_panel(knots, delta, -a + eps, a + eps,
                             -a + eps, a + eps, n_inner, n_inner)
    strip = max(60, n_outer // 4)
    panels = [
        (-big, -a + eps, -big, big, strip, n_outer),   # left
        (a + eps, big, -big, big, strip, n_outer),     # right
        (-a + eps, a + eps, a + eps, big, n_outer, strip),   # top
        (-a + eps, a + eps, -big, -a + eps, n_outer, strip), # bottom
    ]
    for x_lo, x_hi, y_lo, y_hi, nx, ny in panels:
        total += _integrate_panel(knots, delta, x_lo, x_hi, y_lo, y_hi, nx, ny)
    return total


# ---------------------------------------------------------------------------
# Dense construction of the marginal covariance and likelihood quantities
# ---------------------------------------------------------------------------

def dense_marginal_covariance(design, tau):
    """Build V = Z Sigma_eta Z^T + R entry by entry from the model blocks."""
    m = design.num_subjects
    n_total = design.y.shape[0]
    n_half = n_total // 2

    s1 = tau.sigma1_sq
    s2 = tau.sigma2_sq
    cov12 = tau.rho * np.sqrt(s1 * s2)

    v = np.zeros((n_total, n_total))
    subj = design.row_subject
    # shared subject effects: Sigma_u entries wherever rows share a subject
    for a in range(n_total):
        for b in range(n_total):
            if subj[a] != subj[b]:
                continue
            oa = 0 if a < n_half else 1
            ob = 0 if b < n_half else 1
            if oa == 0 and ob == 0:
                v[a, b] += s1
            elif oa == 1 and ob == 1:
                v[a, b] += s2
            else:
                v[a, b] += cov12

    # spline random effects, block by block with variance 1/lambda
    z = design.z_spline.toarray() if design.z_spline is not None else None
    if z is not None:
        lams = np.concatenate([np.exp(tau.log_lambda), np.exp(tau.log_varphi)])
        for blk, lam in zip(design.penalty_blocks, lams):
            zb = z[:, blk.z_start:blk.z_end]
            v += zb @ zb.T / lam

    # errors
    sig_eps = tau.sigma_eps_sq
    scales = np.where(np.arange(n_total) < n_half, 1.0, tau.delta ** 2)
    times = design.row_time
    if tau.ar_corr is None:
        v[np.diag_indices_from(v)] += sig_eps * scales
    else:
        phi = tau.ar_corr
        for a in range(n_total):
            for b in range(n_total):
                same_outcome = (a < n_half) == (b < n_half)
                if subj[a] == subj[b] and same_outcome:
                    corr = 1.0 if a == b else phi ** abs(times[a] - times[b])
                    v[a, b] += sig_eps * scales[a] * corr
    return v


def dense_sigma_eta(design, tau):
    """Covariance of the stacked random effects (subjects then splines)."""
    m = design.num_subjects
    s1, s2 = tau.sigma1_sq, tau.sigma2_sq
    cov12 = tau.rho * np.sqrt(s1 * s2)
    q_spl = design.z_spline.shape[1] if design.z_spline is not None else 0
    q = 2 * m + q_spl
    sig = np.zeros((q, q))
    for i in range(m):
        sig[i, i] = s1
        sig[m + i, m + i] = s2
        sig[i, m + i] = sig[m + i, i] = cov12
    if q_spl:
        lams = np.concatenate([np.exp(tau.log_lambda), np.exp(tau.log_varphi)])
        for blk, lam in zip(design.penalty_blocks, lams):
            for j in range(2 * m + blk.z_start, 2 * m + blk.z_end):
                sig[j, j] = 1.0 / lam
    return sig


def dense_full_z(design):
    import scipy.sparse as sp
    mats = [design.z_subject]
    if design.z_spline is not None:
        mats.append(design.z_spline)
    return sp.hstack(mats).toarray()


def dense_gls(x, v, y):
    vinv = np.linalg.inv(v)
    xtvx = x.T @ vinv @ x
    return np.linalg.solve(xtvx, x.T @ vinv @ y)


def dense_reml(x, v, y):
    vinv = np.linalg.inv(v)
    theta = dense_gls(x, v, y)
    r = y - x @ theta
    _, logdet_v = np.linalg.slogdet(v)
    _, logdet_x = np.linalg.slogdet(x.T @ vinv @ x)
    return -0.5 * (logdet_v + logdet_x + r @ vinv @ r)


def dense_ml(x, v, y):
    vinv = np.linalg.inv(v)
    theta = dense_gls(x, v, y)
    r = y - x @ theta
    _, logdet_v = np.linalg.slogdet(v)
    n = y.shape[0]
    return -0.5 * (n * np.log(2.0 * np.pi) + logdet_v + r @ vinv @ r)


def dense_blups(design, tau, y=None):
    x = design.x
    y = design.y if y is None else y
    v = dense_marginal_covariance(design, tau)
    sig = dense_sigma_eta(design, tau)
    z = dense_full_z(design)
    theta = dense_gls(x, v, y)
    return sig @ z.T @ np.linalg.solve(v, y - x @ theta)


def dense_edf(design, tau):
    """Per-smooth EDF via the explicit influence-trace formula.

    F = (Xc^T V0^-1 Xc + S)^-1 Xc^T V0^-1 Xc with V0 the subject+error
    covariance; each null-space column contributes exactly one degree.
    """
    m = design.num_subjects
    n_total = design.y.shape[0]
    # V0: marginal covariance without the spline random effects
    tau0 = tau.with_no_smooths()
    v0 = dense_marginal_covariance(design.without_splines(), tau0)
    xc = np.hstack([design.x, design.z_spline.toarray()])
    a0 = xc.T @ np.linalg.solve(v0, xc)
    p = design.x.shape[1]
    s_diag = np.zeros(xc.shape[1])
    lams = np.concatenate([np.exp(tau.log_lambda), np.exp(tau.log_varphi)])
    for blk, lam in zip(design.penalty_blocks, lams):
        s_diag[p + blk.z_start:p + blk.z_end] = lam
    f = np.linalg.solve(a0 + np.diag(s_diag), a0)
    edf = []
    for sm in design.smooths:
        pen = np.arange(p + sm.z_start, p + sm.z_end)
        edf.append(len(sm.x_cols) + float(np.trace(f[np.ix_(pen, pen)])))
    return np.array(edf)


def dense_penalized_ls_fitted(design, tau, y=None):
    """Fitted mean values at fixed variance components: the joint BLUP/GLS
    solution computed by one dense augmented least-squares solve."""
    y = design.y if y is None else y
    v = dense_marginal_covariance(design, tau)
    sig = dense_sigma_eta(design, tau)
    z = dense_full_z(design)
    x = design.x
    theta = dense_gls(x, v, y)
    eta = sig @ z.T @ np.linalg.solve(v, y - x @ theta)
    return x @ theta + z @ eta


# ---------------------------------------------------------------------------
# Standalone single-outcome penalized spline mixed model (dense, small data)
# ---------------------------------------------------------------------------

def fit_single_outcome_dense(y, x, z_spl, subj_idx, m, criterion="ML",
                             start=None):
    """Fit y = X theta + subject intercepts + penalized spline + noise.

    Dense textbook implementation: V is formed explicitly and the criterion
    is optimized over (log subj var, log lambda, log error var) with a
    quasi-Newton run plus a Newton polish on finite-difference derivatives.
    Returns (fitted_mean_values, params).
    """
    from scipy.optimize import minimize

    n = y.shape[0]
    zu = np.zeros((n, m))
    zu[np.arange(n), subj_idx] = 1.0

    def build_v(p):
        a, lam, v_eps = np.exp(p)
        return a * (zu @ zu.T) + (z_spl @ z_spl.T) / lam + v_eps * np.eye(n)

    def negcrit(p):
        v = build_v(p)
        try:
            if criterion == "ML":
                return -dense_ml(x, v, y)
            return -dense_reml(x, v, y)
        except np.linalg.LinAlgError:
            return 1e10

    p0 = np.log([np.var(y) / 2, 1.0, np.var(y) / 2]) if start is None else start
    res = minimize(negcrit, p0, method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
    p = res.x
    # Newton polish on central finite differences
    for _ in range(6):
        g = _fd_grad(negcrit, p)
        if np.max(np.abs(g)) < 1e-9:
            break
        h = _fd_hess(negcrit, p)
        try:
            step = np.linalg.solve(h + 1e-8 * np.eye(len(p)), g)
        except np.linalg.LinAlgError:
            break
        if negcrit(p - step) < negcrit(p):
            p = p - step
        else:
            break
    v = build_v(p)
    theta = dense_gls(x, v, y)
    r = y - x @ theta
    a, lam, v_eps = np.exp(p)
    sig_z = np.hstack([zu * a, z_spl / lam])
    zfull = np.hstack([zu, z_spl])
    eta = sig_z.T @ np.linalg.solve(v, r)
    fitted = x @ theta + zfull @ eta
    return fitted, p


def _fd_grad(f, p, h=1e-5):
    g = np.zeros_like(p)
    for i in range(len(p)):
        e = np.zeros_like(p)
        e[i] = h
        g[i] = (f(p + e) - f(p - e)) / (2 * h)
    return g


def _fd_hess(f, p, h=1e-4):
    k = len(p)
    hess = np.zeros((k, k))
    f0 = f(p)
    for i in range(k):
        for j in range(i, k):
            ei = np.zeros(k); ei[i] = h
            ej = np.zeros(k); ej[j] = h
            fpp = f(p + ei + ej)
            fpm = f(p + ei - ej)
            fmp = f(p - ei + ej)
            fmm = f(p - ei - ej)
            hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4 * h * h)
    return hess
