"""Bivariate thin plate spline bases with full-rank roughness penalties.

A surface over (w, h) is represented as

    f(w, h) = a0 + a1*w' + a2*h' + sum_k delta_k * eta(||(w', h') - knot_k||)

where (w', h') are the covariates after a per-axis shift/scale normalization,
eta is the biharmonic kernel for two dimensions, and the radial coefficients
satisfy the moment conditions that make the roughness integral finite.  The
constrained radial coefficients are reparameterized so that the roughness
quadratic form becomes the identity: the penalized block then drops into a
mixed model as independent random effects with variance 1/lambda.

The roughness functional is J(f) = Int (f_ww^2 + 2 f_wh^2 + f_hh^2) dw dh,
taken over the plane in the normalized coordinate frame.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateGeometry, SingularPenalty, TooFewPoints

NULL_DIM = 3  # span{1, w, h}: zero roughness for a second-order bivariate TPS

_EIGHT_PI = 8.0 * np.pi


def tps_radial(r):
    """Biharmonic kernel eta(r) = r^2 log(r) / (8 pi), with eta(0) = 0.

    Accepts scalars or arrays; raises ValueError on negative input.
    """
    arr = np.asarray(r, dtype=float)
    if np.any(arr < 0):
        raise ValueError("tps_radial requires r >= 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(arr > 0, arr * arr * np.log(np.where(arr > 0, arr, 1.0)), 0.0)
    out = out / _EIGHT_PI
    if np.isscalar(r):
        return float(out)
    return out


@dataclass(frozen=True)
class SurfaceBasis:
    """Thin plate spline basis after constraint absorption.

    ``knots`` are stored in normalized coordinates, in the deterministic
    space-filling selection order (prefixes of the sequence are themselves
    valid knot sets).  ``transform`` maps the penalized coefficients back to
    raw radial coefficients delta.  ``center_offsets`` is set on centered
    bases and holds the column means subtracted from every retained column.
    """

    knots: np.ndarray                 # (K, 2) normalized
    basis_dim: int
    null_dim: int
    penalty: np.ndarray               # (basis_dim - null_dim) square, SPD
    transform: np.ndarray             # (K, basis_dim - null_dim)
    covariate_shift_scale: tuple[tuple[float, float], tuple[float, float]]
    center_offsets: np.ndarray | None = None

    @property
    def penalized_dim(self) -> int:
        return self.basis_dim - self.null_dim

    def normalize(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        (ws, wsc), (hs, hsc) = self.covariate_shift_scale
        out = np.empty_like(pts)
        out[:, 0] = (pts[:, 0] - ws) / wsc
        out[:, 1] = (pts[:, 1] - hs) / hsc
        return out

    def to_dict(self) -> dict:
        return {
            "format": "pairsmooth.surface_basis/1",
            "knots": self.knots.tolist(),
            "basis_dim": self.basis_dim,
            "null_dim": self.null_dim,
            "penalty": self.penalty.tolist(),
            "transform": self.transform.tolist(),
            "covariate_shift_scale": [list(p) for p in self.covariate_shift_scale],
            "center_offsets": None if self.center_offsets is None
            else self.center_offsets.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurfaceBasis":
        if d.get("format") != "pairsmooth.surface_basis/1":
            raise ValueError(f"unsupported basis format {d.get('format')!r}")
        off = d.get("center_offsets")
        return cls(
            knots=np.asarray(d["knots"], dtype=float),
            basis_dim=int(d["basis_dim"]),
            null_dim=int(d["null_dim"]),
            penalty=np.asarray(d["penalty"], dtype=float),
            transform=np.asarray(d["transform"], dtype=float),
            covariate_shift_scale=tuple(
                (float(p[0]), float(p[1])) for p in d["covariate_shift_scale"]),
            center_offsets=None if off is None else np.asarray(off, dtype=float),
        )


def _unique_rows_in_order(pts: np.ndarray) -> np.ndarray:
    _, first = np.unique(pts, axis=0, return_index=True)
    return pts[np.sort(first)]


def _farthest_point_sequence(pts: np.ndarray, k: int) -> np.ndarray:
    """Greedy space-filling subsample; ties break toward lower input index."""
    centroid = pts.mean(axis=0)
    start = int(np.argmax(np.einsum("ij,ij->i", pts - centroid, pts - centroid)))
    chosen = [start]
    d_min = np.einsum("ij,ij->i", pts - pts[start], pts - pts[start])
    while len(chosen) < k:
        nxt = int(np.argmax(d_min))
        chosen.append(nxt)
        d = np.einsum("ij,ij->i", pts - pts[nxt], pts - pts[nxt])
        np.minimum(d_min, d, out=d_min)
    return pts[chosen]


def _check_not_collinear(pts: np.ndarray, what: str):
    centered = pts - pts.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[1] <= 1e-10 * max(svals[0], 1.0):
        raise DegenerateGeometry(f"{what} are collinear (or coincident)")


def build_basis(points, k: int) -> SurfaceBasis:
    """Construct a rank-``k`` thin plate basis from covariate pairs.

    Knots are a deterministic farthest-point subsample of the unique pairs.
    Columns are ordered null space (1, w', h') first, then the penalized
    block, whose roughness quadratic form is the stored ``penalty`` (so that
    coeffs^T penalty coeffs / 2 equals J(f)).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be an (n, 2) array")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    if k < NULL_DIM + 1:
        raise TooFewPoints(f"basis dimension must be at least {NULL_DIM + 1}")

    shift = pts.mean(axis=0)
    scale = pts.std(axis=0)
    if np.any(scale <= 0):
        raise DegenerateGeometry("a covariate axis is constant")
    norm = (pts - shift) / scale

    uniq = _unique_rows_in_order(norm)
    if uniq.shape[0] < k:
        raise TooFewPoints(
            f"need at least {k} distinct covariate pairs, found {uniq.shape[0]}")
    _check_not_collinear(uniq, "covariate pairs")

    knots = _farthest_point_sequence(uniq, k)
    _check_not_collinear(knots, "selected knots")

    # Null space of the moment constraints T^T delta = 0, T = [1 | knots]
    t_mat = np.column_stack([np.ones(k), knots])
    q_full, _ = np.linalg.qr(t_mat, mode="complete")
    z_c = q_full[:, NULL_DIM:]

    e_mat = tps_radial(_pairwise_dist(knots, knots))
    s0 = z_c.T @ e_mat @ z_c
    s0 = 0.5 * (s0 + s0.T)
    eigvals = np.linalg.eigvalsh(s0)
    if eigvals[0] <= 1e-12 * max(eigvals[-1], 1.0):
        raise SingularPenalty(
            f"penalty numerically rank deficient (min eig {eigvals[0]:.3e})")
    chol = np.linalg.cholesky(s0)
    transform = z_c @ np.linalg.inv(chol).T

    # After the transform the roughness is coeffs^T coeffs, i.e. S = 2 I under
    # the J = coeffs^T S coeffs / 2 convention.
    penalty = 2.0 * np.eye(k - NULL_DIM)

    return SurfaceBasis(
        knots=knots,
        basis_dim=k,
        null_dim=NULL_DIM,
        penalty=penalty,
        transform=transform,
        covariate_shift_scale=((float(shift[0]), float(scale[0])),
                               (float(shift[1]), float(scale[1]))),
    )


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def eval_basis(basis: SurfaceBasis, points) -> np.ndarray:
    """Model-matrix rows for arbitrary points: null space columns first."""
    norm = basis.normalize(points)
    radial = tps_radial(_pairwise_dist(norm, basis.knots))
    full = np.column_stack([
        np.ones(norm.shape[0]), norm, radial @ basis.transform])
    if basis.center_offsets is None:
        return full
    return full[:, 1:] - basis.center_offsets


def roughness(basis: SurfaceBasis, coeffs) -> float:
    """Roughness J(f) of the spanned function with the given coefficients.

    Only the penalized block contributes; functions confined to the null
    space (or any centered shift of it) have zero roughness.
    """
    c = np.asarray(coeffs, dtype=float)
    if c.shape != (basis.basis_dim,):
        raise ValueError(
            f"expected {basis.basis_dim} coefficients, got {c.shape}")
    pen = c[basis.null_dim:]
    return float(pen @ basis.penalty @ pen) / 2.0


def radial_coefficients(basis: SurfaceBasis, coeffs) -> np.ndarray:
    """Map penalized coefficients back to raw radial coefficients delta."""
    c = np.asarray(coeffs, dtype=float)
    return basis.transform @ c[basis.null_dim:]


def center_constraint(basis: SurfaceBasis, points) -> SurfaceBasis:
    """Centered variant: fitted values sum to zero over ``points``.

    The constant column is removed and every remaining column is shifted by
    its mean over the supplied points; an explicit intercept can then be
    added elsewhere in a design without rank deficiency.
    """
    if basis.center_offsets is not None:
        raise ValueError("basis is already centered")
    design = eval_basis(basis, points)
    offsets = design.mean(axis=0)[1:]
    return replace(
        basis,
        basis_dim=basis.basis_dim - 1,
        null_dim=basis.null_dim - 1,
        center_offsets=offsets,
    )
