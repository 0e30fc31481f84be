"""Assembly of the joint paired-outcome model into stacked mixed-model form.

The two outcome equations are stacked outcome-major: rows 1..N hold outcome
one in dataset order, rows N+1..2N hold outcome two.  Fixed-effect columns
are block-diagonal by outcome (parametric terms first, then surface
null-space / intercept columns); random-effect columns are the 2m subject
indicators followed by the penalized spline blocks, block-diagonal by
outcome and group.  Group-specific surfaces are realized by zeroing a
surface's columns on rows of subjects outside its group.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import tps
from .data import LongitudinalDataset
from .errors import DesignError, GroupMismatch, InvalidSpecPair, RankDeficientX

SURFACE_MODES = ("group_specific", "shared_centered_with_group_intercepts")
ERROR_STRUCTURES = ("independent", "car1_on_time")
CRITERIA = ("ML", "REML")


@dataclass(frozen=True)
class BasisConfig:
    k: int = 30


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of one joint model."""

    surface_mode: str
    num_groups: int
    parametric_terms: tuple[str, ...] = ()
    basis: BasisConfig = field(default_factory=BasisConfig)
    error_structure: str = "independent"
    criterion: str = "REML"
    # shared mode only: free intercept per group (the default) or a single
    # common intercept, which additionally equates group levels under the null
    group_intercepts: bool = True
    # set to fit each smooth as an unpenalized spline of the given dimension
    # (order: outcome-1 smooths then outcome-2 smooths)
    unpenalized_dims: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.surface_mode not in SURFACE_MODES:
            raise ValueError(f"unknown surface_mode {self.surface_mode!r}")
        if self.error_structure not in ERROR_STRUCTURES:
            raise ValueError(f"unknown error_structure {self.error_structure!r}")
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.num_groups < 1:
            raise ValueError("num_groups must be >= 1")
        object.__setattr__(self, "parametric_terms",
                           tuple(self.parametric_terms))
        if self.unpenalized_dims is not None:
            dims = tuple(int(d) for d in self.unpenalized_dims)
            if len(dims) != 2 * self.smooths_per_outcome:
                raise ValueError(
                    f"unpenalized_dims needs {2 * self.smooths_per_outcome} "
                    f"entries, got {len(dims)}")
            object.__setattr__(self, "unpenalized_dims", dims)

    @property
    def smooths_per_outcome(self) -> int:
        return self.num_groups if self.surface_mode == "group_specific" else 1

    @property
    def is_penalized(self) -> bool:
        return self.unpenalized_dims is None

    def to_dict(self) -> dict:
        return {
            "surface_mode": self.surface_mode,
            "num_groups": self.num_groups,
            "parametric_terms": list(self.parametric_terms),
            "basis": {"k": self.basis.k},
            "error_structure": self.error_structure,
            "criterion": self.criterion,
            "group_intercepts": self.group_intercepts,
            "unpenalized_dims": None if self.unpenalized_dims is None
            else list(self.unpenalized_dims),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {"surface_mode", "num_groups", "parametric_terms", "basis",
                 "error_structure", "criterion", "group_intercepts",
                 "unpenalized_dims"}
        unknown = set(d) - known
        if unknown:
            raise DesignError(f"unknown model spec keys: {sorted(unknown)}")
        basis = d.get("basis", {})
        if not isinstance(basis, dict) or set(basis) - {"k"}:
            raise DesignError("basis must be an object with key 'k'")
        dims = d.get("unpenalized_dims")
        return cls(
            surface_mode=d["surface_mode"],
            num_groups=int(d["num_groups"]),
            parametric_terms=tuple(d.get("parametric_terms", ())),
            basis=BasisConfig(k=int(basis.get("k", 30))),
            error_structure=d.get("error_structure", "independent"),
            criterion=d.get("criterion", "REML"),
            group_intercepts=bool(d.get("group_intercepts", True)),
            unpenalized_dims=None if dims is None else tuple(dims),
        )


@dataclass(frozen=True)
class SmoothInfo:
    """Column bookkeeping for one surface term."""

    outcome: int                 # 1 or 2
    group: int | None            # None for a shared surface
    label: str
    x_cols: tuple[int, ...]      # null-space (and nothing else) columns in X
    z_start: int                 # within the spline block of Z
    z_end: int
    basis: tps.SurfaceBasis


@dataclass(frozen=True)
class PenaltyBlock:
    smooth_index: int
    z_start: int
    z_end: int


@dataclass(frozen=True)
class AssembledDesign:
    spec: ModelSpec
    y: np.ndarray                      # (2N,)
    x: np.ndarray                      # (2N, p)
    x_labels: tuple[str, ...]
    z_subject: sp.csr_matrix           # (2N, 2m)
    z_spline: sp.csr_matrix | None     # (2N, q_spl)
    penalty_blocks: tuple[PenaltyBlock, ...]
    smooths: tuple[SmoothInfo, ...]
    intercept_cols: tuple[tuple[int, ...], tuple[int, ...]]  # per outcome
    row_subject: np.ndarray            # (2N,)
    row_time: np.ndarray
    row_outcome: np.ndarray            # 1 or 2
    group_by_subject: np.ndarray       # (m,)
    num_subjects: int
    num_groups: int
    n_obs: int                         # N (per outcome)
    covariates: np.ndarray             # (N, 2) observed (w, h)

    @property
    def n_smooths_outcome1(self) -> int:
        return sum(1 for s in self.smooths if s.outcome == 1)

    @property
    def n_smooths_outcome2(self) -> int:
        return sum(1 for s in self.smooths if s.outcome == 2)

    @property
    def n_penalized_outcome1(self) -> int:
        return sum(1 for s in self.smooths
                   if s.outcome == 1 and s.z_end > s.z_start)

    @property
    def n_penalized_outcome2(self) -> int:
        return sum(1 for s in self.smooths
                   if s.outcome == 2 and s.z_end > s.z_start)

    @property
    def q_spline(self) -> int:
        return 0 if self.z_spline is None else self.z_spline.shape[1]

    def with_response(self, y_new) -> "AssembledDesign":
        y_new = np.asarray(y_new, dtype=float)
        if y_new.shape != self.y.shape:
            raise ValueError("replacement response has wrong length")
        return replace(self, y=y_new)

    def without_splines(self) -> "AssembledDesign":
        return replace(self, z_spline=None, penalty_blocks=())

    def group_points(self, group: int) -> np.ndarray:
        rows = self.group_by_subject[self.row_subject[: self.n_obs]] == group
        return self.covariates[rows]


def _surface_bases(ds, spec):
    """One basis per smooth, from pooled covariates; shared across groups so
    that null and full function spaces nest (knots come from one
    deterministic farthest-point sequence; smaller bases use prefixes)."""
    points = np.column_stack([ds.w, ds.h])
    cache: dict[int, tps.SurfaceBasis] = {}

    def base_for(k):
        if k not in cache:
            cache[k] = tps.build_basis(points, k)
        return cache[k]

    per_outcome = spec.smooths_per_outcome
    if spec.unpenalized_dims is not None:
        dims = spec.unpenalized_dims
    else:
        dims = (spec.basis.k,) * (2 * per_outcome)
    centered = spec.surface_mode != "group_specific"
    bases = []
    for dim in dims:
        b = base_for(dim)
        if centered:
            b = tps.center_constraint(b, points)
        bases.append(b)
    return bases, points


def assemble(ds: LongitudinalDataset, spec: ModelSpec) -> AssembledDesign:
    """Stack the paired-outcome model into (y, X, Z, penalties)."""
    if spec.num_groups != ds.num_groups:
        raise GroupMismatch(
            f"spec declares {spec.num_groups} groups, dataset has {ds.num_groups}")
    for name in spec.parametric_terms:
        if name not in ds.covariate_names:
            raise DesignError(f"parametric term {name!r} not in dataset "
                              f"columns {ds.covariate_names}")

    n = ds.total_observations
    m = ds.num_subjects
    g_count = ds.num_groups
    row_group = ds.group_of_rows()
    bases, points = _surface_bases(ds, spec)

    pcov = np.column_stack([
        ds.pcov[:, ds.covariate_names.index(name)]
        for name in spec.parametric_terms]) if spec.parametric_terms \
        else np.zeros((n, 0))

    smooth_meta = []       # (outcome, group|None, basis)
    per_outcome = spec.smooths_per_outcome
    for outcome in (1, 2):
        for j in range(per_outcome):
            group = j + 1 if spec.surface_mode == "group_specific" else None
            smooth_meta.append((outcome, group,
                                bases[(outcome - 1) * per_outcome + j]))

    # ---- fixed-effect matrix ------------------------------------------------
    x_parts = []           # (outcome, labels, values (n, k))
    smooth_x_cols: list[list[str]] = []
    intercept_labels: dict[int, list[str]] = {1: [], 2: []}
    for outcome in (1, 2):
        for name in spec.parametric_terms:
            x_parts.append((outcome, f"psi{outcome}:{name}",
                            pcov[:, list(spec.parametric_terms).index(name)]))
        if spec.surface_mode == "shared_centered_with_group_intercepts":
            if spec.group_intercepts:
                for g in range(1, g_count + 1):
                    lbl = f"intercept{outcome}[g={g}]"
                    intercept_labels[outcome].append(lbl)
                    x_parts.append((outcome, lbl,
                                    (row_group == g).astype(float)))
            else:
                lbl = f"intercept{outcome}"
                intercept_labels[outcome].append(lbl)
                x_parts.append((outcome, lbl, np.ones(n)))
        for outcome2, group, basis in smooth_meta:
            if outcome2 != outcome:
                continue
            cols = tps.eval_basis(basis, points)
            mask = np.ones(n) if group is None \
                else (row_group == group).astype(float)
            tag = f"f{outcome}" + (f"[g={group}]" if group else "[shared]")
            labels = []
            for j in range(basis.null_dim):
                labels.append(f"{tag}:null{j}")
                x_parts.append((outcome, labels[-1], cols[:, j] * mask))
            smooth_x_cols.append(labels)

    p = len(x_parts)
    x = np.zeros((2 * n, p))
    x_labels = []
    for col, (outcome, label, values) in enumerate(x_parts):
        rows = slice(0, n) if outcome == 1 else slice(n, 2 * n)
        x[rows, col] = values
        x_labels.append(label)
    label_to_col = {lbl: i for i, lbl in enumerate(x_labels)}

    # ---- random-effect matrices ---------------------------------------------
    row_idx = np.concatenate([np.arange(n), np.arange(n) + n])
    subj_cols = np.concatenate([ds.obs_subject, ds.obs_subject + m])
    z_subject = sp.csr_matrix(
        (np.ones(2 * n), (row_idx, subj_cols)), shape=(2 * n, 2 * m))

    smooths = []
    penalty_blocks = []
    z_blocks = []
    z_pos = 0
    if spec.is_penalized:
        for idx, (outcome, group, basis) in enumerate(smooth_meta):
            cols = tps.eval_basis(basis, points)[:, basis.null_dim:]
            mask = np.ones(n) if group is None \
                else (row_group == group).astype(float)
            block = np.zeros((2 * n, basis.penalized_dim))
            rows = slice(0, n) if outcome == 1 else slice(n, 2 * n)
            block[rows] = cols * mask[:, None]
            z_blocks.append(sp.csr_matrix(block))
            z_end = z_pos + basis.penalized_dim
            penalty_blocks.append(PenaltyBlock(idx, z_pos, z_end))
            tag = f"f{outcome}" + (f"[g={group}]" if group else "[shared]")
            smooths.append(SmoothInfo(
                outcome=outcome, group=group, label=tag,
                x_cols=tuple(label_to_col[lbl] for lbl in smooth_x_cols[idx]),
                z_start=z_pos, z_end=z_end, basis=basis))
            z_pos = z_end
        z_spline = sp.hstack(z_blocks).tocsr() if z_blocks else None
    else:
        # unpenalized: every surface column lives in X; record the smooths
        # with empty penalized ranges for bookkeeping
        extra_cols = []
        for idx, (outcome, group, basis) in enumerate(smooth_meta):
            cols = tps.eval_basis(basis, points)[:, basis.null_dim:]
            mask = np.ones(n) if group is None \
                else (row_group == group).astype(float)
            tag = f"f{outcome}" + (f"[g={group}]" if group else "[shared]")
            labels = list(smooth_x_cols[idx])
            for j in range(basis.penalized_dim):
                labels.append(f"{tag}:spl{j}")
                extra_cols.append((outcome, labels[-1],
                                   cols[:, j] * mask))
            smooths.append((idx, outcome, group, tag, labels, basis))
        base_p = p
        extra = np.zeros((2 * n, len(extra_cols)))
        for col, (outcome, label, values) in enumerate(extra_cols):
            rows = slice(0, n) if outcome == 1 else slice(n, 2 * n)
            extra[rows, col] = values
            x_labels.append(label)
        x = np.hstack([x, extra])
        label_to_col = {lbl: i for i, lbl in enumerate(x_labels)}
        smooths = [SmoothInfo(outcome=o, group=g, label=t,
                              x_cols=tuple(label_to_col[lbl] for lbl in lbls),
                              z_start=0, z_end=0, basis=b)
                   for (_, o, g, t, lbls, b) in smooths]
        z_spline = None

    rank = np.linalg.matrix_rank(x)
    if rank < x.shape[1]:
        raise RankDeficientX(
            f"fixed-effect matrix has rank {rank} < {x.shape[1]} columns")

    y = np.concatenate([ds.y1, ds.y2])
    design = AssembledDesign(
        spec=spec,
        y=y,
        x=x,
        x_labels=tuple(x_labels),
        z_subject=z_subject,
        z_spline=z_spline,
        penalty_blocks=tuple(penalty_blocks),
        smooths=tuple(smooths),
        intercept_cols=(
            tuple(label_to_col[lbl] for lbl in intercept_labels[1]),
            tuple(label_to_col[lbl] for lbl in intercept_labels[2])),
        row_subject=np.concatenate([ds.obs_subject, ds.obs_subject]),
        row_time=np.concatenate([ds.time, ds.time]),
        row_outcome=np.concatenate([np.ones(n, int), np.full(n, 2)]),
        group_by_subject=ds.group.copy(),
        num_subjects=m,
        num_groups=g_count,
        n_obs=n,
        covariates=points,
    )
    return design


def null_and_full_specs(spec: ModelSpec,
                        free_group_intercepts: bool = True
                        ) -> tuple[ModelSpec, ModelSpec]:
    """Null/full pair for testing equality of the group surfaces.

    The full model is the given group-specific spec; the null replaces the
    G surfaces per outcome by one shared centered surface plus explicit
    intercepts (per group by default, matching a data-generating process in
    which group levels stay free while the surface shape is common).
    """
    if spec.surface_mode != "group_specific":
        raise InvalidSpecPair("the full model spec must be group_specific")
    null = replace(
        spec,
        surface_mode="shared_centered_with_group_intercepts",
        group_intercepts=free_group_intercepts,
        unpenalized_dims=None if spec.unpenalized_dims is None
        else spec.unpenalized_dims[: 2],
    )
    return null, spec
