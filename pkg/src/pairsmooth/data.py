"""In-memory representation and validated ingestion of paired longitudinal data.

A dataset holds two outcomes measured together at each visit, two continuous
covariates driving the smooth surfaces, optional extra parametric covariates,
and a group label that is constant within subject.  Subjects are ordered by
first appearance, visits are ordered by time within subject, and all fields
are required (rows with missing values are rejected at ingestion).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    DataError,
    DuplicateVisit,
    EmptyGroup,
    MissingColumn,
    NonConstantGroup,
    NonNumeric,
)

REQUIRED_ROLES = ("subject", "time", "y1", "y2", "group", "w", "h")

DEFAULT_SCHEMA = {role: role for role in REQUIRED_ROLES}


@dataclass(frozen=True)
class Observation:
    """One visit of one subject: paired outcomes plus covariates."""

    subject_id: str
    visit_index: int          # 1-based, derived from time order within subject
    time: float
    y1: float
    y2: float
    w: float
    h: float
    parametric_covariates: tuple[float, ...]
    group: int


class LongitudinalDataset:
    """Validated, immutable container of paired longitudinal observations.

    Internally stored as column arrays sorted by (subject first appearance,
    time within subject).  ``covariate_names`` labels the columns of the
    parametric covariate matrix ``pcov``.
    """

    def __init__(self, subject_ids, group_by_subject, time, y1, y2, w, h,
                 obs_subject, pcov=None, covariate_names=()):
        self.subject_ids = list(subject_ids)
        self.group = np.asarray(group_by_subject, dtype=int)
        self.time = np.asarray(time, dtype=float)
        self.y1 = np.asarray(y1, dtype=float)
        self.y2 = np.asarray(y2, dtype=float)
        self.w = np.asarray(w, dtype=float)
        self.h = np.asarray(h, dtype=float)
        self.obs_subject = np.asarray(obs_subject, dtype=int)
        n = self.time.shape[0]
        if pcov is None:
            pcov = np.zeros((n, 0))
        self.pcov = np.asarray(pcov, dtype=float).reshape(n, -1)
        self.covariate_names = tuple(covariate_names)
        if self.pcov.shape[1] != len(self.covariate_names):
            raise DataError("covariate_names must match pcov columns")
        self._validate()
        for arr in (self.group, self.time, self.y1, self.y2, self.w, self.h,
                    self.obs_subject, self.pcov):
            arr.setflags(write=False)

    # -- construction ------------------------------------------------------

    def _validate(self):
        m = len(self.subject_ids)
        if len(set(self.subject_ids)) != m:
            raise DataError("subject ids are not unique")
        if self.group.shape != (m,):
            raise DataError("group vector must have one entry per subject")
        n = self.time.shape[0]
        for name in ("y1", "y2", "w", "h", "obs_subject"):
            if getattr(self, name).shape[0] != n:
                raise DataError(f"column {name!r} has wrong length")
        for name in ("time", "y1", "y2", "w", "h", "pcov"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonNumeric(f"non-finite value in column {name!r}")
        if n == 0:
            raise DataError("dataset is empty")
        if self.obs_subject.min() < 0 or self.obs_subject.max() >= m:
            raise DataError("observation subject index out of range")
        # visits sorted strictly by time within subject, subjects contiguous
        counts = np.zeros(m, dtype=int)
        prev_subj = -1
        seen = set()
        for k in range(n):
            s = self.obs_subject[k]
            if s != prev_subj:
                if s in seen:
                    raise DataError("subject rows are not contiguous")
                seen.add(s)
                prev_subj = s
            else:
                if not self.time[k] > self.time[k - 1]:
                    raise DuplicateVisit(
                        f"subject {self.subject_ids[s]!r} has non-increasing "
                        f"times ({self.time[k - 1]} then {self.time[k]})")
            counts[s] += 1
        if np.any(counts == 0):
            missing = self.subject_ids[int(np.argmin(counts))]
            raise DataError(f"subject {missing!r} has no observations")
        self.n_i = counts
        self.n_i.setflags(write=False)
        groups = np.unique(self.group)
        if groups.min() < 1:
            raise DataError("group labels must be integers >= 1")
        self.num_groups = int(groups.max())
        present = set(groups.tolist())
        for g in range(1, self.num_groups + 1):
            if g not in present:
                raise EmptyGroup(f"group {g} has no subjects")

    @classmethod
    def from_rows(cls, rows: Sequence[Mapping], covariate_names=()):
        """Build a dataset from row mappings with keys
        subject, time, y1, y2, w, h, group plus the named covariates.

        Subjects are ordered by first appearance; visits are sorted by time
        within subject.  Raises on duplicate times or group changes.
        """
        order: dict[str, int] = {}
        per_subject: dict[str, list] = {}
        group_of: dict[str, int] = {}
        for row in rows:
            sid = str(row["subject"])
            g = int(row["group"])
            if sid not in order:
                order[sid] = len(order)
                per_subject[sid] = []
                group_of[sid] = g
            elif group_of[sid] != g:
                raise NonConstantGroup(
                    f"subject {sid!r} appears in groups {group_of[sid]} and {g}")
            per_subject[sid].append(row)
        subject_ids = sorted(order, key=order.get)
        time, y1, y2, w, h, pcov, obs_subject = [], [], [], [], [], [], []
        for idx, sid in enumerate(subject_ids):
            visits = sorted(per_subject[sid], key=lambda r: float(r["time"]))
            for j, row in enumerate(visits):
                t = float(row["time"])
                if j > 0 and not t > time[-1]:
                    raise DuplicateVisit(
                        f"subject {sid!r} has two visits at time {t}")
                time.append(t)
                y1.append(float(row["y1"]))
                y2.append(float(row["y2"]))
                w.append(float(row["w"]))
                h.append(float(row["h"]))
                pcov.append([float(row[c]) for c in covariate_names])
                obs_subject.append(idx)
        groups = [group_of[sid] for sid in subject_ids]
        return cls(subject_ids, groups, time, y1, y2, w, h, obs_subject,
                   np.asarray(pcov, dtype=float).reshape(len(time), -1),
                   covariate_names)

    # -- basic views ---------------------------------------------------------

    @property
    def num_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def total_observations(self) -> int:
        return int(self.time.shape[0])

    @property
    def visit_index(self) -> np.ndarray:
        """1-based visit counter within subject, derived from time order."""
        out = np.empty(self.total_observations, dtype=int)
        pos = 0
        for count in self.n_i:
            out[pos:pos + count] = np.arange(1, count + 1)
            pos += count
        return out

    def observations(self) -> Iterator[Observation]:
        vi = self.visit_index
        for k in range(self.total_observations):
            s = self.obs_subject[k]
            yield Observation(
                subject_id=self.subject_ids[s],
                visit_index=int(vi[k]),
                time=float(self.time[k]),
                y1=float(self.y1[k]),
                y2=float(self.y2[k]),
                w=float(self.w[k]),
                h=float(self.h[k]),
                parametric_covariates=tuple(self.pcov[k]),
                group=int(self.group[s]),
            )

    def group_of_rows(self) -> np.ndarray:
        return self.group[self.obs_subject]

    def __len__(self) -> int:
        return self.total_observations

    def __eq__(self, other) -> bool:
        if not isinstance(other, LongitudinalDataset):
            return NotImplemented
        return (self.subject_ids == other.subject_ids
                and np.array_equal(self.group, other.group)
                and self.covariate_names == other.covariate_names
                and np.array_equal(self.obs_subject, other.obs_subject)
                and np.allclose(self.time, other.time)
                and np.allclose(self.y1, other.y1)
                and np.allclose(self.y2, other.y2)
                and np.allclose(self.w, other.w)
                and np.allclose(self.h, other.h)
                and np.allclose(self.pcov, other.pcov))


def _resolve_schema(schema, header):
    mapping = dict(DEFAULT_SCHEMA)
    covariates: list[str] = []
    if schema:
        for role, col in schema.items():
            if role == "covariates":
                covariates = list(col)
            else:
                mapping[role] = col
    for role in REQUIRED_ROLES:
        if mapping[role] not in header:
            raise MissingColumn(
                f"required role {role!r} maps to column {mapping[role]!r} "
                f"which is absent from the header {header}")
    for col in covariates:
        if col not in header:
            raise MissingColumn(f"covariate column {col!r} absent from header")
    return mapping, covariates


def load_dataset(path, schema: Mapping | None = None,
                 delimiter: str = ",") -> LongitudinalDataset:
    """Read a delimited text file with a header row into a dataset.

    ``schema`` maps roles (subject, time, y1, y2, group, w, h) to column
    names; the special key ``covariates`` lists parametric covariate columns.
    Lines starting with ``#`` are ignored.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        content = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(io.StringIO("".join(content)), delimiter=delimiter)
    if reader.fieldnames is None:
        raise DataError(f"{path}: empty file")
    mapping, covariates = _resolve_schema(schema, reader.fieldnames)
    rows = []
    for lineno, raw in enumerate(reader, start=2):
        row = {}
        for role in REQUIRED_ROLES:
            cell = raw.get(mapping[role])
            if cell is None or cell.strip() == "":
                raise NonNumeric(
                    f"{path}:{lineno}: missing value for {role!r}")
            if role == "subject":
                row[role] = cell.strip()
                continue
            try:
                row[role] = int(cell) if role == "group" else float(cell)
            except ValueError:
                raise NonNumeric(
                    f"{path}:{lineno}: cannot parse {role!r} value {cell!r}")
        for col in covariates:
            cell = raw.get(col)
            if cell is None or cell.strip() == "":
                raise NonNumeric(f"{path}:{lineno}: missing value for {col!r}")
            try:
                row[col] = float(cell)
            except ValueError:
                raise NonNumeric(
                    f"{path}:{lineno}: cannot parse {col!r} value {cell!r}")
        rows.append(row)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return LongitudinalDataset.from_rows(rows, tuple(covariates))


def write_dataset(ds: LongitudinalDataset, path, delimiter: str = ",",
                  header_comment: str | None = None) -> None:
    """Export a dataset in the same delimited format accepted by load_dataset."""
    cols = ["subject", "time", "y1", "y2", "w", "h", "group",
            *ds.covariate_names]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header_comment:
            for line in header_comment.splitlines():
                fh.write(f"# {line}\n")
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(cols)
        groups = ds.group_of_rows()
        fmt = "{:.17g}".format
        for k in range(len(ds)):
            sid = ds.subject_ids[ds.obs_subject[k]]
            writer.writerow([
                sid, fmt(ds.time[k]), fmt(ds.y1[k]), fmt(ds.y2[k]),
                fmt(ds.w[k]), fmt(ds.h[k]), int(groups[k]),
                *(fmt(v) for v in ds.pcov[k]),
            ])


@dataclass(frozen=True)
class GroupSummary:
    subjects: int
    observations: int
    w_range: tuple[float, float]
    h_range: tuple[float, float]
    y1_mean: float
    y2_mean: float


@dataclass(frozen=True)
class DatasetSummary:
    num_subjects: int
    total_observations: int
    num_groups: int
    y1_mean: float
    y1_sd: float
    y2_mean: float
    y2_sd: float
    groups: dict[int, GroupSummary] = field(default_factory=dict)

    def as_text(self) -> str:
        lines = [
            f"subjects        {self.num_subjects}",
            f"observations    {self.total_observations}",
            f"groups          {self.num_groups}",
            f"y1 mean (sd)    {self.y1_mean:.4f} ({self.y1_sd:.4f})",
            f"y2 mean (sd)    {self.y2_mean:.4f} ({self.y2_sd:.4f})",
        ]
        for g in sorted(self.groups):
            gs = self.groups[g]
            lines.append(
                f"group {g}: {gs.subjects} subjects, {gs.observations} obs, "
                f"w in [{gs.w_range[0]:.4g}, {gs.w_range[1]:.4g}], "
                f"h in [{gs.h_range[0]:.4g}, {gs.h_range[1]:.4g}]")
        return "\n".join(lines)


def _sd(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1)) if x.size > 1 else 0.0


def summarize(ds: LongitudinalDataset) -> DatasetSummary:
    """Per-group subject counts, outcome moments, and covariate ranges.

    The per-group covariate ranges support checking whether group supports
    overlap before comparing group surfaces.
    """
    row_group = ds.group_of_rows()
    groups = {}
    for g in range(1, ds.num_groups + 1):
        rows = row_group == g
        groups[g] = GroupSummary(
            subjects=int(np.sum(ds.group == g)),
            observations=int(np.sum(rows)),
            w_range=(float(ds.w[rows].min()), float(ds.w[rows].max())),
            h_range=(float(ds.h[rows].min()), float(ds.h[rows].max())),
            y1_mean=float(ds.y1[rows].mean()),
            y2_mean=float(ds.y2[rows].mean()),
        )
    return DatasetSummary(
        num_subjects=ds.num_subjects,
        total_observations=ds.total_observations,
        num_groups=ds.num_groups,
        y1_mean=float(ds.y1.mean()),
        y1_sd=_sd(ds.y1),
        y2_mean=float(ds.y2.mean()),
        y2_sd=_sd(ds.y2),
        groups=groups,
    )
