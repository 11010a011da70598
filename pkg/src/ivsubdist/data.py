"""Subject-level competing-risks records, CSV input and covariate centering."""

import csv
import hashlib
import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import DataError, EmptyDatasetError, MalformedRowError

REQUIRED_ROLES = ("id", "time", "status", "exposure", "instrument")


class Subject(NamedTuple):
    id: str
    time: float
    status: int
    exposure: float
    instrument: float
    covariates: tuple


@dataclass(frozen=True)
class Schema:
    """Mapping from model roles to CSV column names.

    ``covariates=None`` means "every column not claimed by another role,
    in file order".
    """

    id: str = "id"
    time: str = "time"
    status: str = "status"
    exposure: str = "exposure"
    instrument: str = "instrument"
    covariates: Optional[tuple] = None

    @classmethod
    def parse(cls, text):
        """Parse ``role=column`` pairs separated by commas.

        Covariate columns are joined with ``+``, e.g.
        ``time=T,status=cause,covariates=age+stage``.
        """
        kwargs = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            if "=" not in part:
                raise DataError(f"schema entry {part!r} is not of the form role=column")
            role, column = (s.strip() for s in part.split("=", 1))
            if role == "covariates":
                kwargs[role] = tuple(c for c in column.split("+") if c)
            elif role in REQUIRED_ROLES:
                kwargs[role] = column
            else:
                raise DataError(f"unknown schema role {role!r}")
        return cls(**kwargs)

    def resolve(self, header):
        missing = [getattr(self, r) for r in REQUIRED_ROLES if getattr(self, r) not in header]
        if self.covariates is not None:
            missing += [c for c in self.covariates if c not in header]
        if missing:
            raise DataError(f"required columns missing from input: {', '.join(missing)}")
        if self.covariates is not None:
            return tuple(self.covariates)
        claimed = {getattr(self, r) for r in REQUIRED_ROLES}
        return tuple(c for c in header if c not in claimed)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented competing-risks data.

    ``offsets`` is ``None`` until :func:`center` has been applied; afterwards
    it holds the means removed from (instrument, exposure, covariates...).
    """

    ids: tuple
    time: np.ndarray
    status: np.ndarray
    exposure: np.ndarray
    instrument: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple = ()
    cause_of_interest: int = 1
    n_causes: int = 2
    offsets: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("time", "exposure", "instrument", "covariates", "status"):
            arr = getattr(self, name)
            arr.setflags(write=False)
        if self.offsets is not None:
            self.offsets.setflags(write=False)

    def __len__(self):
        return self.time.shape[0]

    @property
    def n(self):
        return self.time.shape[0]

    @property
    def p(self):
        return self.covariates.shape[1]

    @property
    def is_centered(self):
        return self.offsets is not None

    @property
    def is_event(self):
        return self.status == self.cause_of_interest

    @property
    def is_competing(self):
        return (self.status != 0) & (self.status != self.cause_of_interest)

    @property
    def is_censored(self):
        return self.status == 0

    def subject(self, i):
        return Subject(self.ids[i], float(self.time[i]), int(self.status[i]),
                       float(self.exposure[i]), float(self.instrument[i]),
                       tuple(float(v) for v in self.covariates[i]))

    def __iter__(self):
        return (self.subject(i) for i in range(self.n))

    def take(self, index):
        """Subset (or permute) subjects; centering metadata is kept as is."""
        index = np.asarray(index)
        return replace(
            self,
            ids=tuple(self.ids[i] for i in index),
            time=self.time[index].copy(),
            status=self.status[index].copy(),
            exposure=self.exposure[index].copy(),
            instrument=self.instrument[index].copy(),
            covariates=self.covariates[index].copy(),
        )

    def digest(self):
        """SHA-256 over the raw (uncentered-as-stored) numeric columns."""
        h = hashlib.sha256()
        for arr in (self.time, self.status.astype(np.int64), self.exposure,
                    self.instrument, self.covariates):
            h.update(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()


def from_arrays(time, status, exposure, instrument, covariates=None, *, ids=None,
                covariate_names=None, cause_of_interest=1, n_causes=None):
    """Build a validated :class:`Dataset` from array-likes."""
    time = np.asarray(time, dtype=float).copy()
    status_raw = np.asarray(status)
    n = time.shape[0]
    if n == 0:
        raise EmptyDatasetError("dataset has no subjects")
    if not np.all(np.isfinite(status_raw.astype(float))) or np.any(status_raw != np.round(status_raw)):
        raise DataError("status codes must be integers")
    status = status_raw.astype(np.int64)
    exposure = np.asarray(exposure, dtype=float).copy()
    instrument = np.asarray(instrument, dtype=float).copy()
    if covariates is None:
        covariates = np.zeros((n, 0))
    covariates = np.asarray(covariates, dtype=float).reshape(n, -1).copy()
    p = covariates.shape[1]
    if exposure.shape != (n,) or instrument.shape != (n,):
        raise DataError("exposure and instrument must have one value per subject")

    bad = np.flatnonzero(~np.isfinite(time) | (time < 0))
    if bad.size:
        raise MalformedRowError(f"row {bad[0]}: time must be finite and nonnegative, got {time[bad[0]]}",
                                row=int(bad[0]), column="time")
    if np.any(status < 0):
        i = int(np.flatnonzero(status < 0)[0])
        raise MalformedRowError(f"row {i}: unknown status code {status[i]}", row=i, column="status")
    for name, arr in (("exposure", exposure), ("instrument", instrument)):
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise MalformedRowError(f"row {bad[0]}: {name} is not finite", row=int(bad[0]), column=name)
    if p:
        bad_rows, bad_cols = np.nonzero(~np.isfinite(covariates))
        if bad_rows.size:
            raise MalformedRowError(f"row {bad_rows[0]}: covariate {bad_cols[0]} is not finite",
                                    row=int(bad_rows[0]), column=f"covariate[{bad_cols[0]}]")

    k = max(2, int(status.max()))
    if n_causes is not None:
        if np.any(status > n_causes):
            i = int(np.flatnonzero(status > n_causes)[0])
            raise MalformedRowError(f"row {i}: unknown status code {status[i]} (K={n_causes})",
                                    row=i, column="status")
        k = n_causes
    if cause_of_interest < 1 or cause_of_interest > k:
        raise DataError(f"cause of interest {cause_of_interest} outside 1..{k}")
    if not np.any(status == cause_of_interest):
        raise DataError(f"no subject has status {cause_of_interest}; the fit is undefined")

    if ids is None:
        ids = tuple(str(i + 1) for i in range(n))
    ids = tuple(str(i) for i in ids)
    if covariate_names is None:
        covariate_names = tuple(f"x{j + 1}" for j in range(p))
    return Dataset(ids=ids, time=time, status=status, exposure=exposure, instrument=instrument,
                   covariates=covariates, covariate_names=tuple(covariate_names),
                   cause_of_interest=cause_of_interest, n_causes=k)


def _parse_number(text, row, column, kind=float):
    text = text.strip() if text is not None else ""
    if text == "" or text.lower() in ("na", "nan", "null"):
        raise MalformedRowError(f"row {row}, column {column!r}: missing value", row=row, column=column)
    try:
        value = float(text)
    except ValueError:
        raise MalformedRowError(f"row {row}, column {column!r}: cannot parse {text!r} as a number",
                                row=row, column=column) from None
    if kind is int:
        if not math.isfinite(value) or value != int(value):
            raise MalformedRowError(f"row {row}, column {column!r}: unknown status code {text!r}",
                                    row=row, column=column)
        return int(value)
    return value


def load_dataset(rows, schema=None, *, cause_of_interest=1, n_causes=None):
    """Validate tabular records into a :class:`Dataset`.

    Parameters
    ----------
    rows : sequence of mappings
        One mapping (column name -> string or number) per subject, e.g. the
        output of :class:`csv.DictReader`. Row indices in error messages are
        zero-based positions in this sequence.
    schema : Schema, optional
        Column mapping; defaults to the canonical column names.

    The returned dataset is *not* centered.
    """
    schema = schema or Schema()
    rows = list(rows)
    if not rows:
        raise EmptyDatasetError("input has no data rows")
    header = list(rows[0].keys())
    cov_cols = schema.resolve(header)

    ids, time, status, exposure, instrument, covs = [], [], [], [], [], []
    for r, row in enumerate(rows):
        def get(col, kind=float):
            value = row.get(col)
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                value = repr(value)
            return _parse_number(value, r, col, kind)

        ids.append(str(row.get(schema.id, r + 1)))
        t = get(schema.time)
        if not math.isfinite(t) or t < 0:
            raise MalformedRowError(f"row {r}, column {schema.time!r}: time must be finite and >= 0, got {t}",
                                    row=r, column=schema.time)
        s = get(schema.status, int)
        if s < 0 or (n_causes is not None and s > n_causes):
            raise MalformedRowError(f"row {r}, column {schema.status!r}: unknown status code {s}",
                                    row=r, column=schema.status)
        time.append(t)
        status.append(s)
        exposure.append(get(schema.exposure))
        instrument.append(get(schema.instrument))
        covs.append([get(c) for c in cov_cols])

    return from_arrays(time, status, exposure, instrument,
                       np.array(covs, dtype=float).reshape(len(rows), len(cov_cols)),
                       ids=ids, covariate_names=cov_cols,
                       cause_of_interest=cause_of_interest, n_causes=n_causes)


def read_csv(path, schema=None, **kwargs):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EmptyDatasetError(f"{path}: empty file")
        return load_dataset(reader, schema, **kwargs)


def write_csv(dataset, path):
    """Write the dataset in the canonical column layout.

    Floats are written with ``repr`` so a re-read is bit-exact.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(REQUIRED_ROLES) + list(dataset.covariate_names))
        for i in range(dataset.n):
            w.writerow([dataset.ids[i], repr(float(dataset.time[i])), int(dataset.status[i]),
                        repr(float(dataset.exposure[i])), repr(float(dataset.instrument[i]))]
                       + [repr(float(v)) for v in dataset.covariates[i]])


def center(dataset):
    """Remove column means from instrument, exposure and covariates.

    Offsets accumulate, so centering an already-centered dataset leaves the
    stored offsets describing the original scale.
    """
    if dataset.n == 0:
        raise EmptyDatasetError("cannot center an empty dataset")
    m_i = dataset.instrument.mean()
    m_e = dataset.exposure.mean()
    m_o = dataset.covariates.mean(axis=0)
    means = np.concatenate([[m_i, m_e], m_o])
    offsets = means if dataset.offsets is None else dataset.offsets + means
    return replace(
        dataset,
        instrument=dataset.instrument - m_i,
        exposure=dataset.exposure - m_e,
        covariates=dataset.covariates - m_o,
        offsets=offsets,
    )


def centered_covariates(dataset, x_e, x_o: Sequence[float] = ()):
    """Map original-scale (x_e, x_o) onto the dataset's centered scale."""
    x_o = np.asarray(x_o, dtype=float).reshape(-1)
    if x_o.shape[0] != dataset.p:
        raise DataError(f"expected {dataset.p} covariate values, got {x_o.shape[0]}")
    offsets = dataset.offsets if dataset.offsets is not None else np.zeros(dataset.p + 2)
    return np.concatenate([[x_e - offsets[1]], x_o - offsets[2:]])


@dataclass(frozen=True)
class FitOptions:
    """``tau=None`` selects the largest cause-of-interest event time."""

    tau: Optional[float] = None
    weight_scheme: str = "unit"
    ci_level: float = 0.95

    def __post_init__(self):
        if self.weight_scheme != "unit":
            raise DataError(f"unsupported weight scheme {self.weight_scheme!r}; only 'unit' is available")
        if not 0 < self.ci_level < 1:
            raise DataError(f"ci_level must lie in (0, 1), got {self.ci_level}")
        if self.tau is not None and not self.tau > 0:
            raise DataError(f"tau must be positive, got {self.tau}")
