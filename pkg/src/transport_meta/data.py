"""Pooled target-plus-trials dataset, CSV interchange and support bookkeeping.

CSV layout: columns ``g,s,a,y,x1..xp``; an empty cell means "absent".
``g=1`` marks target rows, ``s`` is the trial id (1..m) of a source row.
"""
import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

MODES = ("difference", "ratio")


class DataError(ValueError):
    """Input data violate the dataset invariants."""


@dataclass(frozen=True)
class Observation:
    g: int
    s: object  # int or None
    a: object  # int or None
    y: object  # float or None
    x: tuple


@dataclass(frozen=True, eq=False)
class StudyDataset:
    """Column-oriented pooled sample.

    Absent values: ``s == 0`` on target rows, ``a``/``y`` NaN where missing.
    Arrays are made read-only on construction.
    """

    g: np.ndarray
    s: np.ndarray
    a: np.ndarray
    y: np.ndarray
    X: np.ndarray
    m: int
    mode: str = "difference"

    def __post_init__(self):
        for name in ("g", "s", "a", "y", "X"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        validate(self)

    @property
    def n(self):
        return len(self.g)

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def n1(self):
        return int(np.sum(self.g == 1))

    @property
    def alpha(self):
        return self.n1 / self.n

    @property
    def source(self):
        return self.g == 0

    @property
    def target(self):
        return self.g == 1

    def a0(self):
        """Treatment with absent entries set to 0."""
        return np.nan_to_num(self.a, nan=0.0)

    def y0(self):
        """Outcome with absent entries set to 0."""
        return np.nan_to_num(self.y, nan=0.0)

    def rows(self):
        for i in range(self.n):
            yield Observation(
                int(self.g[i]),
                int(self.s[i]) if self.s[i] > 0 else None,
                None if np.isnan(self.a[i]) else int(self.a[i]),
                None if np.isnan(self.y[i]) else float(self.y[i]),
                tuple(self.X[i]),
            )

    def subset(self, mask):
        mask = np.asarray(mask, dtype=bool)
        return StudyDataset(self.g[mask], self.s[mask], self.a[mask], self.y[mask],
                            self.X[mask], self.m, self.mode)


def validate(data):
    g, s, a, y = data.g, data.s, data.a, data.y
    if data.mode not in MODES:
        raise DataError(f"unknown mode {data.mode!r}")
    if data.X.ndim != 2 or data.X.shape[0] != len(g):
        raise DataError("covariate matrix does not match row count")
    if not np.all((g == 0) | (g == 1)):
        raise DataError("g must be 0 or 1")
    tgt = g == 1
    src = ~tgt
    if np.any(s[tgt] != 0):
        raise DataError("trial id on target row")
    if np.any((s[src] < 1) | (s[src] > data.m)):
        raise DataError(f"trial id outside 1..{data.m}")
    if np.any(np.isnan(a[src])) or not np.all(np.isin(a[src], (0, 1))):
        raise DataError("source rows need a treatment in {0, 1}")
    if np.any(np.isnan(y[src])):
        raise DataError("source rows need an outcome")
    if not np.all(np.isfinite(data.X)):
        raise DataError("covariates must be finite")
    if tgt.sum() < 1:
        raise DataError("no target rows")
    for k in range(1, data.m + 1):
        arms = a[s == k]
        if arms.size == 0:
            raise DataError(f"trial {k} has no rows")
        if not (np.any(arms == 1) and np.any(arms == 0)):
            raise DataError(f"trial {k} lacks one treatment arm")
    if data.mode == "ratio":
        if np.any(a[tgt] == 1):
            raise DataError("treated unit in target")
        if np.any(np.isnan(y[tgt])):
            raise DataError("ratio mode needs outcomes on target rows")
        if np.any(y[~np.isnan(y)] < 0):
            raise DataError("ratio mode needs nonnegative outcomes")


def from_arrays(g, s, a, y, X, m=None, mode="difference"):
    """Build a dataset from loose arrays; ``s``/``a``/``y`` may hold NaN for absent."""
    g = np.asarray(g, dtype=int)
    s = np.nan_to_num(np.asarray(s, dtype=float), nan=0.0).astype(int)
    a = np.asarray(a, dtype=float).copy()
    y = np.asarray(y, dtype=float).copy()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if mode == "ratio":
        a[g == 1] = 0.0
    else:
        a[g == 1] = np.nan
        y[g == 1] = np.nan
    if m is None:
        m = int(s.max()) if s.size else 0
    return StudyDataset(g, s, a, y, X, int(m), mode)


def _cell(v):
    v = v.strip()
    return float(v) if v else np.nan


def load_csv(path, mode="difference"):
    """Read a pooled dataset. ``m`` is inferred as the largest trial id."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        records = [r for r in reader if any(c.strip() for c in r)]
    for col in ("g", "s", "a", "y"):
        if col not in header:
            raise DataError(f"missing required column {col!r}")
    xcols = sorted((h for h in header if h.startswith("x") and h[1:].isdigit()),
                   key=lambda h: int(h[1:]))
    if not xcols:
        raise DataError("missing covariate columns x1..xp")
    if xcols != [f"x{j}" for j in range(1, len(xcols) + 1)]:
        raise DataError(f"covariate columns must be x1..xp, got {xcols}")
    idx = {h: i for i, h in enumerate(header)}
    try:
        table = np.array([[_cell(r[idx[h]]) for h in ["g", "s", "a", "y", *xcols]]
                          for r in records], dtype=float).reshape(-1, 4 + len(xcols))
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed row ({exc})") from None
    g, s, a, y = table[:, 0], table[:, 1], table[:, 2], table[:, 3]
    X = table[:, 4:]
    if np.any(np.isnan(g)):
        raise DataError("g missing on some rows")
    tgt = g == 1
    if np.any(~np.isnan(s[tgt])):
        raise DataError("trial id on target row")
    if mode == "ratio":
        if np.any(a[tgt] == 1):
            raise DataError("treated unit in target")
        a[tgt] = 0.0
    elif np.any(~np.isnan(y[tgt])):
        warnings.warn("outcome present on target rows is ignored in difference mode")
        y = y.copy()
        y[tgt] = np.nan
    src_s = s[~tgt]
    if np.any(np.isnan(src_s)) or np.any(src_s != np.round(src_s)):
        raise DataError("source rows need an integer trial id")
    if np.any(src_s < 1):
        raise DataError("trial id outside 1..m")
    m = int(src_s.max()) if src_s.size else 0
    s = np.nan_to_num(s, nan=0.0).astype(int)
    return StudyDataset(g.astype(int), s, a, y, X, m, mode)


def _fmt(v):
    if np.isnan(v):
        return ""
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def write_csv(data, path):
    header = ["g", "s", "a", "y"] + [f"x{j}" for j in range(1, data.p + 1)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        s = np.where(data.s > 0, data.s, np.nan).astype(float)
        a = data.a.copy()
        if data.mode == "difference":
            a = np.where(data.g == 1, np.nan, a)
        for i in range(data.n):
            w.writerow([_fmt(data.g[i]), _fmt(s[i]), _fmt(a[i]), _fmt(data.y[i]),
                        *(_fmt(v) for v in data.X[i])])


@dataclass
class SupportMap:
    """Trial eligibility per row: ``eligible[i, k]`` says whether trial k+1 covers ``X[i]``."""

    eligible: np.ndarray
    tau: float
    violations: list = field(default_factory=list)

    def eligible_set(self, i):
        return {k + 1 for k in np.flatnonzero(self.eligible[i])}


def support_from_probs(eta, tau=1e-3):
    eta = np.asarray(eta, dtype=float)
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if tau == 0:
        return np.ones_like(eta, dtype=bool)
    return eta > tau


def build_support_map(data, eta, tau=1e-3, X=None):
    """Threshold affiliation probabilities; target rows with no eligible trial are listed.

    ``eta`` is an affiliation model (anything with ``predict(X) -> (n, m)``).
    With ``X`` given, the map is built on those points instead of the data.
    Overlap violations are reported, never trimmed.
    """
    pts = data.X if X is None else np.atleast_2d(np.asarray(X, dtype=float))
    elig = support_from_probs(eta.predict(pts), tau)
    if X is None:
        rows = np.flatnonzero(data.target & ~elig.any(axis=1))
    else:
        rows = np.flatnonzero(~elig.any(axis=1))
    return SupportMap(elig, tau, [int(i) for i in rows])
