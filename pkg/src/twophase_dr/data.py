"""Core data containers for two-phase measurement-error designs.

An observation always carries error-prone surrogates (a_star, y_star) and
covariates x; the gold-standard pair (a, y) exists only on rows selected into
the validation subsample (r=1). Absence is explicit (None / NaN), never a
sentinel value, so unvalidated gold fields cannot be used silently.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import (
    DimensionMismatch,
    EmptyArm,
    MissingGoldStandard,
    MismatchedLength,
)

KAPPA_MODES = ("known", "known_refit", "estimated")

DEFAULT_LEARNER_MENU = (
    "lin",
    "lin_int",
    "lin_poly3",
    "logit",
    "logit_int",
    "logit_poly3",
)


@dataclass(frozen=True)
class Observation:
    """One row of a two-phase sample.

    Parameters
    ----------
    x : tuple of float
        Covariates, shared by both phases.
    a_star : int
        Error-prone binary treatment surrogate.
    y_star : float
        Error-prone outcome surrogate.
    r : int
        Validation indicator; 1 means the gold-standard pair was measured.
    a, y : optional
        Gold-standard treatment and outcome; present iff r == 1.
    kappa_known : optional float
        Design validation probability in (0, 1], when the sampling design
        is known.
    """

    x: tuple[float, ...]
    a_star: int
    y_star: float
    r: int
    a: int | None = None
    y: float | None = None
    kappa_known: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        if self.r not in (0, 1):
            raise ValueError(f"r must be 0 or 1, got {self.r}")
        if self.a_star not in (0, 1):
            raise ValueError(f"a_star must be 0 or 1, got {self.a_star}")
        if self.r == 1:
            if self.a is None or self.y is None:
                raise MissingGoldStandard("validated row lacks gold-standard a or y")
            if self.a not in (0, 1):
                raise ValueError(f"a must be 0 or 1, got {self.a}")
        else:
            if self.a is not None or self.y is not None:
                raise ValueError("unvalidated row must not carry gold-standard fields")
        if self.kappa_known is not None and not 0.0 < self.kappa_known <= 1.0:
            raise ValueError(f"kappa_known must lie in (0, 1], got {self.kappa_known}")


class Dataset:
    """Columnar two-phase sample with row-level (Observation) views.

    Columns are the source of truth; gold-standard columns hold NaN exactly
    where r == 0 so any accidental use of unvalidated gold values poisons the
    computation loudly instead of biasing it silently.
    """

    def __init__(
        self,
        x: NDArray,
        a_star: NDArray,
        y_star: NDArray,
        r: NDArray,
        a: NDArray,
        y: NDArray,
        kappa_known: NDArray | None,
    ):
        self._x = np.ascontiguousarray(x, dtype=float)
        self._a_star = np.asarray(a_star, dtype=np.int64)
        self._y_star = np.asarray(y_star, dtype=float)
        self._r = np.asarray(r, dtype=np.int64)
        self._a = np.asarray(a, dtype=float)
        self._y = np.asarray(y, dtype=float)
        self._kappa = None if kappa_known is None else np.asarray(kappa_known, dtype=float)
        self._rows: tuple[Observation, ...] | None = None
        self._z: NDArray | None = None
        self._rank: NDArray | None = None
        self._check_structure()

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    @classmethod
    def from_arrays(
        cls,
        x: NDArray,
        a_star: NDArray,
        y_star: NDArray,
        r: NDArray,
        a: NDArray | None = None,
        y: NDArray | None = None,
        kappa_known: NDArray | None = None,
    ) -> "Dataset":
        """Build a dataset from columns; NaN in a/y encodes absence."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        if a is None:
            a = np.full(n, np.nan)
        if y is None:
            y = np.full(n, np.nan)
        return cls(x, a_star, y_star, r, a, y, kappa_known)

    @classmethod
    def from_rows(cls, rows: Iterable[Observation]) -> "Dataset":
        rows = tuple(rows)
        if not rows:
            raise MismatchedLength("cannot build a dataset from zero rows")
        p = len(rows[0].x)
        for i, ob in enumerate(rows):
            if len(ob.x) != p:
                raise DimensionMismatch(
                    f"row {i} has {len(ob.x)} covariates, expected {p}"
                )
        x = np.array([ob.x for ob in rows], dtype=float)
        a_star = np.array([ob.a_star for ob in rows])
        y_star = np.array([ob.y_star for ob in rows], dtype=float)
        r = np.array([ob.r for ob in rows])
        a = np.array([np.nan if ob.a is None else float(ob.a) for ob in rows])
        y = np.array([np.nan if ob.y is None else ob.y for ob in rows])
        if all(ob.kappa_known is None for ob in rows):
            kappa = None
        else:
            kappa = np.array(
                [np.nan if ob.kappa_known is None else ob.kappa_known for ob in rows]
            )
        ds = cls(x, a_star, y_star, r, a, y, kappa)
        ds._rows = rows
        return ds

    def _check_structure(self):
        n = self._x.shape[0]
        if self._x.ndim != 2:
            raise DimensionMismatch("x must be a 2-d array")
        for name, col in (
            ("a_star", self._a_star),
            ("y_star", self._y_star),
            ("r", self._r),
            ("a", self._a),
            ("y", self._y),
        ):
            if col.shape != (n,):
                raise DimensionMismatch(f"column {name} has shape {col.shape}, expected ({n},)")
        if self._kappa is not None and self._kappa.shape != (n,):
            raise DimensionMismatch("kappa_known length disagrees with x")
        if not np.isin(self._r, (0, 1)).all():
            raise ValueError("r must be 0/1")
        if not np.isin(self._a_star, (0, 1)).all():
            raise ValueError("a_star must be 0/1")
        val = self._r == 1
        if np.isnan(self._a[val]).any() or np.isnan(self._y[val]).any():
            raise MissingGoldStandard("validated row lacks gold-standard a or y")
        if not (np.isnan(self._a[~val]).all() and np.isnan(self._y[~val]).all()):
            raise ValueError("unvalidated rows must not carry gold-standard fields")
        a_val = self._a[val]
        if a_val.size and not np.isin(a_val, (0.0, 1.0)).all():
            raise ValueError("a must be 0/1 on validated rows")
        if self._kappa is not None:
            finite = self._kappa[np.isfinite(self._kappa)]
            if ((finite <= 0.0) | (finite > 1.0)).any():
                raise ValueError("kappa_known must lie in (0, 1]")

    # ------------------------------------------------------------------
    # column views
    # ------------------------------------------------------------------

    @property
    def n(self) -> int:
        return self._x.shape[0]

    @property
    def p(self) -> int:
        return self._x.shape[1]

    @property
    def x(self) -> NDArray:
        return self._x

    @property
    def a_star(self) -> NDArray:
        return self._a_star

    @property
    def y_star(self) -> NDArray:
        return self._y_star

    @property
    def r(self) -> NDArray:
        return self._r

    @property
    def a(self) -> NDArray:
        """Gold-standard treatment; NaN where r == 0."""
        return self._a

    @property
    def y(self) -> NDArray:
        """Gold-standard outcome; NaN where r == 0."""
        return self._y

    @property
    def kappa_known(self) -> NDArray | None:
        return self._kappa

    @property
    def validated(self) -> NDArray:
        return self._r == 1

    @property
    def is_complete(self) -> bool:
        return bool((self._r == 1).all())

    @property
    def z(self) -> NDArray:
        """Phase-one information (x, a_star, y_star), available on every row."""
        if self._z is None:
            self._z = np.column_stack(
                [self._x, self._a_star.astype(float), self._y_star]
            )
        return self._z

    # ------------------------------------------------------------------
    # row views
    # ------------------------------------------------------------------

    def row(self, i: int) -> Observation:
        r = int(self._r[i])
        kappa = None
        if self._kappa is not None and np.isfinite(self._kappa[i]):
            kappa = float(self._kappa[i])
        return Observation(
            x=tuple(self._x[i]),
            a_star=int(self._a_star[i]),
            y_star=float(self._y_star[i]),
            r=r,
            a=int(self._a[i]) if r == 1 else None,
            y=float(self._y[i]) if r == 1 else None,
            kappa_known=kappa,
        )

    @property
    def rows(self) -> tuple[Observation, ...]:
        if self._rows is None:
            self._rows = tuple(self.row(i) for i in range(self.n))
        return self._rows

    def canonical_rank(self) -> NDArray:
        """Content-derived total order on rows.

        Used to make internal cross-validation splits a function of row
        content alone, so reordering rows inside one fold cannot leak into
        another fold's fitted values.
        """
        if self._rank is None:
            keys = [np.nan_to_num(self._y, nan=np.inf), np.nan_to_num(self._a, nan=2.0)]
            if self._kappa is not None:
                keys.append(np.nan_to_num(self._kappa, nan=2.0))
            keys.extend([self._r.astype(float), self._y_star, self._a_star.astype(float)])
            keys.extend(self._x[:, j] for j in range(self.p - 1, -1, -1))
            order = np.lexsort(keys)
            rank = np.empty(self.n, dtype=np.int64)
            rank[order] = np.arange(self.n)
            self._rank = rank
        return self._rank


def validate_dataset(d: Dataset) -> None:
    """Check the statistical preconditions shared by every estimator.

    Raises
    ------
    MissingGoldStandard
        If no row is validated.
    EmptyArm
        If some treatment arm never appears among validated rows.
    """
    val = d.validated
    if not val.any():
        raise MissingGoldStandard("no validated rows: gold-standard data is absent")
    a_val = d.a[val]
    for arm in (0, 1):
        if not (a_val == arm).any():
            raise EmptyArm(f"no validated rows with arm {arm}")


# ----------------------------------------------------------------------
# results and configuration
# ----------------------------------------------------------------------


@dataclass
class EstimateResult:
    """Point estimate with its per-row influence curve and Wald interval."""

    method: str
    estimand: str
    point: float
    ic: NDArray
    se: float
    ci_low: float
    ci_high: float
    ci_level: float = 0.95
    diagnostics: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(np.asarray(self.ic).shape[0])

    def to_dict(self) -> dict:
        """JSON-ready summary (influence curve omitted)."""
        return {
            "method": self.method,
            "estimand": self.estimand,
            "point": float(self.point),
            "se": float(self.se),
            "ci_low": float(self.ci_low),
            "ci_high": float(self.ci_high),
            "n": self.n,
            "diagnostics": _jsonable(self.diagnostics),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


@dataclass
class ScenarioConfig:
    """One simulation cell plus the estimation settings shared by all methods."""

    n: int = 1000
    rho: float = 0.3
    reps: int = 100
    master_seed: int = 0
    folds: int = 5
    clip_eps: float = 0.01
    delta: float = 0.01
    kappa_mode: str = "known"
    learner_menu: tuple[str, ...] = DEFAULT_LEARNER_MENU
    ci_level: float = 0.95

    def __post_init__(self):
        if self.n < 10:
            raise ValueError("n must be at least 10")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0,1)")
        if self.reps < 1:
            raise ValueError("reps must be positive")
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if not 0.0 < self.clip_eps < 0.5:
            raise ValueError("clip_eps must lie in (0, 0.5)")
        if self.delta < 0.0:
            raise ValueError("delta must be nonnegative")
        if self.kappa_mode not in KAPPA_MODES:
            raise ValueError(f"kappa_mode must be one of {KAPPA_MODES}")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError("ci_level must lie in (0, 1)")
        self.learner_menu = tuple(self.learner_menu)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "rho": self.rho,
            "reps": self.reps,
            "master_seed": self.master_seed,
            "folds": self.folds,
            "clip_eps": self.clip_eps,
            "delta": self.delta,
            "kappa_mode": self.kappa_mode,
            "learner_menu": list(self.learner_menu),
            "ci_level": self.ci_level,
        }


# ----------------------------------------------------------------------
# CSV round trip
# ----------------------------------------------------------------------


def _fmt(v: float | int | None) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and np.isnan(v):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def csv_header(p: int) -> list[str]:
    return [f"x{j}" for j in range(1, p + 1)] + ["a_star", "y_star", "r", "a", "y", "kappa"]


def write_dataset_csv(d: Dataset, path: str) -> None:
    """Write a dataset in the canonical column layout."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(csv_header(d.p))
        kap = d.kappa_known
        for i in range(d.n):
            r = int(d.r[i])
            row = [_fmt(v) for v in d.x[i]]
            row += [str(int(d.a_star[i])), _fmt(float(d.y_star[i])), str(r)]
            row += [_fmt(int(d.a[i])) if r == 1 else "", _fmt(float(d.y[i])) if r == 1 else ""]
            row += [_fmt(float(kap[i])) if kap is not None and np.isfinite(kap[i]) else ""]
            w.writerow(row)


class CsvSchemaError(ValueError):
    """Raised with a file line number when a CSV row violates the schema."""


def _parse_cell(raw: str, name: str, line: int) -> float:
    try:
        return float(raw)
    except ValueError:
        raise CsvSchemaError(f"line {line}: column {name} has non-numeric value {raw!r}") from None


def read_dataset_csv(path: str) -> Dataset:
    """Read the canonical CSV layout back into a Dataset.

    Raises CsvSchemaError naming the offending file line on any violation.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvSchemaError("line 1: file is empty") from None
        header = [h.strip() for h in header]
        tail = ["a_star", "y_star", "r", "a", "y", "kappa"]
        p = len(header) - len(tail)
        if p < 1 or header != csv_header(p):
            raise CsvSchemaError(
                f"line 1: header must be x1..xp,{','.join(tail)}, got {','.join(header)}"
            )
        xs, a_stars, y_stars, rs, as_, ys, kaps = [], [], [], [], [], [], []
        any_kappa = False
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvSchemaError(
                    f"line {line_no}: expected {len(header)} cells, got {len(row)}"
                )
            row = [c.strip() for c in row]
            xs.append([_parse_cell(c, f"x{j + 1}", line_no) for j, c in enumerate(row[:p])])
            a_star = _parse_cell(row[p], "a_star", line_no)
            if a_star not in (0.0, 1.0):
                raise CsvSchemaError(f"line {line_no}: a_star must be 0 or 1")
            y_star = _parse_cell(row[p + 1], "y_star", line_no)
            r = _parse_cell(row[p + 2], "r", line_no)
            if r not in (0.0, 1.0):
                raise CsvSchemaError(f"line {line_no}: r must be 0 or 1")
            a_raw, y_raw, k_raw = row[p + 3], row[p + 4], row[p + 5]
            if r == 1.0:
                if a_raw == "" or y_raw == "":
                    raise CsvSchemaError(f"line {line_no}: validated row must carry a and y")
                a = _parse_cell(a_raw, "a", line_no)
                if a not in (0.0, 1.0):
                    raise CsvSchemaError(f"line {line_no}: a must be 0 or 1")
                y = _parse_cell(y_raw, "y", line_no)
            else:
                if a_raw != "" or y_raw != "":
                    raise CsvSchemaError(
                        f"line {line_no}: unvalidated row must leave a and y empty"
                    )
                a, y = np.nan, np.nan
            if k_raw == "":
                kap = np.nan
            else:
                kap = _parse_cell(k_raw, "kappa", line_no)
                if not 0.0 < kap <= 1.0:
                    raise CsvSchemaError(f"line {line_no}: kappa must lie in (0, 1]")
                any_kappa = True
            a_stars.append(int(a_star))
            y_stars.append(y_star)
            rs.append(int(r))
            as_.append(a)
            ys.append(y)
            kaps.append(kap)
    if not xs:
        raise CsvSchemaError("line 1: no data rows")
    return Dataset.from_arrays(
        np.asarray(xs),
        np.asarray(a_stars),
        np.asarray(y_stars),
        np.asarray(rs),
        np.asarray(as_),
        np.asarray(ys),
        np.asarray(kaps) if any_kappa else None,
    )
