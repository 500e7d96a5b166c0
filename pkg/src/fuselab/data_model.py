"""Core value types and delimited-file IO.

Conventions
-----------
* Interventions are indexed 0..J-1 in memory.  Delimited files use 1-based
  indices (``w`` values, ``j`` values, chosen-index lists) to match their
  1-based column labels ``a_1..a_J`` / ``v_1..v_p``; loaders and writers
  convert at the boundary.
* Quantities undefined for never-randomized interventions are carried as a
  value array plus an explicit boolean mask.  Values at masked-off positions
  are meaningless; downstream code must consult the mask.
* All container types are immutable after construction (frozen dataclasses;
  numpy arrays flagged non-writeable).
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, fields

import numpy as np

from .basis import PolynomialMap
from .errors import ParseError, ValidationError

__all__ = [
    "UnitRecord",
    "RctRecord",
    "ObservationalRound",
    "RctRound",
    "InterventionCatalog",
    "LossWeights",
    "EstimateState",
    "identity_weights",
    "weighted_loss",
    "load_round",
    "save_round",
    "load_catalog",
    "save_catalog",
]


def _freeze(obj) -> None:
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, np.ndarray):
            v.setflags(write=False)


@dataclass(frozen=True)
class UnitRecord:
    """One observational unit: outcome, context, and the full assignment row."""

    y: float
    x: np.ndarray
    a: np.ndarray


@dataclass(frozen=True)
class RctRecord(UnitRecord):
    """One randomized unit; ``w`` is the intervention whose arm was randomized."""

    w: int = 0


def _check_assignments(a: np.ndarray, where: str) -> None:
    if not np.isin(a, (0, 1)).all():
        raise ValidationError(f"{where}: assignment entries must be 0 or 1")


@dataclass(frozen=True)
class ObservationalRound:
    """A round of observational data in column-array form.

    y: (n,) outcomes; x: (n, p_x) contexts; a: (n, J) binary assignments.
    """

    round_index: int
    y: np.ndarray
    x: np.ndarray
    a: np.ndarray

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        a = np.asarray(self.a, dtype=np.int8)
        if y.ndim != 1 or x.ndim != 2 or a.ndim != 2:
            raise ValidationError("round arrays must be y:(n,), x:(n,p), a:(n,J)")
        n = y.shape[0]
        if x.shape[0] != n or a.shape[0] != n:
            raise ValidationError("round arrays disagree on record count")
        if n == 0:
            raise ValidationError("a round must contain at least one record")
        if not np.isfinite(y).all() or not np.isfinite(x).all():
            raise ValidationError("outcomes and contexts must be finite")
        _check_assignments(a, f"round {self.round_index}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "a", a)
        _freeze(self)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_interventions(self) -> int:
        return self.a.shape[1]

    def records(self):
        for i in range(self.n):
            yield UnitRecord(float(self.y[i]), self.x[i], self.a[i])


@dataclass(frozen=True)
class RctRound(ObservationalRound):
    """A randomized round: adds per-record ``w`` and the selected set."""

    w: np.ndarray = None  # type: ignore[assignment]
    selected_set: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.w is None:
            raise ValidationError("an RCT round requires a w column")
        w = np.asarray(self.w, dtype=np.int64)
        if w.shape != (self.n,):
            raise ValidationError("w must be one entry per record")
        sel = frozenset(int(j) for j in self.selected_set)
        if not sel:
            raise ValidationError("selected set must be non-empty")
        j_max = self.n_interventions
        if any(j < 0 or j >= j_max for j in sel):
            raise ValidationError("selected set contains an out-of-range intervention")
        bad = ~np.isin(w, sorted(sel))
        if bad.any():
            row = int(np.argmax(bad))
            raise ValidationError(
                f"record {row}: w={int(w[row])} is not in the round's selected set"
            )
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "selected_set", sel)
        _freeze(self)

    def records(self):
        for i in range(self.n):
            yield RctRecord(float(self.y[i]), self.x[i], self.a[i], int(self.w[i]))


@dataclass(frozen=True)
class InterventionCatalog:
    """Intervention attributes plus the feature map used by the bias regression.

    ``features`` is the (J, p_v) matrix with row j equal to the mapped
    attributes of intervention j.
    """

    attributes: np.ndarray
    feature_map: PolynomialMap

    def __post_init__(self) -> None:
        v = np.asarray(self.attributes, dtype=float)
        if v.ndim != 2:
            raise ValidationError("attributes must be a (J, p_attr) matrix")
        if not np.isfinite(v).all():
            raise ValidationError("attributes must be finite")
        if v.shape[1] != self.feature_map.n_dim:
            raise ValidationError(
                f"feature map expects {self.feature_map.n_dim} attribute "
                f"coordinates, catalog has {v.shape[1]}"
            )
        object.__setattr__(self, "attributes", v)
        object.__setattr__(self, "features", self.feature_map.transform(v))
        _freeze(self)
        self.features.setflags(write=False)

    @property
    def n_interventions(self) -> int:
        return self.attributes.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class LossWeights:
    """Symmetric positive definite weight matrix for the quadratic loss."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError("weight matrix must be square")
        if not np.isfinite(m).all():
            raise ValidationError("weight matrix must be finite")
        if np.max(np.abs(m - m.T)) > 1e-10:
            raise ValidationError("weight matrix must be symmetric (tol 1e-10)")
        eigvals = np.linalg.eigvalsh(m)
        if eigvals.min() <= 0:
            raise ValidationError(
                f"weight matrix must be positive definite (min eigenvalue {eigvals.min():.3g})"
            )
        object.__setattr__(self, "matrix", m)
        _freeze(self)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def identity_weights(n_interventions: int) -> LossWeights:
    """Equal weights summing to one: the identity divided by J."""
    if n_interventions < 1:
        raise ValidationError("need at least one intervention")
    return LossWeights(np.eye(n_interventions) / n_interventions)


def weighted_loss(estimate: np.ndarray, truth: np.ndarray, weights: LossWeights) -> float:
    """Quadratic loss (estimate - truth)' W (estimate - truth)."""
    e = np.asarray(estimate, dtype=float)
    t = np.asarray(truth, dtype=float)
    if e.shape != t.shape or e.ndim != 1:
        raise ValidationError("estimate and truth must be equal-length vectors")
    if e.shape[0] != weights.n:
        raise ValidationError("weight matrix size must match the vectors")
    d = e - t
    return float(d @ weights.matrix @ d)


@dataclass(frozen=True)
class EstimateState:
    """Pooled per-intervention estimates feeding the fusion step.

    tau_obs:   (J,) observational (doubly robust) effect estimates.
    dr_cov:    (J, J) finite-sample covariance of tau_obs.
    tau_rct:   (J,) randomized estimates; defined where ``rct_mask`` is True.
    rct_var:   (J,) finite-sample variances of tau_rct, same mask.
    r_counts:  (J,) total randomized-round sizes covering each intervention.
    selected_history: per-round selected sets, oldest first.

    The mask is exactly ``r_counts > 0``.  Zero variances are tolerated but
    flagged degenerate (constant outcomes in both arms).
    """

    tau_obs: np.ndarray
    dr_cov: np.ndarray
    tau_rct: np.ndarray
    rct_mask: np.ndarray
    rct_var: np.ndarray
    r_counts: np.ndarray
    selected_history: tuple[frozenset[int], ...]

    def __post_init__(self) -> None:
        tau_obs = np.asarray(self.tau_obs, dtype=float)
        j = tau_obs.shape[0]
        dr_cov = np.asarray(self.dr_cov, dtype=float)
        tau_rct = np.asarray(self.tau_rct, dtype=float)
        mask = np.asarray(self.rct_mask, dtype=bool)
        rct_var = np.asarray(self.rct_var, dtype=float)
        r_counts = np.asarray(self.r_counts, dtype=np.int64)
        if tau_obs.ndim != 1:
            raise ValidationError("tau_obs must be a vector")
        if dr_cov.shape != (j, j):
            raise ValidationError("dr_cov must be (J, J)")
        for name, arr in (("tau_rct", tau_rct), ("rct_mask", mask),
                          ("rct_var", rct_var), ("r_counts", r_counts)):
            if arr.shape != (j,):
                raise ValidationError(f"{name} must have length J={j}")
        if np.max(np.abs(dr_cov - dr_cov.T)) > 1e-8:
            raise ValidationError("dr_cov must be symmetric")
        if not np.array_equal(mask, r_counts > 0):
            raise ValidationError("rct mask must equal r_counts > 0")
        if not np.isfinite(tau_obs).all():
            raise ValidationError("tau_obs must be finite")
        if not np.isfinite(tau_rct[mask]).all() or not np.isfinite(rct_var[mask]).all():
            raise ValidationError("randomized estimates must be finite where defined")
        if (rct_var[mask] < 0).any():
            raise ValidationError("randomized variances must be >= 0 where defined")
        if (rct_var[mask] == 0).any():
            warnings.warn(
                "zero randomized-arm variance (constant outcomes): degenerate",
                stacklevel=2,
            )
        hist = tuple(frozenset(int(i) for i in s) for s in self.selected_history)
        union = set().union(*hist) if hist else set()
        if union != set(np.flatnonzero(mask).tolist()):
            raise ValidationError("selected history must cover exactly the masked-in set")
        object.__setattr__(self, "tau_obs", tau_obs)
        object.__setattr__(self, "dr_cov", dr_cov)
        object.__setattr__(self, "tau_rct", tau_rct)
        object.__setattr__(self, "rct_mask", mask)
        object.__setattr__(self, "rct_var", rct_var)
        object.__setattr__(self, "r_counts", r_counts)
        object.__setattr__(self, "selected_history", hist)
        _freeze(self)

    @property
    def n_interventions(self) -> int:
        return self.tau_obs.shape[0]

    @property
    def ever_selected(self) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.rct_mask).tolist())


# ---------------------------------------------------------------------------
# Delimited IO


def _fmt(v: float) -> str:
    return repr(float(v))


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    tmp = os.path.join(d, f".{os.path.basename(path)}.tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_round(rnd: ObservationalRound, path: str) -> None:
    """Write one round as CSV.

    Observational header: ``y,x_1..x_p,a_1..a_J``; randomized rounds get a
    leading ``w`` column with 1-based intervention values.
    """
    p, j = rnd.x.shape[1], rnd.a.shape[1]
    cols = [f"x_{k}" for k in range(1, p + 1)] + [f"a_{k}" for k in range(1, j + 1)]
    is_rct = isinstance(rnd, RctRound)
    header = (["w", "y"] if is_rct else ["y"]) + cols
    lines = [",".join(header)]
    for i in range(rnd.n):
        row = [] if not is_rct else [str(int(rnd.w[i]) + 1)]
        row.append(_fmt(rnd.y[i]))
        row.extend(_fmt(v) for v in rnd.x[i])
        row.extend(str(int(v)) for v in rnd.a[i])
        lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _parse_header(header: list[str], path: str) -> tuple[bool, int, int]:
    rct = bool(header) and header[0] == "w"
    body = header[1:] if rct else header
    if not body or body[0] != "y":
        raise ParseError("header must start with 'y' (or 'w,y')", path=path, row=1)
    xs = [c for c in body[1:] if c.startswith("x_")]
    as_ = [c for c in body[1:] if c.startswith("a_")]
    if body[1:] != xs + as_:
        raise ParseError("columns must be y, then x_*, then a_*", path=path, row=1)
    if xs != [f"x_{k}" for k in range(1, len(xs) + 1)]:
        raise ParseError("x columns must be x_1..x_p in order", path=path, row=1)
    if not as_ or as_ != [f"a_{k}" for k in range(1, len(as_) + 1)]:
        raise ParseError("a columns must be a_1..a_J in order", path=path, row=1)
    return rct, len(xs), len(as_)


def _round_index_from_name(path: str) -> int:
    stem = os.path.splitext(os.path.basename(path))[0]
    tail = stem.rsplit("_", 1)[-1]
    return int(tail) if tail.isdigit() else 1


def load_round(
    path: str,
    *,
    selected_set: set[int] | frozenset[int] | None = None,
    round_index: int | None = None,
) -> ObservationalRound:
    """Load a round CSV; the leading column decides observational vs randomized.

    ``selected_set`` (0-based) validates the ``w`` column when given;
    otherwise the set is inferred from the distinct ``w`` values.  The round
    index is parsed from a ``*_<m>.csv`` name unless passed explicitly.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", path=path, row=1) from None
        rct, p, j = _parse_header([h.strip() for h in header], path)
        ys, xs, as_, ws = [], [], [], []
        for rownum, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            expect = (2 if rct else 1) + p + j
            if len(row) != expect:
                raise ParseError(
                    f"expected {expect} fields, got {len(row)}", path=path, row=rownum
                )
            try:
                k = 0
                if rct:
                    w_val = int(row[0])
                    if not (1 <= w_val <= j):
                        raise ParseError(
                            f"w={w_val} outside 1..{j}", path=path, row=rownum
                        )
                    ws.append(w_val - 1)
                    k = 1
                ys.append(float(row[k]))
                xs.append([float(v) for v in row[k + 1 : k + 1 + p]])
                a_row = [int(v) for v in row[k + 1 + p :]]
            except ParseError:
                raise
            except ValueError as exc:
                raise ParseError(f"bad numeric field: {exc}", path=path, row=rownum) from None
            if any(v not in (0, 1) for v in a_row):
                raise ParseError("assignment fields must be 0 or 1", path=path, row=rownum)
            as_.append(a_row)
    if not ys:
        raise ParseError("no data rows", path=path, row=2)
    idx = round_index if round_index is not None else _round_index_from_name(path)
    y = np.array(ys)
    x = np.array(xs)
    a = np.array(as_, dtype=np.int8)
    if not rct:
        if selected_set is not None:
            raise ValidationError("selected_set given for an observational file")
        return ObservationalRound(idx, y, x, a)
    w = np.array(ws)
    sel = frozenset(selected_set) if selected_set is not None else frozenset(w.tolist())
    bad = ~np.isin(w, sorted(sel))
    if bad.any():
        rownum = int(np.argmax(bad)) + 2
        raise ValidationError(
            f"{path}, row {rownum}: w={int(w[np.argmax(bad)]) + 1} not in the selected set"
        )
    return RctRound(idx, y, x, a, w=w, selected_set=sel)


def save_catalog(catalog: InterventionCatalog, path: str) -> None:
    """Write the attribute table as CSV with header ``j,v_1..v_p``."""
    p = catalog.attributes.shape[1]
    lines = [",".join(["j"] + [f"v_{k}" for k in range(1, p + 1)])]
    for j in range(catalog.n_interventions):
        lines.append(",".join([str(j + 1)] + [_fmt(v) for v in catalog.attributes[j]]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_catalog(path: str, feature_map: PolynomialMap | None = None,
                 *, degree: int = 3) -> InterventionCatalog:
    """Load an attribute CSV.  Rows must cover j = 1..J exactly once each.

    Without an explicit feature map, a per-coordinate polynomial map of the
    given degree is used.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file", path=path, row=1) from None
        if not header or header[0] != "j":
            raise ParseError("header must start with 'j'", path=path, row=1)
        p = len(header) - 1
        if header[1:] != [f"v_{k}" for k in range(1, p + 1)] or p == 0:
            raise ParseError("attribute columns must be v_1..v_p", path=path, row=1)
        rows: dict[int, list[float]] = {}
        for rownum, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != p + 1:
                raise ParseError(
                    f"expected {p + 1} fields, got {len(row)}", path=path, row=rownum
                )
            try:
                j_val = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ParseError(f"bad numeric field: {exc}", path=path, row=rownum) from None
            if j_val in rows:
                raise ParseError(f"duplicate intervention index {j_val}", path=path, row=rownum)
            rows[j_val] = vals
    if not rows:
        raise ParseError("no data rows", path=path, row=2)
    n = len(rows)
    if sorted(rows) != list(range(1, n + 1)):
        raise ParseError("intervention indices must be exactly 1..J", path=path, row=2)
    attrs = np.array([rows[j] for j in range(1, n + 1)])
    fmap = feature_map or PolynomialMap(n_dim=p, degree=degree)
    return InterventionCatalog(attributes=attrs, feature_map=fmap)
