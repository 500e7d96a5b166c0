"""Spline and polynomial feature construction.

Two consumers share this module: the nuisance models (propensity and outcome
regressions on unit contexts) use cubic B-spline bases with interior knots at
empirical quantiles, and the bias regression on intervention attributes uses
per-coordinate polynomial features.  Both emit a leading intercept column and
optional pairwise product columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import ValidationError

__all__ = ["SplineSpec", "SplineBasis", "fit_basis", "PolynomialMap"]


@dataclass(frozen=True)
class SplineSpec:
    """Recipe for a per-coordinate B-spline basis.

    degree: spline degree (3 = cubic).
    knots_per_dim: number of interior knots, placed at empirical quantiles.
    interaction_pairs: raw coordinate index pairs whose products are appended.
    """

    degree: int = 3
    knots_per_dim: int = 3
    interaction_pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        if self.degree < 1:
            raise ValidationError(f"spline degree must be >= 1, got {self.degree}")
        if self.knots_per_dim < 0:
            raise ValidationError("knots_per_dim must be >= 0")


def _column_knots(x: np.ndarray, spec: SplineSpec) -> np.ndarray:
    """Full (padded) knot vector for one coordinate.

    Boundary knots sit at the observed min/max and are repeated degree+1
    times; interior knots at evenly spaced quantiles.
    """
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi <= lo:
        # Constant column: widen artificially so the basis stays well defined.
        lo, hi = lo - 0.5, hi + 0.5
    if spec.knots_per_dim > 0:
        qs = np.linspace(0.0, 1.0, spec.knots_per_dim + 2)[1:-1]
        interior = np.quantile(x, qs)
        interior = np.clip(interior, lo + 1e-12, hi - 1e-12)
    else:
        interior = np.empty(0)
    return np.concatenate(
        [np.full(spec.degree + 1, lo), np.sort(interior), np.full(spec.degree + 1, hi)]
    )


@dataclass(frozen=True)
class SplineBasis:
    """A fitted basis: knot vectors per coordinate plus the originating spec.

    ``transform`` maps an (n, d) context matrix to the (n, p) design matrix:
    intercept, then per-coordinate spline columns (first spline function of
    each coordinate dropped, since the functions sum to one), then the raw
    interaction products.
    """

    spec: SplineSpec
    knots: tuple[np.ndarray, ...]
    n_dim: int

    @property
    def n_features(self) -> int:
        per_dim = sum(len(t) - self.spec.degree - 2 for t in self.knots)
        return 1 + per_dim + len(self.spec.interaction_pairs)

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != self.n_dim:
            raise ValidationError(
                f"context has {x.shape[1]} coordinates, basis was fit on {self.n_dim}"
            )
        cols = [np.ones((x.shape[0], 1))]
        deg = self.spec.degree
        for d in range(self.n_dim):
            t = self.knots[d]
            # Clamp to the training range: evaluation stays finite everywhere
            # inside (and on the boundary of) the observed hull.
            xd = np.clip(x[:, d], t[0], t[-1])
            design = BSpline.design_matrix(xd, t, deg).toarray()
            cols.append(design[:, 1:])  # drop first function: collinear with intercept
        for i, j in self.spec.interaction_pairs:
            cols.append((x[:, i] * x[:, j])[:, None])
        return np.hstack(cols)


def fit_basis(x: np.ndarray, spec: SplineSpec) -> SplineBasis:
    """Fit knot locations from data and return the reusable basis."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] <= spec.degree:
        raise ValidationError("not enough rows to place spline knots")
    for i, j in spec.interaction_pairs:
        if not (0 <= i < x.shape[1] and 0 <= j < x.shape[1]):
            raise ValidationError(f"interaction pair ({i}, {j}) out of range")
    knots = tuple(_column_knots(x[:, d], spec) for d in range(x.shape[1]))
    return SplineBasis(spec=spec, knots=knots, n_dim=x.shape[1])


@dataclass(frozen=True)
class PolynomialMap:
    """Per-coordinate polynomial feature map for intervention attributes.

    Emits [1, v_1, v_1^2, ..., v_1^degree, v_2, ...] plus optional pairwise
    products of raw coordinates.  ``degree=0`` gives an intercept-only map.
    """

    n_dim: int
    degree: int = 3
    interaction_pairs: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self) -> None:
        if self.degree < 0:
            raise ValidationError("polynomial degree must be >= 0")
        if self.n_dim < 0:
            raise ValidationError("n_dim must be >= 0")
        for i, j in self.interaction_pairs:
            if not (0 <= i < self.n_dim and 0 <= j < self.n_dim):
                raise ValidationError(f"interaction pair ({i}, {j}) out of range")

    @property
    def n_features(self) -> int:
        return 1 + self.n_dim * self.degree + len(self.interaction_pairs)

    def transform(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            v = v[:, None] if self.n_dim == 1 else v[None, :]
        if v.shape[1] != self.n_dim:
            raise ValidationError(
                f"attributes have {v.shape[1]} coordinates, map expects {self.n_dim}"
            )
        cols = [np.ones((v.shape[0], 1))]
        for d in range(self.n_dim):
            for power in range(1, self.degree + 1):
                cols.append((v[:, d] ** power)[:, None])
        for i, j in self.interaction_pairs:
            cols.append((v[:, i] * v[:, j])[:, None])
        return np.hstack(cols)
