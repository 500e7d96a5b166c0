"""Fusing observational and randomized effect estimates by optimal shrinkage.

The observational (doubly robust) estimates are biased but precise; the
randomized estimates are unbiased but noisy and only exist for interventions
that have been randomized.  A regression of the obs-minus-randomized gap on
intervention features yields a fitted bias vector; subtracting a fraction
``1 - lam`` of it interpolates between the raw observational estimate
(``lam = 1``) and the fully debiased one (``lam = 0``).  The shrinkage weight
is chosen to minimize an estimate of the quadratic risk, which is an exact
quadratic in ``lam`` and so has a closed-form minimizer.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .data_model import EstimateState, InterventionCatalog, LossWeights
from .errors import (
    DecompositionError,
    DegenerateBiasError,
    IdentifiabilityError,
    InsufficientDataError,
    MaskedVarianceError,
    ValidationError,
)

__all__ = [
    "BiasFit",
    "Diagonalization",
    "FusionResult",
    "fit_bias",
    "hat_matrix_for_support",
    "fully_debiased",
    "debiased_cov",
    "assemble_cov",
    "simultaneous_diagonalize",
    "estimated_risk",
    "optimal_shrinkage",
    "ShrinkageChoice",
    "shrink",
    "analytic_risk",
    "risk_curve",
    "fuse",
]

#: Eigenvalues of an assembled covariance may dip this far below zero before
#: the assembly is considered broken rather than merely rounded.
EIG_FLOOR = -1e-10


def _collinear_columns(m: np.ndarray) -> list[int]:
    """Indices of columns beyond the numerical rank, via pivoted QR."""
    from scipy.linalg import qr

    r, piv = qr(m, mode="r", pivoting=True)[0:2]
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(m.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int((diag > tol).sum())
    return sorted(int(c) for c in piv[rank:])


@dataclass(frozen=True)
class BiasFit:
    """Least-squares fit of the obs-minus-randomized gap on features.

    coef:        (p_v,) regression coefficients.
    hat_matrix:  (J, J) matrix mapping the gap vector (zero-filled outside the
                 support) to fitted bias values for every intervention.
                 Columns outside the support are zero.
    fitted_bias: (J,) fitted bias for every intervention.
    support:     interventions whose gap entered the regression.
    """

    coef: np.ndarray
    hat_matrix: np.ndarray
    fitted_bias: np.ndarray
    support: frozenset[int]

    def __post_init__(self) -> None:
        for name in ("coef", "hat_matrix", "fitted_bias"):
            getattr(self, name).setflags(write=False)


def hat_matrix_for_support(features: np.ndarray, support: frozenset[int] | set[int]) -> np.ndarray:
    """Hat matrix of the bias regression restricted to a support set.

    H = F (F_S' F_S)^{-1} F~_S' where F_S stacks the support rows of the
    feature matrix F and F~_S is F with non-support rows zeroed.  H F = F,
    and columns outside the support are identically zero.
    """
    f = np.asarray(features, dtype=float)
    rows = sorted(int(j) for j in support)
    if any(j < 0 or j >= f.shape[0] for j in rows):
        raise ValidationError("support contains an out-of-range intervention")
    p = f.shape[1]
    if len(rows) < p:
        raise InsufficientDataError(
            f"support of size {len(rows)} cannot identify {p} feature coefficients"
        )
    f_s = f[rows]
    gram = f_s.T @ f_s
    try:
        solved = np.linalg.solve(gram, f_s.T)  # (p, |S|)
    except np.linalg.LinAlgError:
        cols = _collinear_columns(f_s)
        raise IdentifiabilityError(
            f"singular feature gram matrix on the support; collinear columns {cols}",
            columns=cols,
        ) from None
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        cols = _collinear_columns(f_s)
        raise IdentifiabilityError(
            f"feature gram matrix is numerically singular (cond {cond:.2e}); "
            f"collinear columns {cols}",
            columns=cols,
        )
    h = np.zeros((f.shape[0], f.shape[0]))
    h[:, rows] = f @ solved
    return h


def fit_bias(state: EstimateState, catalog: InterventionCatalog) -> BiasFit:
    """Regress tau_obs - tau_rct on intervention features over the support.

    Requires at least p_v randomized interventions; raises an
    identifiability error if their feature rows are collinear.
    """
    if catalog.n_interventions != state.n_interventions:
        raise ValidationError("catalog and state disagree on the number of interventions")
    support = state.ever_selected
    feats = catalog.features
    rows = sorted(support)
    f_s = feats[rows]
    if len(rows) < feats.shape[1]:
        raise InsufficientDataError(
            f"{len(rows)} randomized interventions cannot identify "
            f"{feats.shape[1]} bias coefficients"
        )
    h = hat_matrix_for_support(feats, support)
    gap = state.tau_obs[rows] - state.tau_rct[rows]
    gram = f_s.T @ f_s
    coef = np.linalg.solve(gram, f_s.T @ gap)
    fitted = feats @ coef
    return BiasFit(coef=coef, hat_matrix=h, fitted_bias=fitted, support=support)


def fully_debiased(state: EstimateState, bias: BiasFit) -> np.ndarray:
    """Observational estimates minus the full fitted bias."""
    return state.tau_obs - bias.fitted_bias


def _floor_eigenvalues(sigma: np.ndarray) -> np.ndarray:
    """Clip rounding-level negative eigenvalues to zero; reject real ones."""
    sym = (sigma + sigma.T) / 2.0
    eigvals = np.linalg.eigvalsh(sym)
    low = float(eigvals.min())
    if low < EIG_FLOOR:
        raise DecompositionError(
            f"assembled covariance has eigenvalue {low:.3e} below the {EIG_FLOOR:g} floor"
        )
    if low < 0.0:
        vals, vecs = np.linalg.eigh(sym)
        vals = np.clip(vals, 0.0, None)
        sym = (vecs * vals) @ vecs.T
        sym = (sym + sym.T) / 2.0
    return sym


def assemble_cov(
    dr_cov: np.ndarray,
    hat_matrix: np.ndarray,
    rct_var: np.ndarray,
    rct_mask: np.ndarray,
) -> np.ndarray:
    """Covariance of the fully debiased estimator.

    (I - H) G (I - H)' + H diag(u) H', with masked variance entries set to
    zero.  A masked entry under a nonzero column of H would silently corrupt
    the result, so that combination is rejected.
    """
    j = dr_cov.shape[0]
    h = np.asarray(hat_matrix, dtype=float)
    u = np.where(rct_mask, rct_var, 0.0)
    col_used = (np.abs(h) > 0).any(axis=0)
    if (col_used & ~np.asarray(rct_mask, dtype=bool)).any():
        bad = np.flatnonzero(col_used & ~rct_mask).tolist()
        raise MaskedVarianceError(
            f"hat matrix uses masked randomized variances for interventions {bad}"
        )
    i_h = np.eye(j) - h
    sigma = i_h @ dr_cov @ i_h.T + (h * u) @ h.T
    return _floor_eigenvalues(sigma)


def debiased_cov(state: EstimateState, bias: BiasFit) -> np.ndarray:
    """Plug-in covariance of the fully debiased estimator for this state."""
    return assemble_cov(state.dr_cov, bias.hat_matrix, state.rct_var, state.rct_mask)


@dataclass(frozen=True)
class Diagonalization:
    """Joint transform making the covariance white and the weights diagonal.

    ``transform @ sigma @ transform.T = I`` and
    ``inv(transform).T @ weights @ inv(transform) = diag(scale)``.
    """

    transform: np.ndarray
    scale: np.ndarray

    def __post_init__(self) -> None:
        self.transform.setflags(write=False)
        self.scale.setflags(write=False)


def simultaneous_diagonalize(sigma: np.ndarray, weights: np.ndarray) -> Diagonalization:
    """Simultaneously whiten an SPD covariance and diagonalize the weights.

    Factor sigma = C'C by Cholesky, take the orthogonal eigenbasis O of
    C D C', and return transform = O' inv(C').  The scale vector sums to
    tr(D sigma).
    """
    s = np.asarray(sigma, dtype=float)
    d = np.asarray(weights, dtype=float)
    if s.shape != d.shape or s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValidationError("sigma and weights must be square matrices of equal size")
    try:
        c_upper = cholesky((s + s.T) / 2.0, lower=False)  # sigma = C'C with C upper
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"covariance is not positive definite: {exc}") from None
    m = c_upper @ d @ c_upper.T
    scale, o = np.linalg.eigh((m + m.T) / 2.0)
    # transform = O' inv(C') ; solve C' X = I for X instead of forming inverses
    inv_ct = solve_triangular(c_upper.T, np.eye(s.shape[0]), lower=True)
    return Diagonalization(transform=o.T @ inv_ct, scale=scale)


def _risk_terms(
    weights: np.ndarray,
    sigma: np.ndarray,
    dr_cov: np.ndarray,
    hat_matrix: np.ndarray,
) -> tuple[float, float]:
    """Constant term tr(D sigma) and half the linear coefficient of the risk.

    The linear half is tr(D G (I - H)') - tr(D sigma): the covariance between
    the fitted-bias correction and the debiased estimate.
    """
    c0 = float(np.sum(weights * sigma.T))  # tr(D sigma), both symmetric in use
    i_h = np.eye(hat_matrix.shape[0]) - hat_matrix
    cross = float(np.sum((weights @ dr_cov) * i_h))  # tr(D G (I-H)')
    return c0, cross - c0


def estimated_risk(
    state: EstimateState,
    bias: BiasFit,
    sigma: np.ndarray,
    lam: float,
    weights: LossWeights,
) -> float:
    """Estimated weighted risk of the shrunk estimator at a given weight.

    tr(D sigma) + lam^2 b'Db + 2 lam [tr(D G (I-H)') - tr(D sigma)], where b
    is the fitted bias vector.  Exact quadratic in lam.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"shrinkage weight must lie in [0, 1], got {lam}")
    c0, lin = _risk_terms(weights.matrix, sigma, state.dr_cov, bias.hat_matrix)
    b = bias.fitted_bias
    quad = float(b @ weights.matrix @ b)
    return c0 + lam * lam * quad + 2.0 * lam * lin


class ShrinkageChoice(NamedTuple):
    lambda_hat: float
    eure: float
    lambda_raw: float
    numerator: float
    denominator: float


def optimal_shrinkage(
    state: EstimateState,
    bias: BiasFit,
    sigma: np.ndarray,
    weights: LossWeights,
) -> ShrinkageChoice:
    """Closed-form minimizer of the estimated risk, clamped to [0, 1].

    The raw minimizer is [tr(D sigma) - tr(D G (I-H)')] / b'Db.  At an
    interior minimizer the attained risk is tr(D sigma) - numerator^2 / b'Db.
    A zero fitted bias leaves the weight undefined.
    """
    c0, lin = _risk_terms(weights.matrix, sigma, state.dr_cov, bias.hat_matrix)
    b = bias.fitted_bias
    den = float(b @ weights.matrix @ b)
    if den == 0.0:
        raise DegenerateBiasError(
            "fitted bias is exactly zero; shrinkage weight undefined (use lam = 1)"
        )
    num = -lin
    raw = num / den
    lam = min(1.0, max(0.0, raw))
    risk = c0 + lam * lam * den + 2.0 * lam * lin
    return ShrinkageChoice(lam, risk, raw, num, den)


def shrink(state: EstimateState, bias: BiasFit, lam: float) -> np.ndarray:
    """Observational estimates with a (1 - lam) fraction of the bias removed."""
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"shrinkage weight must lie in [0, 1], got {lam}")
    return state.tau_obs - (1.0 - lam) * bias.fitted_bias


def analytic_risk(
    weights: LossWeights,
    sigma: np.ndarray,
    lam: float,
    bias_truth: np.ndarray,
    *,
    dr_cov: np.ndarray | None = None,
    hat_matrix: np.ndarray | None = None,
) -> float:
    """Per-coordinate risk with a known bias vector; testing oracle.

    Computed via the simultaneous diagonalization route:
    (1/p) [sum(scale) + lam^2 (Omega b)' diag(scale) (Omega b) + 2 lam cross]
    with cross = tr(D G (I-H)') - tr(D sigma).  When ``dr_cov`` and
    ``hat_matrix`` are omitted the cross term is zero (G = sigma, H = 0):
    that is the structure Monte-Carlo checks simulate directly.

    This function exists to validate the estimated-risk machinery in tests;
    it is not part of the estimation pipeline.
    """
    b = np.asarray(bias_truth, dtype=float)
    p = b.shape[0]
    diag = simultaneous_diagonalize(sigma, weights.matrix)
    ob = diag.transform @ b
    quad = float(ob @ (diag.scale * ob))
    if dr_cov is None and hat_matrix is None:
        cross = 0.0
    else:
        g = sigma if dr_cov is None else np.asarray(dr_cov, dtype=float)
        h = np.zeros((p, p)) if hat_matrix is None else np.asarray(hat_matrix, dtype=float)
        cross = _risk_terms(weights.matrix, np.asarray(sigma, dtype=float), g, h)[1]
    return (float(diag.scale.sum()) + lam * lam * quad + 2.0 * lam * cross) / p


def risk_curve(
    state: EstimateState,
    bias: BiasFit,
    sigma: np.ndarray,
    weights: LossWeights,
    n_points: int = 101,
) -> np.ndarray:
    """Sample the risk quadratic on an even grid over [0, 1].

    Returns an (n_points, 2) array with columns (lam, risk).
    """
    if n_points < 2:
        raise ValidationError("need at least two grid points")
    c0, lin = _risk_terms(weights.matrix, sigma, state.dr_cov, bias.hat_matrix)
    b = bias.fitted_bias
    quad = float(b @ weights.matrix @ b)
    lams = np.linspace(0.0, 1.0, n_points)
    risks = c0 + lams * lams * quad + 2.0 * lams * lin
    return np.column_stack([lams, risks])


@dataclass(frozen=True)
class FusionResult:
    """Everything the fusion step produces for one state."""

    tau_fused: np.ndarray
    lambda_hat: float
    lambda_raw: float
    eure: float
    sigma: np.ndarray
    bias: BiasFit
    degenerate_bias: bool
    curve: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.tau_fused.setflags(write=False)
        self.sigma.setflags(write=False)
        if self.curve is not None:
            self.curve.setflags(write=False)


def fuse(
    state: EstimateState,
    catalog: InterventionCatalog,
    weights: LossWeights,
    *,
    curve_points: int | None = None,
) -> FusionResult:
    """Run the full fusion step: bias fit, covariance, weight choice, shrink.

    A zero fitted bias (nothing to shrink away) falls back to ``lam = 1``
    with a warning instead of failing.
    """
    bias = fit_bias(state, catalog)
    sigma = debiased_cov(state, bias)
    degenerate = False
    try:
        choice = optimal_shrinkage(state, bias, sigma, weights)
        lam, lam_raw, risk = choice.lambda_hat, choice.lambda_raw, choice.eure
    except DegenerateBiasError:
        warnings.warn(
            "fitted bias is exactly zero; using lam = 1 (observational estimate)",
            stacklevel=2,
        )
        degenerate = True
        lam, lam_raw = 1.0, float("nan")
        risk = estimated_risk(state, bias, sigma, lam, weights)
    tau = shrink(state, bias, lam)
    curve = (
        risk_curve(state, bias, sigma, weights, curve_points)
        if curve_points is not None
        else None
    )
    return FusionResult(
        tau_fused=tau,
        lambda_hat=lam,
        lambda_raw=lam_raw,
        eure=risk,
        sigma=sigma,
        bias=bias,
        degenerate_bias=degenerate,
        curve=curve,
    )
