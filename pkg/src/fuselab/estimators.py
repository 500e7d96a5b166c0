"""Per-intervention effect estimators and their covariance plug-ins.

Randomized rounds yield difference-in-means estimates per intervention,
pooled over every round that randomized it.  Observational rounds yield
doubly robust (augmented inverse-propensity) estimates built from a marginal
logistic propensity model per intervention and per-arm least-squares outcome
models, all on a shared spline basis of the unit context.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .basis import SplineBasis, SplineSpec, fit_basis
from .data_model import EstimateState, ObservationalRound, RctRound
from .errors import (
    FitError,
    IdentifiabilityError,
    InsufficientDataError,
    ValidationError,
)
from .fusion import _collinear_columns

__all__ = [
    "RctEstimate",
    "PropensityModel",
    "OutcomeModel",
    "rct_estimate",
    "rct_estimates",
    "fit_propensity",
    "fit_outcome",
    "dr_estimate",
    "influence_matrix",
    "dr_covariance",
    "build_estimate_state",
]


class RctEstimate(NamedTuple):
    tau: float
    var: float
    n: int


def _pool_rct(rounds: Sequence[RctRound], j: int):
    ys, arms = [], []
    for rnd in rounds:
        hit = rnd.w == j
        if hit.any():
            ys.append(rnd.y[hit])
            arms.append(rnd.a[hit, j])
    if not ys:
        raise InsufficientDataError(f"intervention {j} was never randomized")
    return np.concatenate(ys), np.concatenate(arms)


def rct_estimate(rounds: Sequence[RctRound], j: int) -> RctEstimate:
    """Difference in means for intervention j over its randomized records.

    Variance is the two-sample formula s1^2/n1 + s0^2/n0 with unbiased
    (n - 1) sample variances; a single-record arm contributes zero.
    """
    y, a = _pool_rct(rounds, j)
    y1, y0 = y[a == 1], y[a == 0]
    if y1.size == 0 or y0.size == 0:
        raise InsufficientDataError(
            f"intervention {j}: need at least one treated and one control record "
            f"(got {y1.size} treated, {y0.size} control)"
        )
    tau = float(y1.mean() - y0.mean())
    s1 = float(y1.var(ddof=1)) if y1.size > 1 else 0.0
    s0 = float(y0.var(ddof=1)) if y0.size > 1 else 0.0
    return RctEstimate(tau, s1 / y1.size + s0 / y0.size, int(y.size))


def rct_estimates(
    rounds: Sequence[RctRound], n_interventions: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pooled estimates for every ever-randomized intervention.

    Returns (tau, var, mask, r_counts); tau/var are zero-filled where the
    mask is False.  r_counts[j] sums the full sizes of the rounds whose
    selected set contains j.
    """
    tau = np.zeros(n_interventions)
    var = np.zeros(n_interventions)
    r_counts = np.zeros(n_interventions, dtype=np.int64)
    for rnd in rounds:
        for j in rnd.selected_set:
            r_counts[j] += rnd.n
    mask = r_counts > 0
    for j in np.flatnonzero(mask):
        est = rct_estimate(rounds, int(j))
        tau[j], var[j] = est.tau, est.var
    return tau, var, mask, r_counts


# ---------------------------------------------------------------------------
# Nuisance models


@dataclass(frozen=True)
class PropensityModel:
    """Marginal logistic models P(A_j = 1 | context), one per intervention.

    coef[j] are the logistic coefficients on the spline design; cov[j] is the
    sandwich covariance of coef[j] when requested at fit time.
    """

    basis: SplineBasis
    coef: np.ndarray
    clip: float
    n_iter: np.ndarray
    cov: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.coef.setflags(write=False)
        self.n_iter.setflags(write=False)
        if self.cov is not None:
            self.cov.setflags(write=False)

    def probabilities(self, x: np.ndarray, *, clipped: bool = True) -> np.ndarray:
        """(n, J) assignment probabilities; clipped into [clip, 1-clip] by default."""
        eta = self.basis.transform(x) @ self.coef.T
        p = expit(eta)
        if clipped:
            p = np.clip(p, self.clip, 1.0 - self.clip)
        return p

    def standard_errors(self, j: int) -> np.ndarray:
        if self.cov is None:
            raise ValidationError("model was fit without covariance estimation")
        return np.sqrt(np.diag(self.cov[j]))


def _nll(eta: np.ndarray, a: np.ndarray) -> float:
    # log(1 + e^eta) - a*eta, summed; logaddexp keeps large |eta| finite
    return float(np.sum(np.logaddexp(0.0, eta) - a * eta))


def _fit_logistic(
    phi: np.ndarray, a: np.ndarray, tol: float, max_iter: int
) -> tuple[np.ndarray, int]:
    """Damped Newton for one logistic regression.

    Convergence: per-record mean gradient below ``tol`` in sup norm.
    Raises on non-convergence (the usual cause is separation).
    """
    n, p = phi.shape
    beta = np.zeros(p)
    eta = phi @ beta
    nll = _nll(eta, a)
    for it in range(1, max_iter + 1):
        prob = expit(eta)
        grad = phi.T @ (prob - a)
        if np.max(np.abs(grad)) / n < tol:
            return beta, it - 1
        w = prob * (1.0 - prob)
        hess = (phi * w[:, None]).T @ phi
        hess[np.diag_indices_from(hess)] += 1e-10
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise FitError("singular Hessian in logistic fit") from None
        size = 1.0
        for _ in range(40):
            cand = beta - size * step
            eta_c = phi @ cand
            nll_c = _nll(eta_c, a)
            if nll_c < nll:
                beta, eta, nll = cand, eta_c, nll_c
                break
            size /= 2.0
        else:
            raise FitError(
                f"logistic line search stalled (gradient sup {np.max(np.abs(grad)) / n:.2e})"
            )
    raise FitError(
        f"logistic fit did not converge in {max_iter} iterations "
        f"(coefficient norm {np.linalg.norm(beta):.2e}; possible separation)"
    )


def _stack_obs(rounds: Sequence[ObservationalRound]):
    if not rounds:
        raise InsufficientDataError("no observational rounds")
    j = rounds[0].n_interventions
    p = rounds[0].x.shape[1]
    for rnd in rounds:
        if rnd.n_interventions != j or rnd.x.shape[1] != p:
            raise ValidationError("rounds disagree on dimensions")
    y = np.concatenate([r.y for r in rounds])
    x = np.vstack([r.x for r in rounds])
    a = np.vstack([r.a for r in rounds])
    return y, x, a


def fit_propensity(
    rounds: Sequence[ObservationalRound],
    spec: SplineSpec | SplineBasis,
    *,
    clip: float = 0.01,
    tol: float = 1e-8,
    max_iter: int = 100,
    with_cov: bool = False,
) -> PropensityModel:
    """Fit per-intervention logistic propensities on a shared spline basis.

    An intervention whose assignment column is constant cannot be fit and is
    reported as degenerate.  ``with_cov`` adds per-intervention sandwich
    covariances of the coefficients.
    """
    if not 0.0 < clip < 0.5:
        raise ValidationError("clip must lie in (0, 0.5)")
    _, x, a = _stack_obs(rounds)
    basis = spec if isinstance(spec, SplineBasis) else fit_basis(x, spec)
    phi = basis.transform(x)
    n, p = phi.shape
    n_arms = a.shape[1]
    coef = np.zeros((n_arms, p))
    iters = np.zeros(n_arms, dtype=np.int64)
    covs = np.zeros((n_arms, p, p)) if with_cov else None
    for j in range(n_arms):
        col = a[:, j].astype(float)
        if col.min() == col.max():
            raise FitError(f"intervention {j}: assignment column is constant")
        try:
            coef[j], iters[j] = _fit_logistic(phi, col, tol, max_iter)
        except FitError as exc:
            raise FitError(f"intervention {j}: {exc}") from None
        if with_cov:
            prob = 1.0 / (1.0 + np.exp(-(phi @ coef[j])))
            w = prob * (1.0 - prob)
            hess = (phi * w[:, None]).T @ phi
            score = phi * (col - prob)[:, None]
            meat = score.T @ score
            hinv = np.linalg.inv(hess + 1e-10 * np.eye(p))
            covs[j] = hinv @ meat @ hinv
    return PropensityModel(basis=basis, coef=coef, clip=clip, n_iter=iters, cov=covs)


@dataclass(frozen=True)
class OutcomeModel:
    """Per-intervention, per-arm least-squares outcome regressions.

    coef_treated[j] / coef_control[j] are coefficients on the spline design
    for records with A_j = 1 / A_j = 0.
    """

    basis: SplineBasis
    coef_treated: np.ndarray
    coef_control: np.ndarray

    def __post_init__(self) -> None:
        self.coef_treated.setflags(write=False)
        self.coef_control.setflags(write=False)

    def predict(self, x: np.ndarray, j: int, arm: int) -> np.ndarray:
        phi = self.basis.transform(x)
        c = self.coef_treated[j] if arm == 1 else self.coef_control[j]
        return phi @ c


def _lstsq_checked(phi: np.ndarray, y: np.ndarray, what: str) -> np.ndarray:
    if phi.shape[0] < phi.shape[1]:
        raise InsufficientDataError(
            f"{what}: {phi.shape[0]} records cannot fit {phi.shape[1]} coefficients"
        )
    coef, _, rank, _ = np.linalg.lstsq(phi, y, rcond=None)
    if rank < phi.shape[1]:
        cols = _collinear_columns(phi)
        raise IdentifiabilityError(
            f"{what}: design is rank deficient; collinear columns {cols}", columns=cols
        )
    return coef


def fit_outcome(
    rounds: Sequence[ObservationalRound],
    spec: SplineSpec | SplineBasis,
) -> OutcomeModel:
    """Fit both arm regressions for every intervention on a shared basis."""
    y, x, a = _stack_obs(rounds)
    basis = spec if isinstance(spec, SplineBasis) else fit_basis(x, spec)
    phi = basis.transform(x)
    p = phi.shape[1]
    n_arms = a.shape[1]
    c1 = np.zeros((n_arms, p))
    c0 = np.zeros((n_arms, p))
    for j in range(n_arms):
        treated = a[:, j] == 1
        c1[j] = _lstsq_checked(phi[treated], y[treated], f"intervention {j}, treated arm")
        c0[j] = _lstsq_checked(phi[~treated], y[~treated], f"intervention {j}, control arm")
    return OutcomeModel(basis=basis, coef_treated=c1, coef_control=c0)


def influence_matrix(
    rounds: Sequence[ObservationalRound],
    propensity: PropensityModel,
    outcome: OutcomeModel,
) -> np.ndarray:
    """(n, J) per-record contributions to the doubly robust estimates.

    Row means are the estimates themselves; their empirical covariance drives
    the finite-sample covariance plug-in.
    """
    y, x, a = _stack_obs(rounds)
    e = propensity.probabilities(x)  # clipped
    phi = outcome.basis.transform(x)
    m1 = phi @ outcome.coef_treated.T
    m0 = phi @ outcome.coef_control.T
    a = a.astype(float)
    resid = y[:, None]
    return m1 + a * (resid - m1) / e - (m0 + (1.0 - a) * (resid - m0) / (1.0 - e))


def dr_estimate(
    rounds: Sequence[ObservationalRound],
    propensity: PropensityModel,
    outcome: OutcomeModel,
    j: int | None = None,
):
    """Doubly robust effect estimate(s) from pooled observational rounds.

    With ``j`` given returns a float for that intervention; otherwise the
    full length-J vector.
    """
    contrib = influence_matrix(rounds, propensity, outcome)
    means = contrib.mean(axis=0)
    return float(means[j]) if j is not None else means


def dr_covariance(
    rounds: Sequence[ObservationalRound],
    propensity: PropensityModel,
    outcome: OutcomeModel,
) -> np.ndarray:
    """Finite-sample covariance of the DR estimates.

    Empirical covariance (1/N normalization) of the per-record contributions,
    divided by the pooled record count: duplicating every record exactly
    halves each entry.
    """
    contrib = influence_matrix(rounds, propensity, outcome)
    n = contrib.shape[0]
    centered = contrib - contrib.mean(axis=0)
    return (centered.T @ centered) / (n * n)


def build_estimate_state(
    obs_rounds: Sequence[ObservationalRound],
    rct_rounds: Sequence[RctRound],
    spec: SplineSpec,
    *,
    clip: float = 0.01,
) -> EstimateState:
    """Pool all rounds and assemble the fusion-ready state.

    Fits the spline basis once on pooled observational contexts and shares it
    between the propensity and outcome models.
    """
    if not obs_rounds:
        raise InsufficientDataError("no observational rounds")
    if not rct_rounds:
        raise InsufficientDataError("no randomized rounds")
    n_arms = obs_rounds[0].n_interventions
    for rnd in rct_rounds:
        if rnd.n_interventions != n_arms:
            raise ValidationError("rounds disagree on the number of interventions")
    _, x, _ = _stack_obs(obs_rounds)
    basis = fit_basis(x, spec)
    propensity = fit_propensity(obs_rounds, basis, clip=clip)
    outcome = fit_outcome(obs_rounds, basis)
    contrib = influence_matrix(obs_rounds, propensity, outcome)
    tau_obs = contrib.mean(axis=0)
    n = contrib.shape[0]
    centered = contrib - tau_obs
    cov = (centered.T @ centered) / (n * n)
    tau_rct, rct_var, mask, r_counts = rct_estimates(rct_rounds, n_arms)
    history = tuple(r.selected_set for r in rct_rounds)
    return EstimateState(
        tau_obs=tau_obs,
        dr_cov=cov,
        tau_rct=tau_rct,
        rct_mask=mask,
        rct_var=rct_var,
        r_counts=r_counts,
        selected_history=history,
    )
