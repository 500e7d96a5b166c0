"""Sequential selection of which interventions to randomize next.

A hierarchical model tracks each intervention's randomized-arm variance on
the asymptotic (sample-size-free) scale: the variance is inverse-gamma with
shape ``alpha`` and a scale parameter that is itself gamma distributed.  Each
round the posterior is updated from the observed finite-sample variances,
one variance per intervention is sampled (Thompson) or set optimistically
(UCB), and each candidate is scored by the estimated fusion risk it would
produce next round.  The chosen set minimizes that score.

Score semantics per method (the chosen set is always the n smallest scores,
ties broken toward the lower index):

* ``thompson`` / ``ucb``: the candidate's next-stage estimated risk.
* ``random``: the candidate's position in a seeded random ordering (plus an
  offset pushing already-chosen interventions back in without-replacement
  mode).
* ``dopt``: ordinal ranks; chosen candidates carry their greedy pick step,
  the rest follow by descending determinant gain, already-selected ones last.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data_model import EstimateState, InterventionCatalog, LossWeights
from .errors import DomainError, MaskedVarianceError, ParseError, ValidationError
from .fusion import BiasFit, _risk_terms, assemble_cov, hat_matrix_for_support

__all__ = [
    "Hyperparams",
    "DesignPosterior",
    "SelectionDecision",
    "posterior_update",
    "posterior_moments",
    "sample_variances",
    "next_stage_risk",
    "select_thompson",
    "select_ucb",
    "select_random",
    "select_dopt",
    "save_decision_log",
    "load_decision_log",
]


@dataclass(frozen=True)
class Hyperparams:
    """Hyperparameters of the hierarchical variance model.

    alpha:        inverse-gamma shape of each variance given its scale.
    prior_shape:  gamma shape of the scale parameter's prior.
    prior_rate:   gamma rate of the scale parameter's prior.
    ucb_multiplier: optimism width used by the UCB selector.
    """

    alpha: float = 5.0
    prior_shape: float = 10.0
    prior_rate: float = 0.05
    ucb_multiplier: float = 1.0

    def __post_init__(self) -> None:
        if self.alpha <= 1.0:
            raise DomainError("alpha must exceed 1 for the variance mean to exist")
        if self.prior_shape <= 0 or self.prior_rate <= 0:
            raise DomainError("prior shape and rate must be positive")
        if self.ucb_multiplier < 0:
            raise DomainError("ucb_multiplier must be >= 0")


@dataclass(frozen=True)
class DesignPosterior:
    """Per-intervention gamma posterior over the variance scale parameter."""

    shape: np.ndarray
    rate: np.ndarray

    def __post_init__(self) -> None:
        self.shape.setflags(write=False)
        self.rate.setflags(write=False)

    @property
    def n_interventions(self) -> int:
        return self.shape.shape[0]


def posterior_update(state: EstimateState, hyper: Hyperparams) -> DesignPosterior:
    """Conjugate-style update from observed finite-sample variances.

    shape_j = prior_shape + r_j * alpha; rate_j = prior_rate + 1/var_j for
    randomized interventions, prior values otherwise.
    """
    var = state.rct_var
    mask = state.rct_mask
    if (var[mask] <= 0).any():
        bad = np.flatnonzero(mask & (var <= 0)).tolist()
        raise DomainError(
            f"non-positive randomized variances for interventions {bad}; "
            "the posterior update needs a positive variance estimate"
        )
    shape = hyper.prior_shape + state.r_counts.astype(float) * hyper.alpha
    rate = np.full(state.n_interventions, hyper.prior_rate)
    rate[mask] += 1.0 / var[mask]
    return DesignPosterior(shape=shape, rate=rate)


def posterior_moments(
    post: DesignPosterior, hyper: Hyperparams
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard deviation of each asymptotic-scale variance.

    Mean exists for alpha > 1, standard deviation for alpha > 2.
    """
    a = hyper.alpha
    mean = post.shape / (post.rate * (a - 1.0))
    if a <= 2.0:
        raise DomainError("alpha must exceed 2 for the variance to have a moment of order 2")
    # var = E[var | scale] + var(E[· | scale]) over the gamma posterior
    var = (post.shape * (post.shape + 1.0)) / (post.rate**2 * (a - 1.0) ** 2 * (a - 2.0)) + (
        post.shape / (post.rate**2 * (a - 1.0) ** 2)
    )
    return mean, np.sqrt(var)


def sample_variances(
    post: DesignPosterior, hyper: Hyperparams, rng: np.random.Generator
) -> np.ndarray:
    """One asymptotic-scale variance draw per intervention.

    Draw the scale from its gamma posterior, then the variance from the
    inverse gamma it indexes.  Callers draw once per round and reuse the
    draws across candidates.
    """
    beta = rng.gamma(post.shape, 1.0 / post.rate)
    return beta / rng.gamma(hyper.alpha, 1.0, size=post.n_interventions)


def next_stage_risk(
    state: EstimateState,
    bias: BiasFit,
    catalog: InterventionCatalog,
    weights: LossWeights,
    sampled_var: np.ndarray,
    k: int,
    l_next: int,
    lambda_fixed: float,
) -> float:
    """Estimated fusion risk next round if candidate k is randomized.

    Each intervention's next-stage variance is its sampled asymptotic
    variance divided by its randomized count, the candidate's count grown by
    ``l_next``.  The debiased covariance is reassembled on the support
    augmented with the candidate (identical to the current hat matrix when
    the candidate has been randomized before) and the risk quadratic is
    evaluated at the current shrinkage weight.
    """
    j_all = state.n_interventions
    if not 0 <= k < j_all:
        raise ValidationError(f"candidate {k} out of range")
    if l_next < 0:
        raise ValidationError("l_next must be >= 0")
    if not 0.0 <= lambda_fixed <= 1.0:
        raise ValidationError("lambda_fixed must lie in [0, 1]")
    support = state.ever_selected
    if k in support:
        hat = bias.hat_matrix
        sup_k = support
    else:
        sup_k = frozenset(support | {k})
        hat = hat_matrix_for_support(catalog.features, sup_k)
    counts = state.r_counts.astype(float)
    var_next = np.zeros(j_all)
    mask_next = np.zeros(j_all, dtype=bool)
    for j in sup_k:
        c = counts[j] + (l_next if j == k else 0)
        if c == 0:
            raise MaskedVarianceError(
                f"intervention {j} has no randomized records and none are planned"
            )
        var_next[j] = sampled_var[j] / c
        mask_next[j] = True
    sigma_k = assemble_cov(state.dr_cov, hat, var_next, mask_next)
    c0, lin = _risk_terms(weights.matrix, sigma_k, state.dr_cov, hat)
    b = bias.fitted_bias
    quad = float(b @ weights.matrix @ b)
    return c0 + lambda_fixed * lambda_fixed * quad + 2.0 * lambda_fixed * lin


@dataclass(frozen=True)
class SelectionDecision:
    """Outcome of one selection round.

    ``chosen`` lists the selected interventions in pick order; it always
    equals the n smallest entries of ``scores`` (ties toward lower index).
    """

    method: str
    seed: int
    chosen: tuple[int, ...]
    scores: np.ndarray
    round_index: int = 0

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=float)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "chosen", tuple(int(j) for j in self.chosen))
        if len(set(self.chosen)) != len(self.chosen):
            raise ValidationError("chosen interventions must be distinct")
        expect = tuple(int(i) for i in np.argsort(scores, kind="stable")[: len(self.chosen)])
        if expect != self.chosen:
            raise ValidationError("chosen set must be the n smallest scores")
        scores.setflags(write=False)


def _pick_smallest(scores: np.ndarray, n: int) -> tuple[int, ...]:
    return tuple(int(i) for i in np.argsort(scores, kind="stable")[:n])


def _check_n(n: int, j_all: int) -> None:
    if not 1 <= n <= j_all:
        raise ValidationError(f"cannot select {n} of {j_all} interventions")


def select_thompson(
    state: EstimateState,
    bias: BiasFit,
    catalog: InterventionCatalog,
    weights: LossWeights,
    hyper: Hyperparams,
    n: int,
    l_next: int,
    lambda_fixed: float,
    seed: int,
    round_index: int = 0,
) -> SelectionDecision:
    """Thompson selection: sample variances once, keep the n lowest risks."""
    _check_n(n, state.n_interventions)
    rng = np.random.default_rng(seed)
    post = posterior_update(state, hyper)
    sampled = sample_variances(post, hyper, rng)
    scores = np.array(
        [
            next_stage_risk(state, bias, catalog, weights, sampled, k, l_next, lambda_fixed)
            for k in range(state.n_interventions)
        ]
    )
    return SelectionDecision(
        method="thompson",
        seed=seed,
        chosen=_pick_smallest(scores, n),
        scores=scores,
        round_index=round_index,
    )


def select_ucb(
    state: EstimateState,
    bias: BiasFit,
    catalog: InterventionCatalog,
    weights: LossWeights,
    hyper: Hyperparams,
    n: int,
    l_next: int,
    lambda_fixed: float,
    seed: int,
    round_index: int = 0,
) -> SelectionDecision:
    """Deterministic variant: optimistic variances (mean plus a multiple of
    the posterior spread) replace the Thompson draws; never-randomized
    interventions have the widest posteriors and so the most optimism."""
    _check_n(n, state.n_interventions)
    post = posterior_update(state, hyper)
    mean, sd = posterior_moments(post, hyper)
    optimistic = mean + hyper.ucb_multiplier * sd
    scores = np.array(
        [
            next_stage_risk(state, bias, catalog, weights, optimistic, k, l_next, lambda_fixed)
            for k in range(state.n_interventions)
        ]
    )
    return SelectionDecision(
        method="ucb",
        seed=seed,
        chosen=_pick_smallest(scores, n),
        scores=scores,
        round_index=round_index,
    )


def select_random(
    n_interventions: int,
    n: int,
    seed: int,
    *,
    history: Sequence[frozenset[int] | set[int]] = (),
    without_replacement: bool = False,
    round_index: int = 0,
) -> SelectionDecision:
    """Uniform selection; scores are positions in a seeded random ordering.

    In without-replacement mode, interventions already chosen in past rounds
    are pushed behind never-chosen ones until everything has been chosen once
    (a uniform offset preserves the ordering, so the mode degrades gracefully).
    """
    _check_n(n, n_interventions)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_interventions)
    ranks = np.empty(n_interventions)
    ranks[perm] = np.arange(n_interventions, dtype=float)
    if without_replacement and history:
        done = set().union(*history)
        for j in done:
            ranks[j] += n_interventions
    return SelectionDecision(
        method="random",
        seed=seed,
        chosen=_pick_smallest(ranks, n),
        scores=ranks,
        round_index=round_index,
    )


def select_dopt(
    catalog: InterventionCatalog,
    n: int,
    seed: int,
    *,
    history: Sequence[frozenset[int] | set[int]] = (),
    round_index: int = 0,
) -> SelectionDecision:
    """Greedy determinant maximization over never-randomized interventions.

    Starting from the feature gram matrix of everything randomized so far
    (ridged by 1e-8 so rank-deficient grams have a finite log determinant),
    repeatedly add the unselected feature row with the largest determinant
    gain.  Once every intervention has been randomized at least once the
    remaining picks are delegated to random selection.
    """
    j_all = catalog.n_interventions
    _check_n(n, j_all)
    feats = catalog.features
    p = feats.shape[1]
    done = set().union(*history) if history else set()
    gram = np.zeros((p, p))
    for j in done:
        gram += np.outer(feats[j], feats[j])
    remaining = [j for j in range(j_all) if j not in done]
    picks: list[int] = []
    while len(picks) < n and remaining:
        reg = gram + 1e-8 * np.eye(p)
        gains = np.array(
            [float(feats[j] @ np.linalg.solve(reg, feats[j])) for j in remaining]
        )
        best = remaining[int(np.argmax(gains))]
        picks.append(best)
        gram += np.outer(feats[best], feats[best])
        remaining.remove(best)
    if len(picks) < n:
        # everything has been randomized at least once: fall back to random,
        # skipping what this round already picked
        rng = np.random.default_rng(seed)
        perm = [int(j) for j in rng.permutation(j_all) if j not in picks]
        picks.extend(perm[: n - len(picks)])
    # ordinal scores: pick order first, then remaining never-randomized by
    # final determinant gain, then the already-randomized rest by index
    scores = np.empty(j_all)
    for step, j in enumerate(picks):
        scores[j] = step
    reg = gram + 1e-8 * np.eye(p)
    rest_never = [j for j in remaining if j not in picks]
    rest_never.sort(key=lambda j: (-float(feats[j] @ np.linalg.solve(reg, feats[j])), j))
    rest_done = sorted(j for j in range(j_all) if j in done and j not in picks)
    for offset, j in enumerate(rest_never + rest_done):
        scores[j] = n + offset
    return SelectionDecision(
        method="dopt",
        seed=seed,
        chosen=tuple(picks),
        scores=scores,
        round_index=round_index,
    )


# ---------------------------------------------------------------------------
# Decision log IO


def save_decision_log(decisions: Sequence[SelectionDecision], path: str) -> None:
    """CSV log, one row per round: indices are written 1-based."""
    if not decisions:
        raise ValidationError("nothing to save")
    j_all = decisions[0].scores.shape[0]
    header = ["round", "method", "seed", "chosen_indices"] + [
        f"score_{k}" for k in range(1, j_all + 1)
    ]
    lines = [",".join(header)]
    for d in decisions:
        if d.scores.shape[0] != j_all:
            raise ValidationError("decisions disagree on the number of interventions")
        chosen = ";".join(str(j + 1) for j in d.chosen)
        row = [str(d.round_index), d.method, str(d.seed), chosen]
        row.extend(repr(float(s)) for s in d.scores)
        lines.append(",".join(row))
    from .data_model import atomic_write_text

    atomic_write_text(path, "\n".join(lines) + "\n")


def load_decision_log(path: str) -> list[SelectionDecision]:
    decisions = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", path=path, row=1) from None
        if header[:4] != ["round", "method", "seed", "chosen_indices"]:
            raise ParseError("bad decision log header", path=path, row=1)
        j_all = len(header) - 4
        if [h for h in header[4:]] != [f"score_{k}" for k in range(1, j_all + 1)]:
            raise ParseError("bad score columns", path=path, row=1)
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4 + j_all:
                raise ParseError("wrong field count", path=path, row=rownum)
            try:
                chosen = tuple(int(s) - 1 for s in row[3].split(";") if s)
                decisions.append(
                    SelectionDecision(
                        method=row[1],
                        seed=int(row[2]),
                        chosen=chosen,
                        scores=np.array([float(v) for v in row[4:]]),
                        round_index=int(row[0]),
                    )
                )
            except (ValueError, ValidationError) as exc:
                raise ParseError(f"bad row: {exc}", path=path, row=rownum) from None
    return decisions
