"""Synthetic experiments: data generator, round loop, replication.

The generator produces units with correlated Gaussian contexts, a latent
confounder field over interventions (exponential-kernel Gaussian process on
the intervention index), logistic assignment probabilities tilted by the
confounder, and outcomes that add per-intervention effects, a nonlinear
context term, the confounder, and heteroskedastic arm noise.  True effects
are +effect_size for the first half of the interventions and -effect_size
for the rest; treated-arm noise is low on the first half and high on the
second.

Each experiment runs M rounds.  A round generates one observational batch
and one randomized batch over the currently selected set, re-estimates
everything from all pooled data, fuses, logs the realized loss against the
known truth, and picks the next selected set with the configured selector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from itertools import combinations
from typing import Sequence

import numpy as np

from .basis import PolynomialMap, SplineSpec
from .data_model import (
    EstimateState,
    InterventionCatalog,
    LossWeights,
    ObservationalRound,
    RctRound,
    atomic_write_text,
    identity_weights,
    weighted_loss,
)
from .design import (
    Hyperparams,
    SelectionDecision,
    select_dopt,
    select_random,
    select_thompson,
    select_ucb,
)
from .errors import ConfigError, FuselabError, ParseError
from .estimators import build_estimate_state
from .fusion import fuse

__all__ = [
    "SimConfig",
    "PRESETS",
    "preset",
    "RoundTrace",
    "RunResult",
    "AggregateRow",
    "SELECTOR_NAMES",
    "tau_star",
    "draw_context_cov",
    "confounder_kernel",
    "gen_catalog",
    "gen_observational_round",
    "gen_rct_round",
    "run_experiment",
    "replicate",
    "aggregate",
    "write_trace",
    "read_trace",
    "write_curves",
    "write_aggregate",
    "read_aggregate",
]

SELECTOR_NAMES = ("random", "dopt", "ucb", "thompson")


@dataclass(frozen=True)
class SimConfig:
    """Flat, file-mappable configuration for one synthetic experiment."""

    n_interventions: int = 100
    n_context: int = 5
    n_attributes: int = 3
    n_rounds: int = 20
    obs_per_round: int = 5000
    rct_per_round: int = 2000
    initial_rct_count: int = 15
    n_select: int = 5
    n_reps: int = 100
    seed: int = 0
    # generator
    effect_size: float = 1.0
    treated_noise_low: float = 0.1
    treated_noise_high: float = 1.0
    control_noise: float = 0.1
    context_offdiag: float = 0.15
    context_offdiag_prob: float = 0.7
    kernel_scale: float = 1.0
    kernel_length: float = 5.0
    propensity_coef: float = 0.5
    confounder_loading: float = 2.0
    outcome_conf_coef: float = 0.5
    # estimation
    spline_degree: int = 3
    spline_knots: int = 3
    propensity_clip: float = 0.01
    attr_degree: int = 3
    # design
    alpha: float = 5.0
    prior_shape: float = 10.0
    prior_rate: float = 0.05
    ucb_multiplier: float = 1.0
    random_without_replacement: bool = False

    def __post_init__(self) -> None:
        if self.n_interventions < 2:
            raise ConfigError("need at least two interventions", "n_interventions")
        if not 1 <= self.initial_rct_count <= self.n_interventions:
            raise ConfigError("initial randomized set out of range", "initial_rct_count")
        if not 1 <= self.n_select <= self.n_interventions:
            raise ConfigError("per-round selection size out of range", "n_select")
        if self.n_rounds < 1 or self.n_reps < 1:
            raise ConfigError("rounds and replications must be positive", "n_rounds")
        if min(self.obs_per_round, self.rct_per_round) < 2:
            raise ConfigError("round sizes must be at least 2", "obs_per_round")
        if self.attr_features > self.initial_rct_count:
            raise ConfigError(
                f"bias regression needs {self.attr_features} features but only "
                f"{self.initial_rct_count} interventions are randomized initially",
                "initial_rct_count",
            )
        for name in (
            "effect_size", "treated_noise_low", "treated_noise_high", "control_noise",
            "kernel_scale", "kernel_length",
        ):
            if getattr(self, name) < 0:
                raise ConfigError("generator scales must be >= 0", name)

    @property
    def attr_features(self) -> int:
        return 1 + self.n_attributes * self.attr_degree

    def spline_spec(self) -> SplineSpec:
        return SplineSpec(degree=self.spline_degree, knots_per_dim=self.spline_knots)

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            alpha=self.alpha,
            prior_shape=self.prior_shape,
            prior_rate=self.prior_rate,
            ucb_multiplier=self.ucb_multiplier,
        )

    def weights(self) -> LossWeights:
        return identity_weights(self.n_interventions)


PRESETS: dict[str, SimConfig] = {
    "paper_full": SimConfig(),
    # desk scale: calibrated so early shrinkage stays well below 1/2 on every
    # replication (degree-1 attribute features keep the bias fit conditioned
    # on the 18 initial arms) and the selectors separate within 100 reps
    "desk": SimConfig(
        n_interventions=30,
        n_context=3,
        n_rounds=10,
        obs_per_round=1000,
        rct_per_round=400,
        initial_rct_count=18,
        n_select=3,
        n_reps=100,
        spline_knots=2,
        attr_degree=1,
        kernel_length=30.0,
        confounder_loading=4.0,
    ),
    "smoke": SimConfig(
        n_interventions=5,
        n_context=2,
        n_rounds=2,
        obs_per_round=120,
        rct_per_round=100,
        initial_rct_count=4,
        n_select=1,
        n_reps=2,
        spline_knots=0,
        attr_degree=1,
    ),
}


def preset(name: str) -> SimConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r} (choose from {sorted(PRESETS)})") from None


# ---------------------------------------------------------------------------
# Generator pieces


def tau_star(cfg: SimConfig) -> np.ndarray:
    """True effects: +effect_size on the first half, -effect_size after."""
    j = cfg.n_interventions
    half = math.ceil(j / 2)
    out = np.full(j, -cfg.effect_size)
    out[:half] = cfg.effect_size
    return out


def _treated_noise_var(cfg: SimConfig) -> np.ndarray:
    j = cfg.n_interventions
    half = math.ceil(j / 2)
    out = np.full(j, cfg.treated_noise_high)
    out[:half] = cfg.treated_noise_low
    return out


def draw_context_cov(cfg: SimConfig, rng: np.random.Generator, max_tries: int = 100) -> np.ndarray:
    """Random context covariance: unit diagonal, sparse constant off-diagonal.

    Each off-diagonal pair is ``context_offdiag`` with the configured
    probability, else zero.  Redraw until positive definite (at most
    ``max_tries`` times), then clip eigenvalues at 1e-6 as a last resort.
    """
    p = cfg.n_context
    cov = np.eye(p)
    for _ in range(max_tries):
        cov = np.eye(p)
        iu = np.triu_indices(p, k=1)
        vals = np.where(
            rng.random(len(iu[0])) < cfg.context_offdiag_prob, cfg.context_offdiag, 0.0
        )
        cov[iu] = vals
        cov[(iu[1], iu[0])] = vals
        if np.linalg.eigvalsh(cov).min() > 0:
            return cov
    vals, vecs = np.linalg.eigh(cov)
    return (vecs * np.clip(vals, 1e-6, None)) @ vecs.T


def confounder_kernel(cfg: SimConfig) -> np.ndarray:
    """Exponential kernel over the intervention index grid."""
    idx = np.arange(cfg.n_interventions, dtype=float)
    return cfg.kernel_scale * np.exp(-np.abs(idx[:, None] - idx[None, :]) / cfg.kernel_length)


def gen_catalog(cfg: SimConfig, rng: np.random.Generator) -> InterventionCatalog:
    """Standard-normal intervention attributes with the polynomial feature map."""
    attrs = rng.standard_normal((cfg.n_interventions, cfg.n_attributes))
    return InterventionCatalog(
        attributes=attrs,
        feature_map=PolynomialMap(n_dim=cfg.n_attributes, degree=cfg.attr_degree),
    )


def _h_features(x: np.ndarray) -> np.ndarray:
    """Nonlinear context term: main effects plus pairwise products among the
    first four coordinates, all with unit coefficients."""
    cols = [x]
    k = min(4, x.shape[1])
    for i, j in combinations(range(k), 2):
        cols.append((x[:, i] * x[:, j])[:, None])
    return np.hstack(cols)


def _outcomes(
    cfg: SimConfig,
    x: np.ndarray,
    u: np.ndarray,
    a: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    n = x.shape[0]
    effects = a @ tau_star(cfg)
    context_term = _h_features(x).sum(axis=1)
    conf_term = u.sum(axis=1) * cfg.outcome_conf_coef
    eps1 = rng.standard_normal((n, cfg.n_interventions)) * np.sqrt(_treated_noise_var(cfg))
    eps0 = rng.standard_normal((n, cfg.n_interventions)) * math.sqrt(cfg.control_noise)
    noise = (a * eps1 + (1 - a) * eps0).sum(axis=1)
    return effects + context_term + conf_term + noise


def _contexts_and_confounders(
    cfg: SimConfig,
    n: int,
    ctx_chol: np.ndarray,
    kern_chol: np.ndarray,
    rng: np.random.Generator,
):
    x = rng.standard_normal((n, cfg.n_context)) @ ctx_chol.T
    u = rng.standard_normal((n, cfg.n_interventions)) @ kern_chol.T
    return x, u


def _propensities(cfg: SimConfig, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    eta = (x.sum(axis=1) * cfg.propensity_coef)[:, None] - cfg.confounder_loading * u
    return 1.0 / (1.0 + np.exp(-eta))


def gen_observational_round(
    cfg: SimConfig,
    round_index: int,
    ctx_chol: np.ndarray,
    kern_chol: np.ndarray,
    rng: np.random.Generator,
) -> ObservationalRound:
    n = cfg.obs_per_round
    x, u = _contexts_and_confounders(cfg, n, ctx_chol, kern_chol, rng)
    a = (rng.random((n, cfg.n_interventions)) < _propensities(cfg, x, u)).astype(np.int8)
    y = _outcomes(cfg, x, u, a, rng)
    return ObservationalRound(round_index, y, x, a)


def gen_rct_round(
    cfg: SimConfig,
    round_index: int,
    selected: frozenset[int],
    ctx_chol: np.ndarray,
    kern_chol: np.ndarray,
    rng: np.random.Generator,
) -> RctRound:
    """Randomized batch: uniform focal intervention over the selected set, a
    fair coin for its arm, every other assignment from the observational
    mechanism."""
    n = cfg.rct_per_round
    x, u = _contexts_and_confounders(cfg, n, ctx_chol, kern_chol, rng)
    a = (rng.random((n, cfg.n_interventions)) < _propensities(cfg, x, u)).astype(np.int8)
    w = rng.choice(sorted(selected), size=n)
    a[np.arange(n), w] = (rng.random(n) < 0.5).astype(np.int8)
    y = _outcomes(cfg, x, u, a, rng)
    return RctRound(round_index, y, x, a, w=w, selected_set=selected)


# ---------------------------------------------------------------------------
# Round loop


@dataclass(frozen=True)
class RoundTrace:
    """Per-round log: shrinkage weight, estimated risk, realized losses."""

    round_index: int
    lambda_hat: float
    eure: float
    oracle_loss: float
    cum_loss: float
    chosen: frozenset[int]
    lambda_raw: float = float("nan")
    # risk quadratic: risk(lam) = c0 + c1*lam + c2*lam^2
    curve_c0: float = 0.0
    curve_c1: float = 0.0
    curve_c2: float = 0.0


@dataclass(frozen=True)
class RunResult:
    """One experiment's full log."""

    selector: str
    config: SimConfig
    truth: np.ndarray
    rounds: tuple[RoundTrace, ...]
    decisions: tuple[SelectionDecision, ...]

    def cum_losses(self) -> np.ndarray:
        return np.array([r.cum_loss for r in self.rounds])

    def lambda_hats(self) -> np.ndarray:
        return np.array([r.lambda_hat for r in self.rounds])


def _select_next(
    cfg: SimConfig,
    selector: str,
    state: EstimateState,
    bias,
    catalog: InterventionCatalog,
    weights: LossWeights,
    lambda_fixed: float,
    seed: int,
    round_index: int,
) -> SelectionDecision:
    if selector == "random":
        return select_random(
            cfg.n_interventions,
            cfg.n_select,
            seed,
            history=state.selected_history,
            without_replacement=cfg.random_without_replacement,
            round_index=round_index,
        )
    if selector == "dopt":
        return select_dopt(
            catalog, cfg.n_select, seed, history=state.selected_history,
            round_index=round_index,
        )
    if selector == "thompson":
        return select_thompson(
            state, bias, catalog, weights, cfg.hyperparams(),
            cfg.n_select, cfg.rct_per_round, lambda_fixed, seed, round_index,
        )
    if selector == "ucb":
        return select_ucb(
            state, bias, catalog, weights, cfg.hyperparams(),
            cfg.n_select, cfg.rct_per_round, lambda_fixed, seed, round_index,
        )
    raise ConfigError(f"unknown selector {selector!r} (choose from {SELECTOR_NAMES})")


def run_experiment(cfg: SimConfig, selector: str) -> RunResult:
    """Run one full adaptive experiment; deterministic in (cfg, selector).

    Draw order: catalog attributes, context covariance, initial selected
    set, then per round the observational batch, the randomized batch, and
    one selector seed.
    """
    if selector not in SELECTOR_NAMES:
        raise ConfigError(f"unknown selector {selector!r} (choose from {SELECTOR_NAMES})")
    rng = np.random.default_rng(cfg.seed)
    catalog = gen_catalog(cfg, rng)
    ctx_chol = np.linalg.cholesky(draw_context_cov(cfg, rng))
    kern_chol = np.linalg.cholesky(confounder_kernel(cfg))
    weights = cfg.weights()
    truth = tau_star(cfg)
    spec = cfg.spline_spec()

    selected = frozenset(
        int(j) for j in rng.choice(cfg.n_interventions, cfg.initial_rct_count, replace=False)
    )
    obs_rounds: list[ObservationalRound] = []
    rct_rounds: list[RctRound] = []
    traces: list[RoundTrace] = []
    decisions: list[SelectionDecision] = []
    cum = 0.0
    for m in range(1, cfg.n_rounds + 1):
        obs_rounds.append(gen_observational_round(cfg, m, ctx_chol, kern_chol, rng))
        rct_rounds.append(gen_rct_round(cfg, m, selected, ctx_chol, kern_chol, rng))
        sel_seed = int(rng.integers(2**63))
        state = build_estimate_state(
            obs_rounds, rct_rounds, spec, clip=cfg.propensity_clip
        )
        result = fuse(state, catalog, weights)
        loss = weighted_loss(result.tau_fused, truth, weights)
        cum += loss
        curve_c0, lin = _curve_terms(result, state, weights)
        quad = float(result.bias.fitted_bias @ weights.matrix @ result.bias.fitted_bias)
        decision = _select_next(
            cfg, selector, state, result.bias, catalog, weights,
            result.lambda_hat, sel_seed, m,
        )
        decisions.append(decision)
        traces.append(
            RoundTrace(
                round_index=m,
                lambda_hat=result.lambda_hat,
                eure=result.eure,
                oracle_loss=loss,
                cum_loss=cum,
                chosen=selected,
                lambda_raw=result.lambda_raw,
                curve_c0=curve_c0,
                curve_c1=2.0 * lin,
                curve_c2=quad,
            )
        )
        selected = frozenset(decision.chosen)
    return RunResult(
        selector=selector,
        config=cfg,
        truth=truth,
        rounds=tuple(traces),
        decisions=tuple(decisions),
    )


def _curve_terms(result, state: EstimateState, weights: LossWeights) -> tuple[float, float]:
    from .fusion import _risk_terms

    return _risk_terms(weights.matrix, result.sigma, state.dr_cov, result.bias.hat_matrix)


# ---------------------------------------------------------------------------
# Replication


def _rep_seed(master_seed: int, rep: int) -> int:
    return int(np.random.SeedSequence((master_seed, rep)).generate_state(1, np.uint64)[0])


def _one_task(args: tuple[SimConfig, str, int]) -> tuple[str, int, RunResult]:
    cfg, selector, rep = args
    seed = _rep_seed(cfg.seed, rep)
    try:
        run = run_experiment(replace(cfg, seed=seed), selector)
    except FuselabError as exc:
        raise FuselabError(
            f"replication {rep} (selector {selector!r}, seed {seed}) failed: {exc}"
        ) from exc
    return selector, rep, run


@dataclass(frozen=True)
class AggregateRow:
    round_index: int
    selector: str
    mean_cum_loss: float
    se_cum_loss: float
    mean_lambda: float


def aggregate(results: dict[str, list[RunResult]]) -> list[AggregateRow]:
    """Per-selector, per-round summary over replications.

    Replications are reduced in index order, so the aggregate is bit-identical
    however the runs were scheduled.
    """
    rows: list[AggregateRow] = []
    for selector in sorted(results):
        runs = results[selector]
        if not runs:
            continue
        n_rounds = len(runs[0].rounds)
        cum = np.stack([r.cum_losses() for r in runs])
        lam = np.stack([r.lambda_hats() for r in runs])
        n = cum.shape[0]
        se = cum.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(n_rounds)
        for m in range(n_rounds):
            rows.append(
                AggregateRow(
                    round_index=m + 1,
                    selector=selector,
                    mean_cum_loss=float(cum[:, m].mean()),
                    se_cum_loss=float(se[m]),
                    mean_lambda=float(lam[:, m].mean()),
                )
            )
    return rows


def replicate(
    cfg: SimConfig,
    selectors: Sequence[str] = ("thompson",),
    *,
    jobs: int = 1,
) -> dict[str, list[RunResult]]:
    """Run ``cfg.n_reps`` independent replications per selector.

    Replication r uses a seed derived from (cfg.seed, r) for every selector,
    so selector comparisons are paired.  With ``jobs > 1`` the (selector,
    replication) grid runs in a process pool; results are identical to the
    serial order for any job count.
    """
    for s in selectors:
        if s not in SELECTOR_NAMES:
            raise ConfigError(f"unknown selector {s!r} (choose from {SELECTOR_NAMES})")
    tasks = [(cfg, s, r) for s in selectors for r in range(cfg.n_reps)]
    out: dict[tuple[str, int], RunResult] = {}
    if jobs <= 1:
        for t in tasks:
            s, r, run = _one_task(t)
            out[(s, r)] = run
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for s, r, run in pool.map(_one_task, tasks, chunksize=1):
                out[(s, r)] = run
    return {s: [out[(s, r)] for r in range(cfg.n_reps)] for s in selectors}


# ---------------------------------------------------------------------------
# Delimited output

TRACE_HEADER = "round,lambda_hat,eure,oracle_loss,cum_loss,chosen"
CURVES_HEADER = "round,c0,c1,c2"
AGGREGATE_HEADER = "round,selector,mean_cum_loss,se_cum_loss,mean_lambda"


def _chosen_field(chosen: frozenset[int]) -> str:
    return ";".join(str(j + 1) for j in sorted(chosen))


def write_trace(result: RunResult, path) -> None:
    lines = [TRACE_HEADER]
    for r in result.rounds:
        lines.append(
            f"{r.round_index},{r.lambda_hat!r},{r.eure!r},{r.oracle_loss!r},"
            f"{r.cum_loss!r},{_chosen_field(r.chosen)}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_curves(result: RunResult, path) -> None:
    """Sidecar with each round's risk quadratic: risk(lam) = c0 + c1 lam + c2 lam^2."""
    lines = [CURVES_HEADER]
    for r in result.rounds:
        lines.append(f"{r.round_index},{r.curve_c0!r},{r.curve_c1!r},{r.curve_c2!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_trace(path, curves_path=None) -> list[RoundTrace]:
    coeffs: dict[int, tuple[float, float, float]] = {}
    if curves_path is not None:
        for row in _read_rows(curves_path, CURVES_HEADER):
            coeffs[int(row[0])] = (float(row[1]), float(row[2]), float(row[3]))
    out = []
    for row in _read_rows(path, TRACE_HEADER):
        m = int(row[0])
        chosen = frozenset(int(tok) - 1 for tok in row[5].split(";") if tok)
        c0, c1, c2 = coeffs.get(m, (0.0, 0.0, 0.0))
        out.append(
            RoundTrace(
                round_index=m,
                lambda_hat=float(row[1]),
                eure=float(row[2]),
                oracle_loss=float(row[3]),
                cum_loss=float(row[4]),
                chosen=chosen,
                curve_c0=c0,
                curve_c1=c1,
                curve_c2=c2,
            )
        )
    return out


def write_aggregate(rows: Sequence[AggregateRow], path) -> None:
    lines = [AGGREGATE_HEADER]
    for r in rows:
        lines.append(
            f"{r.round_index},{r.selector},{r.mean_cum_loss!r},{r.se_cum_loss!r},"
            f"{r.mean_lambda!r}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_aggregate(path) -> list[AggregateRow]:
    return [
        AggregateRow(int(row[0]), row[1], float(row[2]), float(row[3]), float(row[4]))
        for row in _read_rows(path, AGGREGATE_HEADER)
    ]


def _read_rows(path, expected_header: str) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0] != expected_header:
        raise ParseError(f"expected header {expected_header!r}", path=str(path), row=1)
    n_fields = len(expected_header.split(","))
    rows = []
    for i, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != n_fields:
            raise ParseError(f"expected {n_fields} fields, got {len(parts)}", path=str(path), row=i)
        rows.append(parts)
    return rows
