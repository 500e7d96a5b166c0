"""Command line front end.

Four subcommands:

* ``simulate``  run replicated adaptive experiments, write traces and an
  aggregate table plus a checksum manifest.
* ``fuse``      estimate and fuse from observational / randomized CSV files,
  write a JSON report and a risk-curve table.
* ``select``    score candidate interventions from a saved fusion report and
  write a decision log.
* ``report``    render figures and per-round risk-curve tables from a
  simulate output directory.

Exit codes: 0 on success, 1 on an operational failure (failed fit,
insufficient or inconsistent data, unreadable file), 2 on a usage or
configuration error (bad flags, unknown names, malformed config or input
tables).  Wall-clock timings go to stderr only, so output trees depend on
nothing but the inputs and the seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .basis import PolynomialMap, SplineSpec
from .data_model import (
    EstimateState,
    InterventionCatalog,
    atomic_write_text,
    identity_weights,
    load_catalog,
    load_round,
)
from .design import save_decision_log
from .errors import ConfigError, FuselabError, ParseError
from .fusion import BiasFit, fuse, hat_matrix_for_support
from .simlab import (
    PRESETS,
    SELECTOR_NAMES,
    SimConfig,
    aggregate,
    preset,
    read_aggregate,
    read_trace,
    replicate,
    write_aggregate,
    write_curves,
    write_trace,
)

RISK_CURVE_HEADER = "lambda,eure"
_RUN_KEYS = ("selectors", "jobs", "out")


# ---------------------------------------------------------------------------
# Configuration


def _coerce(name: str, raw: str, kind: type):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {kind.__name__}", name) from None


def load_config_file(path: str | Path) -> tuple[dict[str, object], dict[str, str]]:
    """Read an INI file with a [sim] section of SimConfig fields and an
    optional [run] section (selectors, jobs, out)."""
    import configparser

    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from exc
    field_types = {f.name: f.type for f in dataclasses.fields(SimConfig)}
    # dataclass field types arrive as strings under `from __future__ import annotations`
    named = {"int": int, "float": float, "bool": bool, "str": str}
    sim: dict[str, object] = {}
    for key, raw in parser.items("sim") if parser.has_section("sim") else []:
        if key not in field_types:
            raise ConfigError(f"unknown simulation option {key!r}", key)
        sim[key] = _coerce(key, raw, named[str(field_types[key])])
    run: dict[str, str] = {}
    for key, raw in parser.items("run") if parser.has_section("run") else []:
        if key not in _RUN_KEYS:
            raise ConfigError(f"unknown run option {key!r}", key)
        run[key] = raw.strip()
    for section in parser.sections():
        if section not in ("sim", "run"):
            raise ConfigError(f"unknown config section [{section}]")
    return sim, run


def build_config(args: argparse.Namespace) -> tuple[SimConfig, dict[str, str]]:
    """Resolve preset < config file < command line flags."""
    base = preset(args.preset) if args.preset else SimConfig()
    run_opts: dict[str, str] = {}
    if args.config:
        sim_opts, run_opts = load_config_file(args.config)
        base = dataclasses.replace(base, **sim_opts)
    if getattr(args, "seed", None) is not None:
        base = dataclasses.replace(base, seed=args.seed)
    return base, run_opts


def _selectors_from(args: argparse.Namespace, run_opts: dict[str, str]) -> list[str]:
    raw = args.selector or run_opts.get("selectors") or "thompson"
    names = [tok.strip() for tok in raw.split(",") if tok.strip()]
    for name in names:
        if name not in SELECTOR_NAMES:
            raise ConfigError(f"unknown selector {name!r} (choose from {SELECTOR_NAMES})")
    return names


# ---------------------------------------------------------------------------
# Manifest


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: SimConfig, extra: dict[str, str]) -> None:
    """Checksum manifest for everything under ``out_dir``.

    Contains the tool version, the resolved configuration, and a sha256 line
    per output file.  Deliberately no timestamps or durations: two runs from
    the same inputs and seed must produce identical trees.
    """
    lines = [f"fuselab {__version__}", f"command: {command}"]
    for key in sorted(extra):
        lines.append(f"{key}: {extra[key]}")
    lines.append("config:")
    for field in sorted(dataclasses.fields(SimConfig), key=lambda f: f.name):
        lines.append(f"  {field.name} = {getattr(cfg, field.name)!r}")
    lines.append("files:")
    manifest_path = out_dir / "manifest.txt"
    for path in sorted(out_dir.rglob("*")):
        if path.is_dir() or path == manifest_path:
            continue
        lines.append(f"  {_sha256(path)}  {path.relative_to(out_dir).as_posix()}")
    atomic_write_text(manifest_path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg, run_opts = build_config(args)
    selectors = _selectors_from(args, run_opts)
    jobs = args.jobs if args.jobs is not None else int(run_opts.get("jobs", "1"))
    out_raw = args.out or run_opts.get("out")
    if not out_raw:
        raise ConfigError("simulate needs an output directory (--out)")
    out_dir = Path(out_raw)
    out_dir.mkdir(parents=True, exist_ok=True)

    started = time.perf_counter()
    results = replicate(cfg, selectors, jobs=jobs)
    print(
        f"simulate: {len(selectors)} selector(s) x {cfg.n_reps} replication(s) "
        f"in {time.perf_counter() - started:.1f}s",
        file=sys.stderr,
    )
    for selector, runs in results.items():
        for rep, run in enumerate(runs):
            rep_dir = out_dir / "runs" / selector / f"rep_{rep:03d}"
            rep_dir.mkdir(parents=True, exist_ok=True)
            write_trace(run, rep_dir / "trace.csv")
            write_curves(run, rep_dir / "curves.csv")
            save_decision_log(run.decisions, rep_dir / "decisions.csv")
    write_aggregate(aggregate(results), out_dir / "aggregate.csv")
    write_manifest(
        out_dir, "simulate", cfg,
        {"selectors": ",".join(selectors), "replications": str(cfg.n_reps)},
    )
    return 0


# ---------------------------------------------------------------------------
# fuse


def write_risk_curve(curve: np.ndarray, path: Path) -> None:
    lines = [RISK_CURVE_HEADER]
    for lam, risk in curve:
        lines.append(f"{float(lam)!r},{float(risk)!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def fusion_report_dict(state: EstimateState, catalog: InterventionCatalog, result) -> dict:
    mask = state.rct_mask
    return {
        "version": __version__,
        "n_interventions": int(state.tau_obs.shape[0]),
        "tau_obs": state.tau_obs.tolist(),
        "tau_rct": [float(v) if m else None for v, m in zip(state.tau_rct, mask)],
        "rct_mask": [int(m) for m in mask],
        "rct_var": [float(v) if m else None for v, m in zip(state.rct_var, mask)],
        "r_counts": [int(c) for c in state.r_counts],
        "selected_history": [sorted(int(j) + 1 for j in s) for s in state.selected_history],
        "dr_cov": state.dr_cov.tolist(),
        "catalog": {
            "attributes": catalog.attributes.tolist(),
            "degree": int(catalog.feature_map.degree),
        },
        "bias": {
            "coef": result.bias.coef.tolist(),
            "fitted": result.bias.fitted_bias.tolist(),
            "support": sorted(int(j) + 1 for j in result.bias.support),
        },
        "fusion": {
            "lambda_hat": result.lambda_hat,
            "lambda_raw": result.lambda_raw,
            "eure": result.eure,
            "degenerate_bias": bool(result.degenerate_bias),
            "tau_fused": result.tau_fused.tolist(),
            "sigma_diag": np.diag(result.sigma).tolist(),
        },
    }


def cmd_fuse(args: argparse.Namespace) -> int:
    cfg, _ = build_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    obs_rounds = [load_round(Path(p), round_index=i) for i, p in enumerate(args.obs, start=1)]
    rct_rounds = [load_round(Path(p), round_index=i) for i, p in enumerate(args.rct, start=1)]
    catalog = load_catalog(Path(args.catalog), degree=cfg.attr_degree)
    from .estimators import build_estimate_state

    started = time.perf_counter()
    state = build_estimate_state(
        obs_rounds, rct_rounds,
        SplineSpec(degree=cfg.spline_degree, knots_per_dim=cfg.spline_knots),
        clip=cfg.propensity_clip,
    )
    weights = identity_weights(catalog.attributes.shape[0])
    result = fuse(state, catalog, weights, curve_points=101)
    print(f"fuse: done in {time.perf_counter() - started:.1f}s", file=sys.stderr)
    atomic_write_text(
        out_dir / "fusion.json",
        json.dumps(fusion_report_dict(state, catalog, result), indent=2) + "\n",
    )
    write_risk_curve(result.curve, out_dir / "risk_curve.csv")
    return 0


# ---------------------------------------------------------------------------
# select


def load_fusion_report(path: Path) -> tuple[EstimateState, InterventionCatalog, BiasFit, float]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read fusion report: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed fusion report: {exc}", path=str(path)) from exc
    try:
        mask = np.array(doc["rct_mask"], dtype=bool)
        state = EstimateState(
            tau_obs=np.asarray(doc["tau_obs"], dtype=float),
            dr_cov=np.asarray(doc["dr_cov"], dtype=float),
            tau_rct=np.array([0.0 if v is None else v for v in doc["tau_rct"]]),
            rct_mask=mask,
            rct_var=np.array([0.0 if v is None else v for v in doc["rct_var"]]),
            r_counts=np.asarray(doc["r_counts"], dtype=int),
            selected_history=tuple(
                frozenset(int(j) - 1 for j in s) for s in doc["selected_history"]
            ),
        )
        catalog = InterventionCatalog(
            attributes=np.asarray(doc["catalog"]["attributes"], dtype=float),
            feature_map=PolynomialMap(
                n_dim=len(doc["catalog"]["attributes"][0]),
                degree=int(doc["catalog"]["degree"]),
            ),
        )
        support = frozenset(int(j) - 1 for j in doc["bias"]["support"])
        bias = BiasFit(
            coef=np.asarray(doc["bias"]["coef"], dtype=float),
            hat_matrix=hat_matrix_for_support(catalog.features, support),
            fitted_bias=np.asarray(doc["bias"]["fitted"], dtype=float),
            support=support,
        )
        lambda_hat = float(doc["fusion"]["lambda_hat"])
    except (KeyError, IndexError, TypeError) as exc:
        raise ParseError(f"fusion report missing field: {exc}", path=str(path)) from exc
    return state, catalog, bias, lambda_hat


def cmd_select(args: argparse.Namespace) -> int:
    cfg, _ = build_config(args)
    if not args.selector:
        raise ConfigError("select needs --selector")
    state, catalog, bias, lambda_hat = load_fusion_report(Path(args.state))
    weights = identity_weights(catalog.attributes.shape[0])
    from .simlab import _select_next

    decision = _select_next(
        cfg, args.selector, state, bias, catalog, weights,
        lambda_hat, cfg.seed, round_index=len(state.selected_history),
    )
    out_dir = Path(args.out) if args.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_decision_log([decision], out_dir / "decisions.csv")
    print(";".join(str(j + 1) for j in decision.chosen))
    return 0


# ---------------------------------------------------------------------------
# report


def _risk_grid(c0: float, c1: float, c2: float, n_points: int = 101) -> np.ndarray:
    lam = np.linspace(0.0, 1.0, n_points)
    return np.column_stack([lam, c0 + c1 * lam + c2 * lam * lam])


def cmd_report(args: argparse.Namespace) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run)
    agg_path = run_dir / "aggregate.csv"
    if not agg_path.exists():
        raise ConfigError(f"no aggregate.csv under {run_dir}")
    rows = read_aggregate(agg_path)
    out_dir = Path(args.out) if args.out else run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)

    selectors = sorted({r.selector for r in rows})
    focus = args.selector or selectors[0]
    if focus not in selectors:
        raise ConfigError(f"selector {focus!r} not present in {agg_path}")
    rep_dir = run_dir / "runs" / focus / f"rep_{args.rep:03d}"
    traces = read_trace(rep_dir / "trace.csv", rep_dir / "curves.csv")

    # cumulative risk table and figure
    lines = ["round,selector,mean_cum_loss,se_cum_loss"]
    for r in rows:
        lines.append(f"{r.round_index},{r.selector},{r.mean_cum_loss!r},{r.se_cum_loss!r}")
    atomic_write_text(out_dir / "cumulative_risk.csv", "\n".join(lines) + "\n")

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for selector in selectors:
        sel = [r for r in rows if r.selector == selector]
        sel.sort(key=lambda r: r.round_index)
        x = [r.round_index for r in sel]
        y = np.array([r.mean_cum_loss for r in sel])
        se = np.array([r.se_cum_loss for r in sel])
        ax.plot(x, y, marker="o", markersize=3, label=selector)
        ax.fill_between(x, y - 1.96 * se, y + 1.96 * se, alpha=0.2)
    ax.set_xlabel("round")
    ax.set_ylabel("mean cumulative loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_dir / "cumulative_risk.png", dpi=150)
    plt.close(fig)

    # per-round risk curves for the focused run
    curve_dir = out_dir / "curves"
    curve_dir.mkdir(exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    shown = {1, (len(traces) + 1) // 2, len(traces)}
    for trace in traces:
        grid = _risk_grid(trace.curve_c0, trace.curve_c1, trace.curve_c2)
        write_risk_curve(grid, curve_dir / f"curve_round_{trace.round_index}.csv")
        if trace.round_index in shown:
            (line,) = ax.plot(grid[:, 0], grid[:, 1], label=f"round {trace.round_index}")
            ax.axvline(trace.lambda_hat, linestyle=":", color=line.get_color(), linewidth=1.0)
    ax.set_xlabel("shrinkage weight")
    ax.set_ylabel("estimated risk")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out_dir / "risk_vs_lambda.png", dpi=150)
    plt.close(fig)
    print(f"report: wrote {out_dir}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# entry point


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="INI file with [sim] and [run] sections")
    sub.add_argument("--preset", choices=sorted(PRESETS), help="named base configuration")
    sub.add_argument("--seed", type=int, help="master seed override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fuselab",
        description="fuse observational and randomized effect estimates; "
        "plan which interventions to randomize next",
    )
    parser.add_argument("--version", action="version", version=f"fuselab {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("simulate", help="run replicated synthetic experiments")
    _add_common(sim)
    sim.add_argument("--selector", help="comma-separated selector names")
    sim.add_argument("--jobs", type=int, help="worker processes (default 1)")
    sim.add_argument("--out", help="output directory")
    sim.set_defaults(func=cmd_simulate)

    fus = commands.add_parser("fuse", help="fuse estimates from CSV inputs")
    _add_common(fus)
    fus.add_argument("--obs", nargs="+", required=True, help="observational round CSVs, in order")
    fus.add_argument("--rct", nargs="+", required=True, help="randomized round CSVs, in order")
    fus.add_argument("--catalog", required=True, help="intervention attribute CSV")
    fus.add_argument("--out", required=True, help="output directory")
    fus.set_defaults(func=cmd_fuse)

    sel = commands.add_parser("select", help="choose the next interventions to randomize")
    _add_common(sel)
    sel.add_argument("--state", required=True, help="fusion.json from a fuse run")
    sel.add_argument("--selector", help="selector name")
    sel.add_argument("--out", help="output directory (default: current)")
    sel.set_defaults(func=cmd_select)

    rep = commands.add_parser("report", help="render figures from a simulate directory")
    _add_common(rep)
    rep.add_argument("--run", required=True, help="simulate output directory")
    rep.add_argument("--selector", help="selector whose run to plot (default: first)")
    rep.add_argument("--rep", type=int, default=0, help="replication index to plot")
    rep.add_argument("--out", help="report directory (default: <run>/report)")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"fuselab: error: {exc}", file=sys.stderr)
        return 2
    except FuselabError as exc:
        print(f"fuselab: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"fuselab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
