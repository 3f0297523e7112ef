"""Command-line entry point: constants, simulations, table, sweep, contours, audit.

Every file written carries the tool version, the config hash and the seed.
Outputs never contain timings or anything else that depends on scheduling,
so the same config reproduces byte-identical files for any ``--threads``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .analytics import Regime, constants
from .config import ExperimentConfig, load, parse_environment
from .contour import (
    contour_replica,
    expected_contour_grid,
    grid_words,
    is_formal,
)
from .distributions import OffspringLaw, RotorLaw, RotorMatrix
from .engine import (
    Environment,
    GaltonWatson,
    RandomSource,
    Regular,
    TrajectoryStats,
    run,
    run_until_returns,
)
from .errors import ConfigError, GridTooLarge, MemoryBudgetExceeded, RotorWalkError
from .parallel import default_threads, map_ordered

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_TRUNCATED = 3

# alpha for uniform rotors on T_d as published, d = 2..10
PUBLISHED_TABLE = {2: 0.500, 3: 0.707, 4: 0.784, 5: 0.825, 6: 0.853, 7: 0.872, 8: 0.888, 9: 0.899, 10: 0.909}


# -- output helpers ---------------------------------------------------------
def provenance(cfg: ExperimentConfig, command: str) -> dict:
    return {
        "tool": "rotorwalk",
        "version": __version__,
        "command": command,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
    }


def _fmt(x: Any) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    if isinstance(x, np.integer):
        return str(int(x))
    return "" if x is None else str(x)


def render_csv(header: Sequence[str], rows, prov: dict) -> str:
    buf = io.StringIO()
    buf.write("# " + " ".join(f"{k}={v}" for k, v in prov.items()) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _jsonable(x: Any) -> Any:
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else _fmt(x)
    if isinstance(x, Regime):
        return x.value
    return x


def render_json(obj: dict, prov: dict) -> str:
    return json.dumps(_jsonable({"provenance": prov, **obj}), indent=2) + "\n"


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def _mean_se(vals: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(vals, dtype=float)
    if a.size == 0:
        return math.nan, math.nan
    if a.size == 1:
        return float(a[0]), math.nan
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(a.size))


def _law_of(spec) -> Any:
    return spec.law if isinstance(spec, Regular) else (spec.off, spec.Q)


# -- constants --------------------------------------------------------------
def constants_report(cfg: ExperimentConfig) -> dict:
    spec = cfg.env_spec()
    c = constants(_law_of(spec), cfg.null_tol)
    rep = {"environment": spec.describe(), **c.to_dict()}
    if isinstance(spec, Regular):
        d = spec.law.d
        uniform = max(spec.law.r) - min(spec.law.r) < 1e-15
        rep["srw_range_limit"] = (d - 1) / d
        if uniform and d in PUBLISHED_TABLE:
            rep["printed_formula_audit"] = printed_formula_audit(d, c)
    return rep


def printed_formula_audit(d: int, c) -> dict:
    """Proof-level alpha versus the closed forms, against the published table."""
    table = PUBLISHED_TABLE[d]
    out = {"table_alpha": table, "alpha_proof_level": c.alpha,
           "proof_level_matches_table": round(c.alpha, 3) == table}
    for key in ("alpha_printed", "alpha_corollary"):
        if key in c.diagnostics:
            v = c.diagnostics[key]
            out[key] = v
            out[f"{key}_matches_table"] = math.isfinite(v) and round(v, 3) == table
    return out


def _text_report(rep: dict, indent: str = "") -> list[str]:
    lines = []
    width = max((len(k) for k in rep), default=0)
    for k, v in rep.items():
        if isinstance(v, dict):
            lines.append(f"{indent}{k}:")
            lines.extend(_text_report(v, indent + "  "))
        else:
            lines.append(f"{indent}{k:<{width}}  {_fmt(_jsonable(v)) if not isinstance(v, str) else v}")
    return lines


def cmd_constants(cfg: ExperimentConfig, out: Path) -> int:
    rep = constants_report(cfg)
    _write(out, "constants.json", render_json(rep, provenance(cfg, "constants")))
    print("\n".join(_text_report(rep)))
    return EXIT_OK


# -- simulate ---------------------------------------------------------------
@dataclass
class ReplicaResult:
    index: int
    stats: Optional[TrajectoryStats]
    error: Optional[str] = None


def simulate_replica(spec, walk: str, seed: int, stream: int, n_steps: int, stride: int,
                     mode: str = "steps", k_returns: int = 1, node_budget: int = 200_000_000) -> ReplicaResult:
    try:
        env = Environment(spec, RandomSource(seed, stream), walk=walk, node_budget=node_budget)
        if mode == "steps":
            st = run(env, n_steps, stride)
        else:
            st = run_until_returns(env, k_returns, n_steps, stride)
        return ReplicaResult(stream, st)
    except MemoryBudgetExceeded as exc:
        return ReplicaResult(stream, None, str(exc))


def _replica_rows(st: TrajectoryStats):
    rows = [tuple(int(v) for v in r) for r in st.samples]
    if not rows or rows[-1][0] != st.n:
        rows.append((st.n, st.range_size, st.depth))
    return rows


def simulate(cfg: ExperimentConfig, threads: Optional[int]) -> tuple[dict, list[ReplicaResult]]:
    spec = cfg.env_spec()
    results = map_ordered(
        lambda i: simulate_replica(spec, cfg.walk, cfg.seed, i, cfg.n_steps, cfg.stride,
                                   cfg.mode, cfg.k_returns, cfg.node_budget),
        range(cfg.replicas), threads,
    )
    d = spec.law.d if isinstance(spec, Regular) else None
    per = []
    for res in results:
        row: dict = {"replica": res.index, "stream": res.index}
        if res.stats is None:
            row["error"] = res.error
        else:
            st = res.stats
            row.update(n=st.n, range=st.range_size, depth=st.depth,
                       range_ratio=st.range_ratio, depth_ratio=st.depth_ratio,
                       returns=int(st.return_times.size), truncated=st.truncated)
            if cfg.walk == "rotor":
                row["identity_audit"] = st.identity_audit(d)
        per.append(row)
    ok = [r for r in results if r.stats is not None]
    rr = _mean_se([r.stats.range_ratio for r in ok])
    dr = _mean_se([r.stats.depth_ratio for r in ok])
    summary = {
        "environment": spec.describe(),
        "walk": cfg.walk,
        "mode": cfg.mode,
        "n_steps": cfg.n_steps,
        "replicas": cfg.replicas,
        "completed": len(ok),
        "failed": cfg.replicas - len(ok),
        "truncated": sum(1 for r in ok if r.stats.truncated),
        "range_ratio_mean": rr[0],
        "range_ratio_stderr": rr[1],
        "depth_ratio_mean": dr[0],
        "depth_ratio_stderr": dr[1],
        "einstein_2a_minus_l": 2 * rr[0] - dr[0],
    }
    if cfg.walk == "rotor":
        c = constants(_law_of(spec), cfg.null_tol)
        summary.update(regime=c.regime.value, alpha=c.alpha, ell=c.ell)
        audits = [r["identity_audit"] for r in per if "identity_audit" in r]
        summary["identity_audit_ok"] = all(a["ok"] for a in audits)
    elif isinstance(spec, Regular):
        summary["srw_range_limit"] = (spec.law.d - 1) / spec.law.d
    summary["per_replica"] = per
    return summary, results


def cmd_simulate(cfg: ExperimentConfig, out: Path, threads: Optional[int]) -> int:
    summary, results = simulate(cfg, threads)
    prov = provenance(cfg, "simulate")
    for res in results:
        if res.stats is not None:
            _write(out, f"replica_{res.index:04d}.csv",
                   render_csv(("n", "range", "depth"), _replica_rows(res.stats), {**prov, "stream": res.index}))
    _write(out, "summary.json", render_json(summary, prov))
    print(f"range |R_n|/n = {summary['range_ratio_mean']:.6f} +- {summary['range_ratio_stderr']:.6f}")
    print(f"depth |X_n|/n = {summary['depth_ratio_mean']:.6f} +- {summary['depth_ratio_stderr']:.6f}")
    if "alpha" in summary:
        print(f"theory alpha = {summary['alpha']:.6f}, l = {summary['ell']:.6f} ({summary['regime']})")
    if summary["failed"] or summary["truncated"]:
        print(f"{summary['failed']} replicas failed, {summary['truncated']} truncated", file=sys.stderr)
        if cfg.strict:
            return EXIT_TRUNCATED
    if cfg.walk == "rotor" and not summary["identity_audit_ok"]:
        print("exact identity audit FAILED", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


# -- table ------------------------------------------------------------------
def table_rows(d_min: int = 2, d_max: int = 10) -> list[tuple[int, str, str]]:
    rows = []
    for d in range(d_min, d_max + 1):
        a = constants(RotorLaw.uniform(d)).alpha
        rows.append((d, f"{a:.3f}", f"{(d - 1) / d:.3f}"))
    return rows


def cmd_table(cfg: ExperimentConfig, out: Path) -> int:
    rows = table_rows(*cfg.d_range)
    _write(out, "table.csv", render_csv(("d", "alpha", "srw_limit"), rows, provenance(cfg, "table")))
    print(f"{'d':>3} | {'alpha':>6} {'(d-1)/d':>8}")
    for d, a, s in rows:
        print(f"{d:>3} | {a:>6} {s:>8}")
    return EXIT_OK


# -- gw sweep ---------------------------------------------------------------
SWEEP_HEADER = (
    "family", "p", "kind", "mu", "m", "regime", "alpha_analytic", "alpha_uniform_gw_formula",
    "psi_mean", "psi_se", "phi_mean", "phi_se", "status",
)


def family_offspring(i: int, p: float) -> OffspringLaw:
    return OffspringLaw({1: p, i: 1.0 - p})


def _sweep_points(cfg: ExperimentConfig) -> list[dict]:
    pts = []
    for i in cfg.sweep.families:
        for p in cfg.sweep.p_grid:
            pts.append({"family": i, "p": float(p)})
    return pts


def gw_sweep(cfg: ExperimentConfig, threads: Optional[int]) -> list[tuple]:
    sw = cfg.sweep
    pts = _sweep_points(cfg)
    tasks = []
    for idx, pt in enumerate(pts):
        pt["mu"] = pt["family"] - (pt["family"] - 1) * pt["p"]
        if pt["p"] >= 1.0:
            pt["status"] = "degenerate: p_1 = 1, the tree is a single ray"
            continue
        try:
            off = family_offspring(pt["family"], pt["p"])
            spec = GaltonWatson(off, RotorMatrix.uniform(off.support))
            c = constants((spec.off, spec.Q), cfg.null_tol)
        except RotorWalkError as exc:
            pt["status"] = f"error: {exc}"
            continue
        pt.update(spec=spec, const=c, status="ok")
        base = idx * 2 * sw.replicas
        for j in range(sw.replicas):
            tasks.append((idx, "rotor", base + j))
            tasks.append((idx, "srw", base + sw.replicas + j))

    def work(task):
        idx, walk, stream = task
        return simulate_replica(pts[idx]["spec"], walk, cfg.seed, stream, sw.n_steps,
                                sw.n_steps, node_budget=cfg.node_budget)

    results = map_ordered(work, tasks, threads)
    by_point: dict = {}
    for (idx, walk, _), res in zip(tasks, results):
        by_point.setdefault((idx, walk), []).append(res)

    rows = []
    for idx, pt in enumerate(pts):
        i, p = pt["family"], pt["p"]
        if pt["status"] != "ok":
            rows.append((i, p, "degenerate" if p >= 1.0 else "point", pt["mu"], None, None, None, None,
                         None, None, None, None, pt["status"]))
            continue
        c = pt["const"]
        psi = [r.stats.range_ratio for r in by_point[(idx, "rotor")] if r.stats is not None]
        phi = [r.stats.range_ratio for r in by_point[(idx, "srw")] if r.stats is not None]
        errs = [r.error for r in by_point[(idx, "rotor")] + by_point[(idx, "srw")] if r.error]
        status = "ok" if not errs else f"{len(errs)} replicas failed: {errs[0]}"
        # the (mu-1)/mu closed form is a recurrent-side limit only
        gw_formula = c.diagnostics.get("alpha_uniform_gw_formula") if pt["mu"] <= 2.0 + cfg.null_tol else None
        rows.append((i, p, "point", pt["mu"], c.m, c.regime.value, c.alpha, gw_formula,
                     *_mean_se(psi), *_mean_se(phi), status))
    # regular-tree endpoints for comparison, analytic values only
    for i in cfg.sweep.families:
        c = constants(RotorLaw.uniform(i), cfg.null_tol)
        rows.append((i, 0.0, "regular-endpoint", float(i), c.m, c.regime.value, c.alpha, None,
                     None, None, (i - 1) / i, None, "analytic"))
    return rows


def cmd_gw_sweep(cfg: ExperimentConfig, out: Path, threads: Optional[int]) -> int:
    rows = gw_sweep(cfg, threads)
    _write(out, "gw_sweep.csv", render_csv(SWEEP_HEADER, rows, provenance(cfg, "gw-sweep")))
    for r in rows:
        print(" ".join(_fmt(v) for v in (r[0], r[1], r[2], r[3], r[6], r[8], r[10], r[12])))
    failed = any(r[12] not in ("ok", "analytic") and not str(r[12]).startswith("degenerate") for r in rows)
    return EXIT_TRUNCATED if failed and cfg.strict else EXIT_OK


# -- contour ----------------------------------------------------------------
def cmd_contour(cfg: ExperimentConfig, out: Path, threads: Optional[int]) -> int:
    spec = cfg.env_spec()
    if not isinstance(spec, Regular):
        raise ConfigError("field 'environment': contours need a regular tree")
    law, k, L = spec.law, cfg.contour.k, cfg.contour.L
    formal = is_formal(law)
    if formal and cfg.contour.empirical:
        raise ConfigError("field 'contour.empirical': the walk is transient, excursions need not end")
    try:
        grid = expected_contour_grid(law, k, L)
    except GridTooLarge as exc:
        raise ConfigError(f"field 'contour.L': {exc}") from None
    prov = {**provenance(cfg, "contour"), "formal": formal}
    ncell = grid.shape[1]
    x = np.arange(ncell) / float(law.d**L)
    rows = []
    for kk in range(1, k + 1):
        for j in range(ncell):
            rows.append((kk, j, x[j], grid[kk, j], grid[kk, j] / kk))
    _write(out, "contour_analytic.csv",
           render_csv(("k", "cell_index", "x_left", "value", "normalized"), rows, prov))
    print(f"analytic g_1..g_{k} on {ncell} cells{' (formal: transient law)' if formal else ''}")
    print(f"g_k(0) = {[_fmt(v) for v in grid[1:, 0]]}")
    if not cfg.contour.empirical:
        return EXIT_OK

    n = cfg.contour.replicas
    res = map_ordered(
        lambda i: contour_replica(law, k, L, cfg.seed, i, cfg.contour.step_cap, cfg.node_budget),
        range(n), threads,
    )
    vals = np.asarray([v for v, _ in res if v is not None])
    truncated = n - vals.shape[0]
    if vals.shape[0] < 2:
        print("fewer than two completed replicas", file=sys.stderr)
        return EXIT_TRUNCATED if cfg.strict else EXIT_FAILURE
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(vals.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, (mean - grid[k]) / se, np.where(mean == grid[k], 0.0, np.inf))
    emp = [(j, x[j], mean[j], se[j], grid[k, j], z[j]) for j in range(ncell)]
    _write(out, "contour_empirical.csv",
           render_csv(("cell_index", "x_left", "mean", "se", "analytic", "z"), emp, prov))
    summary = {
        "k": k, "L": L, "replicas": n, "completed": int(vals.shape[0]), "truncated": truncated,
        "max_abs_z": float(np.max(np.abs(z))), "cells_beyond_3se": int(np.sum(np.abs(z) > 3)),
        "peak_live_nodes": max(p for _, p in res),
    }
    _write(out, "contour_summary.json", render_json(summary, prov))
    print(f"empirical: max |z| = {summary['max_abs_z']:.3f}, cells beyond 3 SE = {summary['cells_beyond_3se']}")
    if truncated and cfg.strict:
        return EXIT_TRUNCATED
    return EXIT_OK


# -- audit ------------------------------------------------------------------
AUDIT_SUITE = (
    {"tree": "regular", "d": 2, "r": [0, 0.5, 0.5]},
    {"tree": "regular", "d": 2, "rotor": "uniform"},
    {"tree": "regular", "d": 3, "r": [0, 0, 0, 1]},
    {"tree": "regular", "d": 3, "r": [0, 0.25, 0.25, 0.5]},
    {"tree": "galton-watson", "offspring": {"1": 0.5, "2": 0.5}, "Q": "uniform"},
    {"tree": "galton-watson", "offspring": {"1": 0.5, "3": 0.5}, "Q": "uniform"},
)


def audit(cfg: ExperimentConfig, threads: Optional[int], suite=AUDIT_SUITE) -> dict:
    envs = [cfg.environment] + [e for e in suite if e != cfg.environment]
    tasks = [(e, i) for e in envs for i in range(cfg.replicas)]

    def work(task):
        e, i = task
        return simulate_replica(parse_environment(e), "rotor", cfg.seed, i, cfg.n_steps,
                                1 << 62, "returns", cfg.k_returns, cfg.node_budget)

    results = map_ordered(work, tasks, threads)
    report = []
    for e in envs:
        spec = parse_environment(e)
        d = spec.law.d if isinstance(spec, Regular) else None
        rows = [r for (ee, _), r in zip(tasks, results) if ee is e]
        audits = [r.stats.identity_audit(d) for r in rows if r.stats is not None]
        report.append({
            "environment": spec.describe(),
            "regime": constants(_law_of(spec), cfg.null_tol).regime.value,
            "replicas": len(rows),
            "returns_checked": sum(a["returns"] for a in audits),
            "tau_identity_failures": sum(a["tau_identity_failures"] for a in audits),
            "leaf_identity_failures": sum(a["leaf_identity_failures"] for a in audits),
            "leaf_regular_identity_failures": sum(a.get("leaf_regular_identity_failures", 0) for a in audits),
            "errors": [r.error for r in rows if r.error],
            "ok": all(a["ok"] for a in audits),
        })
    return {"k_returns": cfg.k_returns, "step_cap": cfg.n_steps, "ok": all(r["ok"] for r in report),
            "environments": report}


def cmd_audit(cfg: ExperimentConfig, out: Path, threads: Optional[int]) -> int:
    rep = audit(cfg, threads)
    _write(out, "audit.json", render_json(rep, provenance(cfg, "audit")))
    for r in rep["environments"]:
        print(f"{'ok  ' if r['ok'] else 'FAIL'} {r['regime']:<18} returns={r['returns_checked']:<6} "
              f"{json.dumps(r['environment'], sort_keys=True)}")
    return EXIT_OK if rep["ok"] else EXIT_FAILURE


# -- argument handling ------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rotorwalk", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--steps", type=int, help="steps per replica (step cap in returns mode)")
    common.add_argument("--replicas", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads (default: $ROTORWALK_THREADS or CPU count)")
    common.add_argument("--strict", action="store_true", help="exit 3 on any truncated or failed replica")
    sub.add_parser("constants", parents=[common], help="analytic constants and diagnostics")
    sub.add_parser("simulate", parents=[common], help="Monte Carlo replicas of one environment")
    t = sub.add_parser("table", parents=[common], help="uniform-rotor alpha against (d-1)/d")
    t.add_argument("--d-min", type=int)
    t.add_argument("--d-max", type=int)
    sub.add_parser("gw-sweep", parents=[common], help="Galton-Watson families T_2..T_6")
    c = sub.add_parser("contour", parents=[common], help="expected contours of the range")
    c.add_argument("--k", type=int)
    c.add_argument("--L", type=int)
    c.add_argument("--empirical", action="store_true")
    sub.add_parser("audit", parents=[common], help="exact excursion identities")
    return ap


def apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    cmd = args.command
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.threads is not None:
        cfg.threads = args.threads
    if args.strict:
        cfg.strict = True
    if args.steps is not None:
        if cmd == "gw-sweep":
            cfg.sweep.n_steps = args.steps
        else:
            cfg.n_steps = args.steps
    if args.replicas is not None:
        if cmd == "gw-sweep":
            cfg.sweep.replicas = args.replicas
        elif cmd == "contour":
            cfg.contour.replicas = args.replicas
        else:
            cfg.replicas = args.replicas
    if cmd == "table":
        if args.d_min is not None:
            cfg.d_range = [args.d_min, cfg.d_range[1]]
        if args.d_max is not None:
            cfg.d_range = [cfg.d_range[0], args.d_max]
    if cmd == "contour":
        if args.k is not None:
            cfg.contour.k = args.k
        if args.L is not None:
            cfg.contour.L = args.L
        if args.empirical:
            cfg.contour.empirical = True
    return cfg.validate()


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(load(args.config), args)
        out = Path(cfg.out)
        threads = cfg.threads if cfg.threads is not None else default_threads()
        if args.command == "constants":
            return cmd_constants(cfg, out)
        if args.command == "simulate":
            return cmd_simulate(cfg, out, threads)
        if args.command == "table":
            return cmd_table(cfg, out)
        if args.command == "gw-sweep":
            return cmd_gw_sweep(cfg, out, threads)
        if args.command == "contour":
            return cmd_contour(cfg, out, threads)
        return cmd_audit(cfg, out, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
