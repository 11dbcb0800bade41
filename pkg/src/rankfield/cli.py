"""Command-line runner: ``rankfield <kind> --config cfg.json`` and ``rankfield report <dir>``.

Exit codes: 0 ok, 1 numerical failure (a failure.json lands in the output
directory), 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .model import ConfigurationError, ModelSpec, extra_assumptions, observable_from_dict, validate_assumptions

KINDS = ("simulate", "hydrolimit", "clt", "hitting", "portfolio", "concentration", "convergence")


# -- deterministic serialization ----------------------------------------------

def _num(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    s = format(x, ".17g")
    return s if any(c in s for c in ".en") else s + ".0"


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with sorted keys, floats at 17 significant digits and NaN/inf as null."""
    pad, inner = " " * (indent * _level), " " * (indent * (_level + 1))
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in sorted(obj.items())]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        return "[\n" + ",\n".join(inner + dumps(v, indent, _level + 1) for v in seq) + "\n" + pad + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(float(obj))
    return json.dumps(str(obj))


def content_hash(text: str) -> str:
    """sha1 of the git blob object holding ``text``."""
    data = text.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# -- configs -------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    kind: str
    model: ModelSpec
    observable: dict | None = None
    params: dict = field(default_factory=dict)
    out: str | None = None

    @classmethod
    def from_dict(cls, d: dict, kind: str | None = None) -> "ExperimentConfig":
        kind = kind or d.get("kind")
        if kind not in KINDS:
            raise ConfigurationError(f"unknown experiment kind {kind!r}")
        if d.get("kind") not in (None, kind):
            raise ConfigurationError(f"config is for {d['kind']!r}, not {kind!r}")
        if "model" not in d:
            raise ConfigurationError("config needs a 'model' section")
        obs = d.get("observable")
        if obs is not None:
            observable_from_dict(obs)   # resolvable against the registry
        params = dict(d.get("params", {}))
        for key in ("replicas",):
            if key in params and int(params[key]) < 1:
                raise ConfigurationError(f"{key} must be positive")
        return cls(kind, ModelSpec.from_dict(d["model"]), obs, params, d.get("out"))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "model": self.model.to_dict(), "observable": self.observable,
                "params": self.params}


# -- experiment kinds ------------------------------------------------------------

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if isinstance(v, float) else v for v in row])


def _run_simulate(cfg, out, workers):
    from .particles import run_replicas, simulate_rank_based

    spec, p = cfg.model, cfg.params
    reps = int(p.get("replicas", 1))
    path = simulate_rank_based(spec, 0)
    path.to_csv(out / "paths.csv")
    final = run_replicas(spec, range(reps), _final_only, workers=workers)[:, -1]
    rep = validate_assumptions(spec)
    extra = extra_assumptions(spec) if spec.n >= 2 else {}
    result = {"assumptions": {k: {"ok": v[0], "detail": v[1]} for k, v in rep.clauses.items()},
              "extra_assumptions": extra,
              "final_mean": [float(v) for v in final.mean(axis=1)],
              "final_var": [float(v) for v in final.var(axis=1)],
              "checks": {"finite": bool(np.all(np.isfinite(final)))}}
    return result, ["paths.csv"]


def _final_only(k, t, X, Xbar):
    return X


def _run_hydrolimit(cfg, out, workers):
    from .hydro import solve_porous_medium

    spec, p = cfg.model, cfg.params
    grid = solve_porous_medium(spec.b, spec.sigma, spec.lam, spec.T, dx=float(p.get("dx", 0.02)),
                               save_dt=float(p.get("save_dt", 0.01)), margin=float(p.get("margin", 0.0)))
    grid.to_csv(out / "grid.csv", out / "grid_header.json")
    chk = grid.check()
    return {"grid": {"nx": int(grid.x.size), "nt": int(grid.t.size), "dx": grid.dx},
            "invariants": chk, "checks": {"invariants": chk["ok"]}}, ["grid.csv", "grid_header.json"]


def _run_clt(cfg, out, workers):
    from .fluctuations import clt_experiment

    p = cfg.params
    obs = observable_from_dict(cfg.observable or {"name": "entropy"})
    rep = clt_experiment(cfg.model, obs, float(p.get("t", cfg.model.T)), int(p.get("replicas", 500)),
                         workers=workers, cov_method=p.get("cov_method", "exact"))
    rep.write(out / "clt.json", out / "clt_samples.csv")
    checks = {"ks": rep.ks_distance <= float(p.get("ks_max", 0.1)),
              "centered": abs(rep.empirical_mean) <= 3 * rep.mean_standard_error}
    return {"report": rep.to_dict(), "checks": checks}, ["clt.json", "clt_samples.csv"]


def _run_hitting(cfg, out, workers):
    from .hitting import hitting_clt_experiment

    p = cfg.params
    obs = observable_from_dict(cfg.observable or {"name": "entropy"})
    rep = hitting_clt_experiment(cfg.model, obs, float(p["a"]), int(p.get("replicas", 500)), workers=workers,
                                 override=bool(p.get("override", False)))
    rep.write(out / "hitting.json", out / "hitting_samples.csv")
    tol = float(p.get("std_tolerance", 0.15))
    checks = {"std": abs(rep.empirical_std / rep.chi - 1) <= tol if rep.chi > 0 else False,
              "centered": abs(rep.empirical_mean) <= 3 * rep.mean_standard_error,
              "never_hit": rep.never_hit_fraction <= float(p.get("never_hit_max", 0.01))}
    return {"report": rep.to_dict(), "checks": checks}, ["hitting.json", "hitting_samples.csv"]


def _generator(cfg, n):
    from .portfolios import generating_from_observable

    return generating_from_observable(observable_from_dict(cfg.observable or {"name": "entropy"}), n)


def _run_portfolio(cfg, out, workers):
    from .experiments import master_formula_check
    from .portfolios import relative_value, simulate_market

    spec, p = cfg.model, cfg.params
    G = _generator(cfg, spec.n)
    reps = int(p.get("replicas", 20))
    market = simulate_market(spec, range(reps), workers)
    result, arts, checks = {}, [], {}
    for mode in p.get("modes", ["multiplicative", "additive"]):
        rep = master_formula_check(spec, G, mode, reps, market=market)
        result[mode] = rep.to_dict()
        checks[f"{mode}_within_1pct"] = rep.rms_terminal_error <= float(p.get("tolerance", 0.01))
        checks[f"{mode}_gamma_nondecreasing"] = rep.min_gamma_increment >= -1e-8
        try:
            led = relative_value(spec.times(), market[1][0], market[2][0], G, mode)
            led.to_csv(out / f"ledger_{mode}.csv")
            arts.append(f"ledger_{mode}.csv")
        except ValueError:
            pass
    return {"master_formula": result, "checks": checks}, arts


def _run_concentration(cfg, out, workers):
    from .portfolios import concentration_experiment

    spec, p = cfg.model, cfg.params
    G = _generator(cfg, spec.n)
    reps = concentration_experiment(spec, G, p.get("r_values", [0.01, 0.02]), p.get("t_values", [5.0, 10.0]),
                                    int(p.get("replicas", 400)), norm_ratio=float(p.get("norm_ratio", 1.0)),
                                    mode=p.get("mode", "multiplicative"), burn_in=float(p.get("burn_in", 10.0)),
                                    T_long=float(p.get("T_long", 200.0)), workers=workers)
    rows = [r.to_dict() for r in reps]
    with open(out / "bounds.json", "w") as fh:
        fh.write(dumps(rows) + "\n")
    checks = {f"t={r.t:g},r={r.r:g}": r.holds for r in reps if r.holds is not None}
    return {"bounds": rows, "checks": checks}, ["bounds.json"]


def _run_convergence(cfg, out, workers):
    from .experiments import convergence_experiment

    p = cfg.params
    rep = convergence_experiment(cfg.model, p.get("ns", [100, 400, 1600]), float(p.get("t", cfg.model.T)),
                                 int(p.get("replicas", 100)), workers=workers)
    _write_csv(out / "convergence.csv", ["n", "w1_mean", "w1_se", "coupling_mean", "coupling_se"],
               zip(rep.ns, rep.w1_mean, rep.w1_se, rep.coupling_mean, rep.coupling_se))
    checks = {"w1_slope": abs(rep.w1_slope + 0.5) <= 0.15}
    if not math.isnan(rep.coupling_slope):
        checks["coupling_slope"] = abs(rep.coupling_slope + 0.5) <= 0.1
    return {"report": rep.to_dict(), "checks": checks}, ["convergence.csv"]


RUNNERS = {"simulate": _run_simulate, "hydrolimit": _run_hydrolimit, "clt": _run_clt,
           "hitting": _run_hitting, "portfolio": _run_portfolio, "concentration": _run_concentration,
           "convergence": _run_convergence}


def run(cfg: ExperimentConfig, out: Path, workers: int = 1) -> int:
    """Run one experiment; returns the exit status."""
    from .hitting import DegenerateSlopeError, NotHitError
    from .hydro import ExtrapolationError, NumericalFailure
    from .observables import DomainError
    from .particles import SimulationError
    from .portfolios import DegeneratePortfolioError

    out.mkdir(parents=True, exist_ok=True)
    cfg_text = dumps(cfg.to_dict())
    manifest = {"kind": cfg.kind, "config": cfg.to_dict(), "seed": cfg.model.seed, "version": __version__,
                "started_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
                "config_hash": content_hash(cfg_text), "artifacts": []}
    try:
        result, arts = RUNNERS[cfg.kind](cfg, out, workers)
        status = 0
    except (NumericalFailure, SimulationError, DegeneratePortfolioError, NotHitError, DegenerateSlopeError,
            DomainError, ExtrapolationError) as exc:
        with open(out / "failure.json", "w") as fh:
            fh.write(dumps({"kind": cfg.kind, "error": type(exc).__name__, "message": str(exc)}) + "\n")
        manifest["artifacts"] = ["failure.json"]
        manifest["status"] = "error"
        with open(out / "manifest.json", "w") as fh:
            fh.write(dumps(manifest) + "\n")
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    checks = result.get("checks", {})
    result = {"kind": cfg.kind, "seed": cfg.model.seed, "status": "pass" if all(checks.values()) else "fail",
              **result}
    text = dumps(result) + "\n"
    with open(out / "result.json", "w") as fh:
        fh.write(text)
    manifest["artifacts"] = ["result.json"] + arts
    manifest["result_hash"] = content_hash(text)
    with open(out / "manifest.json", "w") as fh:
        fh.write(dumps(manifest) + "\n")
    print(f"{cfg.kind}: {result['status']} -> {out}")
    return status


def report(directory: Path) -> dict:
    """Aggregate every manifest under ``directory`` into summary.json."""
    entries = []
    for mpath in sorted(Path(directory).rglob("manifest.json")):
        rel = str(mpath.parent.relative_to(directory)) or "."
        try:
            with open(mpath) as fh:
                man = json.load(fh)
            kind = man["kind"]
            if man.get("status") == "error":
                entries.append({"dir": rel, "kind": kind, "status": "error"})
                continue
            with open(mpath.parent / "result.json") as fh:
                res = json.load(fh)
            entries.append({"dir": rel, "kind": kind, "status": res.get("status", "unknown"),
                            "checks": res.get("checks", {})})
        except (OSError, ValueError, KeyError, TypeError) as exc:
            entries.append({"dir": rel, "status": "skipped", "reason": f"{type(exc).__name__}: {exc}"})
    summary = {"experiments": entries,
               "counts": {s: sum(e["status"] == s for e in entries) for s in sorted({e["status"] for e in entries})}}
    with open(Path(directory) / "summary.json", "w") as fh:
        fh.write(dumps(summary) + "\n")
    return summary


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rankfield", description=__doc__.splitlines()[0])
    parser.add_argument("kind", help=f"one of {', '.join(KINDS)}, or 'report'")
    parser.add_argument("target", nargs="?", help="directory for 'report'")
    parser.add_argument("--config", help="experiment config (JSON)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--seed", type=int)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    if args.kind == "report":
        if not args.target:
            print("usage: rankfield report <dir>", file=sys.stderr)
            return 2
        if not os.path.isdir(args.target):
            print(f"not a directory: {args.target}", file=sys.stderr)
            return 2
        print(dumps(report(Path(args.target))))
        return 0
    if args.kind not in KINDS:
        print(f"unknown experiment kind {args.kind!r}; expected one of {', '.join(KINDS)}", file=sys.stderr)
        return 2
    if not args.config:
        print("--config is required", file=sys.stderr)
        return 2
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
        if args.seed is not None:
            raw.setdefault("model", {})["seed"] = args.seed
        cfg = ExperimentConfig.from_dict(raw, args.kind)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    if args.workers < 1:
        print("--workers must be >= 1", file=sys.stderr)
        return 2
    out = Path(args.out or cfg.out or os.path.join("runs", cfg.kind))
    return run(cfg, out, args.workers)


if __name__ == "__main__":
    sys.exit(main())
