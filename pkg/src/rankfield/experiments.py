"""Multi-module experiments: particle convergence and master-formula backtests."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np

from .hydro import DensityGrid, solve_porous_medium
from .model import ModelSpec
from .particles import iterate_replicas
from .portfolios import GeneratingFunction, relative_value, self_financing_relative_value, simulate_market
from .stats import loglog_slope, wasserstein1


def _convergence_chunk(spec, grid, t, ids):
    target = int(round(t / spec.dt))
    sup = None
    w1 = np.full(len(ids), np.nan)
    for k, tk, X, Xb in iterate_replicas(spec, ids, grid):
        d = np.abs(X - Xb)
        sup = d if sup is None else np.maximum(sup, d)
        if k == target:
            R = grid.R_at(tk)
            w1 = np.array([wasserstein1(row, (grid.x, R)) for row in X])
            break
    return w1, sup.mean(axis=1)


@dataclass
class ConvergenceReport:
    ns: list
    t: float
    replicas: int
    w1_mean: list
    w1_se: list
    coupling_mean: list
    coupling_se: list
    w1_slope: float
    coupling_slope: float

    def to_dict(self):
        return asdict(self)


def convergence_experiment(spec: ModelSpec, ns, t: float, replicas: int, grid: DensityGrid | None = None,
                           workers: int = 1, chunk: int = 25) -> ConvergenceReport:
    """Mean W1(rho^n(t), rho(t)) and E sup_t |X_i - Xbar_i| across particle numbers.

    Both statistics are averaged over replicas; the sup runs over the grid
    times up to ``t`` and the particle average uses exchangeability.
    """
    if grid is None:
        grid = solve_porous_medium(spec.b, spec.sigma, spec.lam, t, margin=2.0)
    w1m, w1s, cm, cs = [], [], [], []
    for n in ns:
        sub = spec.replace(n=int(n), T=t)
        batches = [list(range(i, min(i + chunk, replicas))) for i in range(0, replicas, chunk)]
        fn = partial(_convergence_chunk, sub, grid, t)
        if workers > 1 and len(batches) > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                parts = list(ex.map(fn, batches))
        else:
            parts = [fn(b) for b in batches]
        w1 = np.concatenate([p[0] for p in parts])
        cp = np.concatenate([p[1] for p in parts])
        w1m.append(float(w1.mean()))
        w1s.append(float(w1.std(ddof=1) / math.sqrt(replicas)))
        cm.append(float(cp.mean()))
        cs.append(float(cp.std(ddof=1) / math.sqrt(replicas)))
    slope_c = loglog_slope(ns, cm) if min(cm) > 0 else float("nan")
    return ConvergenceReport([int(n) for n in ns], float(t), replicas, w1m, w1s, cm, cs,
                             loglog_slope(ns, w1m), slope_c)


@dataclass
class MasterFormulaReport:
    generator: str
    mode: str
    replicas: int
    bankrupt: int
    rms_terminal_error: float
    max_path_error: float
    min_gamma_increment: float
    terminal_errors: np.ndarray = field(repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("terminal_errors")
        return d


def master_formula_check(spec: ModelSpec, G: GeneratingFunction, mode: str, replicas: int,
                         workers: int = 1, market=None) -> MasterFormulaReport:
    """Pathwise V against the wealth of the generated portfolio rebalanced every step.

    A replica whose additive denominator reaches 0 (the leveraged portfolio is
    wiped out) counts as bankrupt and enters with infinite error.
    """
    from .portfolios import DegeneratePortfolioError

    X, mu, s = market if market is not None else simulate_market(spec, range(replicas), workers)
    times = spec.times()
    term, worst, bankrupt, min_inc = [], 0.0, 0, math.inf
    for r in range(mu.shape[0]):
        try:
            L = relative_value(times, mu[r], s[r], G, mode)
        except DegeneratePortfolioError:
            bankrupt += 1
            term.append(math.inf)
            continue
        W = self_financing_relative_value(mu[r], L.pi)
        err = np.abs(W / L.V - 1.0)
        term.append(float(err[-1]))
        worst = max(worst, float(err.max()))
        min_inc = min(min_inc, float(np.diff(L.gamma).min()))
    term = np.asarray(term)
    rms = float(np.sqrt(np.mean(term ** 2)))
    return MasterFormulaReport(G.name, mode, int(mu.shape[0]), bankrupt, rms,
                               worst if bankrupt == 0 else math.inf, min_inc, term)
