"""Gaussian fluctuation field of the empirical CDF around R.

The linearized forward operator L p = -(b(R) p)_x + (sigma(R)^2 / 2 p)_xx is
discretized with the same conservative flux family as the hydrodynamic
solver (centred where diffusion dominates the cell, upwinded otherwise) and
zero-flux ends. One explicit step is a column-stochastic matrix A = I + dt L,
so the discrete transition kernel is a product of A's.

The mild solution is evaluated by pushing the initial bridge term and the
white-noise sources forward through these products. Noise is injected once per
stored grid interval, at the substep nearest its midpoint, and then carried
through the remaining substeps; this is the exact mild sum for that
source-time discretization. Covariances of
linear functionals follow exactly by running the adjoint backwards.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .hydro import DensityGrid
from .model import CoefficientFunction, ConfigurationError, InitialLaw, ModelSpec, ObservableSpec, TestFunction
from .stats import gaussian_ks


def field_rng(seed: int, replica: int) -> np.random.Generator:
    # second spawn-key slot keeps these streams apart from the particle streams
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replica), 1))
    return np.random.Generator(np.random.Philox(ss))


def operator_diagonals(R: np.ndarray, b: CoefficientFunction, sigma: CoefficientFunction, dx: float):
    """(lower, diag, upper) of L on the nodes; lower[i] couples i-1 -> i, upper[i] couples i+1 -> i."""
    a = b(R)
    d = 0.5 * sigma(R) ** 2
    am = 0.5 * (a[1:] + a[:-1])
    dmin = np.minimum(d[1:], d[:-1])
    absa = np.abs(am)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(absa > 0, np.clip(1 - 2 * dmin / (absa * dx), 0.0, 1.0), 0.0)
    aL = 0.5 * am + 0.5 * q * absa + d[:-1] / dx   # weight of p_i in the flux at i+1/2
    aR = 0.5 * am - 0.5 * q * absa - d[1:] / dx    # weight of p_{i+1}
    N = R.size
    lo, up, dg = np.zeros(N), np.zeros(N), np.zeros(N)
    lo[1:] = aL / dx
    up[:-1] = -aR / dx
    dg[:-1] -= aL / dx
    dg[1:] += aR / dx
    return lo, dg, up


def _apply(p, lo, dg, up, dt):
    # p: (N,) or (N, m); returns (I + dt L) p
    out = p + dt * (dg[:, None] * p if p.ndim == 2 else dg * p)
    if p.ndim == 2:
        out[1:] += dt * lo[1:, None] * p[:-1]
        out[:-1] += dt * up[:-1, None] * p[1:]
    else:
        out[1:] += dt * lo[1:] * p[:-1]
        out[:-1] += dt * up[:-1] * p[1:]
    return out


def _apply_adjoint(w, lo, dg, up, dt):
    out = w + dt * (dg[:, None] * w if w.ndim == 2 else dg * w)
    if w.ndim == 2:
        out[:-1] += dt * lo[1:, None] * w[1:]
        out[1:] += dt * up[:-1, None] * w[:-1]
    else:
        out[:-1] += dt * lo[1:] * w[1:]
        out[1:] += dt * up[:-1] * w[:-1]
    return out


def safe_substep(b: CoefficientFunction, sigma: CoefficientFunction, dx: float) -> float:
    r = np.linspace(0, 1, 1001)
    amax = float(np.max(np.abs(b(r))))
    dmax = float(np.max(0.5 * sigma(r) ** 2))
    # keeps the diagonal of I + dt L at or above 1/2, which also rules out odd-even decoupling
    return 0.5 / (amax / dx + 2 * dmax / dx ** 2)


class Propagator:
    """Discrete forward operator between the stored times of a DensityGrid."""

    def __init__(self, grid: DensityGrid, b: CoefficientFunction, sigma: CoefficientFunction,
                 dt: float | None = None):
        self.grid, self.b, self.sigma = grid, b, sigma
        self.dx = grid.dx
        limit = safe_substep(b, sigma, self.dx)
        if dt is not None and dt > limit * (1 + 1e-12):
            raise ConfigurationError(f"kernel step {dt:g} exceeds the stable limit {limit:g}")
        self.dt_max = dt if dt is not None else limit
        self._cache: dict[int, list] = {}

    def interval(self, k: int) -> list:
        """Substeps (lo, diag, up, h) carrying stored time k to k+1."""
        if k not in self._cache:
            t0, t1 = self.grid.t[k], self.grid.t[k + 1]
            m = max(1, int(math.ceil((t1 - t0) / self.dt_max - 1e-9)))
            h = (t1 - t0) / m
            steps = []
            for j in range(m):
                w = (j + 0.5) / m
                R = (1 - w) * self.grid.R[k] + w * self.grid.R[k + 1]
                steps.append((*operator_diagonals(R, self.b, self.sigma, self.dx), h))
            self._cache[k] = steps
        return self._cache[k]

    def split(self, k: int) -> int:
        return len(self.interval(k)) // 2

    def forward(self, p, k: int, start: int = 0, stop: int | None = None):
        for lo, dg, up, h in self.interval(k)[start:stop]:
            p = _apply(p, lo, dg, up, h)
        return p

    def backward(self, w, k: int, start: int = 0, stop: int | None = None):
        for lo, dg, up, h in reversed(self.interval(k)[start:stop]):
            w = _apply_adjoint(w, lo, dg, up, h)
        return w

    def noise_scale(self, k: int) -> np.ndarray:
        """sigma(R) R_x^{1/2} at the injection point of interval k, Rx floored at 0."""
        steps = self.interval(k)
        w = self.split(k) / len(steps)
        R = (1 - w) * self.grid.R[k] + w * self.grid.R[k + 1]
        Rx = (1 - w) * self.grid.Rx[k] + w * self.grid.Rx[k + 1]
        return self.sigma(R) * np.sqrt(np.maximum(Rx, 0.0))


@dataclass
class TransitionKernelGrid:
    s: float
    times: np.ndarray
    x: np.ndarray
    sources: np.ndarray   # indices of the source nodes y
    p: np.ndarray         # (sources, times, x)

    def mass(self) -> np.ndarray:
        return self.p.sum(axis=-1) * (self.x[1] - self.x[0])


def transition_kernel(grid: DensityGrid, b: CoefficientFunction, sigma: CoefficientFunction, s: float,
                      times=None, sources=None, dt: float | None = None) -> TransitionKernelGrid:
    """p(s, y; t, x) for source nodes y, from a discrete delta of mass 1 at (s, y)."""
    ks = grid.index_of(s)
    times = np.asarray([grid.T] if times is None else times, dtype=float)
    kt = [grid.index_of(t) for t in times]
    if min(kt) < ks:
        raise ValueError("output times must not precede the source time")
    N = grid.x.size
    src = np.arange(N) if sources is None else np.asarray(sources, dtype=int)
    prop = Propagator(grid, b, sigma, dt)
    P = np.zeros((N, src.size))
    P[src, np.arange(src.size)] = 1.0 / grid.dx
    out = np.empty((src.size, times.size, N))
    k = ks
    for j in np.argsort(kt, kind="stable"):
        while k < kt[j]:
            P = prop.forward(P, k)
            k += 1
        out[:, j, :] = P.T
    return TransitionKernelGrid(float(grid.t[ks]), times, grid.x.copy(), src, out)


def _bridge_at(u: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # exact Brownian bridge values at nondecreasing points u in [0, 1]
    du = np.diff(np.concatenate([[0.0], u]))
    W = np.cumsum(np.sqrt(np.maximum(du, 0.0)) * rng.standard_normal(u.size))
    W1 = W[-1] + math.sqrt(max(1.0 - u[-1], 0.0)) * rng.standard_normal()
    return W - u * W1


@dataclass
class FluctuationField:
    x: np.ndarray
    times: np.ndarray
    initial: np.ndarray   # (times, x) bridge term pushed forward
    noise: np.ndarray     # (times, x) white-noise term
    replica: int = 0
    seed: int = 0

    @property
    def G(self) -> np.ndarray:
        return self.initial + self.noise

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    def at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"t={t} was not stored")
        return self.G[k]


def _simulate_batch(prop: Propagator, lam: InitialLaw, t_out, seed: int, replicas):
    grid = prop.grid
    F0 = lam.cdf(grid.x)
    kt = sorted({grid.index_of(t) for t in t_out})
    rngs = [field_rng(seed, r) for r in replicas]
    B = len(rngs)
    init = np.stack([_bridge_at(F0, g) for g in rngs], axis=1)   # (N, B)
    noise = np.zeros_like(init)
    rt = math.sqrt(1.0 / grid.dx)
    store_i, store_n = {}, {}
    if 0 in kt:
        store_i[0], store_n[0] = init.copy(), noise.copy()
    for k in range(kt[-1]):
        h = grid.t[k + 1] - grid.t[k]
        c = prop.noise_scale(k)[:, None] * math.sqrt(h) * rt
        Z = np.stack([g.standard_normal(grid.x.size) for g in rngs], axis=1)
        j = prop.split(k)
        noise = prop.forward(prop.forward(noise, k, 0, j) + c * Z, k, j)
        init = prop.forward(init, k)
        if k + 1 in kt:
            store_i[k + 1], store_n[k + 1] = init.copy(), noise.copy()
    times = grid.t[kt]
    I = np.stack([store_i[k] for k in kt])   # (T, N, B)
    Nz = np.stack([store_n[k] for k in kt])
    return times, I, Nz, B


def simulate_fluctuation_field(grid: DensityGrid, lam: InitialLaw, b: CoefficientFunction,
                               sigma: CoefficientFunction, t_out, seed: int = 0, replica: int = 0,
                               propagator: Propagator | None = None) -> FluctuationField:
    """One replica of G at the stored times ``t_out`` (a number or a list)."""
    t_out = np.atleast_1d(np.asarray(t_out, dtype=float))
    prop = propagator or Propagator(grid, b, sigma)
    times, I, Nz, _ = _simulate_batch(prop, lam, t_out, seed, [replica])
    return FluctuationField(grid.x.copy(), times, I[..., 0], Nz[..., 0], replica, seed)


def fluctuation_functional(field: FluctuationField, f: TestFunction, t: float) -> float:
    """dx * sum_x f'(x) G(t, x)."""
    return float(field.dx * np.sum(f.d(field.x, 1) * field.at(t)))


def sample_functionals(grid: DensityGrid, lam: InitialLaw, b, sigma, fs, t: float, replicas: int,
                       seed: int = 0, chunk: int = 128):
    """Monte Carlo (replicas, k) array of the functionals, plus its bridge and noise parts."""
    prop = Propagator(grid, b, sigma)
    Fp = np.stack([f.d(grid.x, 1) for f in fs], axis=1) * grid.dx   # (N, k)
    tot, ini, noi = [], [], []
    for start in range(0, replicas, chunk):
        ids = range(start, min(start + chunk, replicas))
        _, I, Nz, _ = _simulate_batch(prop, lam, [t], seed, ids)
        ini.append(I[0].T @ Fp)
        noi.append(Nz[0].T @ Fp)
    ini, noi = np.concatenate(ini), np.concatenate(noi)
    return ini + noi, ini, noi


def exact_functional_covariance(grid: DensityGrid, lam: InitialLaw, b, sigma, fs, t: float,
                                propagator: Propagator | None = None) -> np.ndarray:
    """Covariance of (dx sum f_j' G(t))_j for the discretized field, by the adjoint recursion."""
    prop = propagator or Propagator(grid, b, sigma)
    kt = grid.index_of(t)
    w = np.stack([f.d(grid.x, 1) for f in fs], axis=1) * grid.dx
    cov = np.zeros((w.shape[1], w.shape[1]))
    for k in range(kt - 1, -1, -1):
        j = prop.split(k)
        w = prop.backward(w, k, j)
        h = grid.t[k + 1] - grid.t[k]
        c2 = prop.noise_scale(k) ** 2 * h / grid.dx
        cov += w.T @ (c2[:, None] * w)
        w = prop.backward(w, k, 0, j)
    F0 = lam.cdf(grid.x)
    Cb = np.minimum.outer(F0, F0) - np.outer(F0, F0)
    cov += w.T @ Cb @ w
    return 0.5 * (cov + cov.T)


@dataclass
class LimitCovariance:
    cov: np.ndarray
    grad: np.ndarray
    moments: np.ndarray
    variance: float
    method: str
    replicas: int = 0


def limit_covariance(grid: DensityGrid, lam: InitialLaw, b, sigma, obs: ObservableSpec, t: float,
                     replicas: int | None = None, method: str = "exact", seed: int = 0) -> LimitCovariance:
    """Covariance of the functionals and the scalar variance grad J^T Cov grad J at <f>(rho(t))."""
    sl = grid.slice(t)
    m = np.array([sl.integrate(f(sl.x)) for f in obs.fs])
    g = np.asarray(obs.grad(m), dtype=float)
    if method == "exact":
        cov = exact_functional_covariance(grid, lam, b, sigma, obs.fs, t)
        R = 0
    elif method == "mc":
        if replicas is None or replicas < 100:
            raise ValueError("Monte Carlo covariance needs at least 100 replicas")
        vals, _, _ = sample_functionals(grid, lam, b, sigma, obs.fs, t, replicas, seed)
        cov = np.atleast_2d(np.cov(vals, rowvar=False))
        R = replicas
    else:
        raise ValueError(f"unknown method {method!r}")
    return LimitCovariance(cov, g, m, float(g @ cov @ g), method, R)


# -- end-to-end CLT ---------------------------------------------------------

def _moment_record(obs, k, t, X, Xbar):
    return obs.moments(X)


def observable_moments_at(spec: ModelSpec, obs: ObservableSpec, t: float, replicas: int,
                          workers: int = 1) -> np.ndarray:
    """(replicas, k) sample moments of the interacting system at time t."""
    from functools import partial

    from .particles import run_replicas

    steps = int(round(t / spec.dt))
    if abs(steps * spec.dt - t) > 1e-9 * max(1.0, t):
        raise ValueError("t must be a multiple of dt")
    sub = spec.replace(T=steps * spec.dt) if steps > 0 else spec.replace(T=spec.dt)
    rec = run_replicas(sub, range(replicas), partial(_moment_record, obs), workers=workers)
    return rec[:, steps]


@dataclass
class CLTReport:
    n: int
    t: float
    replicas: int
    predicted_variance: float
    empirical_variance: float
    empirical_mean: float
    ks_distance: float
    dropped_replicas: int
    samples: np.ndarray = field(repr=False)

    @property
    def mean_standard_error(self) -> float:
        return math.sqrt(self.empirical_variance / max(1, self.samples.size))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("samples")
        return d

    def write(self, json_path, csv_path=None):
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["replica", "scaled_error"])
                for i, v in enumerate(self.samples):
                    w.writerow([i, f"{v:.17g}"])


def clt_experiment(spec: ModelSpec, obs: ObservableSpec, t: float, replicas: int, grid: DensityGrid | None = None,
                   workers: int = 1, cov_method: str = "exact", margin: float = 4.0) -> CLTReport:
    """sqrt(n) (J(rho^n(t)) - J(rho(t))) across replicas against N(0, predicted)."""
    from .hydro import solve_porous_medium

    if replicas < 2:
        raise ValueError("need at least two replicas")
    if grid is None:
        grid = solve_porous_medium(spec.b, spec.sigma, spec.lam, max(t, 0.01), margin=margin)
    lc = limit_covariance(grid, spec.lam, spec.b, spec.sigma, obs, t,
                          replicas=max(replicas, 100), method=cov_method, seed=spec.seed)
    J_lim = float(obs.J(lc.moments))
    mom = observable_moments_at(spec, obs, t, replicas, workers)
    ok = np.asarray(obs.domain(mom), dtype=bool)
    vals = math.sqrt(spec.n) * (obs.J(mom[ok]) - J_lim)
    var = float(np.var(vals, ddof=1))
    ks = gaussian_ks(vals, 0.0, lc.variance) if lc.variance > 0 else float("nan")
    return CLTReport(spec.n, float(t), replicas, lc.variance, var, float(vals.mean()), ks,
                     int((~ok).sum()), vals)
