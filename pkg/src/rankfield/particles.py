"""Euler-Maruyama simulation of the rank-based system and its mean-field twin.

Every replica owns a Philox stream derived from (seed, replica), consumed in a
fixed order: n initial draws, then n standard normals per time step. Replaying
a replica's stream reproduces its Brownian increments exactly, which is how the
mean-field particles are coupled to the interacting ones.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import ModelSpec


class SimulationError(RuntimeError):
    """A particle position became non-finite."""


def replica_rng(seed: int, replica: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replica),))
    return np.random.Generator(np.random.Philox(ss))


def empirical_cdf(sample, x):
    """#{j : X_j <= x} / n; right-continuous."""
    s = np.sort(np.asarray(sample, dtype=float))
    return np.searchsorted(s, np.asarray(x, dtype=float), side="right") / s.size


@dataclass(frozen=True)
class EmpiricalMeasure:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.sort(np.asarray(self.values, dtype=float)))

    @property
    def n(self) -> int:
        return self.values.size

    def cdf(self, x):
        return np.searchsorted(self.values, np.asarray(x, dtype=float), side="right") / self.n


def rank_levels(X: np.ndarray) -> np.ndarray:
    """F_{rho^n}(X_i) along the last axis, with the <= convention for ties."""
    X = np.asarray(X, dtype=float)
    n = X.shape[-1]
    order = np.argsort(X, axis=-1, kind="stable")
    s = np.take_along_axis(X, order, axis=-1)
    last_of_run = np.ones_like(s, dtype=bool)
    last_of_run[..., :-1] = s[..., 1:] != s[..., :-1]
    idx = np.where(last_of_run, np.arange(n), n)
    run_end = np.minimum.accumulate(idx[..., ::-1], axis=-1)[..., ::-1]
    levels = np.empty_like(s)
    np.put_along_axis(levels, order, (run_end + 1) / n, axis=-1)
    return levels


@dataclass
class ParticlePath:
    times: np.ndarray
    X: np.ndarray
    Xbar: np.ndarray | None = None
    seed: int = 0
    replica: int = 0

    @property
    def n(self) -> int:
        return self.X.shape[1]

    def measure(self, k: int, mean_field: bool = False) -> EmpiricalMeasure:
        return EmpiricalMeasure((self.Xbar if mean_field else self.X)[k])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "particle_id", "X", "Xbar"])
            for k, t in enumerate(self.times):
                for i in range(self.n):
                    xb = "" if self.Xbar is None else repr(float(self.Xbar[k, i]))
                    w.writerow([repr(float(t)), i, repr(float(self.X[k, i])), xb])


def _mean_field_levels(grid, t: float, Xbar: np.ndarray) -> np.ndarray:
    return grid.interp(t, Xbar)


def iterate_replicas(spec: ModelSpec, replica_ids: Sequence[int], grid=None):
    """Yield (k, t, X, Xbar) for a batch of replicas stepped together.

    X has shape (len(replica_ids), n); Xbar is None unless ``grid`` (a solved
    hydrodynamic limit) is given, in which case the mean-field particles are
    driven by the same initial draws and Gaussian increments.
    """
    n, dt = spec.n, spec.dt
    rngs = [replica_rng(spec.seed, r) for r in replica_ids]
    X = np.stack([spec.lam.sample(g, n) for g in rngs]) if rngs else np.empty((0, n))
    Xbar = X.copy() if grid is not None else None
    sq = math.sqrt(dt)
    times = spec.times()
    yield 0, 0.0, X, Xbar
    for k in range(1, times.size):
        t = times[k - 1]
        xi = np.stack([g.standard_normal(n) for g in rngs])
        lev = rank_levels(X)
        Xn = X + spec.b(lev) * dt + spec.sigma(lev) * sq * xi
        if grid is not None:
            lb = _mean_field_levels(grid, t, Xbar)
            Xbar = Xbar + spec.b(lb) * dt + spec.sigma(lb) * sq * xi
        X = Xn
        if not np.all(np.isfinite(X)):
            bad = np.argwhere(~np.isfinite(X))[0]
            raise SimulationError(
                f"non-finite position at step {k} (t={times[k]:g}), "
                f"replica {replica_ids[bad[0]]}, particle {bad[1]}")
        yield k, times[k], X, Xbar


def _run_chunk(spec, record, grid, ids):
    out = [np.asarray(record(k, t, X, Xb)) for k, t, X, Xb in iterate_replicas(spec, ids, grid)]
    return np.stack(out, axis=1)


def run_replicas(spec: ModelSpec, replicas: Iterable[int], record: Callable, grid=None,
                 workers: int = 1, chunk: int = 64) -> np.ndarray:
    """Simulate replicas and stack ``record(k, t, X, Xbar)`` over time.

    ``record`` must return an array whose first axis runs over the replicas of
    the batch; the result has shape (replicas, steps + 1, ...). Results do not
    depend on ``chunk`` or ``workers``: each replica draws from its own stream
    and every reduction inside a step acts row by row.
    """
    ids = list(replicas)
    batches = [ids[i:i + chunk] for i in range(0, len(ids), chunk)]
    fn = partial(_run_chunk, spec, record, grid)
    if workers > 1 and len(batches) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(fn, batches))
    else:
        parts = [fn(b) for b in batches]
    return np.concatenate(parts, axis=0)


def _positions(k, t, X, Xbar):
    return X


def _both(k, t, X, Xbar):
    return np.stack([X, Xbar], axis=1)


def simulate_rank_based(spec: ModelSpec, replica: int = 0) -> ParticlePath:
    """Full path of one replica of the interacting system."""
    X = run_replicas(spec, [replica], _positions)[0]
    return ParticlePath(spec.times(), X, None, spec.seed, replica)


def simulate_mean_field(spec: ModelSpec, grid, replica: int = 0) -> ParticlePath:
    """Rank-based path plus the mean-field path driven by b(R(t, .)), sigma(R(t, .)).

    The mean-field particles reuse the replica's initial positions and
    increments, so constant coefficients give Xbar == X exactly.
    """
    both = run_replicas(spec, [replica], _both, grid=grid)[0]
    return ParticlePath(spec.times(), both[:, 0], both[:, 1], spec.seed, replica)


def coupling_error(path: ParticlePath, p: float = 1.0) -> float:
    """max over grid times of (1/n) sum_i |X_i - Xbar_i|^p."""
    if path.Xbar is None:
        raise ValueError("path carries no mean-field particles")
    if p < 1:
        raise ValueError("order p must be >= 1")
    return float(np.max(np.mean(np.abs(path.X - path.Xbar) ** p, axis=1)))
