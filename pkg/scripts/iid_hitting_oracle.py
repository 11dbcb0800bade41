"""Independent check of the finite-n hitting-time statistics.

With b = 0 and sigma = 1 the particles are i.i.d. Brownian motions started
from N(0, 1), so the system can be simulated without ranks. The limit is
H*(t) = -(1 + t) / 2, which reaches a = -0.75 at tau = 1/2 with slope -1/2, and
the delta method on (e^X, X e^X) gives chi in closed form. Nothing here
imports rankfield.

usage: python3 scripts/iid_hitting_oracle.py [--n 1000] [--replicas 1000] [--seed 0]
"""
import argparse
import math

import numpy as np


def entropy_variance(v):
    m1, m2 = math.exp(v / 2), v * math.exp(v / 2)
    e11, e12, e22 = math.exp(2 * v), 2 * v * math.exp(2 * v), (v + 4 * v * v) * math.exp(2 * v)
    C = np.array([[e11 - m1 * m1, e12 - m1 * m2], [e12 - m1 * m2, e22 - m2 * m2]])
    g = np.array([1 / m1 + m2 / m1 ** 2, -1 / m1])
    return float(g @ C @ g)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--replicas", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--dt", type=float, default=0.01)
    args = ap.parse_args()

    a, tau = -0.75, 0.5
    chi = math.sqrt(entropy_variance(1 + tau)) / 0.5
    rng = np.random.default_rng(args.seed)
    steps = int(round(1.5 / args.dt))
    out = np.full(args.replicas, np.nan)
    for r in range(args.replicas):
        X = rng.standard_normal(args.n)
        prev = None
        for k in range(steps + 1):
            if k:
                X += math.sqrt(args.dt) * rng.standard_normal(args.n)
            w = np.exp(X - X.max())
            w /= w.sum()
            H = -np.sum(w * np.log(w)) - math.log(args.n)
            if H <= a:
                t0 = (k - 1) * args.dt
                out[r] = t0 + args.dt * (prev - a) / (prev - H) if prev is not None else 0.0
                break
            prev = H
    vals = math.sqrt(args.n) * (out[np.isfinite(out)] - tau)
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    print(f"chi {chi:.4f}  std {vals.std(ddof=1):.4f}  ratio {vals.std(ddof=1) / chi:.3f}")
    print(f"mean {vals.mean():.4f} +- {se:.4f} ({vals.mean() / se:.2f} standard errors)  "
          f"never hit {args.replicas - vals.size}")


if __name__ == "__main__":
    main()
