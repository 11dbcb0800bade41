import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankfield.hitting import (
    DegenerateSlopeError, NotHitError, admissible_level_check, empirical_hitting_time, hitting_clt_experiment,
    limit_hitting_time,
)
from rankfield.hydro import solve_porous_medium
from rankfield.model import ModelSpec, affine, constant, entropy_observable, gaussian

t = np.linspace(0, 2, 201)
heat_H = -(1 + t) / 2


def test_limit_hitting_time_on_heat_entropy():
    hit = limit_hitting_time(t, heat_H, -1.0)
    assert hit.tau == pytest.approx(1.0, abs=1e-12) and hit.slope == pytest.approx(-0.5)
    between = limit_hitting_time(t, heat_H, -0.7525)
    assert between.tau == pytest.approx(0.505, abs=1e-12)
    assert limit_hitting_time(t, heat_H, -0.5).tau == 0.0


def test_limit_hitting_failures():
    with pytest.raises(NotHitError):
        limit_hitting_time(t, heat_H, -2.0)
    with pytest.raises(DegenerateSlopeError):
        limit_hitting_time(t, heat_H, -1.0, slope_fn=lambda s: 0.0)


def test_admissibility():
    assert admissible_level_check(constant(0.0), constant(1.0), "H", -0.75, -0.5) == (True, "ok")
    ok, why = admissible_level_check(affine(1.0, -2.0), constant(1.0), "H", -0.75, -0.5)
    assert not ok and why.startswith("monotonicity")
    ok, why = admissible_level_check(constant(0.0), constant(1.0), "H", 0.0, -0.5)
    assert not ok and why.startswith("level")
    ok, why = admissible_level_check(constant(0.0), constant(1.0), "S", -0.1, 0.6)
    assert not ok and why.startswith("level")


def test_empirical_hitting_examples():
    times = np.array([0.0, 1.0, 2.0])
    assert empirical_hitting_time(times, [1.0, 0.5, 0.0], 0.25) == pytest.approx(1.5)
    assert empirical_hitting_time(times, [1.0, 0.5, 0.4], 0.25) == math.inf
    assert empirical_hitting_time(times, [0.25, 0.5, 0.0], 0.25) == 0.0
    rows = empirical_hitting_time(times, np.array([[1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]), 0.5)
    assert rows.tolist() == [0.5, 1.5]


@settings(max_examples=80)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=30), st.floats(-0.5, 0.5), st.floats(0.0, 0.5))
def test_hitting_time_monotone_in_level(steps, a, gap):
    # a nonincreasing path: lower levels are reached no earlier, and the path equals a at tau
    path = 1.0 - np.cumsum(np.concatenate([[0.0], steps]))
    times = np.arange(path.size, dtype=float)
    hi, lo = empirical_hitting_time(times, path, a), empirical_hitting_time(times, path, a - gap)
    assert lo >= hi
    if math.isfinite(hi):
        assert np.interp(hi, times, path) == pytest.approx(a, abs=1e-9)


def test_hitting_experiment_smoke(tmp_path):
    s = ModelSpec(n=50, T=1.5, dt=0.01, b=constant(0.0), sigma=constant(1.0), lam=gaussian(), seed=2)
    g = solve_porous_medium(s.b, s.sigma, s.lam, 1.5, dx=0.05, margin=3.0)
    rep = hitting_clt_experiment(s, entropy_observable(), -0.75, 30, grid=g)
    assert rep.tau == pytest.approx(0.5, abs=2e-3) and rep.slope == pytest.approx(-0.5, abs=2e-3)
    assert rep.admissible and rep.chi > 0
    assert rep.never_hit + rep.samples.size == rep.replicas
    with pytest.raises(ValueError):
        hitting_clt_experiment(s.replace(b=affine(1.0, -2.0)), entropy_observable(), -0.75, 2, grid=g)
    rep.write(tmp_path / "h.json", tmp_path / "h.csv")
    assert (tmp_path / "h.json").exists()
