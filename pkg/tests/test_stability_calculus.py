"""Tests for the scalar stability machinery: omega weights, the geometric
cascade, the first-gap index, and the delta recursion budget."""

import json
import math

import numpy as np
import pytest

from eitlab.stability_calculus import (BudgetInputs, CascadeParams,
                                       OmegaWeight, StabilityError, cascade,
                                       delta_recursion, h_bar, save_budget)

E2 = math.exp(-2.0)


def test_omega_eval_examples():
    w = OmegaWeight(1.0)
    assert w.eval(1.0) == E2
    assert w.eval(math.exp(-4.0)) == pytest.approx(E2 / 2.0, rel=1e-15)
    # continuity at the branch point
    assert w.eval(E2 * (1 - 1e-12)) == pytest.approx(E2, rel=1e-9)
    with pytest.raises(StabilityError):
        w.eval(0.0)
    with pytest.raises(StabilityError):
        w.eval(-1.0)


def test_omega_monotone_and_concave():
    w = OmegaWeight(0.7)
    t = np.geomspace(1e-12, 2.0, 300)
    v = np.array([w.eval(x) for x in t])
    assert np.all(np.diff(v) >= -1e-18)
    assert np.all(v <= E2 + 1e-18)
    # sampled midpoint concavity on the curved branch
    for a, b in zip(t[:150], t[50:200]):
        mid = w.eval(0.5 * (a + b))
        assert mid >= 0.5 * (w.eval(a) + w.eval(b)) - 1e-15


def test_omega_iterates():
    w = OmegaWeight(1.0)
    assert w.iterate(1, 0.3) == w.eval(0.3)
    assert w.iterate(2, 1.7) == E2              # fixed branch after one step
    t = 1e-9
    for j in range(1, 6):
        assert w.iterate(j + 1, t) >= w.iterate(j, t) - 1e-18
    with pytest.raises(StabilityError):
        w.iterate(0, 0.5)


def test_omega_inverse_round_trip():
    w = OmegaWeight(1.0)
    assert w.inverse(E2 / 2.0) == pytest.approx(math.exp(-4.0), rel=1e-12)
    for s in np.geomspace(E2 / 300.0, 0.999 * E2, 40):
        t = w.inverse(s)
        assert w.eval(t) == pytest.approx(s, rel=1e-12)
    # monotone to zero (above the underflow clamp)
    ss = np.geomspace(E2 / 300.0, 0.9 * E2, 50)
    ts = [w.inverse(s) for s in ss]
    assert np.all(np.diff(ts) > 0)
    with pytest.raises(StabilityError):
        w.inverse(E2)


def test_omega_inverse_underflow_clamps_to_zero():
    w = OmegaWeight(0.05)                       # b = 1/C for large C
    assert w.inverse_iterate(9, 0.5 * E2) == 0.0


def test_cascade_parameters():
    c = cascade(1.0, 1.0, 8)
    assert c.cascade_angle == pytest.approx(math.pi / 4.0)
    s1 = math.sin(math.atan(math.sin(math.pi / 4.0) / 4.0))
    assert c.lam[0] == pytest.approx(1.0 / (1.0 + s1), rel=1e-14)
    assert c.rho[0] == pytest.approx(c.lam[0] * s1, rel=1e-14)
    a = (1.0 - s1) / (1.0 + s1)
    assert c.a == pytest.approx(a, rel=1e-14)
    # exactly geometric, decreasing, with positive gaps
    assert np.allclose(c.lam[1:] / c.lam[:-1], a, rtol=1e-13)
    assert np.allclose(c.d[1:] / c.d[:-1], a, rtol=1e-13)
    assert np.all(np.diff(c.lam) < 0) and np.all(c.d > 0)
    assert np.all(c.rho < c.lam)


def test_h_bar():
    c = cascade(1.0, 1.0, 12)
    assert h_bar(c, c.d[0]) == 1
    assert h_bar(c, c.d[2]) == 3
    assert h_bar(c, 0.5 * (c.d[1] + c.d[2])) == 3
    # nonincreasing in r
    rs = np.linspace(c.d[5], c.d[0], 40)
    hs = [h_bar(c, r) for r in rs]
    assert np.all(np.diff(hs) <= 0)
    with pytest.raises(StabilityError):
        h_bar(c, 2.0 * c.d[0])


def test_delta_recursion_trivial_cases():
    zero = delta_recursion(BudgetInputs(0.0, 0.3, 10.0, 3))
    assert all(d == 0.0 for d in zero["delta_sequence"])
    assert zero["final_bound"] == 0.0
    triv = delta_recursion(BudgetInputs(0.1, 0.1 * math.exp(2.0) * 0.99,
                                        10.0, 3))
    assert triv["branch"] == "trivial"
    assert triv["lipschitz_constant"] == math.exp(2.0)


def test_delta_recursion_log_convexity_branch():
    rep = delta_recursion(BudgetInputs(1e-4, 0.5, 20.0, 3))
    assert rep["branch"] == "log-convexity"
    assert len(rep["delta_sequence"]) == 4      # delta_0 .. delta_K
    assert rep["delta_sequence"][0] == 0.0
    assert all(np.isfinite(d) for d in rep["delta_sequence"])
    assert np.all(np.diff(rep["delta_sequence"]) >= 0)
    # final bound dominates E through the implied constant
    assert rep["final_bound"] >= 0.0


def test_delta_recursion_monotone_in_eps_and_K():
    base = delta_recursion(BudgetInputs(1e-4, 0.5, 4.0, 2))
    more_eps = delta_recursion(BudgetInputs(2e-4, 0.5, 4.0, 2))
    assert more_eps["final_bound"] >= base["final_bound"]
    more_K = delta_recursion(BudgetInputs(1e-4, 0.5, 4.0, 4))
    assert more_K["final_bound"] >= base["final_bound"]


def test_budget_report_serialization(tmp_path):
    rep = delta_recursion(BudgetInputs(1e-4, 0.5, 200.0, 3))
    path = tmp_path / "budget.json"
    save_budget(rep, path)
    with open(path) as f:
        back = json.load(f)
    assert set(back) >= {"inputs", "delta_sequence", "final_bound", "branch",
                         "lipschitz_constant"}
