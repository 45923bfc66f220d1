from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from presto.bsde import g_expectation_batch
from presto.errors import BadStoppingTime, InvalidAlpha
from presto.instances import fix_a, fix_b, fix_c, fix_d, oracle_instance
from presto.oracle import GRID, brute_force_value, enumerate_codes, evaluate_rules
from presto.process import ExtendedStoppingTime
from presto.rbsde import solve_rbsde
from presto.snell import supermartingale_excess
from presto.stopping import (
    in_martingale_class,
    is_martingale_interval,
    optimality_report,
    reflection_windows,
    tau_alpha,
    tau_tilde,
    theta_alpha,
    value_function,
)

TOL = 1e-10


def _sol(inst):
    return solve_rbsde(inst.tree, inst.driver, inst.obstacle)


def _const(tree, code, S=0):
    return ExtendedStoppingTime(S, np.full(tree.n_leaves, code))


# ------------------------------------------------------------------ examples
def test_value_function_fixtures():
    for make, want in ((fix_a, 1.0), (fix_b, 0.5), (fix_d, 1.0)):
        inst = make()
        assert value_function(inst.tree, inst.driver, inst.obstacle, 0).tolist() == [want]


def test_tau_alpha_examples():
    a = fix_a()
    assert np.all(tau_alpha(_sol(a), a.driver, 0, 0.5).codes == 0)
    b = fix_b()
    sol = _sol(b)
    assert np.all(tau_alpha(sol, b.driver, 0, 0.3).codes == 0)
    assert np.all(tau_alpha(sol, b.driver, 0, 0.9).codes == 1)
    for bad in (0.0, 1.0, -0.5):
        with pytest.raises(InvalidAlpha):
            tau_alpha(sol, b.driver, 0, bad)


def test_theta_alpha_examples():
    a = fix_a()
    assert np.all(theta_alpha(_sol(a), 0, 1.0).codes == 0)
    b = fix_b()
    assert np.all(theta_alpha(_sol(b), 0, 0.3).codes == 0)
    c = fix_c()
    theta = theta_alpha(_sol(c), 0, 1.0)
    up = np.array([c.tree.post_mark[1][j] == "u" for j in c.tree.pre_parent[2]])
    assert np.all(theta.codes[up] == 4) and np.all(theta.codes[~up] == 3)
    with pytest.raises(InvalidAlpha):
        theta_alpha(_sol(b), 0, 0.0)


def test_tau_tilde_examples():
    a = fix_a()
    assert np.all(tau_tilde(_sol(a), 0).codes == 2 * a.tree.n_stages)
    b = fix_b(0.8)
    assert np.all(tau_tilde(_sol(b), 0).codes == 0)
    d = fix_d()
    sol = _sol(d)
    tt = tau_tilde(sol, 0)
    assert tt.codes.tolist() == [1, 2]
    assert optimality_report(d.tree, d.driver, d.obstacle, sol, 0, tt).value_per_atom.tolist() == [1.0]


def test_grid_counterexample_fix_d():
    d = fix_d()
    sol = _sol(d)
    grid = tau_tilde(sol, 0, GRID)
    assert grid.codes.tolist() == [0, 0]
    rep = optimality_report(d.tree, d.driver, d.obstacle, sol, 0, grid)
    assert rep.value_per_atom[0] < sol.Y0 - 0.5
    assert not (rep.a or rep.b or rep.c)


def test_martingale_interval_examples():
    a = fix_a()
    assert is_martingale_interval(a.tree, a.driver, _sol(a), 0, _const(a.tree, 4), cross_check=True)
    b = fix_b(0.8)
    sol = _sol(b)
    assert not is_martingale_interval(b.tree, b.driver, sol, 0, _const(b.tree, 2), cross_check=True)
    assert is_martingale_interval(b.tree, b.driver, sol, 0, _const(b.tree, 0), cross_check=True)
    with pytest.raises(BadStoppingTime):
        is_martingale_interval(b.tree, b.driver, sol, 1, _const(b.tree, 0, S=1))


def test_optimality_report_examples():
    b = fix_b()
    sol = _sol(b)
    rep = optimality_report(b.tree, b.driver, b.obstacle, sol, 0, _const(b.tree, 2))
    assert (rep.a, rep.b, rep.c) == (True, True, True) and rep.value_per_atom.tolist() == [0.5]
    rep = optimality_report(b.tree, b.driver, b.obstacle, sol, 0, _const(b.tree, 0))
    assert (rep.a, rep.b, rep.c) == (False, False, False)
    assert rep.to_dict(b.tree)["criterion"] == {"a": False, "b": False, "c": False}
    a = fix_a()
    for code in (0, 1, 3, 4):
        rep = optimality_report(a.tree, a.driver, a.obstacle, _sol(a), 0, _const(a.tree, code))
        assert rep.a and rep.b and rep.c


# ---------------------------------------------------------------- properties
def _setup(seed, S):
    inst = oracle_instance(seed, cap=5_000)
    S = min(S, inst.tree.n_stages)
    return inst, _sol(inst), S, enumerate_codes(inst.tree, S)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), S=st.integers(0, 3))
def test_rules_from_solution(seed, S):
    inst, sol, S, codes = _setup(seed, S)
    tree = inst.tree
    tt = tau_tilde(sol, S)
    assert np.all(in_martingale_class(sol, S, tt))
    cols = np.arange(tree.n_leaves)
    assert np.max(np.abs(sol.Y.leaf_table(tree)[tt.codes, cols] - inst.obstacle.leaf_table(tree)[tt.codes, cols])) <= TOL
    members = codes[np.all(in_martingale_class(sol, S, codes), axis=1)]
    assert np.all(members <= tt.codes)
    vals = evaluate_rules(tree, inst.driver, inst.obstacle, S, codes)
    got = evaluate_rules(tree, inst.driver, inst.obstacle, S, tt.codes[None, :])[0]
    assert np.max(np.abs(got - sol.Y.value[S])) <= 1e-9
    assert np.max(np.abs(vals.max(axis=0) - sol.Y.value[S])) <= 1e-9
    theta = theta_alpha(sol, S, 1.0)
    assert np.all(sol.Y.leaf_table(tree)[theta.codes, cols] <= inst.obstacle.leaf_table(tree)[theta.codes, cols] + TOL)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000), S=st.integers(0, 3), pair=st.integers(0, 10_000))
def test_martingale_class_stable_under_max(seed, S, pair):
    inst, sol, S, codes = _setup(seed, S)
    members = codes[np.all(in_martingale_class(sol, S, codes), axis=1)]
    rng = np.random.default_rng(pair)
    for i, j in rng.integers(len(members), size=(10, 2)):
        assert np.all(in_martingale_class(sol, S, np.maximum(members[i], members[j])))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000), S=st.integers(0, 3))
def test_predictable_supermartingale_properties(seed, S):
    inst, sol, S, codes = _setup(seed, S)
    tree, drv = inst.tree, inst.driver
    assert all(np.all(p <= y) for p, y in zip(sol.pYplus, sol.Y.value))
    yv = evaluate_rules(tree, drv, sol.Y, S, codes)
    assert np.max(yv - sol.Y.value[S]) <= TOL
    later = codes[:, tree.leaf_block(S)[0]] > 2 * S
    assert np.all(np.where(later, yv - sol.pYplus[S], 0.0) <= TOL)
    assert supermartingale_excess(tree, drv, sol.Y, S, n_pairs=16, seed=seed) <= TOL
    assert supermartingale_excess(tree, drv, sol.pY_process(), S, n_pairs=16, seed=seed) <= TOL
    # nonincreasing along nested rules
    rng = np.random.default_rng(seed)
    a, b = codes[rng.integers(len(codes), size=(2, 32))]
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    v_lo = evaluate_rules(tree, drv, sol.Y, S, lo)
    v_hi = evaluate_rules(tree, drv, sol.Y, S, hi)
    assert np.all(v_hi <= v_lo + TOL)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000), S=st.integers(0, 3))
def test_martingale_equivalences(seed, S):
    inst, sol, S, codes = _setup(seed, S)
    tree, drv = inst.tree, inst.driver
    pick = codes[np.random.default_rng(seed).choice(len(codes), size=min(len(codes), 12), replace=False)]
    # include the reflection-free maximum so the true branch is exercised
    pick = np.vstack([pick, tau_tilde(sol, S).codes])
    at_S = evaluate_rules(tree, drv, sol.Y, S, pick)
    first = np.all(np.abs(at_S - sol.Y.value[S]) <= TOL, axis=1)
    anchor = g_expectation_batch(tree, drv, 0, np.full((1, tree.n_leaves), 2 * S), sol.Y, check=False)[0, 0]
    second = np.abs(evaluate_rules(tree, drv, sol.Y, 0, pick)[:, 0] - anchor) <= TOL
    fifth = np.array([is_martingale_interval(tree, drv, sol, S, ExtendedStoppingTime(S, c), cross_check=True,
                                             n_pairs=8) for c in pick])
    assert np.array_equal(first, second) and np.array_equal(first, fifth)
    assert fifth[-1]


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.filter_too_much])
@given(seed=st.integers(0, 100_000), S=st.integers(0, 3), alpha=st.floats(0.05, 0.95))
def test_tau_alpha_windows_positive_obstacle(seed, S, alpha):
    inst = oracle_instance(seed, cap=5_000, obstacle_mode="positive")
    tree, drv = inst.tree, inst.driver
    S = min(S, tree.n_stages)
    sol = _sol(inst)
    U = [y + g for y, g in zip(sol.Y.value, sol.running_cost(drv))]
    assume(min(float(u.min()) for u in U) >= 0)
    tau = tau_alpha(sol, drv, S, alpha)
    da, db = reflection_windows(sol, S, tau)
    assert np.all(da == 0) and np.all(db == 0)
    assert is_martingale_interval(tree, drv, sol, S, tau, cross_check=True, n_pairs=8)


def test_optimality_flags_agree_on_fixtures():
    for make in (fix_a, fix_b, fix_c, fix_d):
        inst = make()
        sol = _sol(inst)
        res = brute_force_value(inst.tree, inst.driver, inst.obstacle, 0)
        for row in res.codes:
            rep = optimality_report(inst.tree, inst.driver, inst.obstacle, sol, 0, ExtendedStoppingTime(0, row))
            assert rep.a == rep.b == rep.c
            assert np.all(rep.gap >= -1e-10)
