"""Acceptance criteria 1-10, each at its stated tolerance.

Every criterion is one test; ``conftest.py`` prints a PASS/FAIL line per
criterion at the end of the run.
"""

from __future__ import annotations

import numpy as np
import pytest

from presto import cli
from presto.bsde import g_expectation, g_expectation_batch, indicator_on_stage, localize_driver
from presto.errors import BudgetExceeded
from presto.instances import fix_a, fix_b, fix_c, fix_d, fix_e, oracle_instance, random_instance
from presto.oracle import GRID, EnumerationBudget, brute_force_value, enumerate_codes, evaluate_rules
from presto.process import ExtendedStoppingTime, LadlagPredictableProcess, predictable_right_limit, regularity_report
from presto.rbsde import solve_rbsde, solve_rbsde_picard, verify_rbsde
from presto.snell import bellman_check, supermartingale_excess
from presto.stopping import (
    in_martingale_class,
    is_martingale_interval,
    optimality_flags,
    reflection_windows,
    tau_alpha,
    tau_tilde,
    theta_alpha,
)

ORACLE_TOL = 1e-9
EXACT_TOL = 1e-10
MART_TOL = 1e-12
PICARD_TOL = 1e-8
N_ORACLE = 200
N_STRUCT = 500


@pytest.fixture(scope="module")
def oracle_set():
    """Criterion-1 instances with their solutions: N <= 3, <= 2 branches, <= 2 marks."""
    out = []
    for seed in range(N_ORACLE):
        inst = oracle_instance(seed)
        out.append((inst, solve_rbsde(inst.tree, inst.driver, inst.obstacle)))
    return out


@pytest.fixture(scope="module")
def struct_set():
    out = []
    for seed in range(N_STRUCT):
        inst = random_instance(seed, max_stages=6)
        out.append((inst, solve_rbsde(inst.tree, inst.driver, inst.obstacle)))
    return out


def _flat(*arrays) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays])


# ----------------------------------------------------------------- 1
def test_criterion_1_oracle_equivalence(oracle_set):
    worst, worst_grid = 0.0, -np.inf
    for inst, sol in oracle_set:
        tree = inst.tree
        assert tree.n_stages <= 3
        assert inst.driver.lipschitz * (float(tree.dt.max()) + tree.max_abs_dw) <= 0.5
        for S in range(tree.n_stages + 1):
            res = brute_force_value(tree, inst.driver, inst.obstacle, S)
            worst = max(worst, float(np.max(np.abs(res.values - sol.Y.value[S]))))
            grid = brute_force_value(tree, inst.driver, inst.obstacle, S, EnumerationBudget(mode=GRID))
            worst_grid = max(worst_grid, float(np.max(grid.values - sol.Y.value[S])))
    assert worst <= ORACLE_TOL, f"max |Y_S - oracle| = {worst:.3g}"
    assert worst_grid <= 0.0, f"grid oracle exceeds Y_S by {worst_grid:.3g}"


# ----------------------------------------------------------------- 2
def test_criterion_2_structural_exactness(struct_set):
    failures = []
    for inst, sol in struct_set:
        tree, xi = inst.tree, inst.obstacle
        rep = verify_rbsde(tree, inst.driver, xi, sol, EXACT_TOL)
        bad = []
        for k in range(tree.n_stages + 1):
            if np.any(sol.dA[k] < 0) or np.any(sol.dB[k] < 0):
                bad.append("negative reflection")
            if np.any(sol.dB[k] * (sol.Y.value[k] - xi.value[k]) != 0):
                bad.append("Skorokhod B")
            if k > 0 and np.any(sol.dA[k] * (sol.Y.left[k] - xi.left[k]) != 0):
                bad.append("Skorokhod A")
            if np.any(np.abs(sol.Y.value[k] - np.maximum(xi.value[k], sol.pYplus[k])) > EXACT_TOL):
                bad.append("value max")
            if k > 0 and np.any(np.abs(sol.Y.left[k] - np.maximum(xi.left[k], sol.Y.value[k])) > EXACT_TOL):
                bad.append("left max")
        if not rep.ok or rep.max_identity_residual > EXACT_TOL:
            bad.append(f"verify: {sorted(set(rep.rules()))}")
        if bad:
            failures.append((inst.seed, bad))
    assert not failures, failures[:5]


# ----------------------------------------------------------------- 3
def test_criterion_3_martingale_structure(struct_set):
    worst = 0.0
    single = 0
    for inst, sol in struct_set:
        worst = max(worst, max(sol.residuals().values()))
        if inst.tree.is_single_mark():
            single += 1
            assert all(np.all(m == 0) for m in sol.dMeta), inst.seed
    for seed in range(100):
        inst = random_instance(seed, max_stages=6, max_marks=1)
        sol = solve_rbsde(inst.tree, inst.driver, inst.obstacle)
        assert inst.tree.is_single_mark()
        worst = max(worst, max(sol.residuals().values()))
        assert all(np.all(m == 0) for m in sol.dMeta), seed
        single += 1
    assert worst <= MART_TOL, f"worst martingale residual {worst:.3g}"
    assert single >= 100


# ----------------------------------------------------------------- 4
def test_criterion_4_regularity_consequences():
    n_lusc = n_sub = 0
    for seed in range(300):
        inst = random_instance(seed, max_stages=6, obstacle_mode="lusc" if seed % 2 else "uniform")
        if regularity_report(inst.tree, inst.obstacle).lusc:
            n_lusc += 1
            sol = solve_rbsde(inst.tree, inst.driver, inst.obstacle)
            assert all(np.all(a == 0) for a in sol.dA), seed
    for seed in range(300):
        inst = random_instance(seed, max_stages=6, max_marks=1, obstacle_mode="submartingale", driver_name="zero")
        tree, xi = inst.tree, inst.obstacle
        assert tree.is_single_mark()
        assert all(np.all(xi.value[k] <= predictable_right_limit(tree, xi, k)) for k in range(tree.n_stages))
        n_sub += 1
        sol = solve_rbsde(tree, inst.driver, xi)
        assert all(np.all(b == 0) for b in sol.dB), seed
    assert n_lusc >= 150 and n_sub == 300


# ----------------------------------------------------------------- 5
def test_criterion_5_picard_agreement(oracle_set):
    worst, most = 0.0, 0
    for inst, sol in oracle_set:
        pic, iters = solve_rbsde_picard(inst.tree, inst.driver, inst.obstacle, max_iter=50)
        most = max(most, iters)
        gap = np.max(np.abs(_flat(*pic.Y.value, *pic.Y.left, *pic.Y_plus.values)
                            - _flat(*sol.Y.value, *sol.Y.left, *sol.Y_plus.values)))
        worst = max(worst, float(gap))
    assert worst <= PICARD_TOL and most <= 50, (worst, most)


# ----------------------------------------------------------------- 6
def test_criterion_6_stopping_rules(oracle_set):
    excluded = 0
    for seed in range(N_ORACLE):
        inst = oracle_instance(seed, obstacle_mode="positive")
        tree, drv, xi = inst.tree, inst.driver, inst.obstacle
        sol = solve_rbsde(tree, drv, xi)
        U = [y + g for y, g in zip(sol.Y.value, sol.running_cost(drv))]
        Ytab, xitab = sol.Y.leaf_table(tree), xi.leaf_table(tree)
        cols = np.arange(tree.n_leaves)
        for S in range(tree.n_stages + 1):
            for alpha in (0.1, 0.5, 0.9, 1.0):
                theta = theta_alpha(sol, S, alpha)
                assert np.all(alpha * Ytab[theta.codes, cols] <= xitab[theta.codes, cols] + EXACT_TOL), (seed, S)
            if min(float(u.min()) for u in U) < 0:
                continue
            for alpha in (0.1, 0.5, 0.9):
                tau = tau_alpha(sol, drv, S, alpha)
                da, db = reflection_windows(sol, S, tau)
                assert np.all(da == 0) and np.all(db == 0), (seed, S, alpha)
                assert is_martingale_interval(tree, drv, sol, S, tau, cross_check=True, n_pairs=8), (seed, S, alpha)
        if min(float(u.min()) for u in U) < 0:
            excluded += 1
    assert excluded <= N_ORACLE // 4, f"{excluded} instances lacked Y + G >= 0"

    for inst, sol in oracle_set:
        tree = inst.tree
        Ytab, xitab = sol.Y.leaf_table(tree), inst.obstacle.leaf_table(tree)
        cols = np.arange(tree.n_leaves)
        for S in range(tree.n_stages + 1):
            theta = theta_alpha(sol, S, 1.0)
            assert np.all(Ytab[theta.codes, cols] <= xitab[theta.codes, cols] + EXACT_TOL)
            tt = tau_tilde(sol, S)
            assert np.all(in_martingale_class(sol, S, tt))
            assert np.max(np.abs(Ytab[tt.codes, cols] - xitab[tt.codes, cols])) <= EXACT_TOL
            got = evaluate_rules(tree, inst.driver, inst.obstacle, S, tt.codes[None, :])[0]
            assert np.max(np.abs(got - sol.Y.value[S])) <= ORACLE_TOL

    d = fix_d()
    sol = solve_rbsde(d.tree, d.driver, d.obstacle)
    assert not regularity_report(d.tree, d.obstacle).lusc
    grid = tau_tilde(sol, 0, GRID)
    got = evaluate_rules(d.tree, d.driver, d.obstacle, 0, grid.codes[None, :])[0, 0]
    assert got < sol.Y0 - ORACLE_TOL, "grid rule should be strictly suboptimal on FIX-D"


# ----------------------------------------------------------------- 7
def test_criterion_7_optimality_criterion(oracle_set):
    disagreements = []
    total = 0
    for inst, sol in oracle_set:
        for S in range(inst.tree.n_stages + 1):
            codes = enumerate_codes(inst.tree, S)
            _, a, b, c = optimality_flags(inst.tree, inst.driver, inst.obstacle, sol, S, codes)
            total += len(codes)
            bad = np.flatnonzero((a != b) | (a != c))
            if len(bad):
                disagreements.append((inst.seed, S, len(bad)))
    assert not disagreements, f"{len(disagreements)} (seed, S) pairs disagree of {total} rules: {disagreements[:5]}"


# ----------------------------------------------------------------- 8
def _algebra_checks(inst, sol, rng) -> None:
    tree, drv, xi = inst.tree, inst.driver, inst.obstacle
    n = tree.n_stages
    codes0 = enumerate_codes(tree, 0)
    pick = codes0[rng.integers(len(codes0), size=(2, 12))]
    # consistency along nested rules
    for a, b in zip(*pick):
        sigma = ExtendedStoppingTime(0, np.minimum(a, b))
        tau = np.maximum(a, b)
        inner = g_expectation_batch(tree, drv, sigma, tau[None, :], xi)[0]
        direct = g_expectation_batch(tree, drv, 0, tau[None, :], xi)[0]
        assert np.max(np.abs(g_expectation(tree, drv, 0, sigma, inner) - direct)) <= EXACT_TOL
    # monotonicity in the payoff
    hi = LadlagPredictableProcess([a + rng.uniform(0, 1, a.shape) for a in xi.left],
                                  [a + rng.uniform(0, 1, a.shape) for a in xi.value])
    hi.left[0] = hi.value[0].copy()
    assert np.all(evaluate_rules(tree, drv, xi, 0, pick[0]) <= evaluate_rules(tree, drv, hi, 0, pick[0]) + EXACT_TOL)
    # nonincreasing tau -> E(Y_tau)
    lo_r, hi_r = np.minimum(*pick), np.maximum(*pick)
    assert np.all(evaluate_rules(tree, drv, sol.Y, 0, hi_r) <= evaluate_rules(tree, drv, sol.Y, 0, lo_r) + EXACT_TOL)
    for S in range(n + 1):
        assert np.all(sol.pYplus[S] <= sol.Y.value[S])
        codes = enumerate_codes(tree, S)
        yv = evaluate_rules(tree, drv, sol.Y, S, codes)
        later = codes[:, tree.leaf_block(S)[0]] > 2 * S
        assert np.all(np.where(later, yv - sol.pYplus[S], 0.0) <= EXACT_TOL)
        assert supermartingale_excess(tree, drv, sol.pY_process(), S, n_pairs=4, seed=inst.seed) <= EXACT_TOL
        # indicator localization of the BSDE (through E^{p,g}) and of the RBSDE
        A = rng.uniform(size=tree.n_pre(S)) < 0.5
        mask = [indicator_on_stage(tree, S, A, k) if k >= S else np.zeros(tree.n_pre(k)) for k in range(n + 1)]
        local = localize_driver(tree, drv, S, A)
        sub = codes[rng.integers(len(codes), size=16)]
        got = g_expectation_batch(tree, local, S, sub, xi.scaled_by_stage(mask))
        assert np.array_equal(got, g_expectation_batch(tree, drv, S, sub, xi) * A)
        loc = solve_rbsde(tree, local, xi.scaled_by_stage(mask))
        for k in range(S, n + 1):
            assert np.array_equal(loc.Y.value[k], mask[k] * sol.Y.value[k])
            if k > S:
                assert np.array_equal(loc.Y.left[k], mask[k] * sol.Y.left[k])
                assert np.array_equal(loc.dA[k], mask[k] * sol.dA[k])
            assert np.array_equal(loc.dB[k], mask[k] * sol.dB[k])
        theta = int(rng.integers(S, n + 1))
        rep = bellman_check(tree, xi, S, theta, rng.uniform(0, 2, tree.n_pre(theta)), A, n_pairs=4,
                            seed=inst.seed)
        assert rep.ok, (inst.seed, S, rep.details)


def test_criterion_8_algebra(oracle_set):
    rng = np.random.default_rng(8)
    for inst, sol in oracle_set:
        _algebra_checks(inst, sol, rng)


# ----------------------------------------------------------------- 9
def test_criterion_9_fixtures():
    def oracle(inst, S=0):
        return brute_force_value(inst.tree, inst.driver, inst.obstacle, S)

    def solve(inst):
        return solve_rbsde(inst.tree, inst.driver, inst.obstacle)

    # oracle first, against the independently derived values
    a, b, b8, c, d, e = fix_a(), fix_b(), fix_b(0.8), fix_c(), fix_d(), fix_e()
    assert oracle(a).values.tolist() == [1.0] and oracle(a).count == 37
    assert oracle(b).values.tolist() == [0.5] and oracle(b).count == 5
    assert oracle(b8).values.tolist() == [0.8]
    assert oracle(c).values.tolist() == [0.5]
    assert oracle(d).values.tolist() == [1.0]
    assert oracle(e).values[0] == pytest.approx(0.5 / 1.1, abs=1e-12)
    # then the solver
    sa = solve(a)
    assert all(np.all(y == 1) for y in sa.Y.value + sa.Y.left) and all(np.all(x == 0) for x in sa.dA + sa.dB)
    assert solve(b).Y0 == 0.5
    s8 = solve(b8)
    assert s8.Y0 == 0.8 and s8.dB[0][0] == pytest.approx(0.3, abs=1e-15) and s8.pi[0][0] == 0.5
    sc = solve(c)
    assert sc.Y0 == 0.5
    up = np.array([m == "u" for m in c.tree.post_mark[1]])
    assert np.all(sc.dMeta[1][up] == 0.5) and np.all(sc.dMeta[1][~up] == -0.5)
    sd = solve(d)
    assert sd.Y0 == 1.0 and sd.dA[1].tolist() == [1.0, 0.0]
    assert tau_tilde(sd, 0).codes.tolist() == [1, 2]
    assert abs(solve(e).Y0 - 0.5 / 1.1) <= 1e-12
    for inst in (a, b, b8, c, d, e):
        assert oracle(inst).values[0] == pytest.approx(solve(inst).Y0, abs=ORACLE_TOL)
        assert verify_rbsde(inst.tree, inst.driver, inst.obstacle, solve(inst)).ok


# ----------------------------------------------------------------- 10
def test_criterion_10_determinism(tmp_path):
    runs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert cli.main(["sweep", "--seeds", "0..9", "--out", str(out)]) == 0
        runs.append({str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    assert runs[0] and runs[0] == runs[1]
    assert sum(k.endswith("model.json") for k in runs[0]) == 40
    assert sum(k.endswith("solution.csv") for k in runs[0]) == 40
    assert sum(k.endswith("report.json") for k in runs[0]) == 40


def test_budget_guard_is_not_silently_skipped():
    with pytest.raises(BudgetExceeded):
        enumerate_codes(random_instance(1, n_stages=6).tree, 0, EnumerationBudget(1000))
