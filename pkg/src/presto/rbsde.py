"""Reflected predictable BSDEs: direct recursion, Picard variant, verification.

Backward stage ``k+1 -> k`` (lower barrier):

(a) diffuse: ``Y_{k+} = E[Y_{(k+1)-}|F_k] + g(t_k, Y_{k+}, pi_k) dt``;
(b) right jump at ``t_k``: ``Y_k = max(xi_k, E[Y_{k+}|G_k])``, ``dB_k = Y_k - E[Y_{k+}|G_k]``;
(c) left limit: ``Y_{k-} = max(xi_{k-}, Y_k)``, ``dA_k = Y_{k-} - Y_k``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .bsde import STEP_TOL, check_contraction, diffusive_step, martingale_residuals
from .drivers import FrozenDriver, NegatedDriver
from .errors import NoConvergence, ShapeMismatch
from .filtration import FiltrationTree, ValidationReport
from .process import AdaptedProcess, LadlagPredictableProcess

VERIFY_TOL = 1e-10
LOWER, UPPER = "lower", "upper"


@dataclass
class RbsdeSolution:
    tree: FiltrationTree = field(repr=False)
    driver: object
    obstacle: LadlagPredictableProcess = field(repr=False)
    barrier_side: str
    Y: LadlagPredictableProcess = field(repr=False)
    Y_plus: AdaptedProcess = field(repr=False)
    pi: AdaptedProcess = field(repr=False)
    dMW: list[np.ndarray] = field(repr=False)
    dMeta: list[np.ndarray] = field(repr=False)
    dA: list[np.ndarray] = field(repr=False)
    dB: list[np.ndarray] = field(repr=False)
    pYplus: list[np.ndarray] = field(repr=False)

    @property
    def Y0(self) -> float:
        return float(self.Y.value[0][0])

    def negated(self) -> "RbsdeSolution":
        """The solution of the mirrored problem ``(-xi, -g(t,-y,-z))``."""
        neg = lambda arrs: [-a for a in arrs]
        return RbsdeSolution(
            self.tree, NegatedDriver(self.driver), self.obstacle.map(np.negative),
            UPPER if self.barrier_side == LOWER else LOWER,
            self.Y.map(np.negative), AdaptedProcess(neg(self.Y_plus.values)),
            AdaptedProcess(neg(self.pi.values)), neg(self.dMW), neg(self.dMeta),
            [a.copy() for a in self.dA], [b.copy() for b in self.dB], neg(self.pYplus),
        )

    def residuals(self) -> dict:
        return martingale_residuals(self.tree, self.dMW, self.dMeta)

    def pY_process(self) -> LadlagPredictableProcess:
        """``^pY^+`` as a ladlag process: left values ``Y_{k-}``, values ``E[Y_{k+}|G_k]``."""
        return LadlagPredictableProcess([a.copy() for a in self.Y.left], [p.copy() for p in self.pYplus])

    def running_cost(self, driver=None) -> list[np.ndarray]:
        """``G_k = sum_{j<k} g(t_j, Y_{j+}, pi_j) dt`` on ``pre_nodes[k]``."""
        tree = self.tree
        driver = self.driver if driver is None else driver
        out = [np.zeros(1)]
        acc_post = np.zeros(1)
        for k in range(tree.n_stages):
            g = np.asarray(driver.at_stage(tree, k, self.Y_plus[k], self.pi[k])) * tree.dt[k]
            acc_post = tree.pre_to_post(k, out[k]) + g
            out.append(tree.post_to_pre(k, acc_post))
        return out


def _check_obstacle(tree: FiltrationTree, obstacle: LadlagPredictableProcess) -> None:
    if not isinstance(obstacle, LadlagPredictableProcess):
        raise ShapeMismatch("obstacle must be a LadlagPredictableProcess")
    obstacle.check(tree)


def _reflect_lower(tree: FiltrationTree, driver, obstacle: LadlagPredictableProcess, tol: float):
    n = tree.n_stages
    Yv, Yl, plus, pi, dmw, dmeta, dA, dB, pY = ([None] * (n + 1) for _ in range(9))
    Yv[n] = obstacle.value[n].copy()
    Yl[n] = np.maximum(obstacle.left[n], Yv[n]) if n > 0 else Yv[n].copy()
    dA[n] = Yl[n] - Yv[n]
    plus[n] = tree.pre_to_post(n, Yv[n])
    pi[n] = np.zeros(tree.n_post(n))
    dmeta[n] = np.zeros(tree.n_post(n))
    pY[n] = Yv[n].copy()
    dB[n] = np.zeros(tree.n_pre(n))
    dmw[0] = np.zeros(1)
    for k in range(n - 1, -1, -1):
        plus[k], pi[k], dmw[k + 1] = diffusive_step(tree, driver, k, Yl[k + 1], tol)
        pY[k] = tree.expect_given_pre(k, plus[k])
        Yv[k] = np.maximum(obstacle.value[k], pY[k])
        dB[k] = Yv[k] - pY[k]
        dmeta[k] = plus[k] - tree.pre_to_post(k, pY[k])
        if k > 0:
            Yl[k] = np.maximum(obstacle.left[k], Yv[k])
        else:
            Yl[k] = Yv[k].copy()
        dA[k] = Yl[k] - Yv[k]
    return (LadlagPredictableProcess(Yl, Yv), AdaptedProcess(plus), AdaptedProcess(pi), dmw, dmeta, dA, dB, pY)


def solve_rbsde(tree: FiltrationTree, driver, obstacle: LadlagPredictableProcess,
                barrier_side: str = LOWER, tol: float = STEP_TOL) -> RbsdeSolution:
    """Solve the reflected predictable BSDE with barrier ``obstacle``."""
    check_contraction(tree, driver)
    _check_obstacle(tree, obstacle)
    if barrier_side == LOWER:
        parts = _reflect_lower(tree, driver, obstacle, tol)
        return RbsdeSolution(tree, driver, obstacle, LOWER, *parts)
    if barrier_side == UPPER:
        parts = _reflect_lower(tree, NegatedDriver(driver), obstacle.map(np.negative), tol)
        mirrored = RbsdeSolution(tree, NegatedDriver(driver), obstacle.map(np.negative), LOWER, *parts)
        sol = mirrored.negated()
        sol.driver = driver
        return sol
    raise ValueError(f"barrier_side must be 'lower' or 'upper', got {barrier_side!r}")


def _sup_change(a: RbsdeSolution, b: RbsdeSolution) -> float:
    diff = 0.0
    for xs, ys in ((a.Y.value, b.Y.value), (a.Y.left, b.Y.left), (a.Y_plus.values, b.Y_plus.values),
                   (a.pi.values, b.pi.values)):
        for x, y in zip(xs, ys):
            diff = max(diff, float(np.max(np.abs(x - y))))
    return diff


def solve_rbsde_picard(tree: FiltrationTree, driver, obstacle: LadlagPredictableProcess,
                       tol: float = 1e-12, max_iter: int = 50) -> tuple[RbsdeSolution, int]:
    """Picard iteration on the driver: each sweep solves a linear reflected problem
    with ``g`` frozen at the previous iterate ``(Y_{k+}, pi_k)``.

    The first sweep (frozen at ``(0, 0)``) is the initial guess; the returned
    count is the number of further sweeps until the sup-change is ``<= tol``.
    """
    check_contraction(tree, driver)
    _check_obstacle(tree, obstacle)
    n = tree.n_stages

    def sweep(u_plus, v):
        frozen = [np.asarray(driver.at_stage(tree, k, u_plus[k], v[k]), dtype=float) for k in range(n + 1)]
        parts = _reflect_lower(tree, FrozenDriver(frozen), obstacle, STEP_TOL)
        return RbsdeSolution(tree, driver, obstacle, LOWER, *parts)

    zeros = [np.zeros(tree.n_post(k)) for k in range(n + 1)]
    current = sweep(zeros, zeros)
    for it in range(1, max_iter + 1):
        nxt = sweep(current.Y_plus.values, current.pi.values)
        change = _sup_change(nxt, current)
        current = nxt
        if change <= tol:
            return current, it
    raise NoConvergence(f"Picard iteration did not reach {tol:g} within {max_iter} sweeps")


# ------------------------------------------------------------- verification
@dataclass
class SkorokhodReport(ValidationReport):
    max_identity_residual: float = 0.0

    def by_rule(self) -> dict[str, list]:
        out: dict[str, list] = {}
        for v in self.violations:
            out.setdefault(v.rule, []).append((v.location, v.magnitude))
        return out

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["max_identity_residual"] = self.max_identity_residual
        return d


def _flag(report, rule, k, where, mag, tol):
    for i in np.flatnonzero(mag > tol):
        report.add(rule, f"stage {k} {where}[{i}]", mag[i])


def verify_rbsde(tree: FiltrationTree, driver, obstacle: LadlagPredictableProcess, sol: RbsdeSolution,
                 tol: float = VERIFY_TOL) -> SkorokhodReport:
    """Check every defining property of a (lower-barrier) solution; never raises."""
    if sol.barrier_side == UPPER:
        return verify_rbsde(tree, NegatedDriver(driver), obstacle.map(np.negative), sol.negated(), tol)
    rep = SkorokhodReport()
    n = tree.n_stages
    Y = sol.Y
    _flag(rep, "TERMINAL", n, "pre", np.abs(Y.value[n] - obstacle.value[n]), tol)
    for k in range(n + 1):
        _flag(rep, "NONNEG_dA", k, "pre", -sol.dA[k], tol)
        _flag(rep, "NONNEG_dB", k, "pre", -sol.dB[k], tol)
        _flag(rep, "SKOROKHOD_A", k, "pre", np.abs(sol.dA[k] * (Y.left[k] - obstacle.left[k])), tol)
        _flag(rep, "SKOROKHOD_B", k, "pre", np.abs(sol.dB[k] * (Y.value[k] - obstacle.value[k])), tol)
        _flag(rep, "JUMP_A", k, "pre", np.abs(Y.left[k] - Y.value[k] - sol.dA[k]), tol)
        _flag(rep, "JUMP_B", k, "pre", np.abs(Y.value[k] - sol.pYplus[k] - sol.dB[k]), tol)
        _flag(rep, "PROJECTION", k, "pre", np.abs(sol.pYplus[k] - tree.expect_given_pre(k, sol.Y_plus[k])), tol)
        _flag(rep, "DOMINATION", k, "pre", obstacle.value[k] - Y.value[k], tol)
        _flag(rep, "DOMINATION_LEFT", k, "pre", obstacle.left[k] - Y.left[k], tol)
        _flag(rep, "ABOVE_PROJECTION", k, "pre", sol.pYplus[k] - Y.value[k], tol)
        _flag(rep, "LEFT_ABOVE_VALUE", k, "pre", Y.value[k] - Y.left[k], tol)
        _flag(rep, "META_JUMP", k, "post",
              np.abs(sol.Y_plus[k] - tree.pre_to_post(k, sol.pYplus[k]) - sol.dMeta[k]), tol)
    _flag(rep, "ZERO_AT_START", 0, "pre", np.abs(sol.dA[0]), tol)
    worst = 0.0
    for k in range(n):
        g = np.asarray(driver.at_stage(tree, k, sol.Y_plus[k], sol.pi[k]), dtype=float)
        rhs_post = g * tree.dt[k] - sol.dMeta[k] + tree.pre_to_post(k, sol.dB[k])
        rhs = (Y.value[k + 1] + tree.post_to_pre(k, rhs_post)
               - tree.post_to_pre(k, sol.pi[k]) * tree.pre_dw[k + 1] - sol.dMW[k + 1] + sol.dA[k + 1])
        lhs = tree.post_to_pre(k, tree.pre_to_post(k, Y.value[k]))
        res = np.abs(lhs - rhs)
        worst = max(worst, float(res.max()))
        _flag(rep, "IDENTITY", k, "pre", res, tol)
    mart = martingale_residuals(tree, sol.dMW, sol.dMeta)
    for name, val in mart.items():
        if val > tol:
            rep.add("MARTINGALE", name, val)
    rep.max_identity_residual = worst
    return rep


# ------------------------------------------------------------------ output
CSV_COLUMNS = ["stage", "instant", "atom", "Y", "pYplus", "dA", "dB", "pi", "dMW", "dMeta", "obstacle"]


def _fmt(x) -> str:
    return "" if x is None else format(float(x), ".17g")


def solution_rows(sol: RbsdeSolution):
    tree = sol.tree
    for k in range(tree.n_stages + 1):
        if k > 0:
            for i in range(tree.n_pre(k)):
                yield [k, f"{k}-", i, sol.Y.left[k][i], None, sol.dA[k][i], None, None,
                       sol.dMW[k][i], None, sol.obstacle.left[k][i]]
        for i in range(tree.n_pre(k)):
            yield [k, f"{k}", i, sol.Y.value[k][i], sol.pYplus[k][i], None, sol.dB[k][i], None,
                   None, None, sol.obstacle.value[k][i]]
        for j in range(tree.n_post(k)):
            yield [k, f"{k}+", j, sol.Y_plus[k][j], None, None, None, sol.pi[k][j], None,
                   sol.dMeta[k][j], None]


def solution_csv(sol: RbsdeSolution) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in solution_rows(sol):
        w.writerow(row[:3] + [_fmt(x) for x in row[3:]])
    return buf.getvalue()
