"""Predictable BSDEs on a filtration tree and the predictable g-expectation.

One backward stage ``k+1 -> k`` consists of three sub-steps:

1. diffusive step on ``(t_k, t_{k+1}]``: ``X_{k+} = E[X_{(k+1)-}|F_k] + g(t_k, X_{k+}, pi_k) dt``
   with ``pi_k`` the regression coefficient of ``X_{(k+1)-}`` on ``dW``;
2. mark step at ``t_k``: ``X_k = E[X_{k+}|G_k]`` (martingale jump ``X_{k+} - X_k``);
3. left limit: ``X_{k-} = X_k`` (no reflection for a plain BSDE).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadStoppingTime, MeasurabilityError, NoContraction, NoConvergence, ShapeMismatch
from .filtration import FiltrationTree
from .process import (
    AdaptedProcess,
    ExtendedStoppingTime,
    LadlagPredictableProcess,
    instant_stage,
    previsibility_violations,
)

STEP_TOL = 1e-14
MAX_STEP_ITER = 200


def check_contraction(tree: FiltrationTree, driver) -> None:
    kdt = driver.lipschitz * float(np.max(tree.dt))
    if kdt >= 1.0:
        raise NoContraction(f"K*dt = {kdt:.6g} >= 1: the implicit step is not a contraction")


def monotone_regime(tree: FiltrationTree, driver) -> bool:
    """``K (dt + max|dW|) < 1``: the regime where comparison holds one step at a time."""
    return driver.lipschitz * (float(np.max(tree.dt)) + tree.max_abs_dw) < 1.0


def step_solve(e: float, pi: float, t: float, driver, dt: float, tol: float = STEP_TOL) -> float:
    """Fixed point of ``y = e + g(t, y, pi) dt``."""
    if driver.lipschitz * dt >= 1.0:
        raise NoContraction(f"K*dt = {driver.lipschitz * dt:.6g} >= 1")
    y = float(e)
    for _ in range(MAX_STEP_ITER):
        y_new = float(e + driver(t, y, pi) * dt)
        if abs(y_new - y) <= tol:
            return y_new
        y = y_new
    raise NoConvergence(f"no fixed point within {MAX_STEP_ITER} iterations")


def implicit_step(tree: FiltrationTree, driver, k: int, e: np.ndarray, pi: np.ndarray,
                  tol: float = STEP_TOL) -> np.ndarray:
    """Vectorised ``step_solve`` on ``post_nodes[k]``.

    Each entry is frozen once its own increment drops below ``tol``, so a
    node's result does not depend on what else is in the batch.
    """
    dt = float(tree.dt[k])
    y = np.array(e, dtype=float)
    active = np.ones(y.shape, dtype=bool)
    for _ in range(MAX_STEP_ITER):
        y_new = e + driver.at_stage(tree, k, y, pi) * dt
        done = np.abs(y_new - y) <= tol
        y = np.where(active, y_new, y)
        active &= ~done
        if not active.any():
            return y
    raise NoConvergence(f"implicit step at stage {k} did not converge in {MAX_STEP_ITER} iterations")


def diffusive_step(tree: FiltrationTree, driver, k: int, target: np.ndarray, tol: float = STEP_TOL):
    """From values on ``pre_nodes[k+1]`` to ``(X_{k+}, pi_k, dMW_{k+1})``."""
    e = tree.expect_given_post(k, target)
    pi = tree.expect_dw_given_post(k, target) / tree.dt[k]
    plus = implicit_step(tree, driver, k, e, pi, tol)
    dmw = target - tree.post_to_pre(k, e) - tree.post_to_pre(k, pi) * tree.pre_dw[k + 1]
    return plus, pi, dmw


@dataclass
class BsdeSolution:
    X: LadlagPredictableProcess
    X_plus: AdaptedProcess
    pi: AdaptedProcess
    dMW: list[np.ndarray]
    dMeta: list[np.ndarray]
    residuals: dict = field(default_factory=dict)


def martingale_residuals(tree: FiltrationTree, dMW, dMeta) -> dict:
    """Largest violations of ``E[dMW|F]=0``, ``E[dMW dW|F]=0`` and ``E[dMeta|G]=0``."""
    mean_w = orth_w = mean_eta = 0.0
    for k in range(tree.n_stages):
        mean_w = max(mean_w, float(np.max(np.abs(tree.expect_given_post(k, dMW[k + 1])))))
        orth_w = max(orth_w, float(np.max(np.abs(tree.expect_dw_given_post(k, dMW[k + 1])))))
    for k in range(tree.n_stages + 1):
        mean_eta = max(mean_eta, float(np.max(np.abs(tree.expect_given_pre(k, dMeta[k])))))
    return {"mean_dMW": mean_w, "orth_dMW": orth_w, "mean_dMeta": mean_eta}


def solve_bsde(tree: FiltrationTree, driver, terminal, tol: float = STEP_TOL) -> BsdeSolution:
    """Solve the predictable BSDE with ``F_{T-}``-measurable terminal value."""
    check_contraction(tree, driver)
    n = tree.n_stages
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != (tree.n_leaves,):
        raise ShapeMismatch(f"terminal needs {tree.n_leaves} values, got {terminal.shape}")
    val = [None] * (n + 1)
    plus = [None] * (n + 1)
    pi = [None] * (n + 1)
    dmw = [None] * (n + 1)
    dmeta = [None] * (n + 1)
    val[n] = terminal.copy()
    plus[n] = tree.pre_to_post(n, val[n])
    pi[n] = np.zeros(tree.n_post(n))
    dmeta[n] = np.zeros(tree.n_post(n))
    dmw[0] = np.zeros(1)
    for k in range(n - 1, -1, -1):
        plus[k], pi[k], dmw[k + 1] = diffusive_step(tree, driver, k, val[k + 1], tol)
        val[k] = tree.expect_given_pre(k, plus[k])
        dmeta[k] = plus[k] - tree.pre_to_post(k, val[k])
    X = LadlagPredictableProcess([v.copy() for v in val], val)
    sol = BsdeSolution(X, AdaptedProcess(plus), AdaptedProcess(pi), dmw, dmeta)
    sol.residuals = martingale_residuals(tree, dmw, dmeta)
    return sol


# ----------------------------------------------------------- g-expectation
def _payoff_rows(tree: FiltrationTree, codes: np.ndarray, payoff) -> np.ndarray:
    if isinstance(payoff, LadlagPredictableProcess):
        payoff.check(tree)
        return payoff.leaf_table(tree)[codes, np.arange(tree.n_leaves)]
    rows = np.broadcast_to(np.asarray(payoff, dtype=float), codes.shape)
    if rows.shape[-1] != tree.n_leaves:
        raise ShapeMismatch(f"payoff needs {tree.n_leaves} leaf values")
    # the payoff must be a function of the atom at which each path stops
    stages = instant_stage(codes)
    for k in range(tree.n_stages + 1):
        lo, _ = tree.leaf_block(k)
        rep = rows[..., lo[tree.leaf_ancestor(k)]]
        here = stages == k
        if np.any(here & (rep != rows)):
            raise MeasurabilityError(f"payoff is not measurable at the stopping atoms of stage {k}")
    return np.array(rows)


def backward_values(tree: FiltrationTree, driver, codes: np.ndarray, payoff_rows: np.ndarray,
                    lowest: int = 0, tol: float = STEP_TOL):
    """Plain BSDE run backwards from a batch of stopping rules.

    ``codes`` and ``payoff_rows`` have shape ``(B, n_leaves)``.  Returns
    ``(left, value)`` lists of ``(B, n_pre[k])`` arrays for stages ``>= lowest``.
    Values at atoms already stopped are meaningless (set to 0).
    """
    n = tree.n_stages
    left = [None] * (n + 1)
    val = [None] * (n + 1)
    plus = None
    for k in range(n, lowest - 1, -1):
        lo, _ = tree.leaf_block(k)
        c = codes[:, lo]
        z = payoff_rows[:, lo]
        stop = (c == 2 * k) | ((c == 2 * k - 1) & (k > 0))
        cont = c > 2 * k
        inner = tree.expect_given_pre(k, plus) if plus is not None else 0.0
        val[k] = np.where(stop, z, np.where(cont, inner, 0.0))
        left[k] = val[k]
        if k > lowest:
            plus, _, _ = diffusive_step(tree, driver, k - 1, left[k], tol)
    return left, val


def _as_codes(tree: FiltrationTree, tau) -> np.ndarray:
    codes = tau.codes if isinstance(tau, ExtendedStoppingTime) else np.asarray(tau, dtype=np.int64)
    codes = np.atleast_2d(codes)
    if codes.shape[1] != tree.n_leaves:
        raise ShapeMismatch(f"stopping rule needs {tree.n_leaves} leaf codes")
    return codes


def _check_rule(tree: FiltrationTree, codes: np.ndarray, floor: np.ndarray) -> None:
    if np.any(codes < floor) or np.any(codes > 2 * tree.n_stages):
        raise BadStoppingTime("stopping rule stops before S, never stops, or stops after T")
    if np.any(previsibility_violations(tree, codes)):
        raise BadStoppingTime("stopping rule is not previsible")


def g_expectation_batch(tree: FiltrationTree, driver, S, codes, payoff, tol: float = STEP_TOL,
                        check: bool = True) -> np.ndarray:
    """Batched ``E^{p,g}_{S,tau}(payoff)``.

    ``S`` is a stage (result shape ``(B, n_pre[S])``) or an
    ``ExtendedStoppingTime`` (result shape ``(B, n_leaves)``, pathwise values
    at ``S``).
    """
    check_contraction(tree, driver)
    codes = _as_codes(tree, codes)
    if isinstance(S, ExtendedStoppingTime):
        floor = S.codes[None, :]
        lowest = int(instant_stage(S.codes).min())
        if check:
            _check_rule(tree, S.codes[None, :], 2 * S.start)
    else:
        S = int(S)
        if not 0 <= S <= tree.n_stages:
            raise BadStoppingTime(f"stage {S} outside [0, {tree.n_stages}]")
        floor = np.full((1, tree.n_leaves), 2 * S)
        lowest = S
    if check:
        _check_rule(tree, codes, floor)
    rows = _payoff_rows(tree, codes, payoff)
    left, val = backward_values(tree, driver, codes, rows, lowest, tol)
    if not isinstance(S, ExtendedStoppingTime):
        return val[S]
    out = np.empty(codes.shape)
    for k in range(lowest, tree.n_stages + 1):
        anc = tree.leaf_ancestor(k)
        for arr, code in ((left[k], 2 * k - 1), (val[k], 2 * k)):
            sel = S.codes == code
            if sel.any():
                out[:, sel] = arr[:, anc[sel]]
    return out


def g_expectation(tree: FiltrationTree, driver, S, tau: ExtendedStoppingTime, payoff,
                  tol: float = STEP_TOL) -> np.ndarray:
    """``E^{p,g}_{S,tau}(payoff)`` for a single stopping rule.

    ``payoff`` is a predictable process (evaluated at ``tau``) or an array of
    leaf values measurable at the atoms where ``tau`` stops.
    """
    return g_expectation_batch(tree, driver, S, tau, payoff, tol)[0]


def localize_driver(tree: FiltrationTree, driver, S: int, atoms) -> "LocalizedDriver":
    """``1_A g`` for ``A`` a union of ``G_S`` atoms (mask on post-nodes at stages ``>= S``)."""
    from .drivers import LocalizedDriver

    atoms = np.asarray(atoms, dtype=bool)
    if atoms.shape != (tree.n_pre(S),):
        raise ShapeMismatch(f"atom mask needs {tree.n_pre(S)} entries")
    masks = []
    for k in range(tree.n_stages + 1):
        if k < S:
            masks.append(np.zeros(tree.n_post(k)))
            continue
        anc = tree.omega_pre_ancestor(S)
        post_anc = tree.omega_post_ancestor(k)
        m = np.zeros(tree.n_post(k))
        m[post_anc] = atoms[anc].astype(float)
        masks.append(m)
    return LocalizedDriver(driver, masks)


def indicator_on_stage(tree: FiltrationTree, S: int, atoms, k: int) -> np.ndarray:
    """``1_A`` on ``pre_nodes[k]`` for ``k >= S`` and ``A`` a union of ``G_S`` atoms."""
    atoms = np.asarray(atoms, dtype=bool)
    out = np.zeros(tree.n_pre(k))
    out[tree.leaf_ancestor(k)] = atoms[tree.leaf_ancestor(S)].astype(float)
    return out
