"""Nonlinear optimal stopping on the doubled instant grid.

Rules returned here are ``ExtendedStoppingTime`` objects; all of them are
previsible by construction because every quantity they inspect at instant
``k-`` or ``k`` is a function of the ``G_k`` atom.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsde import g_expectation_batch
from .errors import BadStoppingTime, InvalidAlpha
from .filtration import FiltrationTree
from .oracle import DOUBLED, GRID, EnumerationBudget, _children, enumerate_codes, evaluate_rules
from .process import (
    ExtendedStoppingTime,
    LadlagPredictableProcess,
    instant_stage,
    validate_stopping_time,
)
from .rbsde import RbsdeSolution, solve_rbsde

CRITERION_TOL = 1e-9
CHECK_TOL = 1e-10


def value_function(tree: FiltrationTree, driver, obstacle: LadlagPredictableProcess, S: int) -> np.ndarray:
    """``Y_S`` on the atoms of ``G_S``."""
    return solve_rbsde(tree, driver, obstacle).Y.value[S].copy()


def _first_hit(tree: FiltrationTree, hit: np.ndarray, S: int) -> np.ndarray:
    """First instant code ``>= 2S`` where ``hit[code, leaf]`` holds; ``2N`` if none."""
    n = tree.n_stages
    hit = hit.copy()
    hit[: 2 * S] = False
    hit[2 * n] = True
    return np.argmax(hit, axis=0).astype(np.int64)


def _cost_table(tree: FiltrationTree, G: list[np.ndarray]) -> np.ndarray:
    """Running cost at every instant (``G`` is constant from ``k-`` to ``k``)."""
    return LadlagPredictableProcess([g.copy() for g in G], G).leaf_table(tree)


def tau_alpha(sol: RbsdeSolution, driver, S: int, alpha: float) -> ExtendedStoppingTime:
    """First instant ``>= S`` with ``alpha Y + (alpha - 1) G <= xi``, else ``T``.

    ``G`` is the running cost ``sum_j g(t_j, Y_{j+}, pi_j) dt``.
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidAlpha(f"alpha must lie in (0, 1), got {alpha}")
    tree = sol.tree
    Y = sol.Y.leaf_table(tree)
    xi = sol.obstacle.leaf_table(tree)
    G = _cost_table(tree, sol.running_cost(driver))
    return ExtendedStoppingTime(S, _first_hit(tree, alpha * Y + (alpha - 1.0) * G <= xi, S))


def theta_alpha(sol: RbsdeSolution, S: int, alpha: float) -> ExtendedStoppingTime:
    """First instant ``>= S`` with ``alpha Y <= xi``, else ``T``."""
    if not alpha > 0.0:
        raise InvalidAlpha(f"alpha must be positive, got {alpha}")
    tree = sol.tree
    hit = alpha * sol.Y.leaf_table(tree) <= sol.obstacle.leaf_table(tree)
    return ExtendedStoppingTime(S, _first_hit(tree, hit, S))


def tau_tilde(sol: RbsdeSolution, S: int, mode: str = DOUBLED) -> ExtendedStoppingTime:
    """Latest rule from ``S`` before which neither reflection acts.

    ``doubled``: stop at ``m`` when ``dB_m > 0``, at ``(m+1)-`` when
    ``dA_{m+1} > 0``.  ``grid``: only value instants, stopping at ``m`` when
    ``dB_m > 0`` or some ``G_{m+1}`` successor has ``dA_{m+1} > 0``.
    """
    tree = sol.tree
    n = tree.n_stages
    codes = np.full(tree.n_leaves, 2 * n, dtype=np.int64)
    open_ = np.ones(tree.n_leaves, dtype=bool)
    for m in range(S, n + 1):
        anc = tree.leaf_ancestor(m)
        stop_b = sol.dB[m][anc] > 0
        if mode == GRID and m < n:
            ahead = np.array([np.any(sol.dA[m + 1][c] > 0) for c in _children(tree, m)], dtype=bool)
            stop_b |= ahead[anc]
        elif mode not in (DOUBLED, GRID):
            raise ValueError(f"mode must be {DOUBLED!r} or {GRID!r}")
        sel = open_ & stop_b
        codes[sel] = 2 * m
        open_ &= ~sel
        if m < n and mode == DOUBLED:
            sel = open_ & (sol.dA[m + 1][tree.leaf_ancestor(m + 1)] > 0)
            codes[sel] = 2 * m + 1
            open_ &= ~sel
    return ExtendedStoppingTime(S, codes)


def reflection_windows(sol: RbsdeSolution, S: int, tau) -> tuple[np.ndarray, np.ndarray]:
    """Pathwise ``A_tau - A_S`` and ``B_{tau-} - B_{S-}`` on leaves."""
    tree = sol.tree
    codes = tau.codes if isinstance(tau, ExtendedStoppingTime) else np.asarray(tau)
    stage = instant_stage(codes)
    da = np.zeros(codes.shape)
    db = np.zeros(codes.shape)
    for j in range(S, tree.n_stages + 1):
        anc = tree.leaf_ancestor(j)
        da += np.where((j > S) & ((j < stage) | (codes == 2 * j)), sol.dA[j][anc], 0.0)
        db += np.where(j < stage, sol.dB[j][anc], 0.0)
    return da, db


def in_martingale_class(sol: RbsdeSolution, S: int, tau) -> np.ndarray:
    """Leaf-wise membership test for ``N^p_S``: no reflection inside ``[S, tau]``."""
    da, db = reflection_windows(sol, S, tau)
    return (da == 0) & (db == 0)


def _check_tau(tree: FiltrationTree, tau: ExtendedStoppingTime, S: int) -> None:
    rep = validate_stopping_time(tree, tau, S)
    if not rep.ok:
        raise BadStoppingTime("; ".join(sorted(set(rep.rules()))))


def is_martingale_interval(tree: FiltrationTree, driver, sol: RbsdeSolution, S: int, tau: ExtendedStoppingTime,
                           cross_check: bool = False, budget: EnumerationBudget = EnumerationBudget(),
                           n_pairs: int = 32, seed: int = 0) -> bool:
    """Whether ``Y`` solves the plain BSDE on ``[S, tau]``.

    The primary test looks at the reflection windows.  With ``cross_check``
    the answer is recomputed from ``E^{p,g}_{sigma,mu}(Y_mu) = Y_sigma`` over
    rules ``sigma <= mu`` truncated at ``tau``; a disagreement raises.
    """
    _check_tau(tree, tau, S)
    answer = bool(np.all(in_martingale_class(sol, S, tau)))
    if cross_check:
        direct = martingale_interval_direct(tree, driver, sol, S, tau, budget, n_pairs, seed)
        if direct != answer:
            raise AssertionError(f"window test says {answer}, direct test says {direct}")
    return answer


def martingale_interval_direct(tree: FiltrationTree, driver, sol: RbsdeSolution, S: int,
                               tau: ExtendedStoppingTime, budget: EnumerationBudget = EnumerationBudget(),
                               n_pairs: int = 32, seed: int = 0, tol: float = CHECK_TOL) -> bool:
    codes = np.minimum(enumerate_codes(tree, S, budget), tau.codes[None, :])
    Y = sol.Y
    vals = evaluate_rules(tree, driver, Y, S, codes)
    if np.any(np.abs(vals - Y.value[S]) > tol):
        return False
    table = Y.leaf_table(tree)
    cols = np.arange(tree.n_leaves)
    rng = np.random.default_rng(seed)
    for a, b in rng.integers(len(codes), size=(n_pairs, 2)):
        sigma = ExtendedStoppingTime(S, np.minimum(codes[a], codes[b]))
        mu = np.maximum(codes[a], codes[b])[None, :]
        got = g_expectation_batch(tree, driver, sigma, mu, table[mu, cols], check=False)[0]
        if np.any(np.abs(got - table[sigma.codes, cols]) > tol):
            return False
    return True


# --------------------------------------------------------------- optimality
@dataclass
class StoppingDiagnostics:
    S: int
    tau: ExtendedStoppingTime
    value_per_atom: np.ndarray
    gap: np.ndarray
    a: bool
    b: bool
    c: bool
    extra: dict = field(default_factory=dict)

    def to_dict(self, tree: FiltrationTree) -> dict:
        return {
            "S": self.S,
            "tau": self.tau.to_dict(tree),
            "value_per_atom": self.value_per_atom.tolist(),
            "gap": self.gap.tolist(),
            "criterion": {"a": self.a, "b": self.b, "c": self.c},
            **self.extra,
        }


def optimality_flags(tree: FiltrationTree, driver, obstacle: LadlagPredictableProcess, sol: RbsdeSolution,
                     S: int, codes: np.ndarray, tol: float = CRITERION_TOL):
    """Batched optimality assertions for rules ``codes`` (shape ``(M, n_leaves)``).

    Returns ``(values, a, b, c)`` with ``values`` of shape ``(M, n_pre[S])``.
    """
    codes = np.atleast_2d(codes)
    cols = np.arange(tree.n_leaves)
    values = evaluate_rules(tree, driver, obstacle, S, codes)
    a = np.all(np.abs(values - sol.Y.value[S]) <= tol, axis=1)
    anchor = g_expectation_batch(tree, driver, 0, np.full((1, tree.n_leaves), 2 * S), sol.Y, check=False)[0, 0]
    y_tau = sol.Y.leaf_table(tree)[codes, cols]
    xi_tau = obstacle.leaf_table(tree)[codes, cols]
    y_at_0 = evaluate_rules(tree, driver, sol.Y, 0, codes)[:, 0]
    xi_at_0 = evaluate_rules(tree, driver, obstacle, 0, codes)[:, 0]
    b = np.all(np.abs(y_tau - xi_tau) <= tol, axis=1) & (np.abs(anchor - y_at_0) <= tol)
    c = np.abs(anchor - xi_at_0) <= tol
    return values, a, b, c


def optimality_report(tree: FiltrationTree, driver, obstacle: LadlagPredictableProcess, sol: RbsdeSolution,
                      S: int, tau: ExtendedStoppingTime, tol: float = CRITERION_TOL) -> StoppingDiagnostics:
    """Evaluate the three equivalent optimality assertions for ``tau`` from ``S``:

    (a) ``Y_S = E_{S,tau}(xi_tau)``;
    (b) ``Y_tau = xi_tau`` and ``E_{0,S}(Y_S) = E_{0,tau}(Y_tau)``;
    (c) ``E_{0,S}(Y_S) = E_{0,tau}(xi_tau)``.
    """
    _check_tau(tree, tau, S)
    values, a, b, c = optimality_flags(tree, driver, obstacle, sol, S, tau.codes[None, :], tol)
    return StoppingDiagnostics(S, tau, values[0], sol.Y.value[S] - values[0], bool(a[0]), bool(b[0]), bool(c[0]))
