"""Exhaustive enumeration of previsible stopping rules and brute-force values.

A rule from stage ``S`` is a decision tree over ``G_k`` atoms: at each reached
pre-node the path stops at ``k-`` (not at ``S`` itself or at 0), stops at
``k``, or continues (not at ``N``).  The number of rules below a pre-node is
therefore ``n_stop + prod(children)``, and the total is the product over the
pre-nodes of stage ``S``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

import numpy as np

from .bsde import g_expectation_batch
from .errors import BudgetExceeded
from .filtration import FiltrationTree
from .process import ExtendedStoppingTime, LadlagPredictableProcess

DOUBLED, GRID = "doubled", "grid"
TIE_TOL = 1e-12


@dataclass(frozen=True)
class EnumerationBudget:
    max_stopping_times: int = 1_000_000
    mode: str = DOUBLED

    def __post_init__(self):
        if self.max_stopping_times < 1:
            raise ValueError("budget must be positive")
        if self.mode not in (DOUBLED, GRID):
            raise ValueError(f"mode must be {DOUBLED!r} or {GRID!r}")


def _stop_codes(k: int, S: int, mode: str) -> list[int]:
    if mode == DOUBLED and k > S and k > 0:
        return [2 * k - 1, 2 * k]
    return [2 * k]


def _children(tree: FiltrationTree, k: int) -> list[np.ndarray]:
    """Pre-nodes of stage ``k+1`` below each pre-node of stage ``k``, in leaf order."""
    post_of_pre = np.searchsorted(tree.post_parent[k], np.arange(tree.n_pre(k) + 1))
    pre_of_post = np.searchsorted(tree.pre_parent[k + 1], np.arange(tree.n_post(k) + 1))
    return [np.arange(pre_of_post[post_of_pre[i]], pre_of_post[post_of_pre[i + 1]]) for i in range(tree.n_pre(k))]


def _node_counts(tree: FiltrationTree, S: int, mode: str) -> list[list[int]]:
    n = tree.n_stages
    counts: list[list[int]] = [[] for _ in range(n + 1)]
    counts[n] = [len(_stop_codes(n, S, mode))] * tree.n_pre(n)
    for k in range(n - 1, S - 1, -1):
        kids = _children(tree, k)
        ns = len(_stop_codes(k, S, mode))
        counts[k] = [ns + prod(counts[k + 1][c] for c in kids[i]) for i in range(tree.n_pre(k))]
    return counts


def count_stopping_times(tree: FiltrationTree, S: int, mode: str = DOUBLED) -> int:
    """Closed-form number of previsible rules ``tau >= S`` (exact integer)."""
    if not 0 <= S <= tree.n_stages:
        raise ValueError(f"S={S} outside [0, {tree.n_stages}]")
    return prod(_node_counts(tree, S, mode)[S])


def _product(blocks: list[np.ndarray]) -> np.ndarray:
    """Cartesian product of per-child rule matrices, first child most significant."""
    out = blocks[0]
    for b in blocks[1:]:
        out = np.hstack([np.repeat(out, len(b), axis=0), np.tile(b, (len(out), 1))])
    return out


def enumerate_codes(tree: FiltrationTree, S: int, budget: EnumerationBudget = EnumerationBudget()) -> np.ndarray:
    """All previsible rules ``tau >= S`` as a ``(M, n_leaves)`` code matrix."""
    total = count_stopping_times(tree, S, budget.mode)
    if total > budget.max_stopping_times:
        raise BudgetExceeded(f"{total} stopping rules exceed the budget of {budget.max_stopping_times}",
                             count=total)
    n = tree.n_stages
    lo, hi = tree.leaf_block(n)
    mats = [np.array(_stop_codes(n, S, budget.mode), dtype=np.int64)[:, None] for _ in range(tree.n_pre(n))]
    for k in range(n - 1, S - 1, -1):
        kids = _children(tree, k)
        lo, hi = tree.leaf_block(k)
        new = []
        for i in range(tree.n_pre(k)):
            width = hi[i] - lo[i]
            stops = [np.full((1, width), c, dtype=np.int64) for c in _stop_codes(k, S, budget.mode)]
            new.append(np.vstack(stops + [_product([mats[c] for c in kids[i]])]))
        mats = new
    return _product(mats)


def enumerate_stopping_times(tree: FiltrationTree, S: int, budget: EnumerationBudget = EnumerationBudget()):
    """Every previsible rule ``tau >= S`` exactly once, in a fixed order."""
    for row in enumerate_codes(tree, S, budget):
        yield ExtendedStoppingTime(S, row)


@dataclass
class OracleResult:
    values: np.ndarray
    argmax: list[int]
    codes: np.ndarray = field(repr=False)
    all_values: np.ndarray = field(repr=False)
    start: int = 0

    @property
    def count(self) -> int:
        return len(self.codes)

    def running_max(self) -> np.ndarray:
        return np.maximum.accumulate(self.all_values, axis=0)

    def maximizers(self) -> list[ExtendedStoppingTime]:
        return [ExtendedStoppingTime(self.start, self.codes[i]) for i in self.argmax]


def evaluate_rules(tree: FiltrationTree, driver, payoff: LadlagPredictableProcess, S: int, codes: np.ndarray,
                   chunk: int = 4096) -> np.ndarray:
    """``E^{p,g}_{S,tau}(payoff_tau)`` for every row of ``codes``: shape ``(M, n_pre[S])``."""
    table = payoff.leaf_table(tree)
    cols = np.arange(tree.n_leaves)
    out = np.empty((len(codes), tree.n_pre(S)))
    for a in range(0, len(codes), chunk):
        c = codes[a:a + chunk]
        out[a:a + chunk] = g_expectation_batch(tree, driver, S, c, table[c, cols], check=False)
    return out


def brute_force_value(tree: FiltrationTree, driver, obstacle: LadlagPredictableProcess, S: int,
                      budget: EnumerationBudget = EnumerationBudget()) -> OracleResult:
    """Per-atom maximum of the g-expectation of the reward over all rules ``>= S``.

    ``argmax`` lists every rule attaining the maximum on all atoms of ``G_S``
    within ``1e-12`` (ties are kept).
    """
    codes = enumerate_codes(tree, S, budget)
    vals = evaluate_rules(tree, driver, obstacle, S, codes)
    best = vals.max(axis=0)
    argmax = np.flatnonzero(np.all(vals >= best - TIE_TOL, axis=1)).tolist()
    return OracleResult(best, argmax, codes, vals, S)
