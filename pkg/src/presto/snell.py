"""The linear case ``g = 0``: predictable Snell envelope, Mertens decomposition,
and the algebraic properties of the value family (Bellman equality, scaling,
localization, supermartingale systems).

In a finite model the value family indexed by stopping times is just a set of
arrays on atoms, so aggregation into one process needs no separate step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsde import g_expectation_batch
from .drivers import zero
from .errors import InvalidAlpha, MeasurabilityError, NotASupermartingale, ShapeMismatch
from .filtration import FiltrationTree
from .oracle import EnumerationBudget, enumerate_codes, evaluate_rules
from .process import AdaptedProcess, ExtendedStoppingTime, LadlagPredictableProcess
from .rbsde import RbsdeSolution, solve_rbsde

EXACT_TOL = 1e-12
CHECK_TOL = 1e-10


@dataclass
class SnellEnvelope:
    V: LadlagPredictableProcess
    V_plus: AdaptedProcess
    dN_W: list[np.ndarray] = field(repr=False)
    dN_eta: list[np.ndarray] = field(repr=False)
    dA: list[np.ndarray] = field(repr=False)
    dB: list[np.ndarray] = field(repr=False)
    pVplus: list[np.ndarray] = field(repr=False)
    solution: RbsdeSolution = field(repr=False)


def snell_envelope(tree: FiltrationTree, obstacle: LadlagPredictableProcess) -> SnellEnvelope:
    """Smallest predictable supermartingale above ``obstacle`` (zero driver)."""
    sol = solve_rbsde(tree, zero(), obstacle)
    # with g = 0 the martingale increment on (t_k, t_{k+1}] is pi dW + dMW
    dn_w = [sol.dMW[0].copy()] + [
        sol.dMW[k + 1] + tree.post_to_pre(k, sol.pi[k]) * tree.pre_dw[k + 1] for k in range(tree.n_stages)
    ]
    return SnellEnvelope(sol.Y, sol.Y_plus, dn_w, sol.dMeta, sol.dA, sol.dB, sol.pYplus, sol)


@dataclass
class MertensDecomposition:
    """``V_{k-} = V_0 + N_{k-} - A_{k-} - B_{k-}`` with ``N`` a martingale.

    ``dN_W[k]`` lives on ``pre_nodes[k]`` (increment over ``(t_{k-1}, t_k)``),
    ``dN_eta[k]`` on ``post_nodes[k]`` (jump revealed at ``t_k``).
    """

    V0: float
    dN_W: list[np.ndarray]
    dN_eta: list[np.ndarray]
    dA: list[np.ndarray]
    dB: list[np.ndarray]

    def reconstruct(self, tree: FiltrationTree) -> tuple[LadlagPredictableProcess, AdaptedProcess]:
        """Forward telescoping of the increments."""
        left, value, plus = [np.array([self.V0])], [np.array([self.V0])], []
        for k in range(tree.n_stages + 1):
            if k > 0:
                lft = tree.post_to_pre(k - 1, plus[k - 1]) + self.dN_W[k]
                left.append(lft)
                value.append(lft - self.dA[k])
            pv = value[k] - self.dB[k]
            plus.append(tree.pre_to_post(k, pv) + self.dN_eta[k])
        return LadlagPredictableProcess(left, value), AdaptedProcess(plus)


def mertens_decompose(tree: FiltrationTree, V: LadlagPredictableProcess,
                      obstacle: LadlagPredictableProcess | None = None,
                      tol: float = EXACT_TOL) -> MertensDecomposition:
    """Decompose a predictable strong supermartingale given by its two instants per stage.

    Its right limits are taken as ``V_{k+} = E[V_{(k+1)-}|F_k]`` (no
    continuous decrease between grid times).  Raises
    ``NotASupermartingale`` when ``V_{k-} < V_k`` or
    ``V_k < E[V_{k+}|G_k]`` somewhere.  When ``obstacle`` is given the
    Skorokhod conditions are also enforced.
    """
    V.check(tree)
    n = tree.n_stages
    plus = [tree.expect_given_post(k, V.left[k + 1]) for k in range(n)] + [tree.pre_to_post(n, V.value[n])]
    dA, dB, dnw, dne = [], [], [np.zeros(1)], []
    for k in range(n + 1):
        pv = tree.expect_given_pre(k, plus[k])
        dA.append(V.left[k] - V.value[k])
        dB.append(V.value[k] - pv)
        dne.append(plus[k] - tree.pre_to_post(k, pv))
        if k > 0:
            dnw.append(V.left[k] - tree.post_to_pre(k - 1, plus[k - 1]))
        for name, arr in (("A", dA[k]), ("B", dB[k])):
            if np.any(arr < -tol):
                i = int(np.argmin(arr))
                raise NotASupermartingale(f"d{name} < 0 at stage {k}, atom {i}: {arr[i]:.3g}", stage=k, atom=i)
    if obstacle is not None:
        for k in range(n + 1):
            if np.any(np.abs(dB[k] * (V.value[k] - obstacle.value[k])) > tol) or \
                    np.any(np.abs(dA[k] * (V.left[k] - obstacle.left[k])) > tol):
                raise NotASupermartingale(f"reflection away from the obstacle at stage {k}", stage=k)
    return MertensDecomposition(float(V.value[0][0]), dnw, dne, dA, dB)


# --------------------------------------------------------- value-family algebra
def _atom_values(tree: FiltrationTree, k: int, values, what: str) -> np.ndarray:
    """Accept one value per ``G_k`` atom or one per leaf (checked constant on atoms)."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 0:
        return np.full(tree.n_pre(k), float(v))
    if v.shape == (tree.n_pre(k),):
        return v
    if v.shape == (tree.n_leaves,):
        lo, _ = tree.leaf_block(k)
        rep = v[lo[tree.leaf_ancestor(k)]]
        if np.any(rep != v):
            raise MeasurabilityError(f"{what} is not constant on the atoms of G_{k}")
        return v[lo]
    raise ShapeMismatch(f"{what} needs {tree.n_pre(k)} atom values or {tree.n_leaves} leaf values")


def _lift(tree: FiltrationTree, k_from: int, k_to: int, values: np.ndarray) -> np.ndarray:
    """Broadcast a ``G_{k_from}`` function onto ``pre_nodes[k_to]`` (``k_to >= k_from``)."""
    lo, _ = tree.leaf_block(k_to)
    return values[tree.leaf_ancestor(k_from)[lo]]


def _scaled_from(tree: FiltrationTree, obstacle: LadlagPredictableProcess, k0: int,
                 factor: np.ndarray) -> LadlagPredictableProcess:
    """``factor * obstacle`` on stages ``>= k0`` (``factor`` on ``G_{k0}`` atoms); zero before."""
    left, value = [], []
    for k in range(tree.n_stages + 1):
        f = _lift(tree, k0, k, factor) if k >= k0 else np.zeros(tree.n_pre(k))
        left.append(f * obstacle.left[k])
        value.append(f * obstacle.value[k])
    left[0] = value[0].copy()
    return LadlagPredictableProcess(left, value)


def _close(a: np.ndarray, b: np.ndarray, tol: float) -> bool:
    return bool(np.all(np.abs(np.asarray(a) - np.asarray(b)) <= tol))


@dataclass
class BellmanReport:
    bellman: bool
    scaling: bool
    localization: bool
    supermartingale_system: bool
    details: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.bellman and self.scaling and self.localization and self.supermartingale_system

    def to_dict(self) -> dict:
        return {"bellman": self.bellman, "scaling": self.scaling, "localization": self.localization,
                "supermartingale_system": self.supermartingale_system, "details": self.details}


def bellman_check(tree: FiltrationTree, obstacle: LadlagPredictableProcess, S: int, theta: int, alpha, A,
                  budget: EnumerationBudget = EnumerationBudget(), n_pairs: int = 64, seed: int = 0,
                  tol: float = CHECK_TOL) -> BellmanReport:
    """Four identities of the linear value family, each checked by brute force.

    1. ``E[alpha V_theta | G_S] = max_{tau >= theta} E[alpha xi_tau | G_S]``;
    2. the envelope of ``alpha xi`` from ``theta`` on equals ``alpha V`` there;
    3. the envelope of ``1_A xi`` from ``S`` on equals ``1_A V`` there;
    4. ``E[V_mu | G_sigma] <= V_sigma`` for sampled previsible ``S <= sigma <= mu``.
    """
    if not 0 <= S <= theta <= tree.n_stages:
        raise ValueError("need 0 <= S <= theta <= N")
    alpha = _atom_values(tree, theta, alpha, "alpha")
    if np.any(alpha < 0) or not np.all(np.isfinite(alpha)):
        raise InvalidAlpha("alpha must be finite and nonnegative")
    A = _atom_values(tree, S, A, "A").astype(bool).astype(float)
    env = snell_envelope(tree, obstacle)
    V = env.V
    g0 = zero()
    details: dict = {}

    # (1) Bellman equality, right side by enumeration of rules from theta
    lhs = tree.expect_down(theta, S, alpha * V.value[theta])
    codes = enumerate_codes(tree, theta, budget)
    scaled = _scaled_from(tree, obstacle, theta, alpha)
    at_theta = evaluate_rules(tree, g0, scaled, theta, codes)
    rhs = tree.expect_down(theta, S, at_theta).max(axis=0)
    details["bellman_gap"] = float(np.max(np.abs(lhs - rhs)))
    bellman = details["bellman_gap"] <= tol

    # (2) scaling
    env_a = snell_envelope(tree, scaled).V
    gaps = []
    for k in range(theta, tree.n_stages + 1):
        f = _lift(tree, theta, k, alpha)
        gaps.append(np.max(np.abs(env_a.value[k] - f * V.value[k])))
        if k > theta:
            gaps.append(np.max(np.abs(env_a.left[k] - f * V.left[k])))
    details["scaling_gap"] = float(max(gaps))
    scaling = details["scaling_gap"] <= tol

    # (3) localization
    env_A = snell_envelope(tree, _scaled_from(tree, obstacle, S, A)).V
    gaps = []
    for k in range(S, tree.n_stages + 1):
        f = _lift(tree, S, k, A)
        gaps.append(np.max(np.abs(env_A.value[k] - f * V.value[k])))
        if k > S:
            gaps.append(np.max(np.abs(env_A.left[k] - f * V.left[k])))
    details["localization_gap"] = float(max(gaps))
    localization = details["localization_gap"] <= tol

    # (4) supermartingale system on sampled pairs sigma <= mu
    details["supermartingale_excess"] = supermartingale_excess(tree, g0, V, S, budget, n_pairs, seed)
    system = details["supermartingale_excess"] <= tol
    return BellmanReport(bellman, scaling, localization, system, details)


def supermartingale_excess(tree: FiltrationTree, driver, U: LadlagPredictableProcess, S: int,
                           budget: EnumerationBudget = EnumerationBudget(), n_pairs: int = 64,
                           seed: int = 0) -> float:
    """``max (E^{p,g}_{sigma,mu}(U_mu) - U_sigma)`` over sampled previsible ``S <= sigma <= mu``.

    Pairs are ``(min(r1, r2), max(r1, r2))`` for rules ``r1, r2`` drawn from
    the enumeration; all rules are used with ``sigma = S`` as well.
    """
    codes = enumerate_codes(tree, S, budget)
    vals = evaluate_rules(tree, driver, U, S, codes)
    worst = float(np.max(vals - U.value[S]))
    rng = np.random.default_rng(seed)
    idx = rng.integers(len(codes), size=(n_pairs, 2))
    table = U.leaf_table(tree)
    cols = np.arange(tree.n_leaves)
    for a, b in idx:
        sigma = ExtendedStoppingTime(S, np.minimum(codes[a], codes[b]))
        mu = np.maximum(codes[a], codes[b])[None, :]
        got = g_expectation_batch(tree, driver, sigma, mu, table[mu, cols], check=False)[0]
        worst = max(worst, float(np.max(got - table[sigma.codes, cols])))
    return worst


def seeded_supermartingale_system(tree: FiltrationTree, obstacle: LadlagPredictableProcess,
                                  seed: int) -> LadlagPredictableProcess:
    """A predictable supermartingale above ``obstacle``, built backward with
    seeded nonnegative pushes on all three layers."""
    rng = np.random.default_rng(seed)
    n = tree.n_stages
    value = [None] * (n + 1)
    left = [None] * (n + 1)
    value[n] = obstacle.value[n] + rng.uniform(0, 0.5, tree.n_pre(n))
    left[n] = np.maximum(obstacle.left[n], value[n]) + rng.uniform(0, 0.5, tree.n_pre(n))
    for k in range(n - 1, -1, -1):
        plus = tree.expect_given_post(k, left[k + 1]) + rng.uniform(0, 0.5, tree.n_post(k))
        value[k] = np.maximum(obstacle.value[k], tree.expect_given_pre(k, plus)) + rng.uniform(0, 0.5, tree.n_pre(k))
        left[k] = np.maximum(obstacle.left[k], value[k]) + rng.uniform(0, 0.5, tree.n_pre(k))
    left[0] = value[0].copy()
    return LadlagPredictableProcess(left, value)
