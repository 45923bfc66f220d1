"""Seeded problem instances and the named fixtures used by tests and the CLI."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import drivers as drv
from .filtration import FiltrationTree, build_lattice, build_random_tree
from .process import LadlagPredictableProcess

OBSTACLE_MODES = ("uniform", "lusc", "submartingale", "positive")


@dataclass
class Instance:
    tree: FiltrationTree
    driver: object
    obstacle: LadlagPredictableProcess
    seed: int | None = None
    meta: dict = field(default_factory=dict)


# ------------------------------------------------------------------ fixtures
def _binomial(n_stages: int, dt: float, **kw) -> FiltrationTree:
    s = math.sqrt(dt)
    return build_lattice(n_stages, dt, [(s, 0.5), (-s, 0.5)], **kw)


def fix_a() -> Instance:
    tree = _binomial(2, 0.5)
    return Instance(tree, drv.zero(), LadlagPredictableProcess.constant(tree, 1.0), meta={"name": "FIX-A"})


def fix_b(xi0: float = 0.2, driver=None) -> Instance:
    tree = _binomial(1, 1.0)
    obstacle = LadlagPredictableProcess.from_arrays(tree, [xi0, [1.0, 0.0]], [xi0, [1.0, 0.0]])
    return Instance(tree, driver or drv.zero(), obstacle, meta={"name": "FIX-B", "xi0": xi0})


def fix_c() -> Instance:
    """Mark ``u``/``d`` revealed at ``t_1``; the reward at ``T`` pays 1 on ``u``."""
    tree = _binomial(2, 1.0, marks_by_stage=[[("u", 0.5), ("d", 0.5)], [("", 1.0)]])
    up = np.array([tree.post_mark[1][j] == "u" for j in tree.pre_parent[2]], dtype=float)
    value = [0.0, np.zeros(tree.n_pre(1)), up]
    left = [0.0, np.zeros(tree.n_pre(1)), np.zeros(tree.n_pre(2))]
    return Instance(tree, drv.zero(), LadlagPredictableProcess.from_arrays(tree, left, value), meta={"name": "FIX-C"})


def fix_d() -> Instance:
    tree = _binomial(1, 1.0)
    obstacle = LadlagPredictableProcess.from_arrays(tree, [0.0, [2.0, 0.0]], [0.0, [1.0, 0.0]])
    return Instance(tree, drv.zero(), obstacle, meta={"name": "FIX-D"})


def fix_e() -> Instance:
    inst = fix_b(driver=drv.discount(0.1))
    inst.meta["name"] = "FIX-E"
    return inst


FIXTURES = {"FIX-A": fix_a, "FIX-B": fix_b, "FIX-C": fix_c, "FIX-D": fix_d, "FIX-E": fix_e}


# ------------------------------------------------------------ random pieces
def random_driver(rng: np.random.Generator, k_max: float, name: str | None = None):
    """A registry driver with Lipschitz constant at most ``k_max``."""
    names = sorted(drv.REGISTRY)
    name = name or names[int(rng.integers(len(names)))]
    budget = float(rng.uniform(0.0, k_max))
    share = float(rng.uniform(0.0, 1.0))
    sign = lambda: 1.0 if rng.uniform() < 0.5 else -1.0
    if name == "zero":
        return drv.zero()
    if name == "affine":
        return drv.affine(a=float(rng.uniform(-1, 1)), b=sign() * budget * share,
                          c=sign() * budget * (1 - share), a_slope=float(rng.uniform(-1, 1)))
    if name == "discount":
        return drv.discount(sign() * budget)
    if name == "ambiguity":
        return drv.ambiguity(sign() * budget * share, sign() * budget * (1 - share))
    return drv.make_driver(name)


def _forward_submartingale(tree: FiltrationTree, rng: np.random.Generator) -> LadlagPredictableProcess:
    """Obstacle with ``xi_k < E[xi_{(k+1)-}|G_k]`` by a strict margin."""
    n = tree.n_stages
    value = [np.array([rng.uniform(-1, 1)])]
    left = [value[0].copy()]
    for k in range(n):
        base = tree.post_to_pre(k, tree.pre_to_post(k, value[k]))
        noise = rng.uniform(-1, 1, tree.n_pre(k + 1))
        noise = noise - tree.post_to_pre(k, tree.expect_given_post(k, noise))
        lft = base + rng.uniform(0.05, 0.3) + 0.5 * noise
        left.append(lft)
        value.append(lft - rng.uniform(0.0, 0.3, tree.n_pre(k + 1)))
    return LadlagPredictableProcess(left, value)


def random_obstacle(tree: FiltrationTree, rng: np.random.Generator, mode: str = "uniform") -> LadlagPredictableProcess:
    sizes = [tree.n_pre(k) for k in range(tree.n_stages + 1)]
    if mode == "uniform":
        value = [rng.uniform(-1, 1, n) for n in sizes]
        left = [rng.uniform(-1, 1, n) for n in sizes]
    elif mode == "lusc":
        value = [rng.uniform(-1, 1, n) for n in sizes]
        left = [v - rng.uniform(0, 1, v.shape) * (rng.uniform(size=v.shape) < 0.7) for v in value]
    elif mode == "positive":
        value = [rng.uniform(0.1, 1, n) for n in sizes]
        left = [rng.uniform(0.1, 1, n) for n in sizes]
    elif mode == "submartingale":
        return _forward_submartingale(tree, rng)
    else:
        raise ValueError(f"unknown obstacle mode {mode!r}; choose from {OBSTACLE_MODES}")
    left[0] = value[0].copy()
    return LadlagPredictableProcess(left, value)


def random_instance(seed: int, *, max_stages: int = 3, max_w_branches: int = 2, max_marks: int = 2,
                    obstacle_mode: str = "uniform", k_bound: float = 0.5, driver_name: str | None = None,
                    n_stages: int | None = None) -> Instance:
    """Seeded tree, driver with ``K (dt + max|dW|) <= k_bound`` and obstacle."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_stages + 1)) if n_stages is None else n_stages
    dt = float(rng.choice([0.25, 0.5, 1.0]))
    tree = build_random_tree(int(rng.integers(2**31)), n, max_w_branches, max_marks, dt)
    k_max = k_bound / (float(tree.dt.max()) + tree.max_abs_dw)
    driver = random_driver(rng, k_max, driver_name)
    obstacle = random_obstacle(tree, rng, obstacle_mode)
    return Instance(tree, driver, obstacle, seed,
                    {"n_stages": n, "dt": dt, "obstacle_mode": obstacle_mode, "driver": driver.to_dict()})


def oracle_instance(seed: int, cap: int = 50_000, **kw) -> Instance:
    """``random_instance`` restricted to trees whose stopping rules from 0 number at most ``cap``.

    Draws are retried with derived seeds so the result stays a pure function of
    ``seed``.
    """
    from .oracle import count_stopping_times

    for attempt in range(1000):
        inst = random_instance(int(np.random.SeedSequence([seed, attempt]).generate_state(1)[0]), **kw)
        if count_stopping_times(inst.tree, 0) <= cap:
            inst.seed = seed
            inst.meta["attempt"] = attempt
            return inst
    raise RuntimeError(f"no instance with at most {cap} stopping rules for seed {seed}")
