"""Finite two-phase filtration trees.

Each stage ``k >= 1`` carries two layers of atoms:

* pre-nodes, the atoms of ``G_k = F_{t_k-}``: children of a post-node at stage
  ``k-1``, one per Brownian increment ``dW``;
* post-nodes, the atoms of ``F_k``: children of a pre-node at stage ``k``, one
  per mark (the information revealed exactly at the predictable time ``t_k``).

Stage 0 holds a single root which is simultaneously a pre-node and a
post-node (``F_0`` is trivial).  Children of every node are stored
contiguously, so conditional expectations reduce to ``np.add.reduceat``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadProbability, MomentViolation, ShapeMismatch, SizeLimit

PROB_TOL = 1e-12
DEFAULT_MAX_NODES = 200_000
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Violation:
    rule: str
    location: str
    magnitude: float
    detail: str = ""


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def rules(self) -> list[str]:
        return [v.rule for v in self.violations]

    def add(self, rule: str, location: str, magnitude: float, detail: str = "") -> None:
        self.violations.append(Violation(rule, location, float(magnitude), detail))

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "violations": [
                {"rule": v.rule, "location": v.location, "magnitude": v.magnitude, "detail": v.detail}
                for v in self.violations
            ],
        }


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _child_starts(parent: np.ndarray, n_parents: int) -> np.ndarray:
    return np.searchsorted(parent, np.arange(n_parents), side="left")


class FiltrationTree:
    """Immutable layered path tree.

    Per-stage lists are indexed by stage ``0..N``; entry 0 describes the root.
    ``pre_parent[k][i]`` indexes ``post_nodes[k-1]`` and ``post_parent[k][j]``
    indexes ``pre_nodes[k]``.
    """

    def __init__(
        self,
        dt: Sequence[float] | float,
        pre_parent: Sequence[Sequence[int]],
        pre_p: Sequence[Sequence[float]],
        pre_dw: Sequence[Sequence[float]],
        post_parent: Sequence[Sequence[int]],
        post_q: Sequence[Sequence[float]],
        post_mark: Sequence[Sequence[str]],
    ):
        n = len(pre_parent)
        if n < 1:
            raise ValueError("a tree needs at least one stage")
        for name, seq in (("pre_p", pre_p), ("pre_dw", pre_dw), ("post_parent", post_parent),
                          ("post_q", post_q), ("post_mark", post_mark)):
            if len(seq) != n:
                raise ShapeMismatch(f"{name} has {len(seq)} stages, expected {n}")
        dt_arr = np.full(n, float(dt)) if np.isscalar(dt) else np.asarray(dt, dtype=float)
        if dt_arr.shape != (n,):
            raise ShapeMismatch(f"dt has shape {dt_arr.shape}, expected ({n},)")

        self.n_stages = n
        self.dt = _frozen(dt_arr)
        self.times = _frozen(np.concatenate([[0.0], np.cumsum(dt_arr)]))
        self.pre_parent = [_frozen([-1], int)]
        self.pre_p = [_frozen([1.0])]
        self.pre_dw = [_frozen([0.0])]
        self.post_parent = [_frozen([0], int)]
        self.post_q = [_frozen([1.0])]
        self.post_mark: list[tuple[str, ...]] = [("",)]
        for k in range(n):
            pp, p, dw = pre_parent[k], pre_p[k], pre_dw[k]
            qp, q, mk = post_parent[k], post_q[k], post_mark[k]
            if not (len(pp) == len(p) == len(dw)):
                raise ShapeMismatch(f"stage {k + 1}: pre-node arrays differ in length")
            if not (len(qp) == len(q) == len(mk)):
                raise ShapeMismatch(f"stage {k + 1}: post-node arrays differ in length")
            self.pre_parent.append(_frozen(pp, int))
            self.pre_p.append(_frozen(p))
            self.pre_dw.append(_frozen(dw))
            self.post_parent.append(_frozen(qp, int))
            self.post_q.append(_frozen(q))
            self.post_mark.append(tuple(str(m) for m in mk))

    # ------------------------------------------------------------------ sizes
    def n_pre(self, k: int) -> int:
        return len(self.pre_parent[k])

    def n_post(self, k: int) -> int:
        return len(self.post_parent[k])

    @property
    def n_leaves(self) -> int:
        """Number of ``G_N`` atoms (pre-nodes at the last stage)."""
        return self.n_pre(self.n_stages)

    @property
    def node_count(self) -> int:
        return 1 + sum(self.n_pre(k) + self.n_post(k) for k in range(1, self.n_stages + 1))

    @cached_property
    def max_abs_dw(self) -> float:
        return max(float(np.max(np.abs(self.pre_dw[k]))) for k in range(1, self.n_stages + 1))

    # ---------------------------------------------------------------- kernels
    @cached_property
    def _pre_starts(self) -> list[np.ndarray]:
        # _pre_starts[k]: first pre-node of stage k+1 under each post-node of stage k
        return [_child_starts(self.pre_parent[k + 1], self.n_post(k)) for k in range(self.n_stages)]

    @cached_property
    def _post_starts(self) -> list[np.ndarray]:
        return [_child_starts(self.post_parent[k], self.n_pre(k)) for k in range(self.n_stages + 1)]

    def expect_given_post(self, k: int, values) -> np.ndarray:
        """``E[X | F_k]`` for ``X`` living on ``pre_nodes[k+1]`` (last axis)."""
        v = self._check(values, self.n_pre(k + 1), f"pre_nodes[{k + 1}]")
        return np.add.reduceat(v * self.pre_p[k + 1], self._pre_starts[k], axis=-1)

    def expect_dw_given_post(self, k: int, values) -> np.ndarray:
        """``E[X * dW_{k+1} | F_k]``."""
        v = self._check(values, self.n_pre(k + 1), f"pre_nodes[{k + 1}]")
        return np.add.reduceat(v * (self.pre_p[k + 1] * self.pre_dw[k + 1]), self._pre_starts[k], axis=-1)

    def expect_given_pre(self, k: int, values) -> np.ndarray:
        """``E[X | G_k]`` for ``X`` on ``post_nodes[k]``: the one-step predictable projection."""
        v = self._check(values, self.n_post(k), f"post_nodes[{k}]")
        return np.add.reduceat(v * self.post_q[k], self._post_starts[k], axis=-1)

    def expect_down(self, k_from: int, k_to: int, values) -> np.ndarray:
        """``E[X | G_{k_to}]`` for ``X`` on ``pre_nodes[k_from]``, ``k_to <= k_from``."""
        v = np.asarray(values, dtype=float)
        for k in range(k_from - 1, k_to - 1, -1):
            v = self.expect_given_pre(k, self.expect_given_post(k, v))
        return v

    def pre_to_post(self, k: int, values) -> np.ndarray:
        """Broadcast a ``G_k`` function onto ``post_nodes[k]``."""
        return np.asarray(values)[..., self.post_parent[k]]

    def post_to_pre(self, k: int, values) -> np.ndarray:
        """Broadcast an ``F_k`` function onto ``pre_nodes[k+1]``."""
        return np.asarray(values)[..., self.pre_parent[k + 1]]

    @staticmethod
    def _check(values, n: int, where: str) -> np.ndarray:
        v = np.asarray(values, dtype=float)
        if v.shape[-1:] != (n,):
            raise ShapeMismatch(f"expected {n} values on {where}, got shape {v.shape}")
        return v

    # -------------------------------------------------------------- ancestry
    @cached_property
    def _leaf_anc(self) -> list[np.ndarray]:
        n = self.n_stages
        anc = [None] * (n + 1)
        anc[n] = np.arange(self.n_leaves)
        for k in range(n - 1, -1, -1):
            anc[k] = self.post_parent[k][self.pre_parent[k + 1][anc[k + 1]]]
        for a in anc:
            a.setflags(write=False)
        return anc

    def leaf_ancestor(self, k: int) -> np.ndarray:
        """Index in ``pre_nodes[k]`` of the stage-``k`` ancestor of every leaf."""
        return self._leaf_anc[k]

    @cached_property
    def _leaf_blocks(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        for k in range(self.n_stages + 1):
            anc, idx = self._leaf_anc[k], np.arange(self.n_pre(k))
            out.append((np.searchsorted(anc, idx, "left"), np.searchsorted(anc, idx, "right")))
        return out

    def leaf_block(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Half-open leaf ranges ``[lo, hi)`` below each pre-node of stage ``k``."""
        return self._leaf_blocks[k]

    @cached_property
    def pre_prob(self) -> list[np.ndarray]:
        """Unconditional probability of every pre-node, per stage."""
        out = [np.ones(1)]
        post = np.ones(1)
        for k in range(1, self.n_stages + 1):
            pre = post[self.pre_parent[k]] * self.pre_p[k]
            post = pre[self.post_parent[k]] * self.post_q[k]
            out.append(pre)
        return out

    @cached_property
    def post_prob(self) -> list[np.ndarray]:
        return [self.pre_prob[k][self.post_parent[k]] * self.post_q[k] for k in range(self.n_stages + 1)]

    @property
    def leaf_prob(self) -> np.ndarray:
        return self.pre_prob[self.n_stages]

    @cached_property
    def _omega_anc(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        # finest atoms are post_nodes[N]
        n = self.n_stages
        post_anc = [None] * (n + 1)
        pre_anc = [None] * (n + 1)
        post_anc[n] = np.arange(self.n_post(n))
        pre_anc[n] = self.post_parent[n]
        for k in range(n - 1, -1, -1):
            post_anc[k] = self.pre_parent[k + 1][pre_anc[k + 1]]
            pre_anc[k] = self.post_parent[k][post_anc[k]]
        return pre_anc, post_anc

    def omega_pre_ancestor(self, k: int) -> np.ndarray:
        return self._omega_anc[0][k]

    def omega_post_ancestor(self, k: int) -> np.ndarray:
        return self._omega_anc[1][k]

    @property
    def omega_prob(self) -> np.ndarray:
        return self.post_prob[self.n_stages]

    def is_single_mark(self) -> bool:
        """True when ``G_k = F_k`` at every stage (quasi-left-continuous model)."""
        return all(self.n_post(k) == self.n_pre(k) for k in range(self.n_stages + 1))

    def pre_label(self, k: int, i: int) -> str:
        return f"pre[{k}][{i}]"

    def post_label(self, k: int, i: int) -> str:
        return f"post[{k}][{i}]"

    # ------------------------------------------------------------------- I/O
    def to_dict(self) -> dict:
        stages = []
        for k in range(1, self.n_stages + 1):
            stages.append({
                "pre": [
                    {"parent": int(a), "p": float(p), "dW": float(w)}
                    for a, p, w in zip(self.pre_parent[k], self.pre_p[k], self.pre_dw[k])
                ],
                "post": [
                    {"parent": int(a), "q": float(q), "mark": m}
                    for a, q, m in zip(self.post_parent[k], self.post_q[k], self.post_mark[k])
                ],
            })
        dt = self.dt.tolist()
        return {"version": SCHEMA_VERSION, "dt": dt[0] if len(set(dt)) == 1 else dt, "stages": stages}

    @classmethod
    def from_dict(cls, data: dict) -> "FiltrationTree":
        if data.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported tree schema version {data.get('version')!r}")
        stages = data["stages"]
        return cls(
            dt=data["dt"],
            pre_parent=[[n["parent"] for n in s["pre"]] for s in stages],
            pre_p=[[n["p"] for n in s["pre"]] for s in stages],
            pre_dw=[[n["dW"] for n in s["pre"]] for s in stages],
            post_parent=[[n["parent"] for n in s["post"]] for s in stages],
            post_q=[[n["q"] for n in s["post"]] for s in stages],
            post_mark=[[n["mark"] for n in s["post"]] for s in stages],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FiltrationTree":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, FiltrationTree):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        counts = [(self.n_pre(k), self.n_post(k)) for k in range(1, self.n_stages + 1)]
        return f"FiltrationTree(N={self.n_stages}, dt={self.dt.tolist()}, (pre, post)={counts})"


# ---------------------------------------------------------------- validation
def _check_children(report, rule_loc, probs, parents, n_parents, tol=PROB_TOL):
    """Probability checks per parent; returns mask of parents whose laws are sane."""
    sane = np.ones(n_parents, dtype=bool)
    for i, pr in enumerate(probs):
        if not pr > 0:
            report.add("BAD_PROBABILITY", rule_loc(i, child=True), pr, "non-positive probability")
            sane[parents[i]] = False
    sums = np.bincount(parents, weights=probs, minlength=n_parents)
    for a in np.flatnonzero(np.abs(sums - 1.0) > tol):
        report.add("BAD_PROBABILITY", rule_loc(a, child=False), abs(sums[a] - 1.0), "children do not sum to 1")
        sane[a] = False
    return sane


def validate_tree(tree: FiltrationTree) -> ValidationReport:
    """List every structural, probabilistic and moment violation. Never raises."""
    report = ValidationReport()
    for k in range(1, tree.n_stages + 1):
        dt = tree.dt[k - 1]
        if not dt > 0:
            report.add("BAD_DT", f"stage[{k}]", dt, "dt must be positive")
        n_prev_post, n_pre = tree.n_post(k - 1), tree.n_pre(k)
        pp, qp = tree.pre_parent[k], tree.post_parent[k]
        structural = False
        for parents, n_par, what in ((pp, n_prev_post, "pre"), (qp, n_pre, "post")):
            if len(parents) and (parents.min() < 0 or parents.max() >= n_par):
                report.add("STRUCTURE", f"stage[{k}].{what}", 1.0, "parent index out of range")
                structural = True
                continue
            if np.any(np.diff(parents) < 0):
                report.add("STRUCTURE", f"stage[{k}].{what}", 1.0, "children not stored contiguously")
                structural = True
            missing = np.setdiff1d(np.arange(n_par), parents)
            for m in missing:
                report.add("STRUCTURE", f"stage[{k}].{what}-parent[{m}]", 1.0, "node without children")
                structural = True
        if structural:
            continue

        sane_w = _check_children(
            report,
            lambda i, child: tree.pre_label(k, i) if child else tree.post_label(k - 1, i),
            tree.pre_p[k], pp, n_prev_post,
        )
        _check_children(
            report,
            lambda i, child: tree.post_label(k, i) if child else tree.pre_label(k, i),
            tree.post_q[k], qp, n_pre,
        )
        p, w = tree.pre_p[k], tree.pre_dw[k]
        mean = np.bincount(pp, weights=p * w, minlength=n_prev_post)
        second = np.bincount(pp, weights=p * w * w, minlength=n_prev_post)
        for a in range(n_prev_post):
            if not sane_w[a]:
                continue
            if abs(mean[a]) > PROB_TOL:
                report.add("MOMENT_VIOLATION", tree.post_label(k - 1, a), abs(mean[a]), "E[dW] != 0")
            if abs(second[a] - dt) > PROB_TOL:
                report.add("MOMENT_VIOLATION", tree.post_label(k - 1, a), abs(second[a] - dt), "E[dW^2] != dt")
    return report


# ------------------------------------------------------------------ builders
def _check_law(pairs, what: str) -> None:
    probs = [float(pr) for _, pr in pairs]
    if not pairs or any(not pr > 0 for pr in probs) or abs(sum(probs) - 1.0) > PROB_TOL:
        raise BadProbability(f"{what} probabilities must be positive and sum to 1, got {probs}")


def build_lattice(
    n_stages: int,
    dt: float,
    w_branches: Sequence[tuple[float, float]],
    marks: Sequence[tuple[str, float]] = (("", 1.0),),
    *,
    marks_by_stage: Sequence[Sequence[tuple[str, float]]] | None = None,
    max_nodes: int = DEFAULT_MAX_NODES,
) -> FiltrationTree:
    """Expand an i.i.d. lattice into a non-recombining path tree.

    ``w_branches`` is a list of ``(dW, p)`` pairs and ``marks`` a list of
    ``(label, q)`` pairs used at every stage unless ``marks_by_stage``
    overrides them stage by stage.
    """
    if n_stages < 1:
        raise ValueError("n_stages must be >= 1")
    if not dt > 0:
        raise ValueError("dt must be positive")
    mark_sets = list(marks_by_stage) if marks_by_stage is not None else [marks] * n_stages
    if len(mark_sets) != n_stages:
        raise ShapeMismatch("marks_by_stage must have one entry per stage")
    _check_law(w_branches, "dW")
    for ms in mark_sets:
        _check_law(ms, "mark")
    mean = sum(p * w for w, p in w_branches)
    second = sum(p * w * w for w, p in w_branches)
    if abs(mean) > PROB_TOL or abs(second - dt) > PROB_TOL:
        raise MomentViolation(f"dW moments: mean={mean}, second moment={second}, dt={dt}")

    nb = len(w_branches)
    total, n_post = 1, 1
    for ms in mark_sets:
        n_pre = n_post * nb
        n_post = n_pre * len(ms)
        total += n_pre + n_post
        if total > max_nodes:
            raise SizeLimit(f"lattice exceeds {max_nodes} nodes")

    pre_parent, pre_p, pre_dw, post_parent, post_q, post_mark = [], [], [], [], [], []
    n_post = 1
    for ms in mark_sets:
        n_pre = n_post * nb
        pre_parent.append(np.repeat(np.arange(n_post), nb))
        pre_p.append(np.tile([p for _, p in w_branches], n_post))
        pre_dw.append(np.tile([w for w, _ in w_branches], n_post))
        post_parent.append(np.repeat(np.arange(n_pre), len(ms)))
        post_q.append(np.tile([q for _, q in ms], n_pre))
        post_mark.append([label for label, _ in ms] * n_pre)
        n_post = n_pre * len(ms)
    return FiltrationTree(dt, pre_parent, pre_p, pre_dw, post_parent, post_q, post_mark)


def _random_increments(rng: np.random.Generator, b: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    if b == 2:
        p_up = rng.uniform(0.25, 0.75)
        p = np.array([p_up, 1.0 - p_up])
        dw = np.array([math.sqrt(dt * (1.0 - p_up) / p_up), -math.sqrt(dt * p_up / (1.0 - p_up))])
        return dw, p
    p = rng.uniform(0.5, 1.5, size=b)
    p /= p.sum()
    x = rng.standard_normal(b)
    x -= np.dot(p, x)
    x *= math.sqrt(dt / np.dot(p, x * x))
    order = np.argsort(-x)
    return x[order], p[order]


def build_random_tree(
    seed: int,
    n_stages: int,
    max_w_branches: int,
    max_marks: int,
    dt: float,
    *,
    max_nodes: int = DEFAULT_MAX_NODES,
) -> FiltrationTree:
    """Seeded random tree; identical inputs give bit-identical trees.

    Each post-node draws between 2 and ``max_w_branches`` increments (two is
    the minimum compatible with the moment conditions); each pre-node draws
    between 1 and ``max_marks`` marks.
    """
    if n_stages < 1:
        raise ValueError("n_stages must be >= 1")
    if max_marks < 1:
        raise ValueError("max_marks must be >= 1")
    if max_w_branches < 2:
        raise MomentViolation("at least two dW branches are needed to match E[dW]=0, E[dW^2]=dt")
    if not dt > 0:
        raise ValueError("dt must be positive")
    rng = np.random.default_rng(seed)
    pre_parent, pre_p, pre_dw, post_parent, post_q, post_mark = [], [], [], [], [], []
    n_post, total = 1, 1
    for _ in range(n_stages):
        par, ps, ws = [], [], []
        for a in range(n_post):
            b = int(rng.integers(2, max_w_branches + 1))
            w, p = _random_increments(rng, b, dt)
            par.extend([a] * b)
            ps.extend(p)
            ws.extend(w)
        n_pre = len(par)
        total += n_pre
        if total > max_nodes:
            raise SizeLimit(f"random tree exceeds {max_nodes} nodes")
        qpar, qs, ms = [], [], []
        for i in range(n_pre):
            m = int(rng.integers(1, max_marks + 1))
            q = rng.uniform(0.25, 1.0, size=m)
            q /= q.sum()
            qpar.extend([i] * m)
            qs.extend(q)
            ms.extend(f"m{j}" for j in range(m))
        n_post = len(qpar)
        total += n_post
        if total > max_nodes:
            raise SizeLimit(f"random tree exceeds {max_nodes} nodes")
        pre_parent.append(par)
        pre_p.append(ps)
        pre_dw.append(ws)
        post_parent.append(qpar)
        post_q.append(qs)
        post_mark.append(ms)
    return FiltrationTree(dt, pre_parent, pre_p, pre_dw, post_parent, post_q, post_mark)


# Module-level kernel aliases matching the operation names.
def expect_given_post(tree: FiltrationTree, k: int, values) -> np.ndarray:
    return tree.expect_given_post(k, values)


def expect_given_pre(tree: FiltrationTree, k: int, values) -> np.ndarray:
    return tree.expect_given_pre(k, values)
