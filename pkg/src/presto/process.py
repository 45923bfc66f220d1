"""Processes on the doubled instant grid and previsible stopping times.

Instants are encoded as integers: value instant ``k`` is ``2k`` and the left
instant ``k-`` (just before ``t_k``) is ``2k - 1``.  Integer order is time
order: ``0 < 1- < 1 < 2- < 2 < ...``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ShapeMismatch
from .filtration import FiltrationTree, ValidationReport

NEVER = -1
LEFT, VALUE, CONTINUE = "left", "value", "continue"


def instant_code(stage: int, left: bool = False) -> int:
    return 2 * stage - 1 if left else 2 * stage


def instant_stage(code):
    return (np.asarray(code) + 1) // 2


def instant_label(code: int) -> str:
    if code == NEVER:
        return "never"
    return f"{(code + 1) // 2}-" if code % 2 else str(code // 2)


def _stage_arrays(arrays, sizes, what) -> list[np.ndarray]:
    if len(arrays) != len(sizes):
        raise ShapeMismatch(f"{what}: expected {len(sizes)} stages, got {len(arrays)}")
    out = []
    for k, (a, n) in enumerate(zip(arrays, sizes)):
        arr = np.array(a, dtype=float).reshape(-1) if np.ndim(a) else np.full(n, float(a))
        if arr.shape != (n,):
            raise ShapeMismatch(f"{what}[{k}]: expected {n} values, got {arr.shape[0]}")
        out.append(arr)
    return out


@dataclass
class LadlagPredictableProcess:
    """Left values ``X_{k-}`` and values ``X_k`` on ``pre_nodes[k]`` for ``k = 0..N``.

    Stage 0 follows the convention ``X_{0-} = X_0``.
    """

    left: list[np.ndarray]
    value: list[np.ndarray]

    @classmethod
    def from_arrays(cls, tree: FiltrationTree, left, value) -> "LadlagPredictableProcess":
        sizes = [tree.n_pre(k) for k in range(tree.n_stages + 1)]
        value = _stage_arrays(value, sizes, "value")
        left = _stage_arrays(left, sizes, "left")
        left[0] = value[0].copy()
        proc = cls(left, value)
        proc.check(tree)
        return proc

    @classmethod
    def constant(cls, tree: FiltrationTree, c: float) -> "LadlagPredictableProcess":
        vals = [np.full(tree.n_pre(k), float(c)) for k in range(tree.n_stages + 1)]
        return cls([v.copy() for v in vals], vals)

    @classmethod
    def continuous(cls, tree: FiltrationTree, value) -> "LadlagPredictableProcess":
        """Left values equal values."""
        return cls.from_arrays(tree, value, value)

    @property
    def n_stages(self) -> int:
        return len(self.value) - 1

    def check(self, tree: FiltrationTree) -> None:
        if len(self.value) != tree.n_stages + 1 or len(self.left) != tree.n_stages + 1:
            raise ShapeMismatch("process has the wrong number of stages for this tree")
        for k in range(tree.n_stages + 1):
            for name, arr in (("left", self.left[k]), ("value", self.value[k])):
                if arr.shape != (tree.n_pre(k),):
                    raise ShapeMismatch(f"{name}[{k}] has shape {arr.shape}, expected ({tree.n_pre(k)},)")
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"{name}[{k}] contains non-finite values")

    def leaf_table(self, tree: FiltrationTree) -> np.ndarray:
        """``table[c, leaf]``: value at instant code ``c`` along each leaf path."""
        rows = []
        for k in range(tree.n_stages + 1):
            anc = tree.leaf_ancestor(k)
            if k > 0:
                rows.append(self.left[k][anc])
            rows.append(self.value[k][anc])
        return np.vstack(rows)

    def at(self, tree: FiltrationTree, tau) -> np.ndarray:
        """Evaluate at a stopping time (or a batch of leaf-code rows)."""
        codes = tau.codes if isinstance(tau, ExtendedStoppingTime) else np.asarray(tau)
        table = self.leaf_table(tree)
        return table[codes, np.arange(tree.n_leaves)]

    def map(self, fn) -> "LadlagPredictableProcess":
        return LadlagPredictableProcess([fn(a) for a in self.left], [fn(a) for a in self.value])

    def scaled_by_stage(self, factors: Sequence[np.ndarray]) -> "LadlagPredictableProcess":
        return LadlagPredictableProcess(
            [a * f for a, f in zip(self.left, factors)], [a * f for a, f in zip(self.value, factors)]
        )

    def to_dict(self) -> dict:
        return {"stages": [{"left": l.tolist(), "value": v.tolist()} for l, v in zip(self.left, self.value)]}

    @classmethod
    def from_dict(cls, tree: FiltrationTree, data: Mapping) -> "LadlagPredictableProcess":
        stages = data["stages"]
        return cls.from_arrays(tree, [s["left"] for s in stages], [s["value"] for s in stages])


@dataclass
class AdaptedProcess:
    """One array on ``post_nodes[k]`` per stage ``k = 0..N``."""

    values: list[np.ndarray]

    def check(self, tree: FiltrationTree) -> None:
        if len(self.values) != tree.n_stages + 1:
            raise ShapeMismatch("adapted process has the wrong number of stages")
        for k, arr in enumerate(self.values):
            if arr.shape != (tree.n_post(k),):
                raise ShapeMismatch(f"values[{k}] has shape {arr.shape}, expected ({tree.n_post(k)},)")

    def __getitem__(self, k: int) -> np.ndarray:
        return self.values[k]


@dataclass(eq=False)
class ExtendedStoppingTime:
    """A stopping rule over doubled instants, stored as one instant code per leaf.

    ``codes[leaf]`` is the instant at which the path ending in that ``G_N`` atom
    stops, or ``NEVER``.  ``start`` is the stage ``S`` the rule is defined from.
    """

    start: int
    codes: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)

    @classmethod
    def constant(cls, tree: FiltrationTree, start: int, code: int) -> "ExtendedStoppingTime":
        return cls(start, np.full(tree.n_leaves, code, dtype=np.int64))

    @classmethod
    def at_stage(cls, tree: FiltrationTree, stage: int, left: bool = False, start: int | None = None):
        code = instant_code(stage, left)
        return cls.constant(tree, stage if start is None else start, code)

    @classmethod
    def from_decisions(cls, tree: FiltrationTree, start: int, decisions: Mapping) -> "ExtendedStoppingTime":
        """Build from a per-atom map ``{(stage, pre_index): 'left'|'value'|'continue'}``.

        Atoms missing from the map count as ``continue``; a path that is never
        stopped gets ``NEVER``.
        """
        dec = {_parse_key(k): v for k, v in decisions.items()}
        codes = np.full(tree.n_leaves, NEVER, dtype=np.int64)
        open_ = np.ones(tree.n_leaves, dtype=bool)
        for k in range(start, tree.n_stages + 1):
            anc = tree.leaf_ancestor(k)
            for i in np.unique(anc[open_]):
                d = dec.get((k, int(i)), CONTINUE)
                if d == CONTINUE:
                    continue
                if d not in (LEFT, VALUE):
                    raise ValueError(f"unknown decision {d!r}")
                sel = open_ & (anc == i)
                codes[sel] = instant_code(k, d == LEFT)
                open_ &= ~sel
        return cls(start, codes)

    def decisions(self, tree: FiltrationTree) -> dict[tuple[int, int], str]:
        """Per-atom decision map for every atom reached without prior stop."""
        out: dict[tuple[int, int], str] = {}
        for k in range(self.start, tree.n_stages + 1):
            anc = tree.leaf_ancestor(k)
            for i in np.unique(anc[self.codes >= 2 * k - 1]) if k > 0 else [0]:
                c = self.codes[tree.leaf_block(k)[0][i]]
                out[(k, int(i))] = LEFT if c == 2 * k - 1 else VALUE if c == 2 * k else CONTINUE
        return out

    def to_dict(self, tree: FiltrationTree) -> dict:
        return {
            "start": self.start,
            "decisions": {f"{k}:{i}": d for (k, i), d in sorted(self.decisions(tree).items())},
            "instants": [instant_label(int(c)) for c in self.codes],
        }

    @classmethod
    def from_dict(cls, tree: FiltrationTree, data: Mapping) -> "ExtendedStoppingTime":
        return cls.from_decisions(tree, int(data["start"]), data["decisions"])

    def stages(self) -> np.ndarray:
        return instant_stage(self.codes)

    def maximum(self, other: "ExtendedStoppingTime") -> "ExtendedStoppingTime":
        return ExtendedStoppingTime(max(self.start, other.start), np.maximum(self.codes, other.codes))

    def minimum(self, other: "ExtendedStoppingTime") -> "ExtendedStoppingTime":
        return ExtendedStoppingTime(min(self.start, other.start), np.minimum(self.codes, other.codes))

    def __le__(self, other: "ExtendedStoppingTime") -> bool:
        return bool(np.all(self.codes <= other.codes))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ExtendedStoppingTime):
            return NotImplemented
        return self.start == other.start and np.array_equal(self.codes, other.codes)

    def labels(self) -> list[str]:
        return [instant_label(int(c)) for c in self.codes]


def _parse_key(key) -> tuple[int, int]:
    if isinstance(key, str):
        a, b = key.split(":")
        return int(a), int(b)
    return int(key[0]), int(key[1])


def previsibility_violations(tree: FiltrationTree, codes: np.ndarray) -> np.ndarray:
    """Leaves whose stopping instant is not constant on their stopping atom."""
    codes = np.asarray(codes)
    bad = np.zeros(codes.shape, dtype=bool)
    stages = instant_stage(codes)
    for k in range(tree.n_stages + 1):
        lo, _ = tree.leaf_block(k)
        anc = tree.leaf_ancestor(k)
        uneven = np.minimum.reduceat(codes, lo, axis=-1) != np.maximum.reduceat(codes, lo, axis=-1)
        here = (stages == k) & (codes >= 0)
        bad |= here & uneven[..., anc]
    return bad


def validate_stopping_time(tree: FiltrationTree, tau: ExtendedStoppingTime, from_stage: int) -> ValidationReport:
    """Check previsibility, single stopping, horizon and ``tau >= S``. Never raises."""
    report = ValidationReport()
    codes = tau.codes
    if codes.shape != (tree.n_leaves,):
        report.add("SHAPE", "codes", abs(codes.size - tree.n_leaves), "one code per G_N atom required")
        return report
    for leaf in np.flatnonzero(codes == NEVER):
        report.add("NEVER_STOPS", f"leaf[{leaf}]", 1.0, "path is never stopped")
    for leaf in np.flatnonzero(codes > 2 * tree.n_stages):
        report.add("AFTER_HORIZON", f"leaf[{leaf}]", codes[leaf] - 2 * tree.n_stages)
    low = (codes != NEVER) & (codes < 2 * from_stage)
    for leaf in np.flatnonzero(low):
        report.add("BEFORE_START", f"leaf[{leaf}]", 2 * from_stage - codes[leaf],
                   f"stops at {instant_label(int(codes[leaf]))} < S={from_stage}")
    for leaf in np.flatnonzero((codes < -1)):
        report.add("BAD_CODE", f"leaf[{leaf}]", float(codes[leaf]))
    ok_range = (codes >= 0) & (codes <= 2 * tree.n_stages)
    bad = previsibility_violations(tree, np.where(ok_range, codes, 0)) & ok_range
    for leaf in np.flatnonzero(bad):
        report.add("NOT_PREVISIBLE", f"leaf[{leaf}]", 1.0, "decision differs inside its G_k atom")
    return report


# ---------------------------------------------------------------- regularity
@dataclass
class RegularityReport:
    lusc: bool
    p_right_dominated: bool
    constant_left: bool
    lusc_violations: list[tuple[int, int]] = field(default_factory=list)
    p_right_violations: list[tuple[int, int]] = field(default_factory=list)
    constant_left_violations: list[tuple[int, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "lusc": self.lusc,
            "p_right_dominated": self.p_right_dominated,
            "constant_left": self.constant_left,
            "lusc_violations": [list(v) for v in self.lusc_violations],
            "p_right_violations": [list(v) for v in self.p_right_violations],
            "constant_left_violations": [list(v) for v in self.constant_left_violations],
        }


def predictable_right_limit(tree: FiltrationTree, xi: LadlagPredictableProcess, k: int) -> np.ndarray:
    """``E[xi_{(k+1)-} | G_k]`` on ``pre_nodes[k]``."""
    return tree.expect_given_pre(k, tree.expect_given_post(k, xi.left[k + 1]))


def regularity_report(tree: FiltrationTree, obstacle: LadlagPredictableProcess) -> RegularityReport:
    obstacle.check(tree)
    lusc, pright, const = [], [], []
    for k in range(tree.n_stages + 1):
        lusc += [(k, int(i)) for i in np.flatnonzero(obstacle.left[k] > obstacle.value[k])]
        const += [(k, int(i)) for i in np.flatnonzero(obstacle.left[k] != obstacle.value[k])]
        if k < tree.n_stages:
            pr = predictable_right_limit(tree, obstacle, k)
            pright += [(k, int(i)) for i in np.flatnonzero(pr > obstacle.value[k])]
    return RegularityReport(not lusc, not pright, not const, lusc, pright, const)


# ------------------------------------------------------------------- norms
def _path_matrix(tree: FiltrationTree, process) -> tuple[np.ndarray, np.ndarray]:
    """Per-omega values (stages x atoms) and the matching instant times.

    Predictable processes contribute both instants ``k-`` and ``k``; adapted
    ones contribute their post-node value at ``t_k``.
    """
    rows, times = [], []
    if isinstance(process, LadlagPredictableProcess):
        for k in range(tree.n_stages + 1):
            anc = tree.omega_pre_ancestor(k)
            if k > 0:
                rows.append(process.left[k][anc])
                times.append(tree.times[k])
            rows.append(process.value[k][anc])
            times.append(tree.times[k])
    else:
        for k in range(tree.n_stages + 1):
            rows.append(np.asarray(process[k])[tree.omega_post_ancestor(k)])
            times.append(tree.times[k])
    return np.vstack(rows), np.asarray(times)


def _integrand_matrix(tree: FiltrationTree, process) -> np.ndarray:
    rows = []
    for k in range(tree.n_stages):
        if isinstance(process, LadlagPredictableProcess):
            rows.append(process.value[k][tree.omega_pre_ancestor(k)])
        else:
            rows.append(np.asarray(process[k])[tree.omega_post_ancestor(k)])
    return np.vstack(rows)


def beta_norm(tree: FiltrationTree, process, beta: float, kind: str = "sup_square") -> float:
    """Discrete beta-weighted norms (squared).

    ``sup_square``: ``E[max_t e^{beta t} X_t^2]`` over all instants;
    ``time_integral``: ``E[sum_k e^{beta t_k} X_k^2 dt_{k+1}]``.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    prob = tree.omega_prob
    if kind == "sup_square":
        mat, times = _path_matrix(tree, process)
        weighted = np.exp(beta * times)[:, None] * mat**2
        return float(np.dot(prob, weighted.max(axis=0)))
    if kind == "time_integral":
        mat = _integrand_matrix(tree, process)
        w = np.exp(beta * tree.times[:-1]) * tree.dt
        return float(np.dot(prob, (w[:, None] * mat**2).sum(axis=0)))
    raise ValueError(f"unknown norm kind {kind!r}")
