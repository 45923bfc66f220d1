"""Lipschitz drivers ``g(t, y, z)`` and the registry used by configs and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, UnknownDriver


@dataclass(frozen=True)
class Driver:
    """A named generator with Lipschitz constant ``lipschitz`` in ``(y, z)``.

    ``fn`` must accept numpy arrays for ``y`` and ``z`` (any matching shape)
    and a scalar time ``t``.
    """

    name: str
    params: Mapping[str, float]
    lipschitz: float
    fn: Callable = field(repr=False, compare=False)

    def __call__(self, t, y, z):
        return self.fn(t, y, z)

    def at_stage(self, tree, k: int, y, z) -> np.ndarray:
        return np.asarray(self.fn(float(tree.times[k]), y, z), dtype=float) + np.zeros_like(y, dtype=float)

    @property
    def depends_on_state(self) -> bool:
        return self.lipschitz > 0

    def to_dict(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}


@dataclass(frozen=True)
class FrozenDriver:
    """Driver given node-wise as an adapted process, independent of ``(y, z)``."""

    values: Sequence[np.ndarray]
    name: str = "frozen"
    lipschitz: float = 0.0

    def at_stage(self, tree, k: int, y, z) -> np.ndarray:
        return np.broadcast_to(self.values[k], np.shape(y)).astype(float)


@dataclass(frozen=True)
class LocalizedDriver:
    """``mask * g``: the base driver switched on node-wise by a 0/1 (or scalar) mask on post-nodes."""

    base: object
    mask: Sequence[np.ndarray]

    @property
    def name(self) -> str:
        return f"localized({self.base.name})"

    @property
    def lipschitz(self) -> float:
        return self.base.lipschitz

    def at_stage(self, tree, k: int, y, z) -> np.ndarray:
        return self.mask[k] * self.base.at_stage(tree, k, y, z)


@dataclass(frozen=True)
class NegatedDriver:
    """``(t, y, z) -> -g(t, -y, -z)``: the driver of ``-Y`` when ``Y`` solves the problem for ``g``."""

    base: object

    @property
    def name(self) -> str:
        return f"negated({self.base.name})"

    @property
    def lipschitz(self) -> float:
        return self.base.lipschitz

    def at_stage(self, tree, k: int, y, z) -> np.ndarray:
        return -self.base.at_stage(tree, k, -np.asarray(y), -np.asarray(z))


def zero() -> Driver:
    return Driver("zero", {}, 0.0, lambda t, y, z: np.zeros_like(np.asarray(y, dtype=float)))


def affine(a: float = 0.0, b: float = 0.0, c: float = 0.0, a_slope: float = 0.0) -> Driver:
    """``g = a + a_slope * t + b y + c z``."""
    a, b, c, a_slope = float(a), float(b), float(c), float(a_slope)
    return Driver(
        "affine",
        {"a": a, "b": b, "c": c, "a_slope": a_slope},
        abs(b) + abs(c),
        lambda t, y, z: (a + a_slope * t) + b * np.asarray(y) + c * np.asarray(z),
    )


def discount(rho: float) -> Driver:
    rho = float(rho)
    return Driver("discount", {"rho": rho}, abs(rho), lambda t, y, z: -rho * np.asarray(y))


def ambiguity(rho: float, kappa: float) -> Driver:
    """``g = -rho y + kappa |z|``: discounting plus a drift-ambiguity penalty."""
    rho, kappa = float(rho), float(kappa)
    return Driver(
        "ambiguity",
        {"rho": rho, "kappa": kappa},
        abs(rho) + abs(kappa),
        lambda t, y, z: -rho * np.asarray(y) + kappa * np.abs(np.asarray(z)),
    )


REGISTRY: dict[str, Callable[..., Driver]] = {
    "zero": zero,
    "affine": affine,
    "discount": discount,
    "ambiguity": ambiguity,
}


def make_driver(name: str, **params) -> Driver:
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise UnknownDriver(f"unknown driver {name!r}; known drivers: {sorted(REGISTRY)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for driver {name!r}: {exc}") from None


def driver_from_spec(spec: Mapping) -> Driver:
    """``{"name": ..., "params": {...}}`` -> Driver."""
    if "name" not in spec:
        raise ConfigError("driver spec needs a 'name'")
    extra = set(spec) - {"name", "params"}
    if extra:
        raise ConfigError(f"unknown driver spec keys: {sorted(extra)}")
    return make_driver(spec["name"], **dict(spec.get("params", {})))


def check_lipschitz(driver: Driver, seed: int = 0, n_probes: int = 2000, t_max: float = 1.0) -> float:
    """Largest observed ratio ``|dg| / (K (|dy| + |dz|))`` on a seeded probe grid.

    Values ``<= 1 + 1e-9`` confirm the declared constant.  Also checks that
    ``g(t, 0, 0)`` is finite.
    """
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, t_max, n_probes)
    y1, z1, y2, z2 = (rng.normal(scale=3.0, size=n_probes) for _ in range(4))
    g1 = np.array([driver(ti, a, b) for ti, a, b in zip(t, y1, z1)], dtype=float)
    g2 = np.array([driver(ti, a, b) for ti, a, b in zip(t, y2, z2)], dtype=float)
    if not np.all(np.isfinite([driver(ti, 0.0, 0.0) for ti in t[:10]])):
        return float("inf")
    dist = np.abs(y1 - y2) + np.abs(z1 - z2)
    diff = np.abs(g1 - g2)
    if driver.lipschitz == 0:
        return 0.0 if np.all(diff == 0) else float("inf")
    return float(np.max(diff / (driver.lipschitz * dist)))
