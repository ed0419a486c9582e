"""Utility functions U(x, y, m) evaluated on the grid.

Every spec class exposes ``values(m, grid) -> ndarray`` for use in tight
solver loops; :func:`evaluate` is the checked public entry point that returns
a :class:`~replicator_mfg.grid.ValueField`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import DiscreteMeasure, GridError, GridSpec, ValueField, as_array, tv_row_norm


class UtilityError(ValueError):
    """Invalid utility parameters or a non-finite utility evaluation."""


# -- building blocks -------------------------------------------------------


@dataclass(frozen=True)
class Affine:
    """Type weight ``f(y) = intercept + slope * y``."""

    intercept: float = 1.0
    slope: float = 2.0

    def __call__(self, y):
        return self.intercept + self.slope * np.asarray(y, dtype=float)


@dataclass(frozen=True)
class InverseSquare:
    """Scarcity ``A(alpha) = max(alpha, floor)**-2``.

    ``floor="dx"`` uses the grid's own cell width; ``None`` disables the floor.
    """

    floor: float | str | None = "dx"

    def __call__(self, alpha: float, grid: GridSpec) -> float:
        if self.floor is None:
            lo = 0.0
        elif self.floor == "dx":
            lo = grid.dx
        else:
            lo = float(self.floor)
        a = max(alpha, lo)
        if a <= 0:
            raise UtilityError(f"inverse-square scarcity undefined at alpha={alpha}")
        return a ** -2


@dataclass(frozen=True)
class Identity:
    def __call__(self, alpha: float, grid: GridSpec) -> float:
        return alpha


ALPHA_WEIGHTINGS = ("type_average", "raw_sum")


def aggregate_action(m: np.ndarray, grid: GridSpec, weighting: str = "type_average") -> float:
    """Mean harvesting ``alpha`` entering the tragedy and typed q-voter utilities.

    ``type_average`` multiplies the double sum by ``dy``; ``raw_sum`` is the bare
    double sum, which differs from it by a factor ``n_y``.
    """
    total = float((grid.x_hat @ m).sum())
    if weighting == "type_average":
        return grid.dy * total
    if weighting == "raw_sum":
        return total
    raise UtilityError(f"unknown alpha weighting {weighting!r}")


# -- utility variants ------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    c0: float
    bound_hint: float | None = field(default=None, kw_only=True)

    measure_independent = True

    def values(self, m: np.ndarray, grid: GridSpec) -> np.ndarray:
        return np.full(grid.shape, float(self.c0))


@dataclass(frozen=True)
class Tabulated:
    """A fixed table of utilities, independent of the measure."""

    table: np.ndarray
    bound_hint: float | None = field(default=None, kw_only=True)

    measure_independent = True

    def __post_init__(self):
        t = np.array(self.table, dtype=float)
        if t.ndim == 1:
            t = t[:, None]
        if not np.all(np.isfinite(t)):
            raise UtilityError("tabulated utility contains non-finite entries")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @classmethod
    def from_csv(cls, path, **kwargs) -> "Tabulated":
        from .io import read_grid_csv

        table, _ = read_grid_csv(path)
        return cls(table, **kwargs)

    def values(self, m: np.ndarray, grid: GridSpec) -> np.ndarray:
        grid.check_shape(self.table, "utility table")
        return self.table.copy()


@dataclass(frozen=True)
class TragedyOfCommons:
    """``U_ij = (f(y_j) A(alpha) - c) x_i`` with ``alpha`` the mean action."""

    f: Callable = Affine()
    A: Callable = InverseSquare("dx")
    c: float = 4.0
    alpha_weighting: str = "type_average"
    bound_hint: float | None = field(default=None, kw_only=True)

    measure_independent = False

    def __post_init__(self):
        if self.c < 0:
            raise UtilityError(f"unit cost c must be >= 0, got {self.c}")
        if self.alpha_weighting not in ALPHA_WEIGHTINGS:
            raise UtilityError(f"alpha_weighting must be one of {ALPHA_WEIGHTINGS}")

    def slopes(self, m: np.ndarray, grid: GridSpec) -> np.ndarray:
        alpha = aggregate_action(m, grid, self.alpha_weighting)
        return self.f(grid.y_hat) * self.A(alpha, grid) - self.c

    def values(self, m: np.ndarray, grid: GridSpec) -> np.ndarray:
        return np.outer(grid.x_hat, self.slopes(m, grid))


@dataclass(frozen=True)
class PenalizedTragedy(TragedyOfCommons):
    """Tragedy of the commons minus ``P`` on actions at or above ``x_bar``."""

    P: float = 1.0
    x_bar: float = 0.75

    def __post_init__(self):
        super().__post_init__()
        if self.P < 0:
            raise UtilityError(f"penalty P must be >= 0, got {self.P}")
        if not 0.0 < self.x_bar < 1.0:
            raise UtilityError(f"x_bar must lie in (0, 1), got {self.x_bar}")

    def penalized_cells(self, grid: GridSpec) -> np.ndarray:
        return grid.x_hat >= self.x_bar

    def values(self, m: np.ndarray, grid: GridSpec) -> np.ndarray:
        u = super().values(m, grid)
        u[self.penalized_cells(grid), :] -= self.P
        return u


@dataclass(frozen=True)
class QVoterExchangeable:
    """Regularised power utility ``p**(q-1)``, capped at density ``1/eps`` (q > 1)
    or floored at ``eps`` (q < 1).  ``eps=None`` means ``1/n_x``."""

    q: float = 2.0
    eps: float | None = None
    bound_hint: float | None = field(default=None, kw_only=True)

    measure_independent = False

    def __post_init__(self):
        if self.q <= 0:
            raise UtilityError(f"q must be positive, got {self.q}")
        if self.q == 1:
            raise UtilityError("q = 1 gives an identically zero drift and is not supported")
        if self.eps is not None and self.eps <= 0:
            raise UtilityError(f"eps must be positive, got {self.eps}")

    def regularization(self, grid: GridSpec) -> float:
        return grid.dx if self.eps is None else float(self.eps)

    def values(self, m: np.ndarray, grid: GridSpec) -> np.ndarray:
        p = grid.n_x * m
        eps = self.regularization(grid)
        if self.q > 1:
            return np.minimum(p, 1.0 / eps) ** (self.q - 1.0)
        return np.maximum(p, eps) ** (self.q - 1.0)


@dataclass(frozen=True)
class QVoterTyped:
    """``U_ij = w(y_j) p_ij / (1 + coupling * g(alpha))``.

    ``w(y) = y`` when ``type_weighted`` and 1 otherwise; ``g`` is ``"identity"``
    or ``"inverse_square"`` (``max(alpha, dx)**-2``).
    """

    coupling: float = 10.0
    g: str = "identity"
    type_weighted: bool = True
    alpha_weighting: str = "type_average"
    bound_hint: float | None = field(default=None, kw_only=True)

    measure_independent = False

    def __post_init__(self):
        if self.g not in ("identity", "inverse_square"):
            raise UtilityError(f"g must be 'identity' or 'inverse_square', got {self.g!r}")
        if self.alpha_weighting not in ALPHA_WEIGHTINGS:
            raise UtilityError(f"alpha_weighting must be one of {ALPHA_WEIGHTINGS}")

    def denominator(self, m: np.ndarray, grid: GridSpec) -> float:
        alpha = aggregate_action(m, grid, self.alpha_weighting)
        g = Identity() if self.g == "identity" else InverseSquare("dx")
        return 1.0 + self.coupling * g(alpha, grid)

    def values(self, m: np.ndarray, grid: GridSpec) -> np.ndarray:
        p = grid.n_x * m
        if self.type_weighted:
            p = p * grid.y_hat[None, :]
        return p / self.denominator(m, grid)


UtilitySpec = Constant | Tabulated | TragedyOfCommons | PenalizedTragedy | QVoterExchangeable | QVoterTyped


# -- public operations -----------------------------------------------------


def checked_values(spec, m: np.ndarray, grid: GridSpec) -> np.ndarray:
    u = spec.values(m, grid)
    if not np.all(np.isfinite(u)):
        i, j = np.argwhere(~np.isfinite(u))[0]
        raise UtilityError(
            f"{type(spec).__name__} produced {u[i, j]} at cell (i={i}, j={j})"
        )
    return u


def evaluate(spec, m, grid: GridSpec) -> ValueField:
    arr = as_array(m)
    grid.check_shape(arr, "measure")
    return ValueField(checked_values(spec, arr, grid))


def random_measure(grid: GridSpec, rng: np.random.Generator) -> np.ndarray:
    """Independent flat-Dirichlet draw for every type row."""
    return rng.dirichlet(np.ones(grid.n_x), size=grid.n_y).T


def probe_conditions(spec, grid: GridSpec, trials: int = 100, rng_seed: int = 0):
    """Empirical range of U and a sampled Lipschitz ratio w.r.t. the TV norm.

    Returns ``(u_min, u_max, lipschitz_estimate)``.  These are lower bounds on
    the true bound and Lipschitz constant, useful to spot violations only.
    """
    if trials < 2:
        raise UtilityError("probe_conditions needs at least 2 trials")
    rng = np.random.default_rng(rng_seed)
    u_min, u_max, lip = np.inf, -np.inf, 0.0
    for _ in range(trials):
        m1, m2 = random_measure(grid, rng), random_measure(grid, rng)
        u1, u2 = checked_values(spec, m1, grid), checked_values(spec, m2, grid)
        u_min = min(u_min, u1.min(), u2.min())
        u_max = max(u_max, u1.max(), u2.max())
        dist = tv_row_norm(m1 - m2)
        if dist > 0:
            lip = max(lip, float(np.abs(u1 - u2).max()) / dist)
    return float(u_min), float(u_max), lip


# -- configuration ---------------------------------------------------------


def _type_weight(obj) -> Callable:
    if obj is None:
        return Affine()
    kind = obj.get("kind", "affine")
    if kind != "affine":
        raise UtilityError(f"unknown type-weight kind {kind!r}")
    return Affine(float(obj.get("intercept", 1.0)), float(obj.get("slope", 2.0)))


def _scarcity(obj) -> Callable:
    if obj is None:
        return InverseSquare("dx")
    kind = obj.get("kind", "inverse_square")
    if kind != "inverse_square":
        raise UtilityError(f"unknown scarcity kind {kind!r}")
    return InverseSquare(obj.get("floor", "dx"))


def from_config(obj: dict, base_dir=None) -> UtilitySpec:
    """Build a spec from ``{"variant": ..., "params": {...}}``."""
    variant = obj["variant"]
    params = dict(obj.get("params", {}))
    bound = params.pop("bound_hint", None)
    if variant == "constant":
        return Constant(float(params["c0"]), bound_hint=bound)
    if variant == "tabulated":
        from pathlib import Path

        path = Path(params["path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return Tabulated.from_csv(path, bound_hint=bound)
    if variant in ("tragedy_of_commons", "penalized_tragedy"):
        common = dict(
            f=_type_weight(params.get("f")),
            A=_scarcity(params.get("A")),
            c=float(params.get("c", 4.0)),
            alpha_weighting=params.get("alpha_weighting", "type_average"),
            bound_hint=bound,
        )
        if variant == "tragedy_of_commons":
            return TragedyOfCommons(**common)
        return PenalizedTragedy(**common, P=float(params.get("P", 1.0)),
                                x_bar=float(params.get("x_bar", 0.75)))
    if variant == "qvoter_exchangeable":
        eps = params.get("eps")
        return QVoterExchangeable(float(params.get("q", 2.0)),
                                  None if eps is None else float(eps), bound_hint=bound)
    if variant == "qvoter_typed":
        return QVoterTyped(
            coupling=float(params.get("coupling", 10.0)),
            g=params.get("g", "identity"),
            type_weighted=bool(params.get("type_weighted", True)),
            alpha_weighting=params.get("alpha_weighting", "type_average"),
            bound_hint=bound,
        )
    raise UtilityError(f"unknown utility variant {variant!r}")


__all__ = [
    "Affine", "Constant", "GridError", "InverseSquare", "PenalizedTragedy",
    "QVoterExchangeable", "QVoterTyped", "Tabulated", "TragedyOfCommons",
    "UtilityError", "aggregate_action", "evaluate", "from_config", "probe_conditions",
]
