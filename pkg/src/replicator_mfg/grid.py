"""Cell-centred grid on the action x type square and per-type probability measures.

Arrays are indexed ``[i, j]`` with ``i`` the action cell (``n_x`` of them) and
``j`` the type cell (``n_y`` of them).  A :class:`DiscreteMeasure` stores the
probability mass of every cell; each type column ``values[:, j]`` sums to one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROW_SUM_TOL = 1e-12


class GridError(ValueError):
    """Raised for inconsistent grid shapes or invalid measures."""


@dataclass(frozen=True)
class GridSpec:
    n_x: int
    n_y: int = 1
    x_hat: np.ndarray = field(init=False, repr=False, compare=False)
    y_hat: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("n_x", "n_y"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 1:
                raise GridError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        x_hat = (np.arange(self.n_x) + 0.5) / self.n_x
        y_hat = (np.arange(self.n_y) + 0.5) / self.n_y
        x_hat.setflags(write=False)
        y_hat.setflags(write=False)
        object.__setattr__(self, "x_hat", x_hat)
        object.__setattr__(self, "y_hat", y_hat)

    @property
    def dx(self) -> float:
        return 1.0 / self.n_x

    @property
    def dy(self) -> float:
        return 1.0 / self.n_y

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_x, self.n_y)

    def check_shape(self, a: np.ndarray, what: str = "array") -> None:
        if np.shape(a) != self.shape:
            raise GridError(f"{what} has shape {np.shape(a)}, grid expects {self.shape}")


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Per-type probability masses ``m[i, j]``; every column sums to one."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim == 1:
            values = _frozen(values[:, None])
        if values.ndim != 2:
            raise GridError(f"measure must be 2-D (n_x, n_y), got ndim={values.ndim}")
        if not np.all(np.isfinite(values)):
            raise GridError("measure contains non-finite entries")
        if np.any(values < 0):
            i, j = np.argwhere(values < 0)[0]
            raise GridError(f"negative mass {values[i, j]:.3e} at cell (i={i}, j={j})")
        dev = np.abs(values.sum(axis=0) - 1.0)
        if np.any(dev > ROW_SUM_TOL):
            j = int(np.argmax(dev))
            raise GridError(f"type row j={j} sums to {values[:, j].sum()!r}, not 1")
        object.__setattr__(self, "values", values)

    @classmethod
    def normalized(cls, weights) -> "DiscreteMeasure":
        """Build a measure by explicitly rescaling each type column of ``weights``."""
        w = np.array(weights, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        if np.any(w < 0) or np.any(w.sum(axis=0) <= 0):
            raise GridError("weights must be non-negative with a positive sum per type")
        return cls(w / w.sum(axis=0, keepdims=True))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True, eq=False)
class ValueField:
    """A finite real grid function, e.g. a utility or a value function."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim == 1:
            values = _frozen(values[:, None])
        if not np.all(np.isfinite(values)):
            i, j = np.argwhere(~np.isfinite(values))[0]
            raise GridError(f"non-finite value {values[i, j]} at cell (i={i}, j={j})")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def as_array(a) -> np.ndarray:
    """Plain 2-D float view of a measure, field or array-like."""
    arr = np.asarray(a.values if hasattr(a, "values") else a, dtype=float)
    return arr[:, None] if arr.ndim == 1 else arr


def make_uniform(grid: GridSpec) -> DiscreteMeasure:
    return DiscreteMeasure(np.full(grid.shape, 1.0 / grid.n_x))


def density(m, grid: GridSpec) -> ValueField:
    """Probability density ``p = n_x * m`` recovered from cell masses."""
    arr = as_array(m)
    grid.check_shape(arr, "measure")
    return ValueField(grid.n_x * arr)


def tv_row_norm(a, grid: GridSpec | None = None) -> float:
    """Discrete TV norm: the largest per-type absolute mass ``max_j sum_i |a_ij|``."""
    arr = as_array(a)
    if grid is not None:
        grid.check_shape(arr)
    return float(np.abs(arr).sum(axis=0).max())


def mean_action(m, grid: GridSpec) -> float:
    """Population mean action ``dy * sum_j sum_i x_i m_ij``.

    The ``dy`` factor averages over types, so the result is the mean of the
    per-type mean actions and reduces to the plain double sum when ``n_y == 1``.
    """
    arr = as_array(m)
    grid.check_shape(arr, "measure")
    return float(grid.dy * (grid.x_hat @ arr).sum())


def field_stats(a) -> tuple[float, float]:
    """Return ``(max |a|, mean |a|)`` over all grid points."""
    arr = np.abs(as_array(a))
    return float(arr.max()), float(arr.mean())
