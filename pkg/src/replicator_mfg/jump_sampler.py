"""Monte Carlo check of the stationary pair through the agent's jump process.

Under the optimal intensity an agent of type ``j`` sitting at cell ``i`` jumps
to cell ``k`` at rate ``(phi_kj - phi_ij)_+ m_kj``.  Weighting the time spent in
each cell by ``delta * exp(-delta s)`` gives the discounted occupation measure,
which for the stationary ``(m, phi)`` and a start drawn from ``mu0`` is ``m``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .grid import GridSpec, as_array

MAX_RATE = 1e12
TRUNCATION_BUDGET = 1e-6


class RateOverflowError(OverflowError):
    """A total jump rate exceeded ``MAX_RATE``; the value field spread is degenerate."""


@dataclass(frozen=True)
class SamplerConfig:
    delta: float
    n_paths: int = 100_000
    rng_seed: int = 0
    t_horizon: float | None = None  # None: smallest horizon meeting the budget

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if int(self.n_paths) != self.n_paths or self.n_paths < 2:
            raise ValueError(f"n_paths must be an integer >= 2, got {self.n_paths}")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be a 64-bit unsigned integer")
        if self.t_horizon is None:
            object.__setattr__(self, "t_horizon", math.log(1.0 / TRUNCATION_BUDGET) / self.delta)
        if self.truncation_error > TRUNCATION_BUDGET * (1 + 1e-9):
            raise ValueError(
                f"exp(-delta*t_horizon) = {self.truncation_error:.3e} exceeds {TRUNCATION_BUDGET:g}; "
                f"use t_horizon >= {math.log(1 / TRUNCATION_BUDGET) / self.delta:.6g}"
            )

    @property
    def truncation_error(self) -> float:
        return math.exp(-self.delta * self.t_horizon)


@dataclass
class OccupationEstimate:
    """Discounted occupation per sampled type row, shape ``(n_x, len(rows))``."""

    values: np.ndarray
    std_error: np.ndarray
    rows: list[int]
    n_paths: int
    rng_seed: int
    truncation_error: float
    jumps: int = field(default=0)

    def row(self, j: int) -> np.ndarray:
        return self.values[:, self.rows.index(j)]

    def tv_to(self, m) -> list[float]:
        """Per-row TV distance ``sum_i |estimate - m_ij|`` to a reference measure."""
        ref = as_array(m)
        return [float(np.abs(self.values[:, c] - ref[:, j]).sum()) for c, j in enumerate(self.rows)]


def _row_kernel(phi_col: np.ndarray, m_col: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Total rates per cell and the matrix of target weights ``w[i, k]``."""
    w = np.maximum(phi_col[None, :] - phi_col[:, None], 0.0) * m_col[None, :]
    return w.sum(axis=1), w


def jump_kernel(phi, m, grid: GridSpec, i: int, j: int) -> tuple[float, np.ndarray]:
    """Total jump rate out of cell ``(i, j)`` and the normalised target distribution.

    At a per-row maximiser of ``phi`` the rate is 0 and the returned distribution
    is all zeros.
    """
    phi_a, m_a = as_array(phi), as_array(m)
    grid.check_shape(phi_a, "phi")
    grid.check_shape(m_a, "m")
    w = np.maximum(phi_a[:, j] - phi_a[i, j], 0.0) * m_a[:, j]
    rate = float(w.sum())
    return rate, (w / rate if rate > 0 else w)


def _allocate(p0: np.ndarray, n: int) -> np.ndarray:
    """Paths per start cell: largest-remainder rounding of ``p0 * n``, at least
    one path for every cell of positive mass."""
    share = p0 / p0.sum() * n
    counts = np.floor(share).astype(np.int64)
    short = n - counts.sum()
    if short > 0:
        counts[np.argsort(-(share - counts), kind="stable")[:short]] += 1
    counts[(p0 > 0) & (counts == 0)] = 1
    return counts


def sample_occupation(phi, m, grid: GridSpec, j: int, start, cfg: SamplerConfig) -> OccupationEstimate:
    """Simulate jump chains of type ``j`` and average their discounted occupation.

    ``start`` is a cell index or a start distribution over the ``n_x`` cells
    (typically ``mu0[:, j]``).  A distribution is sampled by stratification:
    each start cell gets a fixed share of ``cfg.n_paths`` and its paths carry
    weight ``p0_i / n_i``.  Holding-time weights are integrated exactly: a stay
    on ``[t0, t1)`` contributes ``exp(-delta t0) - exp(-delta t1)``.
    """
    phi_a, m_a = as_array(phi), as_array(m)
    grid.check_shape(phi_a, "phi")
    grid.check_shape(m_a, "m")
    if not 0 <= j < grid.n_y:
        raise IndexError(f"type index {j} outside 0..{grid.n_y - 1}")
    rates, w = _row_kernel(phi_a[:, j], m_a[:, j])
    if rates.max() > MAX_RATE:
        i = int(np.argmax(rates))
        raise RateOverflowError(f"jump rate {rates[i]:.3e} at cell (i={i}, j={j}) exceeds {MAX_RATE:g}")
    cum = np.cumsum(w, axis=1)

    nx = grid.n_x
    if np.ndim(start) == 0:
        if not 0 <= int(start) < nx:
            raise IndexError(f"start cell {start} outside 0..{nx - 1}")
        p0 = np.zeros(nx)
        p0[int(start)] = 1.0
    else:
        p0 = np.asarray(start, dtype=float)
        if p0.shape != (nx,) or p0.min() < 0 or not p0.sum() > 0:
            raise ValueError("start distribution must be non-negative with n_x entries")
        p0 = p0 / p0.sum()
    counts = _allocate(p0, cfg.n_paths)
    origin = np.repeat(np.arange(nx), counts)
    state = origin.copy()
    n = origin.size

    delta, horizon = cfg.delta, cfg.t_horizon
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.rng_seed, j])))
    t = np.zeros(n)
    total = np.zeros(nx * nx)  # indexed origin * nx + cell
    total_sq = np.zeros(nx * nx)
    alive = np.arange(n)
    jumps = 0
    # Jumps only go to strictly larger phi, so each path visits a cell at most
    # once and its per-cell weight is a single increment.
    while alive.size:
        s = state[alive]
        r = rates[s]
        hold = np.full(alive.size, np.inf)
        moving = r > 0
        hold[moving] = rng.exponential(1.0, moving.sum()) / r[moving]
        t0 = t[alive]
        t1 = np.minimum(t0 + hold, horizon)
        inc = np.exp(-delta * t0) - np.exp(-delta * t1)
        key = origin[alive] * nx + s
        total += np.bincount(key, inc, nx * nx)
        total_sq += np.bincount(key, inc * inc, nx * nx)
        jumping = t0 + hold < horizon
        alive, s, t1 = alive[jumping], s[jumping], t1[jumping]
        t[alive] = t1
        u = rng.random(alive.size) * rates[s]
        new = np.empty_like(s)
        for cell in np.unique(s):
            sel = s == cell
            new[sel] = np.searchsorted(cum[cell], u[sel], side="right")
        state[alive] = np.minimum(new, nx - 1)
        jumps += alive.size

    used = counts > 0
    c = counts[used, None].astype(float)
    mean_s = total.reshape(nx, nx)[used] / c
    var_s = np.maximum(total_sq.reshape(nx, nx)[used] / c - mean_s**2, 0.0)
    var_s *= np.where(c > 1, c / np.maximum(c - 1, 1), 0.0)
    weight = p0[used, None]
    mean = (weight * mean_s).sum(axis=0)
    var = (weight**2 * var_s / c).sum(axis=0)
    return OccupationEstimate(
        values=mean[:, None], std_error=np.sqrt(var)[:, None], rows=[j],
        n_paths=n, rng_seed=cfg.rng_seed, truncation_error=cfg.truncation_error, jumps=jumps,
    )


def sample_rows(phi, m, grid: GridSpec, mu0, cfg: SamplerConfig, rows=None) -> OccupationEstimate:
    """Run :func:`sample_occupation` for each listed type row, starting from ``mu0``."""
    mu = as_array(mu0)
    rows = list(range(grid.n_y)) if rows is None else [int(j) for j in rows]
    parts = [sample_occupation(phi, m, grid, j, mu[:, j], cfg) for j in rows]
    return OccupationEstimate(
        values=np.hstack([p.values for p in parts]),
        std_error=np.hstack([p.std_error for p in parts]),
        rows=rows, n_paths=cfg.n_paths, rng_seed=cfg.rng_seed,
        truncation_error=cfg.truncation_error, jumps=sum(p.jumps for p in parts),
    )


def write_estimate(est: OccupationEstimate, out_dir, grid: GridSpec, reference=None) -> Path:
    """Write ``occupation.csv`` / ``occupation_stderr.csv`` and ``occupation.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in (("occupation.csv", est.values), ("occupation_stderr.csv", est.std_error)):
        with (out / name).open("w", newline="") as fh:
            fh.write(",".join(io.CSV_HEADER) + "\n")
            for i in range(grid.n_x):
                for c, j in enumerate(est.rows):
                    fh.write(f"{i},{j},{io.fmt(grid.x_hat[i])},{io.fmt(grid.y_hat[j])},{io.fmt(arr[i, c])}\n")
    summary = {
        "n_paths": est.n_paths,
        "seed": est.rng_seed,
        "rows": est.rows,
        "truncation_error": est.truncation_error,
        "max_std_error": float(est.std_error.max()),
    }
    if reference is not None:
        tv = est.tv_to(reference)
        summary["tv_per_row"] = tv
        summary["max_tv"] = max(tv)
    return io.write_json(out / "occupation.json", summary)
