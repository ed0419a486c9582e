"""Stationary mean field game and discounted replicator dynamic on the grid.

The unknowns are the discounted occupation masses ``m`` and the value function
``phi``.  They solve, cell by cell,

    F_ij = delta mu0_ij - (delta - (phi_ij - sum_k phi_kj m_kj)) m_ij = 0
    H_ij = -phi_ij + U_ij + 1/(2 delta) sum_k (phi_kj - phi_ij)_+^2 m_kj = 0

and are found by explicit pseudo-time relaxation.  In ``discounted_rd`` mode
the value function is replaced by the utility itself, ``phi = U(m)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import io
from .grid import DiscreteMeasure, GridSpec, ValueField, as_array, field_stats
from .utilities import checked_values

log = logging.getLogger(__name__)

MODES = ("mfg", "discounted_rd")
DIVERGENCE_FACTOR = 1e6


class SolverConfigError(ValueError):
    """Invalid solver configuration."""


class StabilityHypothesisError(ValueError):
    """``delta <= 2 * u_bar``: the iterate bounds have no valid constant K."""


class NonFiniteIterateError(FloatingPointError):
    """An iterate produced NaN or Inf."""


@dataclass(frozen=True)
class SolverConfig:
    delta: float
    dt_pseudo: float = 0.2
    eps_tol: float = 1e-10
    max_iters: int = 100_000
    u_bar: float | None = None
    phi_init: str | float = "zeros"
    mode: str = "mfg"

    def __post_init__(self):
        if not self.delta > 0:
            raise SolverConfigError(f"delta must be positive, got {self.delta}")
        if not self.dt_pseudo > 0:
            raise SolverConfigError(f"dt_pseudo must be positive, got {self.dt_pseudo}")
        if not self.eps_tol > 0:
            raise SolverConfigError(f"eps_tol must be positive, got {self.eps_tol}")
        if self.eps_tol > self.dt_pseudo / 100:
            raise SolverConfigError(
                f"eps_tol={self.eps_tol:g} must be much smaller than the pseudo time "
                f"step dt_pseudo={self.dt_pseudo:g} (require eps_tol <= dt_pseudo/100)"
            )
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise SolverConfigError(f"max_iters must be a positive integer, got {self.max_iters}")
        if self.u_bar is not None and not self.u_bar > 0:
            raise SolverConfigError(f"u_bar must be positive when given, got {self.u_bar}")
        if self.mode not in MODES:
            raise SolverConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if isinstance(self.phi_init, str) and self.phi_init not in ("zeros", "utility_of_mu0"):
            raise SolverConfigError(f"unknown phi_init {self.phi_init!r}")

    def replace(self, **changes) -> "SolverConfig":
        return SolverConfig(**{**asdict(self), **changes})


@dataclass
class SolveReport:
    m: DiscreteMeasure | np.ndarray
    phi: ValueField
    iterations: int
    final_error: float
    status: str
    config: SolverConfig
    error_history: list[float] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def m_values(self) -> np.ndarray:
        return as_array(self.m)


# -- discrete operators ----------------------------------------------------


def jump_gain_sum(phi: np.ndarray, m: np.ndarray) -> np.ndarray:
    """``S_ij = sum_k (phi_kj - phi_ij)_+^2 m_kj`` for every cell.

    Each type column is sorted once, after which the sum over the strictly
    larger values is a suffix sum of ``m``, ``m*phi`` and ``m*phi**2``.  Values
    tied with ``phi_ij`` contribute zero up to rounding; the result is clipped
    at zero.  Cost is O(n_x log n_x) per column instead of O(n_x**2).
    """
    order = np.argsort(phi, axis=0, kind="stable")
    s = np.take_along_axis(phi, order, axis=0)
    w = np.take_along_axis(m, order, axis=0)
    s = s - s[-1:, :]  # shift by the column max to limit cancellation
    ws = w * s
    s0 = np.cumsum(w[::-1], axis=0)[::-1]
    s1 = np.cumsum(ws[::-1], axis=0)[::-1]
    s2 = np.cumsum((ws * s)[::-1], axis=0)[::-1]
    sorted_sum = np.maximum(s2 - 2.0 * s * s1 + s * s * s0, 0.0)
    out = np.empty_like(sorted_sum)
    np.put_along_axis(out, order, sorted_sum, axis=0)
    return out


def residual_fp(m, phi, mu0, delta: float, grid: GridSpec | None = None) -> np.ndarray:
    m, phi, mu0 = as_array(m), as_array(phi), as_array(mu0)
    if grid is not None:
        for a, name in ((m, "m"), (phi, "phi"), (mu0, "mu0")):
            grid.check_shape(a, name)
    avg = (phi * m).sum(axis=0, keepdims=True)
    return delta * mu0 - (delta - (phi - avg)) * m


def residual_hjb(m, phi, u_field, delta: float, grid: GridSpec | None = None) -> np.ndarray:
    m, phi, u = as_array(m), as_array(phi), as_array(u_field)
    if grid is not None:
        for a, name in ((m, "m"), (phi, "phi"), (u, "U")):
            grid.check_shape(a, name)
    return -phi + u + jump_gain_sum(phi, m) / (2.0 * delta)


def stability_constants(delta: float, u_bar: float) -> tuple[float, float]:
    """Iterate bound ``K`` and the largest admissible pseudo time step.

    ``K = delta + sqrt(delta (delta - 2 u_bar))`` is the larger root of
    ``-u + u_bar + u**2 / (2 delta) = 0``; iterates stay in ``[0, K]`` and keep
    non-negative masses when ``dt < 1 / (delta + K)``.
    """
    if not delta > 2.0 * u_bar:
        raise StabilityHypothesisError(
            f"need delta > 2*u_bar for the iterate bounds, got delta={delta}, u_bar={u_bar}"
        )
    k = delta + math.sqrt(delta * (delta - 2.0 * u_bar))
    return k, 1.0 / (delta + k)


def verify_iterate_invariants(m, phi=None, *, delta: float | None = None,
                              u_bar: float | None = None) -> list[str]:
    """List every violated iterate property; empty when all hold.

    Accepts a :class:`SolveReport` (delta and u_bar are then taken from its
    config) or raw ``(m, phi)`` arrays.  The phi box ``[0, K]`` is only checked
    when ``u_bar`` is known and ``delta > 2 u_bar``.
    """
    if isinstance(m, SolveReport):
        report = m
        m, phi = report.m, report.phi
        delta = report.config.delta if delta is None else delta
        u_bar = report.config.u_bar if u_bar is None else u_bar
    m = as_array(m)
    problems = []
    if m.min() < -1e-12:
        i, j = np.unravel_index(np.argmin(m), m.shape)
        problems.append(f"negative mass {m[i, j]:.3e} at (i={i}, j={j})")
    dev = np.abs(m.sum(axis=0) - 1.0)
    if dev.max() > 1e-10:
        problems.append(f"type row j={int(np.argmax(dev))} sums to 1{dev.max():+.3e}")
    if phi is not None and u_bar is not None and delta is not None and delta > 2 * u_bar:
        k, _ = stability_constants(delta, u_bar)
        phi = as_array(phi)
        if phi.min() < -1e-10:
            problems.append(f"phi below 0: min {phi.min():.6g}")
        if phi.max() > k + 1e-10:
            problems.append(f"phi above K={k:.6g}: max {phi.max():.6g}")
    return problems


# -- Algorithm 1 -----------------------------------------------------------


def _initial_phi(cfg: SolverConfig, spec, mu0: np.ndarray, grid: GridSpec) -> np.ndarray:
    if cfg.mode == "discounted_rd":
        return checked_values(spec, mu0, grid)
    if cfg.phi_init == "zeros":
        return np.zeros(grid.shape)
    if cfg.phi_init == "utility_of_mu0":
        return checked_values(spec, mu0, grid)
    return np.full(grid.shape, float(cfg.phi_init))


def _raise_non_finite(n: int, **arrays):
    for name, a in arrays.items():
        bad = ~np.isfinite(a)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise NonFiniteIterateError(
                f"{name} became {a[i, j]} at cell (i={i}, j={j}) in iteration {n}"
            )


def solve(mu0, spec, grid: GridSpec, cfg: SolverConfig,
          callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None) -> SolveReport:
    """Run the pseudo-time iteration from ``m = mu0`` until the update is below
    ``cfg.eps_tol``.

    The stopping error is ``max(n_x |m_new - m|, |phi_new - phi|)`` over the grid.
    ``callback(n, m, phi)`` sees every iterate, starting with ``n = 0``; it
    must not modify the arrays.  Non-convergence does not raise: check
    ``report.status`` (``converged``, ``max_iters`` or ``diverged``).
    """
    mu0 = as_array(mu0)
    grid.check_shape(mu0, "mu0")
    DiscreteMeasure(mu0)
    delta, dt = cfg.delta, cfg.dt_pseudo
    rd_mode = cfg.mode == "discounted_rd"

    diagnostics: dict = {"stability_bound_checked": cfg.u_bar is not None, "K": None}
    if cfg.u_bar is not None:
        try:
            k, dt_max = stability_constants(delta, cfg.u_bar)
        except StabilityHypothesisError as exc:
            log.warning("%s; iterate bounds not guaranteed", exc)
            diagnostics["stability_bound_ok"] = False
        else:
            diagnostics.update(K=k, dt_max=dt_max, stability_bound_ok=dt < dt_max)
            if dt >= dt_max:
                log.warning("dt_pseudo=%g >= 1/(delta+K)=%g; iterate bounds not guaranteed",
                            dt, dt_max)

    m = mu0.copy()
    phi = _initial_phi(cfg, spec, mu0, grid)
    if callback is not None:
        callback(0, m, phi)

    history: list[float] = []
    status = "max_iters"
    err = math.inf
    n = 0
    # overflow is detected and reported by _raise_non_finite
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(int(cfg.max_iters)):
            avg = (phi * m).sum(axis=0, keepdims=True)
            m_new = m + dt * (delta * mu0 - (delta - (phi - avg)) * m)
            if rd_mode:
                _raise_non_finite(n, m=m_new)
                phi_new = checked_values(spec, m_new, grid)
            else:
                u = checked_values(spec, m, grid)
                h = -phi + u + jump_gain_sum(phi, m) / (2.0 * delta)
                phi_new = phi + delta * dt * h
            _raise_non_finite(n, m=m_new, phi=phi_new)
            err = max(grid.n_x * float(np.abs(m_new - m).max()),
                      float(np.abs(phi_new - phi).max()))
            history.append(err)
            m, phi = m_new, phi_new
            if callback is not None:
                callback(n + 1, m, phi)
            if err <= cfg.eps_tol:
                status = "converged"
                break
            if err > DIVERGENCE_FACTOR * history[0]:
                status = "diverged"
                log.warning("iteration diverged at n=%d (error %.3e, initial %.3e)",
                            n, err, history[0])
                break

    u_final = checked_values(spec, m, grid)
    res_fp = residual_fp(m, phi, mu0, delta)
    res_hjb = None if rd_mode else residual_hjb(m, phi, u_final, delta)
    diagnostics.update(
        min_phi=float(phi.min()),
        max_phi=float(phi.max()),
        min_m=float(m.min()),
        worst_row_sum_dev=float(np.abs(m.sum(axis=0) - 1.0).max()),
        residual_fp_max=field_stats(res_fp)[0],
        residual_hjb_max=None if res_hjb is None else field_stats(res_hjb)[0],
        mode=cfg.mode,
    )
    try:
        m_out = DiscreteMeasure(m)
    except ValueError:
        m_out = m  # an unconverged iterate may leave the simplex; keep it for inspection
    return SolveReport(
        m=m_out,
        phi=ValueField(phi),
        iterations=n + 1,
        final_error=err,
        status=status,
        config=cfg,
        error_history=history,
        diagnostics=diagnostics,
    )


# -- export ----------------------------------------------------------------


def write_report(report: SolveReport, out_dir, grid: GridSpec, prefix: str = "") -> Path:
    """Write ``<prefix>report.json``, ``m.csv``, ``phi.csv`` and ``error_history.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "m": f"{prefix}m.csv",
        "phi": f"{prefix}phi.csv",
        "error_history": f"{prefix}error_history.csv",
    }
    io.write_grid_csv(out / files["m"], report.m_values, grid)
    io.write_grid_csv(out / files["phi"], report.phi, grid)
    with (out / files["error_history"]).open("w") as fh:
        fh.write("iteration,error\n")
        for k, e in enumerate(report.error_history):
            fh.write(f"{k},{io.fmt(e)}\n")
    summary = {
        "status": report.status,
        "iterations": report.iterations,
        "final_error": report.final_error,
        "config": asdict(report.config),
        "grid": {"n_x": grid.n_x, "n_y": grid.n_y},
        "diagnostics": report.diagnostics,
        "files": files,
    }
    return io.write_json(out / f"{prefix}report.json", summary)


def read_report_fields(out_dir, prefix: str = "") -> tuple[dict, np.ndarray, np.ndarray, GridSpec]:
    out = Path(out_dir)
    summary = io.read_json(out / f"{prefix}report.json")
    m, grid = io.read_grid_csv(out / summary["files"]["m"])
    phi, _ = io.read_grid_csv(out / summary["files"]["phi"])
    return summary, m, phi, grid
