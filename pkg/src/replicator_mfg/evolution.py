"""Time-dependent replicator dynamic and the finite q-voter ODE.

Both are integrated with explicit Euler steps.  The replicator drift
``(U_ij - sum_k U_kj m_kj) m_ij`` has zero sum over each type row, so mass is
conserved up to rounding; any rounding correction is accounted for, never
applied silently.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io
from .grid import DiscreteMeasure, GridSpec, as_array, tv_row_norm
from .utilities import QVoterExchangeable, checked_values

log = logging.getLogger(__name__)

SUM_TOL = 1e-12
CLIP_TOL = 1e-14
RENORM_BUDGET = 1e-8


class InstabilityError(FloatingPointError):
    """An explicit step pushed a mass below ``-1e-14``."""


@dataclass(frozen=True)
class EvolutionConfig:
    dt_time: float
    t_end: float
    record_every: int = 1

    def __post_init__(self):
        if not self.dt_time > 0:
            raise ValueError(f"dt_time must be positive, got {self.dt_time}")
        if not self.t_end >= self.dt_time:
            raise ValueError(f"t_end={self.t_end} must be at least dt_time={self.dt_time}")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise ValueError(f"record_every must be a positive integer, got {self.record_every}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt_time))


@dataclass
class Trajectory:
    times: list[float]
    snapshots: list[np.ndarray]
    renormalized_mass: float = 0.0
    renormalizations: int = 0

    @property
    def conservative(self) -> bool:
        return self.renormalized_mass < RENORM_BUDGET

    @property
    def final(self) -> np.ndarray:
        return self.snapshots[-1]


def _settle(new: np.ndarray, what: str) -> tuple[np.ndarray, float]:
    """Clip roundoff negatives, renormalise rows drifting past ``SUM_TOL``."""
    if new.min() < 0:
        if new.min() < -CLIP_TOL:
            i, j = np.unravel_index(np.argmin(new), new.shape)
            raise InstabilityError(
                f"{what}: cell (i={i}, j={j}) became {new[i, j]:.3e}; reduce the time step"
            )
        new = np.maximum(new, 0.0)
    sums = new.sum(axis=0)
    dev = np.abs(sums - 1.0)
    moved = 0.0
    if dev.max() > SUM_TOL:
        moved = float(dev.sum())
        log.info("%s: renormalised rows, max deviation %.3e", what, dev.max())
        new = new / sums
    return new, moved


def _rd_step(m: np.ndarray, u: np.ndarray, dt: float) -> tuple[np.ndarray, float]:
    # a per-type shift leaves the drift unchanged and makes it exactly 0 for flat U
    u = u - u.max(axis=0, keepdims=True)
    avg = (u * m).sum(axis=0, keepdims=True)
    return _settle(m + dt * (u - avg) * m, "rd_step")


def rd_step(m, spec, grid: GridSpec, dt: float) -> DiscreteMeasure:
    """One forward-Euler step of ``dm/dt = (U - <U>_m) m`` for every type row."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    arr = as_array(m)
    grid.check_shape(arr, "measure")
    new, _ = _rd_step(arr, checked_values(spec, arr, grid), dt)
    return DiscreteMeasure(new)


def rd_integrate(m0, spec, grid: GridSpec, cfg: EvolutionConfig) -> Trajectory:
    m = as_array(DiscreteMeasure(as_array(m0))).copy()
    grid.check_shape(m, "m0")
    traj = Trajectory(times=[0.0], snapshots=[m.copy()])
    for step in range(1, cfg.n_steps + 1):
        m, moved = _rd_step(m, checked_values(spec, m, grid), cfg.dt_time)
        if moved:
            traj.renormalized_mass += moved
            traj.renormalizations += 1
        if step % cfg.record_every == 0 or step == cfg.n_steps:
            traj.times.append(step * cfg.dt_time)
            traj.snapshots.append(m.copy())
    if not traj.conservative:
        log.warning("rd_integrate: cumulative renormalisation %.3e exceeds %.0e",
                    traj.renormalized_mass, RENORM_BUDGET)
    return traj


# -- q-voter ODE -----------------------------------------------------------


def _check_q(q: float):
    if q <= 0 or q == 1:
        raise ValueError(f"q must be positive and different from 1, got {q}")


def qvoter_drift(x: np.ndarray, q: float) -> np.ndarray:
    xq = x ** q
    return xq - x * xq.sum()


def qvoter_ode_step(x, q: float, dt: float) -> np.ndarray:
    """Euler step of ``dx_i/dt = x_i**q - x_i sum_j x_j**q`` on the simplex."""
    _check_q(q)
    x = np.asarray(x, dtype=float)
    if abs(x.sum() - 1.0) > SUM_TOL or x.min() < -CLIP_TOL:
        raise ValueError("x must lie in the probability simplex")
    new, _ = _settle((x + dt * qvoter_drift(np.maximum(x, 0.0), q))[:, None], "qvoter_ode_step")
    return new[:, 0]


def qvoter_integrate(x0, q: float, cfg: EvolutionConfig, substeps: int = 1) -> Trajectory:
    """Integrate the ODE with step ``cfg.dt_time / substeps``; snapshots follow
    ``cfg.record_every`` counted in outer steps."""
    _check_q(q)
    x = np.asarray(x0, dtype=float).copy()
    h = cfg.dt_time / substeps
    traj = Trajectory(times=[0.0], snapshots=[x.copy()])
    for step in range(1, cfg.n_steps + 1):
        for _ in range(substeps):
            xq = x ** q
            new = x + h * (xq - x * xq.sum())
            if new.min() < 0 or abs(new.sum() - 1.0) > SUM_TOL:
                settled, moved = _settle(new[:, None], "qvoter_ode")
                new = settled[:, 0]
                traj.renormalized_mass += moved
            x = new
        if step % cfg.record_every == 0 or step == cfg.n_steps:
            traj.times.append(step * cfg.dt_time)
            traj.snapshots.append(x.copy())
    return traj


def _tangent_eigs(x: np.ndarray, q: float) -> np.ndarray:
    # Jacobian of the drift restricted to the simplex tangent space.
    n = x.size
    qx = q * x ** (q - 1.0) if q > 1 else q * np.maximum(x, 1e-300) ** (q - 1.0)
    jac = np.diag(qx - (x ** q).sum()) - np.outer(x, qx)
    basis = np.eye(n)[:, :-1] - np.eye(n)[:, -1:]
    proj = np.linalg.pinv(basis)
    return np.linalg.eigvals(proj @ jac @ basis)


def qvoter_long_run(x0, q: float, cfg: EvolutionConfig) -> str:
    """Classify where the q-voter ODE ends up: ``interior``, ``vertex`` or ``undecided``.

    ``interior`` requires every component above ``1/(10 N)`` and a linearly
    stable end state; an unstable rest point such as the barycentre for
    ``q > 1`` is reported as ``undecided``.
    """
    x = qvoter_integrate(x0, q, cfg).final
    n = x.size
    if x.max() > 1.0 - 1e-3:
        return "vertex"
    if x.min() > 1.0 / (10 * n) and np.all(_tangent_eigs(x, q).real < 0):
        return "interior"
    return "undecided"


def embedding_check(x0, q: float, grid: GridSpec, cfg: EvolutionConfig) -> float:
    """Largest TV gap between the q-voter ODE and the density replicator dynamic.

    The replicator dynamic with utility ``p**(q-1)`` on ``n_x = N`` cells equals
    the ODE run on the clock ``tau = N**(q-1) t``.  Both are stepped with
    ``cfg.dt_time`` in their own clock (the ODE uses an integer number of
    sub-steps per replicator step), so the gap measures the two independent
    discretisation errors.
    """
    x0 = np.asarray(x0, dtype=float)
    if grid.n_y != 1 or grid.n_x != x0.size:
        raise ValueError("embedding_check needs n_y == 1 and n_x == len(x0)")
    rate = grid.n_x ** (q - 1.0)
    substeps = max(1, math.ceil(rate - 1e-9))
    ode_cfg = EvolutionConfig(cfg.dt_time * rate, cfg.t_end * rate, cfg.record_every)
    ode = qvoter_integrate(x0, q, ode_cfg, substeps=substeps)
    # the default cap 1/dx = N is never reached since m <= 1
    spec = QVoterExchangeable(q=q)
    rd = rd_integrate(x0[:, None], spec, grid, cfg)
    return max(tv_row_norm(a[:, None] - b) for a, b in zip(ode.snapshots, rd.snapshots))


def write_trajectory(traj: Trajectory, out_dir, grid: GridSpec) -> Path:
    """One grid CSV per snapshot plus ``trajectory.json`` listing times and files."""
    out = Path(out_dir)
    files = []
    for k, snap in enumerate(traj.snapshots):
        name = f"snapshot_{k:05d}.csv"
        io.write_grid_csv(out / name, as_array(snap), grid)
        files.append(name)
    return io.write_json(out / "trajectory.json", {
        "times": traj.times,
        "files": files,
        "renormalized_mass": traj.renormalized_mass,
    })
