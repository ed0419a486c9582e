"""Parameter sweeps comparing the discounted RD with the MFG, penalty studies
and q-voter spike detection."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .grid import DiscreteMeasure, GridSpec, as_array, field_stats
from .stationary import NonFiniteIterateError, SolveReport, SolverConfig, solve, write_report
from .utilities import PenalizedTragedy, QVoterTyped, checked_values

log = logging.getLogger(__name__)

SWEEP_HEADER = ("delta", "max_density_diff", "avg_density_diff", "max_value_diff",
                "avg_value_diff", "converged_rd", "converged_mfg")
SPIKE_THRESHOLD = 5.0
MODES = {"rd": "discounted_rd", "mfg": "mfg"}


# -- initial measures ------------------------------------------------------


def mu0_preset(name: str, grid: GridSpec, path=None) -> DiscreteMeasure:
    """``uniform``, ``sine_exchangeable`` (``1 + 0.9 sin^2(pi x)``),
    ``sine_typed`` (``1 + 0.9 sin^2(4 pi x)``) or ``file`` (grid CSV)."""
    x = grid.x_hat[:, None]
    if name == "uniform":
        w = np.ones(grid.shape)
    elif name == "sine_exchangeable":
        w = np.broadcast_to(1 + 0.9 * np.sin(np.pi * x) ** 2, grid.shape)
    elif name == "sine_typed":
        w = np.broadcast_to(1 + 0.9 * np.sin(4 * np.pi * x) ** 2, grid.shape)
    elif name == "file":
        if path is None:
            raise ValueError("mu0 preset 'file' needs a path")
        arr, file_grid = io.read_grid_csv(path)
        if file_grid != grid:
            raise ValueError(f"{path}: grid {file_grid.shape} does not match {grid.shape}")
        return DiscreteMeasure(arr)
    else:
        raise ValueError(f"unknown mu0 preset {name!r}")
    return DiscreteMeasure.normalized(w)


def qvoter_preset(kind: str, n_x: int = 200, n_y: int | None = None):
    """Return ``(spec, grid, mu0)`` for the exchangeable or typed q-voter study.

    Both presets use ``U = w(y) p / (1 + 10 alpha)``; the exchangeable one has
    a single type and ``w = 1``, the typed one ``w(y) = y``.
    """
    if kind == "exchangeable":
        grid = GridSpec(n_x, 1)
        return QVoterTyped(type_weighted=False), grid, mu0_preset("sine_exchangeable", grid)
    if kind == "typed":
        grid = GridSpec(n_x, n_x if n_y is None else n_y)
        return QVoterTyped(type_weighted=True), grid, mu0_preset("sine_typed", grid)
    raise ValueError(f"unknown q-voter preset {kind!r}")


# -- solving with a step fallback -------------------------------------------


def paper_dt(delta: float) -> float:
    """Pseudo time step 0.2, reduced to 0.02 for the strongly discounted case."""
    return 0.02 if delta >= 10 else 0.2


def solve_with_fallback(mu0, spec, grid: GridSpec, cfg: SolverConfig,
                        halvings: int = 4) -> SolveReport:
    """Solve, halving ``dt_pseudo`` (and doubling ``max_iters``) after a divergence.

    The explicit iteration has a weakly unstable oscillatory mode at small
    ``delta`` whose growth vanishes as the step shrinks.  The step actually
    used is in ``report.config.dt_pseudo``; ``report.diagnostics["dt_tried"]``
    lists every attempt.
    """
    tried = []
    report = None
    for k in range(halvings + 1):
        c = cfg.replace(dt_pseudo=cfg.dt_pseudo / 2**k, max_iters=cfg.max_iters * 2**k,
                        eps_tol=min(cfg.eps_tol, cfg.dt_pseudo / 2**k / 100))
        tried.append(c.dt_pseudo)
        try:
            report = solve(mu0, spec, grid, c)
        except NonFiniteIterateError as exc:
            log.warning("delta=%g dt=%g: %s", c.delta, c.dt_pseudo, exc)
            report = None
            continue
        if report.status != "diverged":
            break
        log.info("delta=%g mode=%s diverged at dt=%g; halving", c.delta, c.mode, c.dt_pseudo)
    if report is None:
        nan = np.full(grid.shape, np.nan)
        report = SolveReport(m=nan, phi=nan, iterations=0, final_error=math.inf,
                             status="diverged", config=c)
    report.diagnostics["dt_tried"] = tried
    return report


# -- RD versus MFG sweeps ----------------------------------------------------


@dataclass
class SweepRow:
    delta: float
    max_density_diff: float
    avg_density_diff: float
    max_value_diff: float
    avg_value_diff: float
    converged_rd: bool
    converged_mfg: bool
    dt_rd: float = math.nan
    dt_mfg: float = math.nan
    iterations_rd: int = 0
    iterations_mfg: int = 0

    @property
    def metrics(self) -> tuple[float, float, float, float]:
        return (self.max_density_diff, self.avg_density_diff,
                self.max_value_diff, self.avg_value_diff)


@dataclass
class SweepResult:
    rows: list[SweepRow]
    provenance: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict, repr=False)  # (delta, "rd"|"mfg") -> SolveReport

    def row(self, delta: float) -> SweepRow:
        return next(r for r in self.rows if r.delta == delta)

    @property
    def all_converged(self) -> bool:
        return all(r.converged_rd and r.converged_mfg for r in self.rows)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            fh.write(",".join(SWEEP_HEADER) + "\n")
            for r in self.rows:
                vals = [io.fmt(r.delta), *(io.fmt(v) for v in r.metrics),
                        str(r.converged_rd).lower(), str(r.converged_mfg).lower()]
                fh.write(",".join(vals) + "\n")
        return path

    def write(self, out_dir, name: str = "sweep") -> Path:
        out = Path(out_dir)
        self.write_csv(out / f"{name}.csv")
        io.write_json(out / f"{name}_provenance.json", {
            **self.provenance,
            "rows": [asdict(r) for r in self.rows],
        })
        return out / f"{name}.csv"


def _spec_repr(spec) -> str:
    return repr(spec)


def config_hash(spec, grid: GridSpec, mu0, cfgs) -> str:
    h = hashlib.sha256()
    h.update(_spec_repr(spec).encode())
    h.update(f"{grid.n_x}x{grid.n_y}".encode())
    h.update(np.ascontiguousarray(as_array(mu0)).tobytes())
    h.update(json.dumps([asdict(c) for c in cfgs], sort_keys=True).encode())
    return h.hexdigest()


def default_configs(deltas, base: SolverConfig | None = None) -> list[SolverConfig]:
    base = base or SolverConfig(delta=1.0)
    return [base.replace(delta=float(d), dt_pseudo=paper_dt(d)) for d in deltas]


def _row_from(delta: float, rd: SolveReport, mfg: SolveReport, grid: GridSpec, spec) -> SweepRow:
    m_rd, m_mfg = rd.m_values, mfg.m_values
    if np.all(np.isfinite(m_rd)) and np.all(np.isfinite(m_mfg)) and rd.converged and mfg.converged:
        dens = field_stats(grid.n_x * (m_rd - m_mfg))
        vals = field_stats(checked_values(spec, m_rd, grid) - as_array(mfg.phi))
    else:
        dens = vals = (math.nan, math.nan)
    return SweepRow(
        delta=delta, max_density_diff=dens[0], avg_density_diff=dens[1],
        max_value_diff=vals[0], avg_value_diff=vals[1],
        converged_rd=rd.converged, converged_mfg=mfg.converged,
        dt_rd=rd.config.dt_pseudo, dt_mfg=mfg.config.dt_pseudo,
        iterations_rd=rd.iterations, iterations_mfg=mfg.iterations,
    )


def rd_mfg_sweep(spec, grid: GridSpec, mu0, deltas, cfgs=None, *, halvings: int = 4,
                 export_dir=None, threads: int = 1) -> SweepResult:
    """Solve both modes for every ``delta`` and tabulate density and value gaps.

    ``cfgs`` gives one :class:`SolverConfig` per delta (mode is overridden);
    by default the step is :func:`paper_dt`.  Rows whose solves fail to
    converge carry ``NaN`` metrics and a ``false`` convergence flag.
    """
    deltas = [float(d) for d in deltas]
    if not deltas:
        raise ValueError("at least one delta is required")
    cfgs = default_configs(deltas) if cfgs is None else list(cfgs)
    if len(cfgs) != len(deltas):
        raise ValueError("need one solver config per delta")
    mu0 = as_array(mu0)

    jobs = [(d, key, c.replace(delta=d, mode=mode))
            for d, c in zip(deltas, cfgs) for key, mode in MODES.items()]

    def run(job):
        d, key, c = job
        return solve_with_fallback(mu0, spec, grid, c, halvings)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        reports = dict(zip([(d, key) for d, key, _ in jobs], pool.map(run, jobs)))

    rows = sorted((_row_from(d, reports[d, "rd"], reports[d, "mfg"], grid, spec) for d in deltas),
                  key=lambda r: r.delta)
    result = SweepResult(rows=rows, reports=reports, provenance={
        "config_hash": config_hash(spec, grid, mu0, cfgs),
        "grid": {"n_x": grid.n_x, "n_y": grid.n_y},
        "utility": _spec_repr(spec),
    })
    if export_dir is not None:
        for (d, key), rep in reports.items():
            if np.all(np.isfinite(rep.m_values)):
                write_report(rep, Path(export_dir) / f"delta_{d:g}" / key, grid)
    return result


def penalized_mass(m, spec: PenalizedTragedy, grid: GridSpec) -> np.ndarray:
    """Mass per type row on the penalised actions ``x_hat >= x_bar``."""
    return as_array(m)[spec.penalized_cells(grid), :].sum(axis=0)


def penalty_study(base: PenalizedTragedy, P_values, grid: GridSpec, mu0, deltas, cfgs=None, *,
                  export_dir=None, **kw) -> dict:
    """Run :func:`rd_mfg_sweep` for each penalty ``P``.

    Returns ``{P: {"sweep": SweepResult, "penalized_mass": {(delta, mode): array}}}``.
    """
    out = {}
    for P in P_values:
        spec = PenalizedTragedy(f=base.f, A=base.A, c=base.c, alpha_weighting=base.alpha_weighting,
                                P=float(P), x_bar=base.x_bar)
        sub = None if export_dir is None else Path(export_dir) / f"P_{P:g}"
        sweep = rd_mfg_sweep(spec, grid, mu0, deltas, cfgs, export_dir=sub, **kw)
        masses = {key: penalized_mass(rep.m_values, spec, grid) for key, rep in sweep.reports.items()}
        out[float(P)] = {"sweep": sweep, "penalized_mass": masses}
    return out


# -- q-voter spikes ----------------------------------------------------------


@dataclass
class SpikeReport:
    delta: float
    max_density: float
    spike: bool
    spike_locations: list[tuple[int, int]]
    status: str = "converged"
    iterations: int = 0
    threshold: float = SPIKE_THRESHOLD

    def to_json(self) -> dict:
        d = asdict(self)
        d["max_density"] = "inf" if math.isinf(self.max_density) else self.max_density
        d["spike_locations"] = [list(ij) for ij in self.spike_locations]
        return d


def qvoter_spike_scan(spec, grid: GridSpec, mu0, delta: float, cfg: SolverConfig | None = None,
                      mode: str = "discounted_rd", threshold: float = SPIKE_THRESHOLD) -> SpikeReport:
    """Solve at ``delta`` and flag a spike when the density reaches ``threshold``.

    A diverging iteration counts as a spike with infinite maximal density; its
    locations are the cells above threshold in the last iterate.
    """
    cfg = (cfg or SolverConfig(delta=delta)).replace(delta=float(delta), mode=mode)
    try:
        rep = solve(mu0, spec, grid, cfg)
    except NonFiniteIterateError:
        return SpikeReport(float(delta), math.inf, True, [], "diverged", cfg.max_iters, threshold)
    p = grid.n_x * rep.m_values
    finite = np.isfinite(p)
    locs = [tuple(int(v) for v in ij) for ij in np.argwhere(finite & (p >= threshold))]
    if rep.status == "diverged":
        return SpikeReport(float(delta), math.inf, True, locs, rep.status, rep.iterations, threshold)
    pmax = float(p.max())
    return SpikeReport(float(delta), pmax, pmax >= threshold, locs, rep.status, rep.iterations,
                       threshold)


def critical_delta_bisect(spec, grid: GridSpec, mu0, bracket=(0.39, 0.41), tol: float = 1e-3,
                          cfg: SolverConfig | None = None, mode: str = "discounted_rd",
                          threshold: float = SPIKE_THRESHOLD) -> tuple[float, float, list[SpikeReport]]:
    """Bisect for the spike onset.  Needs a spike at ``lo`` and none at ``hi``.

    Returns ``(lo, hi, scans)`` with ``hi - lo <= tol``.
    """
    lo, hi = map(float, bracket)
    if not lo < hi or not tol > 0:
        raise ValueError(f"need lo < hi and tol > 0, got bracket {bracket} tol {tol}")
    scan = lambda d: qvoter_spike_scan(spec, grid, mu0, d, cfg, mode, threshold)  # noqa: E731
    at_lo, at_hi = scan(lo), scan(hi)
    scans = [at_lo, at_hi]
    if not at_lo.spike or at_hi.spike:
        raise ValueError(
            f"invalid bracket: spike={at_lo.spike} at {lo:g}, spike={at_hi.spike} at {hi:g}; "
            "need a spike at the lower end only"
        )
    while hi - lo > tol * (1 + 1e-9):
        mid = 0.5 * (lo + hi)
        s = scan(mid)
        scans.append(s)
        if s.spike:
            lo = mid
        else:
            hi = mid
    return lo, hi, scans
