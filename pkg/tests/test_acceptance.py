"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is
printed in the terminal summary."""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import picard_stationary, tragedy_single_type
from replicator_mfg.cli import main
from replicator_mfg.evolution import EvolutionConfig, embedding_check, qvoter_long_run
from replicator_mfg.experiments import (critical_delta_bisect, penalized_mass, penalty_study,
                                        qvoter_preset, qvoter_spike_scan, rd_mfg_sweep)
from replicator_mfg.grid import DiscreteMeasure, GridSpec, make_uniform
from replicator_mfg.jump_sampler import SamplerConfig, sample_occupation, sample_rows
from replicator_mfg.stationary import (SolverConfig, solve, stability_constants,
                                       verify_iterate_invariants)
from replicator_mfg.utilities import (Constant, PenalizedTragedy, QVoterExchangeable,
                                      TragedyOfCommons, checked_values)

TABLE_DELTAS = [0.01, 0.1, 1.0, 10.0]


def _non_increasing(values):
    return all(b <= a for a, b in zip(values, values[1:]))


# -- 1 -------------------------------------------------------------------------


def test_criterion_01_trivial_fixed_point(report_criterion):
    rng = np.random.default_rng(1)
    worst_err, worst_iter, worst_time, worst_gap = 0.0, 0, 0.0, 0.0
    for shape in [(2, 1), (50, 50), (200, 200)]:
        g = GridSpec(*shape)
        for mu0 in (make_uniform(g), DiscreteMeasure(rng.dirichlet(np.ones(g.n_x), g.n_y).T)):
            for delta in (0.5, 1.0, 10.0):
                t = time.perf_counter()
                r = solve(mu0, Constant(2.5), g, SolverConfig(delta=delta, phi_init="utility_of_mu0"))
                worst_time = max(worst_time, time.perf_counter() - t)
                assert r.converged
                worst_err = max(worst_err, r.final_error)
                worst_iter = max(worst_iter, r.iterations)
                worst_gap = max(worst_gap, np.abs(r.m_values - mu0.values).max(),
                                np.abs(r.phi.values - 2.5).max())
    ok = worst_err <= 1e-10 and worst_iter <= 10 and worst_time < 1.0 and worst_gap <= 1e-12
    report_criterion(1, ok, f"max final_error={worst_err:.1e} max iterations={worst_iter} "
                            f"max |m-mu0|,|phi-c0|={worst_gap:.1e} slowest={worst_time:.3f}s")
    assert ok


# -- 2 -------------------------------------------------------------------------


def test_criterion_02_oracle_equivalence(report_criterion):
    worst, slowest = 0.0, 0.0
    for n in (2, 3):
        for delta in (0.5, 1.0, 10.0):
            g = GridSpec(n)
            cfg = SolverConfig(delta=delta, dt_pseudo=0.02 if delta >= 10 else 0.2, eps_tol=1e-13,
                               max_iters=10**6)
            t = time.perf_counter()
            r = solve(make_uniform(g), TragedyOfCommons(), g, cfg)
            slowest = max(slowest, time.perf_counter() - t)
            m_ref, phi_ref = picard_stationary(tragedy_single_type(n), np.full(n, 1 / n), delta)
            assert r.converged
            worst = max(worst, np.abs(r.m_values[:, 0] - m_ref).max(),
                        np.abs(r.phi.values[:, 0] - phi_ref).max())
    ok = worst <= 1e-8 and slowest < 1.0
    report_criterion(2, ok, f"max |solver - oracle|={worst:.2e} (tol 1e-8) slowest={slowest:.3f}s")
    assert ok


# -- 3 -------------------------------------------------------------------------


def test_criterion_03_iterate_invariants(report_criterion):
    # q = 0.5 with floor 0.25 gives 0 < U <= 2; each solve reaches a fixed point
    # within a few hundred steps, so random starts are cycled until 1e4 iterates
    g = GridSpec(50, 50)
    spec, u_bar = QVoterExchangeable(0.5, 0.25), 2.0
    rng = np.random.default_rng(3)
    violations, count, runs = [], [0], 0

    t = time.perf_counter()
    while count[0] < 10_000:
        delta = float(rng.choice([5.0, 8.0, 20.0]))  # admissible needs delta > 2 u_bar
        _, dt_max = stability_constants(delta, u_bar)
        mu0 = DiscreteMeasure(rng.dirichlet(np.full(50, 0.3), 50).T)
        cfg = SolverConfig(delta=delta, dt_pseudo=0.98 * dt_max, eps_tol=1e-14, max_iters=10_000,
                           u_bar=u_bar)

        def check(n, m, phi, delta=delta):
            count[0] += 1
            v = verify_iterate_invariants(m, phi, delta=delta, u_bar=u_bar)
            if v:
                violations.append((n, v))

        solve(mu0, spec, g, cfg, callback=check)
        runs += 1
    elapsed = time.perf_counter() - t
    ok = not violations and count[0] >= 10_000 and elapsed < 30
    report_criterion(3, ok, f"{count[0]} iterates over {runs} random starts on 50x50 at dt=0.98*dt_max, "
                            f"violations={len(violations)}, {elapsed:.1f}s")
    assert ok


# -- 4 and 5 ------------------------------------------------------------------


@pytest.fixture(scope="module")
def table_sweep():
    g = GridSpec(200, 200)
    return rd_mfg_sweep(TragedyOfCommons(), g, make_uniform(g), TABLE_DELTAS, halvings=3)


@pytest.fixture(scope="module")
def penalty_sweep():
    g = GridSpec(200, 200)
    return rd_mfg_sweep(PenalizedTragedy(P=1.0), g, make_uniform(g), TABLE_DELTAS, halvings=3)


def _table_checks(sweep, target):
    rows = sweep.rows
    columns = list(zip(*(r.metrics for r in rows)))
    monotone = all(np.all(np.isfinite(c)) and _non_increasing(list(c)) for c in columns)
    top, one = sweep.row(10.0), sweep.row(1.0)
    in_band = 0.5 * target <= top.max_density_diff <= 1.5 * target
    ratio = top.max_density_diff / one.max_density_diff
    table = "; ".join(
        f"d={r.delta:g}: {r.max_density_diff:.4g}/{r.avg_density_diff:.4g}/"
        f"{r.max_value_diff:.4g}/{r.avg_value_diff:.4g} dt={r.dt_rd:g},{r.dt_mfg:g}"
        f"{'' if r.converged_rd and r.converged_mfg else ' UNCONVERGED'}"
        for r in rows)
    return monotone, in_band, ratio, table


@pytest.mark.slow
def test_criterion_04_table_reproduction(report_criterion, table_sweep):
    monotone, in_band, ratio, table = _table_checks(table_sweep, 2.880e-2)
    ok = monotone and in_band and ratio <= 0.2
    report_criterion(4, ok, f"band={in_band} monotone={monotone} ratio(10/1)={ratio:.3g} | {table}")
    assert ok


@pytest.mark.slow
def test_criterion_05_penalty_tables(report_criterion, penalty_sweep):
    monotone, in_band, _, table = _table_checks(penalty_sweep, 2.716e-2)
    g = GridSpec(200, 200)
    study = penalty_study(PenalizedTragedy(), [0.2, 1.0, 5.0], g, make_uniform(g), [1.0])
    masses = [study[P]["penalized_mass"][1.0, "mfg"] for P in (0.2, 1.0, 5.0)]
    mass_ok = all(np.all(b <= a) for a, b in zip(masses, masses[1:]))
    totals = "/".join(f"{m.sum() / g.n_y:.4f}" for m in masses)
    ok = monotone and in_band and mass_ok
    report_criterion(5, ok, f"band={in_band} monotone={monotone} penalized mass P=0.2/1/5 "
                            f"(type mean)={totals} per-row non-increasing={mass_ok} | {table}")
    assert ok


# -- 6 -------------------------------------------------------------------------


def test_criterion_06_large_discount_limit(report_criterion):
    g = GridSpec(100, 100)
    spec, mu0 = TragedyOfCommons(), make_uniform(g)
    u0 = checked_values(spec, mu0.values, g)
    m_gap, phi_gap = [], []
    for delta in (10.0, 100.0, 1000.0):
        r = solve(mu0, spec, g, SolverConfig(delta=delta, dt_pseudo=0.2 / delta, eps_tol=1e-10,
                                            max_iters=200_000))
        assert r.converged
        m_gap.append(g.n_x * np.abs(r.m_values - mu0.values).max())
        phi_gap.append(np.abs(r.phi.values - u0).max())
    ratios = [b / a for a, b in zip(m_gap, m_gap[1:])]
    ok = (m_gap[0] > m_gap[1] > m_gap[2] and phi_gap[0] > phi_gap[1] > phi_gap[2]
          and max(ratios) <= 0.2)
    report_criterion(6, ok, "density gap " + ", ".join(f"{v:.3e}" for v in m_gap)
                     + " | phi-U gap " + ", ".join(f"{v:.3e}" for v in phi_gap)
                     + " | ratios " + ", ".join(f"{v:.3f}" for v in ratios))
    assert ok


# -- 7 -------------------------------------------------------------------------


def test_criterion_07_qvoter_classification(report_criterion):
    rng = np.random.default_rng(7)
    cfg = EvolutionConfig(0.02, 60.0, 3000)
    wrong = []
    t = time.perf_counter()
    for n in (2, 5):
        starts = rng.dirichlet(np.ones(n), 20)
        for q, expected in ((0.5, "interior"), (2.0, "vertex")):
            for x0 in starts:
                got = qvoter_long_run(x0, q, cfg)
                if got != expected:
                    wrong.append((n, q, got))
    elapsed = time.perf_counter() - t
    ok = not wrong and elapsed < 10
    report_criterion(7, ok, f"80 runs, misclassified={len(wrong)}, {elapsed:.1f}s")
    assert ok


# -- 8 -------------------------------------------------------------------------


def test_criterion_08_embedding(report_criterion):
    rng = np.random.default_rng(8)
    details, ok = [], True
    for n in (2, 4):
        x0 = rng.dirichlet(np.ones(n))
        g = GridSpec(n)
        d1 = embedding_check(x0, 2.0, g, EvolutionConfig(1e-4, 1.0, 100))
        d2 = embedding_check(x0, 2.0, g, EvolutionConfig(5e-5, 1.0, 200))
        ratio = d1 / d2
        ok &= d1 <= 1e-4 and 1.6 <= ratio <= 2.4
        details.append(f"N={n}: dev(1e-4)={d1:.3e} dev(5e-5)={d2:.3e} ratio={ratio:.3f}")
    report_criterion(8, ok, "; ".join(details))
    assert ok


# -- 9 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_09_qvoter_critical_delta(report_criterion):
    spec, g, mu0 = qvoter_preset("exchangeable", 200)
    lo, hi, _ = critical_delta_bisect(spec, g, mu0, (0.39, 0.41), 1e-3)
    mfg = qvoter_spike_scan(spec, g, mu0, 0.403, mode="mfg")
    spec_t, g_t, mu0_t = qvoter_preset("typed", 200)
    lo_t, hi_t, scans = critical_delta_bisect(spec_t, g_t, mu0_t, (0.39, 0.41), 1e-3)
    spiking = [s for s in scans if s.spike]
    rows = sorted({j for s in spiking for _, j in s.spike_locations})
    rows_ok = bool(rows) and min(rows) >= int(0.9 * g_t.n_y)
    ok = (0.392 <= lo and hi <= 0.413 and not mfg.spike
          and 0.390 <= lo_t and hi_t <= 0.411 and rows_ok)
    report_criterion(9, ok, f"exchangeable bracket ({lo:.5f}, {hi:.5f}); MFG at 0.403 spike={mfg.spike} "
                            f"(max density {mfg.max_density:.3f}); typed bracket ({lo_t:.5f}, {hi_t:.5f}); "
                            f"spike rows j={rows[0] if rows else '-'}..{rows[-1] if rows else '-'} of {g_t.n_y}")
    assert ok


# -- 10 ------------------------------------------------------------------------


def test_criterion_10_jump_closure(report_criterion):
    g = GridSpec(200, 200)
    mu0 = make_uniform(g)
    r = solve(mu0, TragedyOfCommons(), g, SolverConfig(delta=1.0))
    assert r.converged
    cfg = SamplerConfig(delta=1.0, n_paths=100_000, rng_seed=10)
    est = sample_rows(r.phi, r.m, g, mu0, cfg)
    tv = max(est.tv_to(r.m))
    j = 150
    small = sample_occupation(r.phi, r.m, g, j, mu0.values[:, j], SamplerConfig(1.0, 25_000, 11))
    big = sample_occupation(r.phi, r.m, g, j, mu0.values[:, j], SamplerConfig(1.0, 100_000, 11))
    ratio = float(np.linalg.norm(small.std_error) / np.linalg.norm(big.std_error))
    ok = tv <= 0.05 and cfg.truncation_error <= 1e-6 * (1 + 1e-9) and 1.6 <= ratio <= 2.4
    report_criterion(10, ok, f"200x200, 1e5 paths per row: max row TV={tv:.4f}; "
                             f"std_error ratio 25k/100k={ratio:.3f}")
    assert ok


# -- 11 ------------------------------------------------------------------------


def _files(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_11_determinism(report_criterion, tmp_path, capsys):
    base = {
        "grid": {"n_x": 20, "n_y": 10},
        "utility": {"variant": "tragedy_of_commons", "params": {"c": 4.0}},
        "mu0": {"preset": "uniform"},
        "solver": {"delta": 1.0},
        "sweep": {"deltas": [1, 10]},
        "validate": {"n_paths": 5000},
        "evolve": {"dt_time": 0.01, "t_end": 1.0, "record_every": 10},
        "output_dir": "unused",
        "seed": 42,
    }
    qv = {
        "grid": {"n_x": 60},
        "utility": {"variant": "qvoter_typed", "params": {"type_weighted": False}},
        "mu0": {"preset": "sine_exchangeable"},
        "qvoter": {"delta": 0.5, "bracket": [0.2, 0.6], "tol": 0.01},
        "output_dir": "unused",
    }
    (tmp_path / "base.json").write_text(json.dumps(base))
    (tmp_path / "qv.json").write_text(json.dumps(qv))
    runs = [
        ("solve", "base.json", []), ("validate", "base.json", []), ("sweep", "base.json", ["--threads", "2"]),
        ("evolve", "base.json", []), ("qvoter", "qv.json", []), ("qvoter", "qv.json", ["--bisect"]),
    ]
    snapshots = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        for cmd, cfg, extra in runs:
            sub = out / ("qvoter" if cfg == "qv.json" else "base")
            code = main([cmd, "--config", str(tmp_path / cfg), "--out", str(sub), *extra])
            assert code == 0, cmd
        snapshots.append(_files(out))
    capsys.readouterr()
    differing = sorted(k for k in snapshots[0] if snapshots[0][k] != snapshots[1].get(k))
    ok = snapshots[0].keys() == snapshots[1].keys() and not differing
    report_criterion(11, ok, f"{len(snapshots[0])} output files from solve/validate/sweep/evolve/qvoter "
                             f"compared byte-wise, differing={differing[:3]}")
    assert ok
