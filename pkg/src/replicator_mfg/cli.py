"""Command line entry point.

Every subcommand reads one JSON config, writes its data files under the
output directory and prints a single summary line.  Exit codes: 0 success,
1 usage/config/hard error, 2 non-convergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import io
from .evolution import EvolutionConfig, rd_integrate, write_trajectory
from .experiments import (critical_delta_bisect, default_configs, mu0_preset, penalty_study,
                          qvoter_spike_scan, rd_mfg_sweep)
from .grid import GridSpec
from .jump_sampler import SamplerConfig, sample_rows, write_estimate
from .stationary import SolverConfig, read_report_fields, solve, verify_iterate_invariants, write_report
from .utilities import PenalizedTragedy, from_config

log = logging.getLogger("replicator_mfg")

EXIT_OK, EXIT_ERROR, EXIT_NONCONVERGED = 0, 1, 2

_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["grid", "utility", "output_dir"],
    "additionalProperties": False,
    "properties": {
        "grid": {
            "type": "object", "required": ["n_x"], "additionalProperties": False,
            "properties": {"n_x": _posint, "n_y": _posint},
        },
        "utility": {
            "type": "object", "required": ["variant"], "additionalProperties": False,
            "properties": {
                "variant": {"enum": ["constant", "tabulated", "tragedy_of_commons",
                                     "penalized_tragedy", "qvoter_exchangeable", "qvoter_typed"]},
                "params": {"type": "object"},
            },
        },
        "mu0": {
            "type": "object", "required": ["preset"], "additionalProperties": False,
            "properties": {
                "preset": {"enum": ["uniform", "sine_exchangeable", "sine_typed", "file"]},
                "path": {"type": "string"},
            },
        },
        "solver": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "delta": _pos, "dt_pseudo": _pos, "eps_tol": _pos, "max_iters": _posint,
                "u_bar": _pos,
                "phi_init": {"oneOf": [{"enum": ["zeros", "utility_of_mu0"]}, {"type": "number"}]},
                "mode": {"enum": ["mfg", "rd", "discounted_rd"]},
            },
        },
        "sweep": {
            "type": "object", "required": ["deltas"], "additionalProperties": False,
            "properties": {
                "deltas": {"type": "array", "items": _pos, "minItems": 1},
                "P_values": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                "halvings": {"type": "integer", "minimum": 0},
                "paper_dt": {"type": "boolean"},
            },
        },
        "qvoter": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "delta": _pos,
                "mode": {"enum": ["mfg", "rd"]},
                "threshold": _pos,
                "bracket": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
                "tol": _pos,
            },
        },
        "validate": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "n_paths": {"type": "integer", "minimum": 2},
                "t_horizon": _pos,
                "rows": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "tv_tol": _pos,
            },
        },
        "evolve": {
            "type": "object", "required": ["dt_time", "t_end"], "additionalProperties": False,
            "properties": {"dt_time": _pos, "t_end": _pos, "record_every": _posint},
        },
        "output_dir": {"type": "string", "minLength": 1},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
    },
}


class CliError(Exception):
    """A config or usage problem reported with exit code 1."""


def _json_path(error: jsonschema.ValidationError) -> str:
    return "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in error.absolute_path)


def load_config(path) -> dict:
    path = Path(path)
    try:
        cfg = io.read_json(path)
    except FileNotFoundError:
        raise CliError(f"config file {path} not found") from None
    except ValueError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise CliError(f"{path}: config error at {_json_path(e)}: {e.message}")
    cfg["_base_dir"] = str(path.parent)
    return cfg


def _require(cfg: dict, block: str, command: str) -> dict:
    if block not in cfg:
        raise CliError(f"config error at $.{block}: required by '{command}'")
    return cfg[block]


def _setup(cfg: dict):
    g = cfg["grid"]
    grid = GridSpec(g["n_x"], g.get("n_y", 1))
    spec = from_config(cfg["utility"], cfg["_base_dir"])
    mu = cfg.get("mu0", {"preset": "uniform"})
    path = mu.get("path")
    if path is not None and not Path(path).is_absolute():
        path = Path(cfg["_base_dir"]) / path
    mu0 = mu0_preset(mu["preset"], grid, path)
    return grid, spec, mu0


def _solver_config(cfg: dict, mode: str | None = None) -> SolverConfig:
    s = dict(cfg.get("solver", {}))
    s.setdefault("delta", 1.0)
    mode = mode or s.get("mode", "mfg")
    s["mode"] = "discounted_rd" if mode == "rd" else mode
    return SolverConfig(**s)


def _fmt(v: float) -> str:
    return f"{v:.3e}"


# -- subcommands -------------------------------------------------------------


def cmd_solve(cfg: dict, out: Path, args) -> int:
    grid, spec, mu0 = _setup(cfg)
    scfg = _solver_config(cfg, args.mode)
    report = solve(mu0, spec, grid, scfg)
    write_report(report, out, grid)
    print(f"solve {report.status}: iterations={report.iterations} "
          f"final_error={_fmt(report.final_error)} out={out}")
    return EXIT_OK if report.converged else EXIT_NONCONVERGED


def cmd_sweep(cfg: dict, out: Path, args) -> int:
    grid, spec, mu0 = _setup(cfg)
    sw = _require(cfg, "sweep", "sweep")
    base = _solver_config(cfg)
    deltas = sw["deltas"]
    cfgs = (default_configs(deltas, base) if sw.get("paper_dt", True)
            else [base.replace(delta=float(d)) for d in deltas])
    kw = dict(halvings=sw.get("halvings", 4), threads=args.threads)
    if "P_values" in sw:
        if not isinstance(spec, PenalizedTragedy):
            raise CliError("config error at $.sweep.P_values: needs the penalized_tragedy utility")
        study = penalty_study(spec, sw["P_values"], grid, mu0, deltas, cfgs,
                              export_dir=out / "fields", **kw)
        ok = True
        with (out / "penalized_mass.csv").open("w") as fh:
            fh.write("P,delta,mode,j,mass\n")
            for P, res in study.items():
                res["sweep"].write(out, f"sweep_P_{P:g}")
                ok &= res["sweep"].all_converged
                for (d, mode), mass in sorted(res["penalized_mass"].items()):
                    for j, v in enumerate(mass):
                        fh.write(f"{io.fmt(P)},{io.fmt(d)},{mode},{j},{io.fmt(v)}\n")
        print(f"sweep {'converged' if ok else 'incomplete'}: P={list(study)} deltas={deltas} out={out}")
    else:
        result = rd_mfg_sweep(spec, grid, mu0, deltas, cfgs, export_dir=out / "fields", **kw)
        result.write(out)
        ok = result.all_converged
        top = result.rows[-1]
        print(f"sweep {'converged' if ok else 'incomplete'}: rows={len(result.rows)} "
              f"max_density_diff(delta={top.delta:g})={_fmt(top.max_density_diff)} out={out}")
    return EXIT_OK if ok else EXIT_NONCONVERGED


def cmd_qvoter(cfg: dict, out: Path, args) -> int:
    grid, spec, mu0 = _setup(cfg)
    qv = cfg.get("qvoter", {})
    mode = args.mode or qv.get("mode", "rd")
    mode = "discounted_rd" if mode == "rd" else mode
    threshold = qv.get("threshold", 5.0)
    scfg = _solver_config(cfg, mode)
    if args.bisect:
        if "bracket" not in qv:
            raise CliError("config error at $.qvoter.bracket: required with --bisect")
        try:
            lo, hi, scans = critical_delta_bisect(spec, grid, mu0, tuple(qv["bracket"]),
                                                  qv.get("tol", 1e-3), scfg, mode, threshold)
        except ValueError as exc:
            raise CliError(str(exc)) from None
        io.write_json(out / "critical_delta.json", {
            "interval": [lo, hi], "mode": mode, "threshold": threshold,
            "scans": [s.to_json() for s in scans],
        })
        print(f"qvoter bisect: critical delta in ({lo:.6g}, {hi:.6g}) out={out}")
        return EXIT_OK
    delta = qv.get("delta", scfg.delta)
    rep = qvoter_spike_scan(spec, grid, mu0, delta, scfg, mode, threshold)
    io.write_json(out / "spike_report.json", {**rep.to_json(), "mode": mode})
    print(f"qvoter delta={delta:g}: spike={str(rep.spike).lower()} "
          f"max_density={rep.max_density:.6g} status={rep.status} out={out}")
    if rep.status == "max_iters":
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_validate(cfg: dict, out: Path, args) -> int:
    grid, spec, mu0 = _setup(cfg)
    try:
        summary, m, phi, file_grid = read_report_fields(out)
    except FileNotFoundError:
        raise CliError(f"no solve output in {out}; run the 'solve' command with this config first") from None
    if file_grid != grid:
        raise CliError(f"solve output in {out} has grid {file_grid.shape}, config has {grid.shape}")
    if summary["config"]["mode"] != "mfg":
        raise CliError("validate needs an MFG solve (its value field drives the jump process)")
    delta = summary["config"]["delta"]
    problems = verify_iterate_invariants(m, phi, delta=delta, u_bar=summary["config"].get("u_bar"))
    val = cfg.get("validate", {})
    scfg = SamplerConfig(delta=delta, n_paths=val.get("n_paths", 100_000),
                         rng_seed=cfg.get("seed", 0), t_horizon=val.get("t_horizon"))
    est = sample_rows(phi, m, grid, mu0, scfg, val.get("rows"))
    write_estimate(est, out / "validate", grid, reference=m)
    tv = max(est.tv_to(m))
    tol = val.get("tv_tol", 0.05)
    io.write_json(out / "validate" / "invariants.json", {"violations": problems, "tv_tol": tol})
    ok = tv <= tol and not problems
    print(f"validate {'ok' if ok else 'failed'}: max_tv={_fmt(tv)} tol={tol:g} "
          f"invariant_violations={len(problems)} out={out / 'validate'}")
    return EXIT_OK if ok else EXIT_ERROR


def cmd_evolve(cfg: dict, out: Path, args) -> int:
    grid, spec, mu0 = _setup(cfg)
    ev = _require(cfg, "evolve", "evolve")
    try:
        ecfg = EvolutionConfig(ev["dt_time"], ev["t_end"], ev.get("record_every", 1))
    except ValueError as exc:
        raise CliError(f"config error at $.evolve: {exc}") from None
    traj = rd_integrate(mu0, spec, grid, ecfg)
    write_trajectory(traj, out, grid)
    print(f"evolve done: snapshots={len(traj.snapshots)} t_end={traj.times[-1]:g} "
          f"renormalized_mass={_fmt(traj.renormalized_mass)} out={out}")
    return EXIT_OK if traj.conservative else EXIT_ERROR


COMMANDS = {"solve": cmd_solve, "sweep": cmd_sweep, "qvoter": cmd_qvoter,
            "validate": cmd_validate, "evolve": cmd_evolve}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replicator-mfg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for sweeps")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("solve", "qvoter"):
            p.add_argument("--mode", choices=["mfg", "rd"])
        else:
            p.set_defaults(mode=None)
        if name == "qvoter":
            p.add_argument("--bisect", action="store_true", help="bisect for the critical delta")
        else:
            p.set_defaults(bisect=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.threads < 1:
            raise CliError("--threads must be at least 1")
        cfg = load_config(args.config)
        out = Path(args.out or cfg["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        with np.errstate(over="ignore", invalid="ignore"):
            return COMMANDS[args.command](cfg, out, args)
    except (CliError, ValueError, OSError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # never a traceback for users
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
