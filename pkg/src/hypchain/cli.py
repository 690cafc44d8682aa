"""Command-line harness: ``hypchain {validate,kernels,simulate,control,observe,run}``.

Exit codes: 0 success, 2 configuration error, 3 assumption failure,
4 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .chain_model import AssumptionError, ChainSpec, ChainSpecError, ConfigurationError, validate_chain
from .config import ExperimentConfig, load_config, load_preset
from .controller import StateFeedback
from .kernels import (KernelDivergenceError, boundary_residuals, compute_chain_kernels, interior_residual,
                      load_kernels, save_kernels)
from .observer import LowPassFilter, OutputFeedback
from .simulator import DivergenceError, Grid, simulate
from .transforms import build_chain_operators

log = logging.getLogger("hypchain")

EXIT_OK, EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_DIVERGENCE = 0, 2, 3, 4


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, AssumptionError):
        return EXIT_ASSUMPTION
    if isinstance(exc, (DivergenceError, KernelDivergenceError)):
        return EXIT_DIVERGENCE
    return EXIT_CONFIG


def _kernels(cfg: ExperimentConfig, timings: dict):
    t0 = time.perf_counter()
    cache = cfg.output.get("kernel_cache")
    kernels = load_kernels(cache, cfg.chain, cfg.nx) if cache else None
    if kernels is None:
        kernels = compute_chain_kernels(cfg.chain, cfg.nx)
        if cache:
            Path(cache).parent.mkdir(parents=True, exist_ok=True)
            save_kernels(cache, cfg.chain, kernels)
    timings["kernels"] = time.perf_counter() - t0
    return kernels


def _filter(cfg: ExperimentConfig, dt: float):
    c = cfg.controller
    if not c["filter"]:
        return None
    return LowPassFilter(cfg.chain.subsystems[0].n, dt, c["filter_bandwidth"], c["filter_order"])


def _write_snapshots(path: Path, traj) -> None:
    arrays = {"t": np.array([s.t for s in traj.snapshots])}
    for j in range(len(traj.snapshots[0].u)):
        arrays[f"u{j + 1}"] = np.stack([s.u[j] for s in traj.snapshots])
        arrays[f"v{j + 1}"] = np.stack([s.v[j] for s in traj.snapshots])
    np.savez(path, **arrays)


def _checks(cfg: ExperimentConfig, traj, t_act: float | None) -> dict:
    norms = traj.norm_total
    out = {"norm_initial": float(norms[0]), "norm_final": float(norms[-1]), "norm_peak": float(norms.max())}
    if cfg.mode == "open-loop":
        t_ref = min(5.0, cfg.T)
        out["growth_since_t5"] = float(norms[-1] / traj.norm_at(t_ref)) if traj.norm_at(t_ref) > 0 else None
        return out
    out["t_act"] = t_act
    out["norm_at_activation"] = traj.norm_at(t_act)
    out["final_over_peak"] = float(norms[-1] / norms.max()) if norms.max() > 0 else 0.0
    out["decayed_below_tenth_of_peak"] = bool(out["final_over_peak"] <= 0.1)
    settle = t_act + float(2.0 * cfg.chain.taus.sum() + cfg.chain.taus.max())
    if settle <= cfg.T:
        ratio = traj.norm_at(settle) / out["norm_at_activation"] if out["norm_at_activation"] > 0 else 0.0
        out["settling_time"] = settle
        out["settled_ratio"] = float(ratio)
        out["settled_below_1e-2"] = bool(ratio <= 1e-2)
    return out


def run(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> tuple[int, dict]:
    """Run one experiment and write its artifacts; returns the exit code and the report."""
    out = Path(out_dir or cfg.output["dir"])
    out.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    report = {"version": __version__, "config_digest": cfg.digest, "chain_digest": cfg.chain.digest(),
              "chain": cfg.chain.name, "mode": cfg.mode, "grid": {"nx": cfg.nx}, "seed": cfg.seed,
              "config": cfg.resolved(), "timings": timings, "status": "ok"}
    t_start = time.perf_counter()
    try:
        code = _run(cfg, out, report, timings)
    except (ConfigurationError, ChainSpecError, AssumptionError, DivergenceError, KernelDivergenceError) as exc:
        code = _exit_code(exc)
        report["status"] = "error"
        report["error"] = {"type": type(exc).__name__, "message": str(exc), "exit_code": code}
    timings["total"] = time.perf_counter() - t_start
    report["exit_code"] = code
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=float))
    return code, report


def _run(cfg: ExperimentConfig, out: Path, report: dict, timings: dict) -> int:
    spec = cfg.chain
    if cfg.mode == "assumption-check":
        rep = validate_chain(spec, strict=False, open_loop_check=True, nx=min(cfg.nx, 41))
        report["validation"] = rep.to_dict()
        return EXIT_OK if rep.ok else EXIT_ASSUMPTION
    grid = Grid.for_chain(spec, cfg.nx, cfg.dt)
    report["grid"].update({"dt": grid.dt, "dx": grid.dx})
    if cfg.mode == "kernels-only":
        kernels = _kernels(cfg, timings)
        save_kernels(out / "kernels.npz", spec, kernels)
        report["kernels"] = [{"iterations": k.iterations, "last_update": k.last_update,
                              "boundary": boundary_residuals(k), "interior": interior_residual(k)}
                             for k in kernels]
        return EXIT_OK
    plant = spec
    if cfg.uncertainty_pct > 0:
        plant = spec.perturbed(np.random.default_rng(cfg.seed), cfg.uncertainty_pct / 100.0)
    ic = dict(cfg.ic)
    if ic.get("kind") == "random":
        ic.setdefault("seed", cfg.seed)
    delay = float(cfg.controller["input_delay"])
    controller, t_act = None, None
    if cfg.mode in ("state-feedback", "output-feedback"):
        ops = build_chain_operators(_kernels(cfg, timings), grid.dt, cfg.nx)
        filt = _filter(cfg, grid.dt)
        c = cfg.controller
        if cfg.mode == "state-feedback":
            controller = StateFeedback(spec, ops, grid.dt, c["t_act"], delay, filt, c["ramp"])
        else:
            controller = OutputFeedback(spec, ops, grid.dt, cfg.observer["tau"], delay, c["t_act"], filt, c["ramp"])
            report["observer"] = {"tau": controller.tau, "startup_time": controller.observer.startup_time()}
        t_act = controller.t_act
        if cfg.T <= t_act:
            raise ConfigurationError(f"horizon T={cfg.T} does not exceed the activation time {t_act:.4g}")
    elif delay:
        raise ConfigurationError("an input delay needs a controller")
    t0 = time.perf_counter()
    traj = simulate(plant, controller, cfg.T, grid, ic=ic, input_delay=delay,
                    snapshot_every=cfg.output.get("snapshot_every"))
    timings["simulation"] = time.perf_counter() - t0
    traj.to_csv(out / "norms.csv", out / "control.csv")
    if cfg.output.get("snapshot_every"):
        _write_snapshots(out / "snapshots.npz", traj)
    report["checks"] = _checks(cfg, traj, t_act)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing

_SUBCOMMAND_MODE = {"kernels": "kernels-only", "simulate": "open-loop", "control": "state-feedback",
                    "observe": "output-feedback"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hypchain", description="Backstepping control of hyperbolic PDE chains.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", nargs="?", help="experiment JSON file")
        sp.add_argument("--preset", help="bundled chain preset (default paper-sec6)")
        sp.add_argument("--chain", help="chain description JSON file")
        sp.add_argument("--nx", type=int)
        sp.add_argument("--dt", type=float)
        sp.add_argument("--T", type=float, dest="T")
        sp.add_argument("--ic", help="initial-condition kind (zero, constant, sine, bump, polynomial, random)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--snapshot-every", type=int)
        sp.add_argument("--kernel-cache", help="kernel cache file (.npz)")

    def control_opts(sp):
        sp.add_argument("--t-act", type=float)
        sp.add_argument("--input-delay", type=float)
        sp.add_argument("--ramp", type=float)
        sp.add_argument("--filter", action=argparse.BooleanOptionalAction, default=None)
        sp.add_argument("--filter-order", type=int)
        sp.add_argument("--filter-bandwidth", type=float)
        sp.add_argument("--uncertainty-pct", type=float)

    v = sub.add_parser("validate", help="check the structural assumptions of a chain")
    common(v)
    v.add_argument("--assumption1", action="store_true", help="also run the empirical open-loop check")
    common(sub.add_parser("kernels", help="compute kernels, write the cache and a residual report"))
    s = sub.add_parser("simulate", help="open-loop simulation")
    common(s)
    s.add_argument("--uncertainty-pct", type=float)
    c = sub.add_parser("control", help="state-feedback closed loop")
    common(c)
    control_opts(c)
    o = sub.add_parser("observe", help="output-feedback closed loop")
    common(o)
    control_opts(o)
    o.add_argument("--tau", type=float)
    r = sub.add_parser("run", help="run an experiment file as written")
    r.add_argument("config")
    r.add_argument("--out")
    return p


def _raw_config(args) -> dict:
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"configuration file {args.config!r} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{args.config}: not valid JSON ({exc})") from None
    else:
        raw = {}
    if args.chain:
        try:
            raw["chain"] = json.loads(Path(args.chain).read_text())
        except (FileNotFoundError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read chain file {args.chain!r}: {exc}") from None
    elif args.preset:
        raw["chain"] = args.preset
    raw.setdefault("chain", "paper-sec6")
    mode = _SUBCOMMAND_MODE.get(args.command, "assumption-check")
    raw["mode"] = mode
    grid = raw.setdefault("grid", {})
    if args.nx is not None:
        grid["nx"] = args.nx
    if args.dt is not None:
        grid["dt"] = args.dt
    if args.T is not None:
        raw["T"] = args.T
    if args.ic is not None:
        raw["ic"] = {"kind": args.ic}
    if args.seed is not None:
        raw["seed"] = args.seed
    outp = raw.setdefault("output", {})
    if args.out is not None:
        outp["dir"] = args.out
    if args.snapshot_every is not None:
        outp["snapshot_every"] = args.snapshot_every
    if args.kernel_cache is not None:
        outp["kernel_cache"] = args.kernel_cache
    ctrl = raw.setdefault("controller", {})
    for name in ("t_act", "input_delay", "ramp", "filter", "filter_order", "filter_bandwidth"):
        val = getattr(args, name, None)
        if val is not None:
            ctrl[name] = val
    if getattr(args, "uncertainty_pct", None) is not None:
        raw["uncertainty_pct"] = args.uncertainty_pct
    if getattr(args, "tau", None) is not None:
        raw.setdefault("observer", {})["tau"] = args.tau
    return raw


def _validate(args) -> int:
    raw = _raw_config(args)
    chain = raw["chain"]
    spec = ChainSpec.from_dict(load_preset(chain) if isinstance(chain, str) else chain)
    nx = int(raw.get("grid", {}).get("nx", 41))
    rep = validate_chain(spec, strict=False, open_loop_check=args.assumption1, nx=min(nx, 41))
    print(json.dumps({"chain": spec.name, "digest": spec.digest(), **rep.to_dict()}, indent=2))
    return EXIT_OK if rep.ok else EXIT_ASSUMPTION


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "validate":
            return _validate(args)
        if args.command == "run":
            cfg = load_config(args.config)
            out = args.out
        else:
            cfg = ExperimentConfig.from_dict(_raw_config(args))
            out = None
    except (ConfigurationError, ChainSpecError, AssumptionError) as exc:
        code = _exit_code(exc)
        print(json.dumps({"status": "error", "type": type(exc).__name__, "message": str(exc), "exit_code": code}),
              file=sys.stderr)
        return code
    code, report = run(cfg, out)
    summary = {"status": report["status"], "mode": cfg.mode, "exit_code": code,
               "out": str(Path(out or cfg.output["dir"]))}
    if "checks" in report:
        summary["checks"] = report["checks"]
    if "error" in report:
        summary["error"] = report["error"]["message"]
    print(json.dumps(summary, indent=2, default=float))
    return code


if __name__ == "__main__":
    sys.exit(main())
