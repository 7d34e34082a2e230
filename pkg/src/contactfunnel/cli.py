"""Command-line driver: plan | pwa | funnel | verify-funnel | simulate | batch | export.

Exit codes: 0 success, 1 configuration error, 2 solver failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import funnel as fn
from . import harness as hs
from . import pwa
from . import trajopt as to
from .config import ConfigError, ToolkitConfig, load_config
from .controller import ConfigError as ControllerConfigError
from .controller import Strategy
from .dynamics import PHI, TH
from .lp_core import NumericalFailure

EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 1, 2, 3

log = logging.getLogger("contactfunnel")

STRATEGIES = {"funnel": Strategy.FUNNEL_TRACK, "point": Strategy.POINT_TRACK}


def presets(horizon: int) -> dict:
    """Named disturbances for --disturbance.  ``open4`` breaks the design
    assumptions on purpose and ``held30`` holds the rotation to the end of
    the nominal horizon."""
    R, G = hs.DisturbanceKind.FORCED_ROTATION, hs.DisturbanceKind.GRIPPER_OPEN
    return {
        "none": None,
        "rot15": hs.DisturbanceSpec(R, 15.0, 10, magnitude_jitter=0.1, trigger_jitter=2, name="rot15"),
        "rot30": hs.DisturbanceSpec(R, 30.0, 10, magnitude_jitter=0.1, trigger_jitter=2, name="rot30"),
        "open7": hs.DisturbanceSpec(G, 0.02, 7, name="open7"),
        "open14": hs.DisturbanceSpec(G, 0.02, 14, name="open14"),
        "open4": hs.DisturbanceSpec(G, 0.04, 7, name="open4"),
        "held30": hs.DisturbanceSpec(R, 30.0, 10, hold=horizon - 10, magnitude_jitter=0.1,
                                     trigger_jitter=2, name="held30"),
    }


# --- artifact helpers --------------------------------------------------------

def _ensure_dir(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


def _need(path, what):
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} file {path} not found (run the earlier stage first)")


def _check_hash(found, expected, what):
    if found != expected:
        raise hs.ConfigMismatch(f"{what} was produced by a different configuration "
                                f"({found[:12] or 'no hash'} != {expected[:12]})")


def load_plan(cfg: ToolkitConfig):
    path = cfg.paths["trajectory"]
    _need(path, "trajectory")
    traj = to.load_trajectory(path, cfg.plant, cfg.trajopt.tol_dyn)
    _check_hash(traj.config_hash, cfg.plan_hash, "trajectory")
    return traj


def load_table(cfg: ToolkitConfig):
    path = cfg.paths["pwa"]
    _need(path, "PWA table")
    table = pwa.PWATable.load(path)
    _check_hash(table.config_hash, cfg.plan_hash, "PWA table")
    return table


def load_policy(cfg: ToolkitConfig):
    path = cfg.paths["policy"]
    _need(path, "policy")
    policy = fn.FunnelPolicy.load(path)
    _check_hash(policy.config_hash, cfg.plan_hash, "policy")
    _check_hash(policy.diagnostics.get("funnel_hash", ""), cfg.funnel_hash, "policy")
    return policy


def _goal(cfg):
    return fn.goal_region(cfg.trajopt.goal_angle, cfg.trajopt.tol_goal)


# --- commands ----------------------------------------------------------------

def cmd_plan(cfg: ToolkitConfig, args):
    nlp = to.transcribe(cfg.trajopt, cfg.plant)
    traj = to.solve_nlp(nlp, opts=to.SolveOptions(tol_dyn=cfg.trajopt.tol_dyn))
    traj.config_hash = cfg.plan_hash
    res = to.trajectory_residuals(traj, cfg.plant)
    path = cfg.paths["trajectory"]
    _ensure_dir(path)
    to.save_trajectory(traj, path, cfg.plant)
    th, ph = np.degrees(traj.states[-1, [TH, PHI]])
    print(f"plan: N={traj.horizon} theta_N={th:.3f} deg phi_N={ph:.3f} deg "
          f"defect={res['max_defect']:.2e} complementarity={res['max_complementarity']:.2e} "
          f"objective={res['objective']:.4f} time={traj.diagnostics.get('solve_time', 0):.1f}s")
    print(f"wrote {path}")
    return 0


def cmd_pwa(cfg: ToolkitConfig, args):
    traj = load_plan(cfg)
    table = pwa.build_pwa(traj, cfg.plant)
    path = cfg.paths["pwa"]
    _ensure_dir(path)
    table.save(path)
    print(f"pwa: {len(table)} cells over {table.horizon} steps and {table.n_modes} modes")
    print(f"wrote {path}")
    return 0


def _verify(cfg, policy, args):
    samples = args.samples or cfg.verify_samples
    sched = fn.verify_prop1(policy, cfg.plant, samples=samples, seed=cfg.verify_seed)
    policy.schedule = sched.a.tolist()
    path = cfg.paths["schedule"]
    _ensure_dir(path)
    with open(path, "w") as f:
        json.dump(sched.to_dict() | {"config_hash": policy.config_hash}, f, indent=1)
    print(f"schedule: a_0={sched.a[0]:.4g} a_N={sched.a[-1]:.4g} "
          f"non-decreasing={bool(np.all(np.diff(sched.a) >= 0))} samples={sched.samples}")
    print(f"wrote {path}")


def cmd_funnel(cfg: ToolkitConfig, args):
    traj = load_plan(cfg)
    if os.path.exists(cfg.paths["pwa"]) and not args.rebuild_pwa:
        table = load_table(cfg)
    else:
        cmd_pwa(cfg, args)
        table = load_table(cfg)
    policy = fn.synthesize(table, traj, _goal(cfg), fn.default_state_bounds(cfg.plant), cfg.plant, cfg.funnel)
    policy.config_hash = cfg.plan_hash
    policy.diagnostics["funnel_hash"] = cfg.funnel_hash
    margin = float(np.min(fn.support_margin(policy.centers[-1], policy.G[-1], policy.goal)))
    d = policy.diagnostics
    print(f"funnel: recursion residual={d['recursion_residual']:.2e} min sigma(G)={d['sigma_min']:.3e} "
          f"goal containment margin={margin:.3e}")
    if args.verify:
        _verify(cfg, policy, args)
    path = cfg.paths["policy"]
    _ensure_dir(path)
    policy.save(path)
    print(f"wrote {path}")
    return 0


def cmd_verify_funnel(cfg: ToolkitConfig, args):
    policy = load_policy(cfg)
    _verify(cfg, policy, args)
    policy.save(cfg.paths["policy"])
    return 0


def _controller_cfg(cfg: ToolkitConfig, args):
    c = cfg.controller
    if getattr(args, "strategy", None):
        c = type(c)(**{**c.__dict__, "strategy": STRATEGIES[args.strategy]})
    return c


def _artifacts(cfg):
    traj = load_plan(cfg)
    table = load_table(cfg)
    policy = load_policy(cfg)
    return traj, table, policy


def _resolve(cfg, name, horizon):
    table = presets(horizon)
    if name in table:
        return table[name]
    for cond in cfg.conditions:
        if cond.name == name:
            return cond
    raise ConfigError(f"unknown disturbance {name!r}; choose from {sorted(table)} "
                      f"or a condition name from the config")


def cmd_simulate(cfg: ToolkitConfig, args):
    traj, table, policy = _artifacts(cfg)
    ccfg = _controller_cfg(cfg, args)
    spec = _resolve(cfg, args.disturbance, traj.horizon)
    trace = hs.run_trial(traj, policy, table, cfg.plant, ccfg, spec, cfg.max_steps, args.seed,
                         open_loop=args.open_loop)
    path = args.out or cfg.paths["trace"]
    _ensure_dir(path)
    hs.export_trace(trace, path)
    step = f" at step {trace.success_step}" if trace.success else ""
    lat = max(trace.latency, default=0.0) * 1e3
    print(f"{args.disturbance}: {int(trace.success)}/1 {trace.outcome.value}{step} "
          f"strategy={ccfg.strategy.value} max decide {lat:.2f} ms")
    print(f"wrote {path}")
    return 0


def cmd_batch(cfg: ToolkitConfig, args):
    trials = cfg.trials if args.trials is None else args.trials
    if trials < 1:
        raise ConfigError("--trials must be at least 1")
    traj, table, policy = _artifacts(cfg)
    ccfg = _controller_cfg(cfg, args)
    if args.disturbance:
        specs = [_resolve(cfg, d, traj.horizon) for d in args.disturbance]
    else:
        specs = list(cfg.conditions)
    base = cfg.seed if args.seed is None else args.seed
    seeds = [[base + 1000 * ci + k for k in range(trials)] for ci in range(len(specs))]
    report = hs.run_batch(traj, policy, table, cfg.plant, [(s, trials) for s in specs], seeds, ccfg,
                          cfg.max_steps)
    for c in report.conditions:
        print(f"{c.label}: {c.successes}/{c.trials}")
    p50, p95, pmax = np.percentile(np.concatenate([c.latencies for c in report.conditions]) * 1e3,
                                   [50, 95, 100])
    print(f"total: {report.successes}/{report.trials} strategy={report.strategy} "
          f"decide ms p50={p50:.2f} p95={p95:.2f} max={pmax:.2f}")
    path = args.out or cfg.paths["report"]
    _ensure_dir(path)
    json_path = hs.export_report(report, path)
    print(f"wrote {path} and {json_path}")
    return 0


def cmd_export(cfg: ToolkitConfig, args):
    """Write the reference traces: undisturbed and the gripper openings."""
    traj, table, policy = _artifacts(cfg)
    ccfg = _controller_cfg(cfg, args)
    os.makedirs(args.out_dir, exist_ok=True)
    for name in args.disturbance or ["none", "open7", "open14", "rot15"]:
        spec = _resolve(cfg, name, traj.horizon)
        trace = hs.run_trial(traj, policy, table, cfg.plant, ccfg, spec, cfg.max_steps, args.seed)
        path = os.path.join(args.out_dir, f"trace_{name}.csv")
        hs.export_trace(trace, path)
        print(f"{name}: {trace.outcome.value} ({len(trace)} ticks) -> {path}")
    return 0


COMMANDS = {
    "plan": cmd_plan,
    "pwa": cmd_pwa,
    "funnel": cmd_funnel,
    "verify-funnel": cmd_verify_funnel,
    "simulate": cmd_simulate,
    "batch": cmd_batch,
    "export": cmd_export,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="contactfunnel", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="toolkit JSON config (default: the shipped flip task)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("plan", help="solve the nominal trajectory")
    sub.add_parser("pwa", help="linearise every contact mode along the plan")
    p = sub.add_parser("funnel", help="synthesise the funnel policy")
    p.add_argument("--verify", action="store_true", help="also compute the shrink schedule")
    p.add_argument("--rebuild-pwa", action="store_true")
    p.add_argument("--samples", type=int)
    p = sub.add_parser("verify-funnel", help="compute the shrink schedule of a policy")
    p.add_argument("--samples", type=int)
    for name in ("simulate", "batch", "export"):
        p = sub.add_parser(name)
        p.add_argument("--strategy", choices=sorted(STRATEGIES))
        if name == "simulate":
            p.add_argument("--disturbance", default="none")
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--open-loop", action="store_true")
            p.add_argument("--out")
        elif name == "batch":
            p.add_argument("--disturbance", action="append")
            p.add_argument("--trials", type=int)
            p.add_argument("--seed", type=int)
            p.add_argument("--out")
        else:
            p.add_argument("--disturbance", action="append")
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--out-dir", default="artifacts/traces")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ControllerConfigError, hs.ConfigMismatch, to.SpecInvalid) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (to.TrajOptFailure, fn.SynthesisInfeasible, fn.RankDeficient, fn.CertificationFailed,
            NumericalFailure) as exc:
        family = getattr(exc, "family", None)
        extra = f" [{family}]" if family else ""
        print(f"solver failure{extra}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, to.ParseError, to.InvariantViolation, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
