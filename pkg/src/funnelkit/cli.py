"""Command line interface.

Subcommands:
  funnel forward|backward   compute a funnel for a configured scenario
  validate mc               Monte Carlo containment check of a funnel file
  demo entry|dubins         packaged end-to-end runs (funnel + validation)
  export csv                CSV series for the plotting layer

Exit codes: 0 success, 1 computation failure (infeasible stage, containment
violation, diverged rollout), 2 configuration or usage errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from funnelkit import io
from funnelkit.dynamics import DomainError
from funnelkit.montecarlo import containment_check, rollout_dispersed
from funnelkit.sampling import build_stage_batch
from funnelkit.scenarios import Scenario, build_scenario, load_packaged_config
from funnelkit.sdp import SdpBackendError
from funnelkit.seeding import rng_stream
from funnelkit.solver import (
    ConfigError,
    Funnel,
    InitialSet,
    StageInfeasibleError,
    _stage_polynomials,
    run_backward,
    run_forward,
    stage_vdot_values,
)

USAGE_ERROR = 2
RUN_ERROR = 1


def _apply_overrides(config, args):
    if getattr(args, "seed", None) is not None:
        config.seed = int(args.seed)
    solver = config.solver
    if getattr(args, "samples_multiplier", None) is not None:
        solver.sample_multiplier = float(args.samples_multiplier)
    if getattr(args, "eps", None) is not None:
        solver.eps = float(args.eps)
    if getattr(args, "degree", None) is not None:
        solver.basis_degree = int(args.degree)
    solver.__post_init__()
    if getattr(args, "out", None) is not None:
        config.out = args.out
    return config


def _load_config(args):
    if getattr(args, "demo", None):
        config = load_packaged_config(args.demo)
    else:
        if not args.config:
            raise ConfigError("--config is required (or use the demo subcommand)")
        config = io.load_config(args.config)
    return _apply_overrides(config, args)


def _out_dir(config, default_name: str) -> Path:
    out = Path(config.out) if config.out else Path(f"funnelkit_out/{default_name}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _compute_funnel(scenario: Scenario, mode: str) -> Funnel:
    config = scenario.config
    if mode == "forward":
        return run_forward(scenario.model, scenario.trajectory, scenario.certificate,
                           scenario.initial_set, scenario.disturbance, config.solver,
                           seed=config.seed)
    if config.goal is None:
        raise ConfigError("backward mode requires a goal matrix in the config")
    return run_backward(scenario.model, scenario.trajectory, scenario.certificate,
                        InitialSet(config.goal), scenario.disturbance, config.solver,
                        seed=config.seed)


def _run_mc(scenario: Scenario, funnel: Funnel):
    config = scenario.config
    report = rollout_dispersed(
        scenario.model, scenario.trajectory, scenario.certificate,
        scenario.initial_set, scenario.disturbance,
        config.mc.count, config.seed, config.mc.policy,
        rho=funnel.rho, initial_mode=config.mc.initial_mode,
        adversarial_candidates=config.mc.adversarial_candidates,
    )
    return report, containment_check(funnel, report)


def _export_stage_csv(scenario: Scenario, funnel: Funnel, out: Path,
                      k: int, axes: tuple[int, int], grid: int) -> list[Path]:
    """Regenerate the stage-k samples and the rate values on a 2-D slice.

    ``k`` is the 1-based step index used in all emitted CSV.
    """
    config = scenario.config
    traj, cert = scenario.trajectory, scenario.certificate
    step = k - 1
    if not 0 <= step < traj.n_steps - 1:
        raise ConfigError(f"step k={k} outside [1, {traj.n_steps - 1}]")
    n = traj.n_states
    if not (0 <= axes[0] < n and 0 <= axes[1] < n) or axes[0] == axes[1]:
        raise ConfigError(f"axes {axes} must be two distinct state indices below {n}")
    step_diag = funnel.diagnostics.get("steps", [])
    requested = sample_tag = None
    for entry in step_diag:
        if entry.get("step") == step:
            requested = entry.get("requested_samples")
            sample_tag = entry.get("sample_tag")
    if requested is None:
        raise ConfigError(
            f"funnel diagnostics carry no sample count for step {step}; "
            "export needs the funnel file produced by this package"
        )
    poly = _stage_polynomials(scenario.model, traj, cert, step,
                              config.solver.resolved_stage_degree())
    if sample_tag is None:
        streams = (rng_stream(config.seed, "stage", step, "states"),
                   rng_stream(config.seed, "stage", step, "dists"))
    else:
        streams = (rng_stream(config.seed, "backward", step, sample_tag, "states"),
                   rng_stream(config.seed, "backward", step, sample_tag, "dists"))
    batch = build_stage_batch(
        step, cert.P[step], funnel.rho[step], scenario.disturbance, requested,
        streams[0], streams[1], poly, critical=config.solver.critical_samples,
        critical_limit=config.solver.critical_scan_limit,
    )
    samples_path = out / f"samples_k{step + 1}.csv"
    io.write_samples_csv(samples_path, step, batch.states, batch.dists,
                         batch.dist_provenance)

    P_k = cert.P[step]
    rho_k = float(funnel.rho[step])
    spans = [1.15 * np.sqrt(2.0 * rho_k / P_k[a, a]) for a in axes]
    u = np.linspace(-spans[0], spans[0], grid)
    v = np.linspace(-spans[1], spans[1], grid)
    uu, vv = np.meshgrid(u, v)
    states = np.zeros((uu.size, n))
    states[:, axes[0]] = uu.ravel()
    states[:, axes[1]] = vv.ravel()
    vdot = stage_vdot_values(poly, P_k, states)
    grid_path = out / f"vdot_slice_k{step + 1}.csv"
    io.write_vdot_slice_csv(grid_path, step, axes, uu, vv, vdot)
    return [samples_path, grid_path]


def _print_funnel_summary(funnel: Funnel):
    rho = funnel.rho
    print(f"funnel: {funnel.n_steps} knots, rho[0] = {rho[0]:.6g}, "
          f"rho[-1] = {rho[-1]:.6g}, min = {rho.min():.6g}, max = {rho.max():.6g}")


def _cmd_funnel(args) -> int:
    config = _load_config(args)
    scenario = build_scenario(config)
    out = _out_dir(config, f"{scenario.name}_{args.mode}")
    funnel = _compute_funnel(scenario, args.mode)
    io.save_trajectory(scenario.trajectory, out / "trajectory.json")
    io.save_funnel(funnel, out / "funnel.json")
    _print_funnel_summary(funnel)
    print(f"wrote {out / 'funnel.json'}")
    return 0


def _cmd_validate(args) -> int:
    config = _load_config(args)
    scenario = build_scenario(config)
    funnel = io.load_funnel(args.funnel)
    out = _out_dir(config, f"{scenario.name}_mc")
    report, result = _run_mc(scenario, funnel)
    io.save_mc_report(report, out / "mc_report.json")
    io.write_rho_series_csv(out / "rho_series.csv", funnel, report)
    print(f"mc: {report.count} rollouts, {report.violations} violations, "
          f"worst margin {result.margin:.6g}, {report.flagged} flagged")
    print(f"wrote {out / 'rho_series.csv'}")
    return 0 if result.passed else RUN_ERROR


def _cmd_demo(args) -> int:
    config = _load_config(args)
    scenario = build_scenario(config)
    out = _out_dir(config, args.demo)
    funnel = _compute_funnel(scenario, "forward")
    io.save_trajectory(scenario.trajectory, out / "trajectory.json")
    io.save_funnel(funnel, out / "funnel.json")
    _print_funnel_summary(funnel)
    report, result = _run_mc(scenario, funnel)
    io.save_mc_report(report, out / "mc_report.json")
    io.write_rho_series_csv(out / "rho_series.csv", funnel, report)
    print(f"mc: {report.count} rollouts, {report.violations} violations, "
          f"worst margin {result.margin:.6g}, {report.flagged} flagged")
    export = config.export
    if export:
        step = int(export.get("roots_step", 7))
        axes = tuple(export.get("axes", (0, 1)))
        grid = int(export.get("grid", 41))
        for path in _export_stage_csv(scenario, funnel, out, step, axes, grid):
            print(f"wrote {path}")
    print(f"outputs in {out}")
    return 0 if result.passed else RUN_ERROR


def _cmd_export(args) -> int:
    config = _load_config(args)
    scenario = build_scenario(config)
    funnel = io.load_funnel(args.funnel)
    out = _out_dir(config, f"{scenario.name}_export")
    wrote = []
    if args.mc:
        report = io.load_mc_report(args.mc)
        series = out / "rho_series.csv"
        io.write_rho_series_csv(series, funnel, report)
        wrote.append(series)
    if args.vdot_slice is not None:
        axes = tuple(int(a) for a in args.axes.split(",")) if args.axes else None
        if axes is None:
            axes = tuple(config.export.get("axes", (0, 1)))
        if len(axes) != 2:
            raise ConfigError("--axes takes two comma-separated state indices")
        grid = int(config.export.get("grid", 41))
        wrote += _export_stage_csv(scenario, funnel, out, int(args.vdot_slice), axes, grid)
    if not wrote:
        raise ConfigError("nothing to export: pass --mc and/or --vdot-slice")
    for path in wrote:
        print(f"wrote {path}")
    return 0


def _add_common(parser: argparse.ArgumentParser, config_required: bool = True):
    if config_required:
        parser.add_argument("--config", required=False, help="run configuration JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--samples-multiplier", type=float, default=None,
                        help="override the sample-count safety factor")
    parser.add_argument("--eps", type=float, default=None,
                        help="override the relative decrease margin")
    parser.add_argument("--degree", type=int, default=None,
                        help="override the Gram basis degree")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="funnelkit",
        description="Sampling-based invariant funnel certification along trajectories",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_funnel = sub.add_parser("funnel", help="compute a funnel")
    p_funnel.add_argument("mode", choices=("forward", "backward"))
    _add_common(p_funnel)
    p_funnel.set_defaults(handler=_cmd_funnel)

    p_validate = sub.add_parser("validate", help="validate a funnel")
    p_validate.add_argument("what", choices=("mc",))
    p_validate.add_argument("--funnel", required=True, help="funnel JSON to validate")
    _add_common(p_validate)
    p_validate.set_defaults(handler=_cmd_validate)

    p_demo = sub.add_parser("demo", help="run a packaged demo end to end")
    p_demo.add_argument("demo", choices=("entry", "dubins"),
                        help="which packaged scenario to run")
    _add_common(p_demo, config_required=False)
    p_demo.set_defaults(handler=_cmd_demo, config=None)

    p_export = sub.add_parser("export", help="export CSV for the plotting layer")
    p_export.add_argument("what", choices=("csv",))
    p_export.add_argument("--funnel", required=True, help="funnel JSON to export from")
    p_export.add_argument("--mc", default=None, help="MC report JSON for the rho series")
    p_export.add_argument("--vdot-slice", type=int, default=None,
                          help="1-based step index for the rate-slice grid and samples")
    p_export.add_argument("--axes", default=None,
                          help="two comma-separated state indices for the slice")
    _add_common(p_export)
    p_export.set_defaults(handler=_cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    demo = getattr(args, "demo", None)
    if demo:
        args.demo = {"entry": "entry_demo", "dubins": "dubins_demo"}[demo]
    try:
        return args.handler(args)
    except (ConfigError, io.SchemaError) as err:
        print(f"error: {err}", file=sys.stderr)
        return USAGE_ERROR
    except StageInfeasibleError as err:
        print(f"error: {err}", file=sys.stderr)
        if err.partial is not None:
            print(f"(funnel was feasible through step {err.step - 1})", file=sys.stderr)
        return RUN_ERROR
    except (DomainError, SdpBackendError) as err:
        print(f"error: {err}", file=sys.stderr)
        return RUN_ERROR


if __name__ == "__main__":
    sys.exit(main())
