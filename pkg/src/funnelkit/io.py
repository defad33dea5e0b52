"""File formats: canonical JSON schemas, CSV series, and run configuration.

All emitted JSON goes through one canonical serializer (sorted keys, 17
significant digits, fixed separators) so identical inputs produce identical
bytes. Every file carries a schema tag and loaders refuse unknown tags.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from funnelkit.montecarlo import MCReport
from funnelkit.solver import ConfigError, Funnel, SolverConfig
from funnelkit.tvlqr import ReferenceTrajectory

TRAJECTORY_SCHEMA = "funnelkit.trajectory/1"
FUNNEL_SCHEMA = "funnelkit.funnel/1"
MC_REPORT_SCHEMA = "funnelkit.mc_report/1"
RHO_SERIES_SCHEMA = "funnelkit.rho_series/1"
SAMPLES_SCHEMA = "funnelkit.samples/1"
VDOT_SLICE_SCHEMA = "funnelkit.vdot_slice/1"


class SchemaError(ValueError):
    """A file failed schema validation; message names the field or line."""


# ----- canonical JSON -----


def _canonical_tokens(obj, out: list, path: str):
    if obj is None or isinstance(obj, bool):
        out.append("null" if obj is None else ("true" if obj else "false"))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ValueError(f"non-finite number at {path}")
        out.append(format(x, ".17g"))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=True))
    elif isinstance(obj, dict):
        out.append("{")
        for i, key in enumerate(sorted(obj)):
            if not isinstance(key, str):
                raise TypeError(f"non-string key at {path}")
            if i:
                out.append(",")
            out.append(json.dumps(key, ensure_ascii=True))
            out.append(":")
            _canonical_tokens(obj[key], out, f"{path}.{key}")
        out.append("}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else list(obj)
        out.append("[")
        for i, item in enumerate(seq):
            if i:
                out.append(",")
            _canonical_tokens(item, out, f"{path}[{i}]")
        out.append("]")
    else:
        raise TypeError(f"unserializable value of type {type(obj).__name__} at {path}")


def canonical_json(obj) -> str:
    """Deterministic JSON text: sorted keys, 17-significant-digit floats."""
    out: list[str] = []
    _canonical_tokens(obj, out, "$")
    return "".join(out) + "\n"


def _load_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise SchemaError(f"cannot read {path}: {err}") from err
    try:
        return json.loads(text)
    except json.JSONDecodeError as err:
        raise SchemaError(f"{path}: invalid JSON at line {err.lineno}, column {err.colno}") from err


def _require(data: dict, key: str, path) -> object:
    if key not in data:
        raise SchemaError(f"{path}: missing field {key!r}")
    return data[key]


def _check_schema(data: dict, expected: str, path):
    tag = _require(data, "schema", path)
    if tag != expected:
        raise SchemaError(f"{path}: schema {tag!r} not supported (expected {expected!r})")


def _matrix(data, path: str, field_name: str) -> np.ndarray:
    try:
        arr = np.asarray(data, dtype=float)
    except (TypeError, ValueError) as err:
        raise SchemaError(f"{path}: field {field_name!r} is not numeric") from err
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"{path}: field {field_name!r} has non-finite entries")
    return arr


# ----- trajectory files -----


def save_trajectory(traj: ReferenceTrajectory, path) -> None:
    doc = {
        "schema": TRAJECTORY_SCHEMA,
        "times": traj.times,
        "states": traj.states,
        "controls": traj.controls,
    }
    Path(path).write_text(canonical_json(doc))


def load_trajectory(path) -> ReferenceTrajectory:
    data = _load_json(path)
    _check_schema(data, TRAJECTORY_SCHEMA, path)
    times = _matrix(_require(data, "times", path), path, "times")
    states = _matrix(_require(data, "states", path), path, "states")
    controls = _matrix(_require(data, "controls", path), path, "controls")
    try:
        return ReferenceTrajectory(times=times, states=states, controls=controls)
    except ValueError as err:
        raise SchemaError(f"{path}: {err}") from err


# ----- funnel files -----


def save_funnel(funnel: Funnel, path) -> None:
    doc = {
        "schema": FUNNEL_SCHEMA,
        "times": funnel.times,
        "rho": funnel.rho,
        "P": funnel.P,
        "x_nominal": funnel.x_nominal,
        "diagnostics": funnel.diagnostics,
    }
    Path(path).write_text(canonical_json(doc))


def load_funnel(path) -> Funnel:
    data = _load_json(path)
    _check_schema(data, FUNNEL_SCHEMA, path)
    times = _matrix(_require(data, "times", path), path, "times")
    rho = _matrix(_require(data, "rho", path), path, "rho")
    P = _matrix(_require(data, "P", path), path, "P")
    x_nominal = _matrix(_require(data, "x_nominal", path), path, "x_nominal")
    if np.any(rho <= 0):
        raise SchemaError(f"{path}: field 'rho' must be positive at every step")
    try:
        return Funnel(times=times, rho=rho, P=P, x_nominal=x_nominal,
                      diagnostics=data.get("diagnostics", {}))
    except ValueError as err:
        raise SchemaError(f"{path}: {err}") from err


# ----- MC report files -----


def save_mc_report(report: MCReport, path) -> None:
    doc = {
        "schema": MC_REPORT_SCHEMA,
        "count": report.count,
        "times": report.times,
        "rho": report.rho,
        "rho_hat": report.rho_hat,
        "ratio_max": report.ratio_max,
        "violations": report.violations,
        "violations_per_step": report.violations_per_step,
        "flagged": report.flagged,
        "policy": report.policy,
        "initial_mode": report.initial_mode,
        "seed": report.seed,
        "wall_clock": report.wall_clock,
    }
    Path(path).write_text(canonical_json(doc))


def load_mc_report(path) -> MCReport:
    data = _load_json(path)
    _check_schema(data, MC_REPORT_SCHEMA, path)
    return MCReport(
        count=int(_require(data, "count", path)),
        times=_matrix(_require(data, "times", path), path, "times"),
        rho=_matrix(_require(data, "rho", path), path, "rho"),
        rho_hat=_matrix(_require(data, "rho_hat", path), path, "rho_hat"),
        ratio_max=_matrix(_require(data, "ratio_max", path), path, "ratio_max"),
        violations=int(_require(data, "violations", path)),
        violations_per_step=np.asarray(_require(data, "violations_per_step", path), dtype=int),
        flagged=int(_require(data, "flagged", path)),
        policy=str(_require(data, "policy", path)),
        initial_mode=str(_require(data, "initial_mode", path)),
        seed=int(_require(data, "seed", path)),
        wall_clock=float(_require(data, "wall_clock", path)),
    )


# ----- CSV series -----


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def write_rho_series_csv(path, funnel: Funnel, report: MCReport) -> None:
    """Per-step series consumed by the plotting layer: certified level,
    Monte Carlo envelope, and violation count. Step indices are 1-based."""
    lines = [f"# schema: {RHO_SERIES_SCHEMA}", "k,t,rho,rho_mc,violations"]
    for k in range(funnel.n_steps):
        lines.append(",".join([
            str(k + 1), _fmt(funnel.times[k]), _fmt(funnel.rho[k]),
            _fmt(report.rho_hat[k]), str(int(report.violations_per_step[k])),
        ]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_samples_csv(path, step: int, states: np.ndarray, dists: np.ndarray,
                      provenance: list[str]) -> None:
    """Stage samples, state deviation coordinates then disturbances.
    ``step`` is written 1-based to match the series file."""
    states = np.atleast_2d(states)
    dists = np.atleast_2d(dists)
    n, p = states.shape[1], dists.shape[1]
    header = ["k"] + [f"x{i}" for i in range(n)] + [f"w{j}" for j in range(p)] + ["provenance"]
    lines = [f"# schema: {SAMPLES_SCHEMA}", ",".join(header)]
    for i in range(states.shape[0]):
        row = [str(step + 1)]
        row += [_fmt(v) for v in states[i]]
        row += [_fmt(v) for v in dists[i]]
        row.append(provenance[i])
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_vdot_slice_csv(path, step: int, axes: tuple[int, int],
                         u: np.ndarray, v: np.ndarray, vdot: np.ndarray) -> None:
    """Lyapunov-rate values on a 2-D deviation slice (other coordinates 0)."""
    lines = [
        f"# schema: {VDOT_SLICE_SCHEMA}",
        f"# step: {step + 1}",
        f"# axes: {axes[0]},{axes[1]}",
        "u,v,vdot",
    ]
    for ui, vi, di in zip(np.ravel(u), np.ravel(v), np.ravel(vdot)):
        lines.append(f"{_fmt(ui)},{_fmt(vi)},{_fmt(di)}")
    Path(path).write_text("\n".join(lines) + "\n")


# ----- run configuration -----


@dataclass
class McSettings:
    count: int = 10000
    policy: str = "per_step"
    initial_mode: str = "interior"
    adversarial_candidates: int = 16

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("mc.count must be >= 1")
        if self.policy not in ("hold", "per_step", "boundary_adversarial", "none"):
            raise ConfigError(f"unknown mc.policy {self.policy!r}")
        if self.initial_mode not in ("interior", "boundary", "zero"):
            raise ConfigError(f"unknown mc.initial_mode {self.initial_mode!r}")


@dataclass
class RunConfig:
    """Parsed, validated run configuration."""

    system: str
    seed: int
    solver: SolverConfig = field(default_factory=SolverConfig)
    mc: McSettings = field(default_factory=McSettings)
    model: dict = field(default_factory=dict)
    tvlqr: dict = field(default_factory=dict)
    initial_set: np.ndarray | None = None
    disturbance: np.ndarray | None = None
    goal: np.ndarray | None = None
    trajectory_path: str | None = None
    out: str | None = None
    export: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.system not in ("entry", "dubins", "external"):
            raise ConfigError(f"unknown system {self.system!r}")
        if not isinstance(self.seed, (int, np.integer)):
            raise ConfigError("seed must be an integer (no wall-clock seeding)")
        if self.system == "external" and not self.trajectory_path:
            raise ConfigError("external system requires a trajectory path")


_KNOWN_TOP_KEYS = {
    "system", "seed", "solver", "mc", "model", "tvlqr", "initial_set",
    "disturbance", "goal", "trajectory", "out", "export",
}


def config_from_dict(data: dict, base_dir: Path | None = None, path="config") -> RunConfig:
    unknown = set(data) - _KNOWN_TOP_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown fields {sorted(unknown)}")
    if "system" not in data:
        raise ConfigError(f"{path}: missing field 'system'")
    if "seed" not in data:
        raise ConfigError(f"{path}: missing field 'seed' (explicit seeding required)")
    try:
        solver = SolverConfig(**data.get("solver", {}))
    except TypeError as err:
        raise ConfigError(f"{path}: bad solver section: {err}") from err
    try:
        mc = McSettings(**data.get("mc", {}))
    except TypeError as err:
        raise ConfigError(f"{path}: bad mc section: {err}") from err

    def opt_matrix(key):
        if key not in data or data[key] is None:
            return None
        arr = _matrix(data[key], path, key)
        if arr.ndim == 1:
            arr = np.diag(arr)
        return arr

    traj_path = data.get("trajectory")
    if traj_path and base_dir is not None and not Path(traj_path).is_absolute():
        traj_path = str(base_dir / traj_path)
    return RunConfig(
        system=str(data["system"]),
        seed=int(data["seed"]),
        solver=solver,
        mc=mc,
        model=dict(data.get("model", {})),
        tvlqr=dict(data.get("tvlqr", {})),
        initial_set=opt_matrix("initial_set"),
        disturbance=opt_matrix("disturbance"),
        goal=opt_matrix("goal"),
        trajectory_path=traj_path,
        out=data.get("out"),
        export=dict(data.get("export", {})),
    )


def load_config(path) -> RunConfig:
    data = _load_json(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    try:
        return config_from_dict(data, base_dir=Path(path).resolve().parent, path=str(path))
    except SchemaError as err:
        raise ConfigError(str(err)) from err
