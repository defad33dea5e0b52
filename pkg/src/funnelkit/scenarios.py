"""Demo scenario assembly: models, reference trajectories, and certificates.

A scenario bundles everything a funnel run needs. The two packaged demos are
a Mars atmospheric-entry vehicle with uncertain density coefficients and a
Dubins car with additive rate disturbances; both are described entirely by
their JSON configs so the numbers stay out of the code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from funnelkit.dynamics import (
    ENTRY_DISTURBANCE_SLOTS,
    AtmosphereModel,
    DubinsModel,
    EntryModel,
    EntryParams,
    EntryState,
)
from funnelkit.io import RunConfig, config_from_dict, load_trajectory
from funnelkit.sampling import DisturbanceSet
from funnelkit.solver import ConfigError, InitialSet
from funnelkit.tvlqr import QuadraticCertificate, ReferenceTrajectory, build_certificate, rk4_step


@dataclass
class Scenario:
    """A ready-to-solve problem instance."""

    name: str
    model: object
    trajectory: ReferenceTrajectory
    certificate: QuadraticCertificate
    initial_set: InitialSet
    disturbance: DisturbanceSet
    config: RunConfig


def packaged_config_names() -> list[str]:
    files = resources.files("funnelkit") / "configs"
    return sorted(p.name[: -len(".json")] for p in files.iterdir() if p.name.endswith(".json"))


def load_packaged_config(name: str) -> RunConfig:
    """RunConfig for a packaged demo, e.g. ``entry_demo`` or ``dubins_demo``."""
    path = resources.files("funnelkit") / "configs" / f"{name}.json"
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(
            f"no packaged config {name!r}; available: {packaged_config_names()}"
        ) from None
    return config_from_dict(data, path=f"configs/{name}.json")


def integrate_reference(model, x0, controls, dt) -> ReferenceTrajectory:
    """Roll the undisturbed model forward with held controls per step."""
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    if controls.shape[0] == 1 and np.ndim(dt) == 0:
        raise ValueError("need one control row per step")
    n_steps = controls.shape[0] + 1
    dts = np.full(n_steps - 1, float(dt)) if np.ndim(dt) == 0 else np.asarray(dt, dtype=float)

    def f(x, u):
        return model.rates(x, u, None)

    states = np.empty((n_steps, model.n_states))
    states[0] = np.asarray(x0, dtype=float)
    times = np.concatenate([[0.0], np.cumsum(dts)])
    for k in range(n_steps - 1):
        nxt = rk4_step(f, list(states[k]), controls[k], dts[k])
        states[k + 1] = [float(v) for v in nxt]
    return ReferenceTrajectory(times=times, states=states, controls=controls)


def _weight_matrix(spec, size: int, name: str) -> np.ndarray:
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 1:
        arr = np.diag(arr)
    if arr.shape != (size, size):
        raise ConfigError(f"tvlqr.{name} must be {size}x{size} (or a diagonal of length {size})")
    return arr


def _tvlqr_weights(tvlqr: dict, n: int, m: int):
    if "Q" not in tvlqr or "R" not in tvlqr:
        raise ConfigError("tvlqr section requires Q and R")
    Q = _weight_matrix(tvlqr["Q"], n, "Q")
    R = _weight_matrix(tvlqr["R"], m, "R")
    if "Qf" in tvlqr:
        Qf = _weight_matrix(tvlqr["Qf"], n, "Qf")
    else:
        Qf = float(tvlqr.get("Qf_scale", 1.0)) * Q
    return Q, R, Qf


def _entry_model(model_cfg: dict) -> EntryModel:
    try:
        atmo = AtmosphereModel(**model_cfg["atmosphere"])
        slots = model_cfg.get("disturbance_slots", list(ENTRY_DISTURBANCE_SLOTS))
        unknown = set(slots) - set(ENTRY_DISTURBANCE_SLOTS)
        if unknown:
            raise ConfigError(f"unknown disturbance slots {sorted(unknown)}")
        mask = tuple(name in slots for name in ENTRY_DISTURBANCE_SLOTS)
        params = EntryParams(
            mu=model_cfg["mu"],
            planet_radius=model_cfg["planet_radius"],
            mass=model_cfg["mass"],
            ref_area=model_cfg["ref_area"],
            lift_coeff=model_cfg["lift_coeff"],
            drag_coeff=model_cfg["drag_coeff"],
            atmosphere=atmo,
            omega_planet=model_cfg.get("omega_planet", 0.0),
            disturbance_mask=mask,
        )
    except KeyError as err:
        raise ConfigError(f"entry model config missing field {err.args[0]!r}") from err
    return EntryModel(params)


def _entry_initial_state(cfg: dict, params: EntryParams) -> np.ndarray:
    try:
        state = EntryState(
            r=params.planet_radius + cfg["altitude"],
            theta=cfg.get("longitude", 0.0),
            phi=cfg.get("latitude", 0.0),
            V=cfg["speed"],
            gamma=cfg["flight_path"],
            psi=cfg.get("heading", 0.0),
        )
    except KeyError as err:
        raise ConfigError(f"entry initial_state missing field {err.args[0]!r}") from err
    return state.to_array()


def _build_entry(config: RunConfig) -> Scenario:
    model = _entry_model(config.model)
    cfg = config.model
    if config.trajectory_path:
        traj = load_trajectory(config.trajectory_path)
    else:
        for key in ("initial_state", "bank", "dt", "steps"):
            if key not in cfg:
                raise ConfigError(f"entry model config missing field {key!r}")
        x0 = _entry_initial_state(cfg["initial_state"], model.params)
        bank = np.asarray(cfg["bank"], dtype=float)
        n_steps = int(cfg["steps"])
        if bank.ndim == 0:
            controls = np.full((n_steps - 1, 1), float(bank))
        else:
            controls = bank.reshape(-1, 1)
            if controls.shape[0] != n_steps - 1:
                raise ConfigError("bank schedule must have steps-1 entries")
        traj = integrate_reference(model, x0, controls, cfg["dt"])
    return _finish(config, "entry", model, traj)


def _build_dubins(config: RunConfig) -> Scenario:
    cfg = config.model
    mask = tuple(cfg.get("disturbance_mask", (True, True, True)))
    model = DubinsModel(speed=cfg.get("speed", 1.0), disturbance_mask=mask)
    if config.trajectory_path:
        traj = load_trajectory(config.trajectory_path)
    else:
        for key in ("turn_rate", "dt", "steps"):
            if key not in cfg:
                raise ConfigError(f"dubins model config missing field {key!r}")
        x0 = np.asarray(cfg.get("initial_state", [0.0, 0.0, 0.0]), dtype=float)
        turn = np.asarray(cfg["turn_rate"], dtype=float)
        n_steps = int(cfg["steps"])
        if turn.ndim == 0:
            controls = np.full((n_steps - 1, 1), float(turn))
        else:
            controls = turn.reshape(-1, 1)
            if controls.shape[0] != n_steps - 1:
                raise ConfigError("turn_rate schedule must have steps-1 entries")
        traj = integrate_reference(model, x0, controls, cfg["dt"])
    return _finish(config, "dubins", model, traj)


def _finish(config: RunConfig, name: str, model, traj: ReferenceTrajectory) -> Scenario:
    n, m = model.n_states, model.n_controls
    if traj.n_states != n:
        raise ConfigError(f"trajectory has {traj.n_states} states, model has {n}")
    Q, R, Qf = _tvlqr_weights(config.tvlqr, n, m)
    cert = build_certificate(model, traj, Q, R, Qf)
    if config.initial_set is None:
        raise ConfigError("config requires an initial_set matrix")
    if config.disturbance is None:
        raise ConfigError("config requires a disturbance matrix")
    M1 = InitialSet(config.initial_set)
    if M1.M.shape != (n, n):
        raise ConfigError(f"initial_set must be {n}x{n}")
    U = DisturbanceSet(config.disturbance)
    if U.dim != model.n_dist:
        raise ConfigError(
            f"disturbance matrix is {U.dim}x{U.dim}, model has {model.n_dist} channels"
        )
    return Scenario(name=name, model=model, trajectory=traj, certificate=cert,
                    initial_set=M1, disturbance=U, config=config)


def build_scenario(config: RunConfig) -> Scenario:
    """Assemble the model, reference, and TVLQR certificate for a config."""
    if config.system == "entry":
        return _build_entry(config)
    if config.system == "dubins":
        return _build_dubins(config)
    # external: user trajectory with the model kind named in the model section
    kind = config.model.get("kind")
    if kind == "entry":
        return _finish(config, "external",
                       _entry_model(config.model), load_trajectory(config.trajectory_path))
    if kind == "dubins":
        mask = tuple(config.model.get("disturbance_mask", (True, True, True)))
        model = DubinsModel(speed=config.model.get("speed", 1.0), disturbance_mask=mask)
        return _finish(config, "external", model, load_trajectory(config.trajectory_path))
    raise ConfigError("external system requires model.kind of 'entry' or 'dubins'")
