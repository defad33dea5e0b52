"""Dispersed closed-loop rollouts and funnel containment checking.

Rollouts integrate the true nonlinear dynamics under the certificate's
feedback gains with the same integrator the certificate was built from,
vectorized over all trajectories at once. The report records, per step, the
worst Lyapunov value observed (the Monte Carlo envelope) and every
certified-level violation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from funnelkit.sampling import DisturbanceSet, sample_disturbance_boundary
from funnelkit.seeding import rng_stream
from funnelkit.solver import Funnel, InitialSet
from funnelkit.tvlqr import QuadraticCertificate, ReferenceTrajectory


@dataclass
class MCReport:
    """Outcome of a dispersed rollout campaign against certified levels."""

    count: int
    times: np.ndarray
    rho: np.ndarray
    rho_hat: np.ndarray
    ratio_max: np.ndarray
    violations: int
    violations_per_step: np.ndarray
    flagged: int
    policy: str
    initial_mode: str
    seed: int
    wall_clock: float
    trajectories: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        self.rho_hat = np.asarray(self.rho_hat, dtype=float)
        self.ratio_max = np.asarray(self.ratio_max, dtype=float)
        self.violations_per_step = np.asarray(self.violations_per_step, dtype=int)


@dataclass
class ContainmentResult:
    passed: bool
    margin: float
    violations: int


def _ball_interior(L_inv_t: np.ndarray, count: int, rng, boundary: bool = False) -> np.ndarray:
    """Uniform draws from {0.5 x^T M x <= 1} given inv(chol(M))^T, as rows."""
    dim = L_inv_t.shape[0]
    direction = rng.standard_normal((count, dim))
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    direction /= norms
    if boundary:
        radius = np.ones((count, 1))
    else:
        radius = rng.random((count, 1)) ** (1.0 / dim)
    return np.sqrt(2.0) * (radius * direction) @ L_inv_t.T


def _set_transform(M: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(np.asarray(M, dtype=float))
    return np.linalg.inv(L).T


def sample_initial_deviations(M1: InitialSet, count: int, rng, mode: str = "interior"):
    if mode == "zero":
        return np.zeros((count, M1.dim))
    if mode not in ("interior", "boundary"):
        raise ValueError(f"unknown initial mode {mode!r}")
    return _ball_interior(_set_transform(M1.M), count, rng, boundary=(mode == "boundary"))


def _draw_disturbance(U: DisturbanceSet, count: int, rng, policy: str) -> np.ndarray:
    if policy == "none":
        return np.zeros((count, U.dim))
    return _ball_interior(_set_transform(U.U), count, rng)


def _rk4_closed_loop(model, x, x_ref, u_ref, gain, w_cols, dt: float):
    """One vectorized RK4 step with continuous feedback inside the stages."""

    def rate(state_cols):
        dev = [state_cols[i] - x_ref[i] for i in range(len(state_cols))]
        u = []
        for r in range(gain.shape[0]):
            acc = u_ref[r]
            for c in range(gain.shape[1]):
                if gain[r, c]:
                    acc = acc + gain[r, c] * dev[c]
            u.append(acc)
        return model.rates(state_cols, u, w_cols)

    n = len(x)
    k1 = rate(x)
    k2 = rate([x[i] + 0.5 * dt * k1[i] for i in range(n)])
    k3 = rate([x[i] + 0.5 * dt * k2[i] for i in range(n)])
    k4 = rate([x[i] + dt * k3[i] for i in range(n)])
    return [x[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) for i in range(n)]


def rollout_dispersed(
    model,
    traj: ReferenceTrajectory,
    cert: QuadraticCertificate,
    M1: InitialSet,
    U: DisturbanceSet,
    count: int,
    seed: int,
    disturbance_policy: str = "per_step",
    *,
    rho: np.ndarray,
    initial_mode: str = "interior",
    adversarial_candidates: int = 16,
    store_trajectories: bool = False,
) -> MCReport:
    """Propagate dispersed trajectories and score them against levels rho.

    Policies: "hold" draws one interior disturbance per trajectory,
    "per_step" redraws each interval, "boundary_adversarial" picks, per
    interval and trajectory, the shell candidate that maximizes the
    instantaneous Lyapunov rate, and "none" disables disturbances.
    Trajectories that leave the dynamics domain are frozen and counted in
    ``flagged`` instead of aborting the batch.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if disturbance_policy not in ("hold", "per_step", "boundary_adversarial", "none"):
        raise ValueError(f"unknown disturbance policy {disturbance_policy!r}")
    rho = np.asarray(rho, dtype=float)
    N = traj.n_steps
    n = traj.n_states
    if rho.shape != (N,):
        raise ValueError("rho must supply one level per time knot")
    t0 = time.perf_counter()

    rng_init = rng_stream(seed, "mc", "initial")
    rng_dist = rng_stream(seed, "mc", "disturbance")
    dev0 = sample_initial_deviations(M1, count, rng_init, initial_mode)
    X = [traj.states[0][i] + dev0[:, i].copy() for i in range(n)]
    active = np.ones(count, dtype=bool)

    rho_hat = np.zeros(N)
    violations_per_step = np.zeros(N, dtype=int)
    stored = np.empty((count, N, n)) if store_trajectories else None

    def record(k):
        dev = np.column_stack([X[i] - traj.states[k][i] for i in range(n)])
        if stored is not None:
            stored[:, k, :] = dev
        V = 0.5 * np.einsum("ij,jk,ik->i", dev, cert.P[k], dev)
        V = np.where(active, V, 0.0)
        rho_hat[k] = float(np.max(V)) if count else 0.0
        violations_per_step[k] = int(np.sum(V > rho[k]))

    record(0)
    held = _draw_disturbance(U, count, rng_dist, disturbance_policy) \
        if disturbance_policy == "hold" else None

    for k in range(N - 1):
        dt = traj.dt(k)
        if disturbance_policy == "hold":
            w_rows = held
        elif disturbance_policy in ("per_step", "none"):
            w_rows = _draw_disturbance(U, count, rng_dist, disturbance_policy)
        else:
            w_rows = _adversarial_rows(
                model, traj, cert, U, X, k, count, adversarial_candidates, rng_dist
            )
        w_cols = [w_rows[:, j] for j in range(U.dim)]
        new_X = _rk4_closed_loop(
            model, X, traj.states[k], traj.control(k), cert.K[k], w_cols, dt
        )
        finite = np.ones(count, dtype=bool)
        for i in range(n):
            finite &= np.isfinite(new_X[i])
        ok = finite & np.asarray(model.valid_mask(new_X), dtype=bool)
        for i in range(n):
            X[i] = np.where(active & ok, new_X[i], X[i])
        active &= ok
        record(k + 1)

    flagged = int(count - np.sum(active))
    return MCReport(
        count=count,
        times=traj.times,
        rho=rho,
        rho_hat=rho_hat,
        ratio_max=rho_hat / rho,
        violations=int(np.sum(violations_per_step)),
        violations_per_step=violations_per_step,
        flagged=flagged,
        policy=disturbance_policy,
        initial_mode=initial_mode,
        seed=seed,
        wall_clock=time.perf_counter() - t0,
        trajectories=stored,
    )


def _adversarial_rows(model, traj, cert, U, X, k, count, n_candidates, rng):
    """Per trajectory, the shell disturbance with the largest Lyapunov rate."""
    candidates = sample_disturbance_boundary(U, n_candidates, rng)
    n = traj.n_states
    dev = np.column_stack([X[i] - traj.states[k][i] for i in range(n)])
    weights = dev @ cert.P[k].T
    u_ref = traj.control(k)
    gain = cert.K[k]
    u = []
    for r in range(gain.shape[0]):
        acc = np.full(count, u_ref[r])
        for c in range(gain.shape[1]):
            if gain[r, c]:
                acc = acc + gain[r, c] * dev[:, c]
        u.append(acc)
    best_val = np.full(count, -np.inf)
    best_idx = np.zeros(count, dtype=int)
    x_cols = [X[i] for i in range(n)]
    for c_idx in range(n_candidates):
        w_cols = [np.full(count, candidates[c_idx, j]) for j in range(U.dim)]
        rates = model.rates(x_cols, u, w_cols)
        vdot = np.zeros(count)
        for i in range(n):
            vdot += weights[:, i] * np.asarray(rates[i])
        better = vdot > best_val
        best_val = np.where(better, vdot, best_val)
        best_idx = np.where(better, c_idx, best_idx)
    return candidates[best_idx]


def containment_check(funnel: Funnel, report: MCReport) -> ContainmentResult:
    """Pass iff no rollout ever exceeded its certified level."""
    if funnel.times.shape != report.times.shape or not np.allclose(
        funnel.times, report.times, rtol=0, atol=1e-12
    ):
        raise ValueError("funnel and report are on different time grids")
    if not np.allclose(funnel.rho, report.rho, rtol=1e-12, atol=0):
        raise ValueError("report was scored against different levels than the funnel")
    margin = float(np.max(report.rho_hat / funnel.rho))
    return ContainmentResult(
        passed=report.violations == 0, margin=margin, violations=report.violations
    )


def brute_force_envelope(report: MCReport, cert: QuadraticCertificate) -> np.ndarray:
    """Recompute the envelope from stored trajectories (oracle for tests)."""
    if report.trajectories is None:
        raise ValueError("report was run without store_trajectories")
    N = report.times.shape[0]
    out = np.zeros(N)
    for k in range(N):
        dev = report.trajectories[:, k, :]
        V = 0.5 * np.einsum("ij,jk,ik->i", dev, cert.P[k], dev)
        out[k] = float(np.max(V))
    return out
