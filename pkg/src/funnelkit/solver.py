"""Funnel computation pipeline.

Forward sweep: certify the initial level rho_1 against the admissible
initial set, then for each interval solve a sampled Gram SDP that returns
the smallest rho_{k+1} for which the Lyapunov decrease condition holds with
margin on the slice boundary under every admissible disturbance candidate
(boundary of W plus interior stationary points). Backward sweep mirrors it:
largest rho_k compatible with a known rho_{k+1}, found by bisection over
feasibility solves because the sampled boundary itself depends on rho_k.

Numerical hygiene is never optional: every accepted stage records its
equality residuals, the Gram matrix's minimum eigenvalue, and the decrease
margin on a large batch of fresh boundary samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from funnelkit.dynamics import ClosedLoopModel, polynomialize
from funnelkit.polynomials import BasisSpec, MultiPoly, evaluate_basis, quadratic_form
from funnelkit.sampling import (
    DisturbanceSet,
    SampleBatch,
    build_stage_batch,
    estimate_min_samples,
    sample_disturbance_boundary,
    sample_state_boundary,
)
from funnelkit.sdp import GramSdp, gram_value_rows, solve_sdp
from funnelkit.seeding import rng_stream
from funnelkit.tvlqr import QuadraticCertificate, ReferenceTrajectory


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class StageInfeasibleError(RuntimeError):
    """A stage SDP failed; carries the step index and partial results."""

    def __init__(self, step: int, status: str, partial=None, diagnostics=None):
        self.step = step
        self.status = status
        self.partial = partial
        self.diagnostics = diagnostics or {}
        super().__init__(f"stage {step} failed with solver status {status!r}")


@dataclass(frozen=True)
class InitialSet:
    """Admissible initial deviations {xbar | 0.5 xbar^T M xbar <= 1}."""

    M: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ConfigError("initial set matrix must be square")
        if not np.allclose(M, M.T, atol=1e-12):
            raise ConfigError("initial set matrix must be symmetric")
        if np.linalg.eigvalsh(M)[0] <= 0:
            raise ConfigError("initial set matrix must be positive definite")
        object.__setattr__(self, "M", 0.5 * (M + M.T))

    @property
    def dim(self) -> int:
        return self.M.shape[0]


@dataclass
class SolverConfig:
    """Knobs for the stage SDPs and the sweep.

    ``eps`` is the strict-decrease margin as a fraction of the current
    funnel level (the stage uses eps * rho_k). ``stage_degree`` is the
    Taylor degree of the deviation dynamics inside the stage constraint;
    leave None to use the largest degree the Gram basis can represent
    exactly, 2 * basis_degree - 1.
    """

    d: int = 1
    eps: float = 1e-6
    basis_degree: int = 2
    basis_kind: str = "hermite"
    stage_degree: int | None = None
    sample_multiplier: float = 1.2
    min_samples: int | None = None
    backend: str = "clarabel"
    mode: str = "forward"
    critical_samples: bool = True
    critical_scan_limit: int | None = 400
    fresh_check_count: int = 1000
    reestimate_each_step: bool = False
    bisect_rel_tol: float = 1e-4
    bisect_max_iter: int = 60

    def __post_init__(self):
        if self.d < 0:
            raise ConfigError("d must be >= 0")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.critical_scan_limit is not None and self.critical_scan_limit < 1:
            raise ConfigError("critical_scan_limit must be >= 1 or null")
        if self.basis_degree < 1:
            raise ConfigError("basis_degree must be >= 1")
        if self.sample_multiplier < 1.0:
            raise ConfigError("sample_multiplier must be >= 1")
        if self.mode not in ("forward", "backward"):
            raise ConfigError("mode must be forward or backward")
        if self.stage_degree is not None:
            if self.stage_degree < 1:
                raise ConfigError("stage_degree must be >= 1")
            cap = self.max_stage_degree()
            if self.stage_degree > cap:
                raise ConfigError(
                    f"stage_degree {self.stage_degree} needs Gram basis degree "
                    f"> {self.basis_degree}: the decrease polynomial has degree "
                    f"{self.stage_degree + 1}, but products of basis elements "
                    f"only reach degree {2 * self.basis_degree}"
                )

    def max_stage_degree(self) -> int:
        # the decrease polynomial has degree max(2, stage_degree + 1) and the
        # shell samples must admit an exact Gram match; products of basis
        # elements span all polynomials of degree <= 2 * basis_degree (the
        # shell multiplier evaluates to one on every sample and costs nothing)
        return 2 * self.basis_degree - 1

    def resolved_stage_degree(self) -> int:
        return self.stage_degree if self.stage_degree is not None else self.max_stage_degree()


@dataclass
class StageConstraint:
    """Decrease quantity for one interval, affine in the next level.

    value(xbar, w, rho_next) = rho_coeff * rho_next + d0(xbar, w), where the
    polynomial part collects the quadratic shrink term and the Lyapunov rate
    of the deviation dynamics.
    """

    n_states: int
    n_dist: int
    dt: float
    rho_coeff: float
    d0: MultiPoly

    def evaluate(self, points: np.ndarray, rho_next: float) -> np.ndarray:
        return self.rho_coeff * rho_next + self.d0.evaluate_many(points)

    def as_poly(self, rho_next: float) -> MultiPoly:
        return self.d0 + self.rho_coeff * rho_next


def build_stage_constraint(
    k: int, P_k: np.ndarray, P_next: np.ndarray, dt: float,
    poly_dynamics: list[MultiPoly],
) -> StageConstraint:
    """Assemble the boundary decrease polynomial for interval k."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    P_k = np.asarray(P_k, dtype=float)
    P_next = np.asarray(P_next, dtype=float)
    n = P_k.shape[0]
    nv = poly_dynamics[0].n_vars
    shrink = quadratic_form(P_next, scale=-0.5 / dt).embed(nv, list(range(n)))
    rate = MultiPoly.zero(nv)
    for i in range(n):
        row = MultiPoly.zero(nv)
        for j in range(n):
            if P_k[i, j]:
                row = row + P_k[i, j] * MultiPoly.variable(nv, j)
        if not row.is_zero():
            rate = rate + poly_dynamics[i] * row
    return StageConstraint(
        n_states=n, n_dist=nv - n, dt=float(dt), rho_coeff=1.0 / dt, d0=shrink - rate
    )


@dataclass
class StageProblem:
    """Everything one stage solve needs, with samples already drawn."""

    step: int
    dt: float
    P_k: np.ndarray
    P_next: np.ndarray
    rho_k: float
    poly_dynamics: list[MultiPoly]
    batch: SampleBatch
    basis: BasisSpec
    d: int
    eps: float
    dist: DisturbanceSet
    constraint: StageConstraint = field(init=False)

    def __post_init__(self):
        self.P_k = np.asarray(self.P_k, dtype=float)
        self.P_next = np.asarray(self.P_next, dtype=float)
        self.constraint = build_stage_constraint(
            self.step, self.P_k, self.P_next, self.dt, self.poly_dynamics
        )
        n = self.P_k.shape[0]
        if self.basis.n_vars != n + self.dist.dim:
            raise ConfigError("basis variable count must equal states + disturbances")


def _whitening(P: np.ndarray, rho: float) -> np.ndarray:
    """Transform T with x on the slice boundary iff ||T x|| = 1."""
    L = np.linalg.cholesky(P / rho)
    return L.T / math.sqrt(2.0)


def _stage_rows(problem: StageProblem, states: np.ndarray, dists: np.ndarray):
    """Equality rows for given samples: scalar coeff, Gram coeff, constant.

    Row i encodes  s_i * (rho_coeff * rho_next + d0_i) - eps = n_i^T Q n_i
    over unknowns (rho_next, Q), normalized by the largest unknown
    coefficient. Returns (scalar_coeff, gram_coeff, rhs, norms) where norms
    restore the physical scale of each row.
    """
    Tx = _whitening(problem.P_k, problem.rho_k)
    Tw = _whitening(problem.dist.U, 1.0)
    z = np.hstack([states @ Tx.T, dists @ Tw.T])
    basis_vals = evaluate_basis(problem.basis, z)
    mult = np.sum(z[:, : problem.constraint.n_states] ** 2, axis=1) ** problem.d
    d0 = problem.constraint.d0.evaluate_many(np.hstack([states, dists]))
    scalar = mult * problem.constraint.rho_coeff
    gram = -gram_value_rows(basis_vals)
    rhs = problem.eps - mult * d0
    norms = np.maximum(np.abs(scalar), np.max(np.abs(gram), axis=1))
    return scalar / norms, gram / norms[:, None], rhs / norms, norms


@dataclass
class StageResult:
    rho: float
    gram: np.ndarray
    diagnostics: dict


def _fresh_decrease_check(problem: StageProblem, rho_next: float, count: int, rng) -> dict:
    """Decrease margin at freshly drawn boundary samples and the solved level."""
    states = sample_state_boundary(problem.P_k, problem.rho_k, count, rng)
    dists = sample_disturbance_boundary(problem.dist, count, rng)
    values = problem.constraint.evaluate(np.hstack([states, dists]), rho_next)
    return {
        "fresh_count": count,
        "fresh_d_min": float(np.min(values)),
        "fresh_d_scale": float(np.max(np.abs(values))),
    }


def solve_stage_sdp(
    problem: StageProblem,
    backend: str = "clarabel",
    sense: str = "min",
    rho_fixed: float | None = None,
    fresh_rng=None,
    fresh_count: int = 1000,
) -> StageResult:
    """Solve one sampled stage SDP and verify the certificate numerically.

    Forward mode minimizes rho_next; feasibility mode (rho_fixed set) asks
    whether the given rho_next admits any PSD Gram matrix. Raises
    StageInfeasibleError when the solver reports infeasibility or failure.
    """
    if len(problem.batch) == 0:
        raise ValueError("empty sample batch")
    scalar, gram, rhs, norms = _stage_rows(problem, problem.batch.states, problem.batch.dists)
    sdp = GramSdp(
        dim=problem.basis.size,
        scalar_coeff=scalar,
        gram_coeff=gram,
        rhs=rhs,
        sense="feasibility" if rho_fixed is not None else sense,
        fixed_scalar=rho_fixed,
    )
    sol = solve_sdp(sdp, backend=backend)
    if not sol.ok:
        raise StageInfeasibleError(problem.step, sol.status, diagnostics={
            "raw_status": sol.raw_status, "samples": len(problem.batch)})
    rho_next = float(sol.scalar)
    # residuals of the unit-normalized rows are already relative to each
    # row's largest coefficient; norms restore physical units
    rel_residuals = np.abs(scalar * rho_next + gram @ _svec_of(sol.gram) - rhs)
    diagnostics = {
        "samples": len(problem.batch),
        "critical_samples": int(sum(t == "critical" for t in problem.batch.dist_provenance)),
        "status": sol.status,
        "iterations": sol.iterations,
        "residual_rel_max": float(np.max(rel_residuals)),
        "residual_max": float(np.max(rel_residuals * norms)),
        "q_min_eig": float(np.linalg.eigvalsh(sol.gram)[0]),
        "eps": problem.eps,
    }
    if fresh_rng is not None and fresh_count > 0:
        diagnostics.update(_fresh_decrease_check(problem, rho_next, fresh_count, fresh_rng))
    return StageResult(rho=rho_next, gram=sol.gram, diagnostics=diagnostics)


def _svec_of(mat: np.ndarray) -> np.ndarray:
    from funnelkit.sdp import svec

    return svec(mat)


@dataclass
class Funnel:
    """The verified tube: level rho_k over slice shapes P_k along the path."""

    times: np.ndarray
    rho: np.ndarray
    P: np.ndarray
    x_nominal: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        self.P = np.asarray(self.P, dtype=float)
        self.x_nominal = np.asarray(self.x_nominal, dtype=float)
        N = self.times.shape[0]
        if not (self.rho.shape[0] == N and self.P.shape[0] == N
                and self.x_nominal.shape[0] == N):
            raise ValueError("funnel arrays must share the time grid")
        if np.any(self.rho <= 0):
            raise ValueError("rho must be positive at every step")

    @property
    def n_steps(self) -> int:
        return self.times.shape[0]

    @property
    def n_states(self) -> int:
        return self.P.shape[1]


def initial_rho(initial: InitialSet, P1: np.ndarray) -> float:
    """Smallest level whose slice contains the whole initial set.

    {0.5 x M x <= 1} sits inside {0.5 x P1 x <= rho} exactly when
    rho * M - P1 is PSD, so the answer is the largest generalized
    eigenvalue of (P1, M).
    """
    M = initial.M if isinstance(initial, InitialSet) else InitialSet(initial).M
    P1 = np.asarray(P1, dtype=float)
    if np.linalg.eigvalsh(P1)[0] <= 0:
        raise ValueError("P1 must be positive definite")
    eigs = scipy.linalg.eigh(P1, M, eigvals_only=True)
    return float(eigs[-1])


def goal_rho(goal: InitialSet, P_end: np.ndarray) -> float:
    """Largest level whose final slice stays inside the goal ellipsoid."""
    M = goal.M if isinstance(goal, InitialSet) else InitialSet(goal).M
    eigs = scipy.linalg.eigh(M, np.asarray(P_end, dtype=float), eigvals_only=True)
    return float(1.0 / eigs[-1])


def _stage_polynomials(model, traj: ReferenceTrajectory, cert: QuadraticCertificate,
                       k: int, degree: int) -> list[MultiPoly]:
    closed = ClosedLoopModel(
        model=model, x_ref=traj.states[k], u_ref=traj.control(k), gain=cert.K[k]
    )
    return polynomialize(closed, degree)


def _estimate_stage_samples(problem: StageProblem, config: SolverConfig, rng) -> int:
    # boundary rows only: critical-set rows are appended on top of the
    # requested count, and their draw-to-draw variation would mask the
    # rank plateau the estimator is looking for
    def probe(count, rng_):
        batch = build_stage_batch(
            problem.step, problem.P_k, problem.rho_k, problem.dist, count,
            rng_, rng_, problem.poly_dynamics, critical=False,
        )
        scalar, gram, _, _ = _stage_rows(problem, batch.states, batch.dists)
        return np.hstack([scalar[:, None], gram])

    return estimate_min_samples(problem.basis, config.d, probe, rng)


def _resolve_sample_count(problem: StageProblem, config: SolverConfig, seed: int,
                          label: str, cache: dict) -> int:
    if config.min_samples is not None:
        return config.min_samples
    key = "estimate"
    if config.reestimate_each_step:
        key = (label, problem.step)
    if key not in cache:
        est = _estimate_stage_samples(problem, config, rng_stream(seed, "estimate", label, problem.step))
        cache[key] = int(math.ceil(config.sample_multiplier * est))
        cache.setdefault("estimates", {})[str(problem.step)] = {
            "estimated_min": est, "target": cache[key]}
    return cache[key]


def run_forward(
    model,
    traj: ReferenceTrajectory,
    cert: QuadraticCertificate,
    M1: InitialSet,
    U: DisturbanceSet,
    config: SolverConfig,
    seed: int = 0,
) -> Funnel:
    """Sweep the stages forward from the certified initial level."""
    N = traj.n_steps
    degree = config.resolved_stage_degree()
    basis = BasisSpec(
        n_vars=traj.n_states + U.dim, max_degree=config.basis_degree, kind=config.basis_kind
    )
    rho = np.empty(N)
    rho[0] = initial_rho(M1, cert.P[0])
    steps: list[dict] = []
    cache: dict = {}
    partial = None
    for k in range(N - 1):
        poly = _stage_polynomials(model, traj, cert, k, degree)
        problem = StageProblem(
            step=k, dt=traj.dt(k), P_k=cert.P[k], P_next=cert.P[k + 1],
            rho_k=rho[k], poly_dynamics=poly, batch=_EMPTY_BATCH, basis=basis,
            d=config.d, eps=config.eps * rho[k], dist=U,
        )
        count = _resolve_sample_count(problem, config, seed, "forward", cache)
        problem.batch = build_stage_batch(
            k, cert.P[k], rho[k], U, count,
            rng_stream(seed, "stage", k, "states"), rng_stream(seed, "stage", k, "dists"),
            poly, critical=config.critical_samples,
            critical_limit=config.critical_scan_limit,
        )
        try:
            result = solve_stage_sdp(
                problem, backend=config.backend,
                fresh_rng=rng_stream(seed, "fresh", k), fresh_count=config.fresh_check_count,
            )
        except StageInfeasibleError as err:
            err.partial = _partial_funnel(traj, cert, rho, k, steps, seed, config)
            raise
        rho[k + 1] = result.rho
        steps.append({"step": k, "requested_samples": count, **result.diagnostics})
    diagnostics = {
        "mode": "forward",
        "seed": seed,
        "initial_rho": float(rho[0]),
        "sample_estimates": cache.get("estimates", {}),
        "steps": steps,
    }
    return Funnel(times=traj.times, rho=rho, P=cert.P, x_nominal=traj.states,
                  diagnostics=diagnostics)


_EMPTY_BATCH = SampleBatch(
    step=-1, states=np.zeros((1, 1)), dists=np.zeros((1, 1)),
    state_provenance=["rescale"], dist_provenance=["boundary"],
)


def _partial_funnel(traj, cert, rho, failed_step, steps, seed, config):
    if failed_step == 0:
        return None
    k = failed_step
    return Funnel(
        times=traj.times[: k + 1], rho=rho[: k + 1].copy(), P=cert.P[: k + 1],
        x_nominal=traj.states[: k + 1],
        diagnostics={"mode": "partial", "seed": seed, "failed_step": k, "steps": steps},
    )


def _backward_stage_feasible(problem: StageProblem, rho_next: float, config: SolverConfig):
    try:
        return True, solve_stage_sdp(problem, backend=config.backend, rho_fixed=rho_next)
    except StageInfeasibleError:
        return False, None


def run_backward(
    model,
    traj: ReferenceTrajectory,
    cert: QuadraticCertificate,
    goal: InitialSet,
    U: DisturbanceSet,
    config: SolverConfig,
    seed: int = 0,
) -> Funnel:
    """Sweep backward from the goal: the largest entry level per stage.

    The boundary samples for stage k live on the rho_k slice, which is the
    unknown, so each stage runs a bisection over candidate rho_k with a
    feasibility SDP (rho_{k+1} pinned) per trial. The returned level is the
    largest candidate that solved, re-verified with fresh samples.
    """
    N = traj.n_steps
    degree = config.resolved_stage_degree()
    basis = BasisSpec(
        n_vars=traj.n_states + U.dim, max_degree=config.basis_degree, kind=config.basis_kind
    )
    rho = np.empty(N)
    rho[N - 1] = goal_rho(goal, cert.P[N - 1])
    steps: list[dict] = []
    cache: dict = {}
    for k in range(N - 2, -1, -1):
        poly = _stage_polynomials(model, traj, cert, k, degree)
        eps_k = config.eps * rho[k + 1]

        def make_problem(trial: float, tag: int) -> StageProblem:
            problem = StageProblem(
                step=k, dt=traj.dt(k), P_k=cert.P[k], P_next=cert.P[k + 1],
                rho_k=trial, poly_dynamics=poly, batch=_EMPTY_BATCH, basis=basis,
                d=config.d, eps=eps_k, dist=U,
            )
            count = _resolve_sample_count(problem, config, seed, "backward", cache)
            problem.batch = build_stage_batch(
                k, cert.P[k], trial, U, count,
                rng_stream(seed, "backward", k, tag, "states"),
                rng_stream(seed, "backward", k, tag, "dists"),
                poly, critical=config.critical_samples,
                critical_limit=config.critical_scan_limit,
            )
            return problem

        trial = rho[k + 1]
        tag = 0
        feasible, _ = _backward_stage_feasible(make_problem(trial, tag), rho[k + 1], config)
        if feasible:
            lo = trial
            hi = None
            for _ in range(60):
                tag += 1
                trial *= 2.0
                ok, _ = _backward_stage_feasible(make_problem(trial, tag), rho[k + 1], config)
                if ok:
                    lo = trial
                else:
                    hi = trial
                    break
            if hi is None:
                raise StageInfeasibleError(k, "unbounded backward level")
        else:
            hi = trial
            lo = None
            for _ in range(60):
                tag += 1
                trial *= 0.5
                ok, _ = _backward_stage_feasible(make_problem(trial, tag), rho[k + 1], config)
                if ok:
                    lo = trial
                    break
                hi = trial
            if lo is None:
                raise StageInfeasibleError(
                    k, "infeasible", partial=None,
                    diagnostics={"detail": "no feasible entry level found"})
        iters = 0
        while (hi - lo) / lo > config.bisect_rel_tol and iters < config.bisect_max_iter:
            tag += 1
            iters += 1
            mid = 0.5 * (lo + hi)
            ok, _ = _backward_stage_feasible(make_problem(mid, tag), rho[k + 1], config)
            if ok:
                lo = mid
            else:
                hi = mid
        # re-verify the accepted level with the hygiene checks attached
        final_problem = make_problem(lo, tag + 1)
        final = solve_stage_sdp(
            final_problem, backend=config.backend, rho_fixed=rho[k + 1],
            fresh_rng=rng_stream(seed, "backward-fresh", k),
            fresh_count=config.fresh_check_count,
        )
        rho[k] = lo
        steps.append({
            "step": k, "rho_entry": float(lo), "bisect_iterations": iters,
            "requested_samples": _resolve_sample_count(final_problem, config, seed,
                                                       "backward", cache),
            "sample_tag": tag + 1,
            **final.diagnostics,
        })
    steps.reverse()
    diagnostics = {
        "mode": "backward",
        "seed": seed,
        "goal_rho": float(rho[N - 1]),
        "sample_estimates": cache.get("estimates", {}),
        "steps": steps,
    }
    return Funnel(times=traj.times, rho=rho, P=cert.P, x_nominal=traj.states,
                  diagnostics=diagnostics)


def funnel_volume(funnel: Funnel) -> float:
    """Sum over slices of rho^n / det(P)."""
    n = funnel.n_states
    total = 0.0
    for k in range(funnel.n_steps):
        det = np.linalg.det(funnel.P[k])
        if det <= 0 or not np.isfinite(det):
            raise ValueError(f"P[{k}] is singular or indefinite")
        total += funnel.rho[k] ** n / det
    return float(total)


def interpolate(funnel: Funnel, t: float):
    """(rho, P, x_nominal) at time t, piecewise linear between knots."""
    times = funnel.times
    if t < times[0] or t > times[-1]:
        raise ValueError(f"time {t} outside [{times[0]}, {times[-1]}]")
    idx = int(np.searchsorted(times, t, side="right") - 1)
    if idx >= funnel.n_steps - 1:
        idx = funnel.n_steps - 2
    t0, t1 = times[idx], times[idx + 1]
    lam = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
    rho = (1 - lam) * funnel.rho[idx] + lam * funnel.rho[idx + 1]
    P = (1 - lam) * funnel.P[idx] + lam * funnel.P[idx + 1]
    x = (1 - lam) * funnel.x_nominal[idx] + lam * funnel.x_nominal[idx + 1]
    return float(rho), P, x


def stage_vdot_values(
    poly_dynamics: list[MultiPoly], P: np.ndarray, states: np.ndarray,
    dists: np.ndarray | None = None,
) -> np.ndarray:
    """Lyapunov rate f(xbar, w)^T P xbar at given deviations (w = 0 default)."""
    P = np.asarray(P, dtype=float)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    n = P.shape[0]
    nv = poly_dynamics[0].n_vars
    if dists is None:
        dists = np.zeros((states.shape[0], nv - n))
    points = np.hstack([states, np.atleast_2d(dists)])
    rates = np.column_stack([f.evaluate_many(points) for f in poly_dynamics])
    return np.einsum("ij,ij->i", rates, states @ P.T)
