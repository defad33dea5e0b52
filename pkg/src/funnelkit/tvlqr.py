"""Time-varying LQR along a reference trajectory.

Linearizes the one-step integrator map with truncated Taylor jets (exact
Jacobians, no finite differencing), runs the backward Riccati recursion, and
packages the value matrices and gains as the quadratic certificate the
funnel solver consumes.

Gain convention: stored gains apply additively, u = u_ref + K @ xbar, so the
stabilizing Riccati gain is stored with a negative sign relative to the
classical u = -K x form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from funnelkit.taylor import TaylorScalar


@dataclass
class ReferenceTrajectory:
    """Nominal states and controls on a strictly increasing time grid.

    ``controls`` may have N or N-1 rows; the last control of an N-row grid
    is ignored by stepwise consumers.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        if self.controls.ndim == 1:
            self.controls = self.controls[:, None]
        n = self.times.shape[0]
        if self.times.ndim != 1 or n < 2:
            raise ValueError("need at least two time knots")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times not strictly increasing")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.states))
                and np.all(np.isfinite(self.controls))):
            raise ValueError("non-finite trajectory data")
        if self.states.ndim != 2 or self.states.shape[0] != n:
            raise ValueError("states must have one row per time knot")
        if self.controls.shape[0] not in (n, n - 1):
            raise ValueError("controls must have N or N-1 rows")

    @property
    def n_steps(self) -> int:
        return self.times.shape[0]

    @property
    def n_states(self) -> int:
        return self.states.shape[1]

    @property
    def n_controls(self) -> int:
        return self.controls.shape[1]

    def dt(self, k: int) -> float:
        return float(self.times[k + 1] - self.times[k])

    def control(self, k: int) -> np.ndarray:
        return self.controls[min(k, self.controls.shape[0] - 1)]


@dataclass
class QuadraticCertificate:
    """Per-step value matrices P_k and feedback gains K_k with their weights."""

    times: np.ndarray
    P: np.ndarray
    K: np.ndarray
    Q: np.ndarray = field(default=None)
    R: np.ndarray = field(default=None)
    Qf: np.ndarray = field(default=None)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.P = np.asarray(self.P, dtype=float)
        self.K = np.asarray(self.K, dtype=float)
        N = self.times.shape[0]
        if self.P.shape[0] != N or self.K.shape[0] != N - 1:
            raise ValueError("need N value matrices and N-1 gains")
        for k in range(N):
            if not np.array_equal(self.P[k], self.P[k].T):
                raise ValueError(f"P[{k}] is not symmetric")
            if np.linalg.eigvalsh(self.P[k])[0] <= 0:
                raise ValueError(f"P[{k}] is not positive definite")

    @property
    def n_states(self) -> int:
        return self.P.shape[1]


def rk4_step(f, x, u, dt: float):
    """One classical Runge-Kutta step of x' = f(x, u) with u held constant.

    Works on float arrays and on lists of Taylor jets alike; only +, * and
    the dynamics callable touch the state entries.
    """
    n = len(x)
    k1 = f(x, u)
    k2 = f([x[i] + 0.5 * dt * k1[i] for i in range(n)], u)
    k3 = f([x[i] + 0.5 * dt * k2[i] for i in range(n)], u)
    k4 = f([x[i] + dt * k3[i] for i in range(n)], u)
    return [
        x[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        for i in range(n)
    ]


def euler_step(f, x, u, dt: float):
    k1 = f(x, u)
    return [x[i] + dt * k1[i] for i in range(len(x))]


_STEPPERS = {"rk4": rk4_step, "euler": euler_step}


def step_jacobians(model, x, u, dt: float, method: str = "rk4"):
    """Jacobians (A, B) of the one-step integrator map at (x, u)."""
    if method not in _STEPPERS:
        raise ValueError(f"unknown integrator {method!r}")
    n, m = model.n_states, model.n_controls
    nv = n + m
    x_jet = [TaylorScalar.variable(nv, i, float(x[i]), 1) for i in range(n)]
    u_jet = [TaylorScalar.variable(nv, n + j, float(u[j]), 1) for j in range(m)]
    x_next = _STEPPERS[method](lambda xs, us: model.rates(xs, us, None), x_jet, u_jet, dt)
    A = np.empty((n, n))
    B = np.empty((n, m))
    for i in range(n):
        poly = x_next[i].poly
        for j in range(n):
            e = [0] * nv
            e[j] = 1
            A[i, j] = poly.coefficient(tuple(e))
        for j in range(m):
            e = [0] * nv
            e[n + j] = 1
            B[i, j] = poly.coefficient(tuple(e))
    return A, B


def linearize(model, trajectory: ReferenceTrajectory, k: int, method: str = "rk4"):
    """Discrete-time Jacobians of the integrator over interval k."""
    if not 0 <= k < trajectory.n_steps - 1:
        raise ValueError("step index out of range")
    return step_jacobians(
        model, trajectory.states[k], trajectory.control(k), trajectory.dt(k), method
    )


def tvlqr_backward(A_seq, B_seq, Q, R, Qf, times=None) -> QuadraticCertificate:
    """Backward Riccati recursion from P_N = Qf.

    Returns gains in the additive convention u = u_ref + K xbar, i.e.
    K_k = -(R + B^T P' B)^{-1} B^T P' A. Every P_k is symmetrized.
    """
    A_seq = np.asarray(A_seq, dtype=float)
    B_seq = np.asarray(B_seq, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    Qf = np.asarray(Qf, dtype=float)
    steps = A_seq.shape[0]
    n = A_seq.shape[1]
    m = B_seq.shape[2]
    P = np.empty((steps + 1, n, n))
    K = np.empty((steps, m, n))
    P[steps] = 0.5 * (Qf + Qf.T)
    for k in range(steps - 1, -1, -1):
        A, B = A_seq[k], B_seq[k]
        Pn = P[k + 1]
        H = R + B.T @ Pn @ B
        gain = np.linalg.solve(H, B.T @ Pn @ A)
        K[k] = -gain
        Pk = Q + A.T @ Pn @ A - A.T @ Pn @ B @ gain
        P[k] = 0.5 * (Pk + Pk.T)
    if times is None:
        times = np.arange(steps + 1, dtype=float)
    return QuadraticCertificate(times=times, P=P, K=K, Q=Q, R=R, Qf=Qf)


def build_certificate(
    model,
    trajectory: ReferenceTrajectory,
    Q,
    R,
    Qf,
    method: str = "rk4",
) -> QuadraticCertificate:
    """Linearize every interval of the trajectory and run the Riccati pass."""
    steps = trajectory.n_steps - 1
    A_seq = np.empty((steps, trajectory.n_states, trajectory.n_states))
    B_seq = np.empty((steps, trajectory.n_states, model.n_controls))
    for k in range(steps):
        A_seq[k], B_seq[k] = linearize(model, trajectory, k, method)
    return tvlqr_backward(A_seq, B_seq, Q, R, Qf, times=trajectory.times)
