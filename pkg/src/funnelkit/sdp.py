"""Conic backend for the stage problems.

The solver core needs exactly one shape of problem: linear equality rows
over a scalar unknown and one symmetric Gram matrix required PSD, with the
scalar minimized, maximized, or pinned (feasibility). This module owns the
packed symmetric (svec) convention and talks to Clarabel directly; a cvxpy
formulation is available as an independent cross-check backend.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse

import clarabel

_SQRT2 = math.sqrt(2.0)


class SdpBackendError(RuntimeError):
    """The conic backend failed outright rather than reporting a status."""


@lru_cache(maxsize=32)
def _triangle_indices(dim: int):
    """Column-major upper-triangle index pairs and svec scaling factors."""
    rows, cols, scale = [], [], []
    for j in range(dim):
        for i in range(j + 1):
            rows.append(i)
            cols.append(j)
            scale.append(1.0 if i == j else _SQRT2)
    return np.array(rows), np.array(cols), np.array(scale)


def svec_dim(dim: int) -> int:
    return dim * (dim + 1) // 2


def svec(mat: np.ndarray) -> np.ndarray:
    """Packed symmetric vectorization; preserves inner products."""
    rows, cols, scale = _triangle_indices(mat.shape[0])
    return mat[rows, cols] * scale


def unsvec(vec: np.ndarray, dim: int) -> np.ndarray:
    rows, cols, scale = _triangle_indices(dim)
    mat = np.zeros((dim, dim))
    mat[rows, cols] = vec / scale
    mat[cols, rows] = mat[rows, cols]
    return mat


def gram_value_rows(basis_values: np.ndarray) -> np.ndarray:
    """Row i packs svec(n_i n_i^T), so row @ svec(Q) = n_i^T Q n_i."""
    rows, cols, scale = _triangle_indices(basis_values.shape[1])
    return basis_values[:, rows] * basis_values[:, cols] * scale


@dataclass
class GramSdp:
    """Equality-constrained SDP over (scalar t, PSD Gram matrix Q).

    Each row i states: scalar_coeff[i] * t + gram_coeff[i] @ svec(Q) =
    rhs[i]. ``sense`` picks min t, max t, or pure feasibility with t pinned
    to ``fixed_scalar``.
    """

    dim: int
    scalar_coeff: np.ndarray
    gram_coeff: np.ndarray
    rhs: np.ndarray
    sense: str = "min"
    fixed_scalar: float | None = None

    def __post_init__(self):
        self.scalar_coeff = np.asarray(self.scalar_coeff, dtype=float)
        self.gram_coeff = np.asarray(self.gram_coeff, dtype=float)
        self.rhs = np.asarray(self.rhs, dtype=float)
        m = self.rhs.shape[0]
        if self.scalar_coeff.shape != (m,) or self.gram_coeff.shape != (m, svec_dim(self.dim)):
            raise ValueError("row shapes inconsistent")
        if self.sense not in ("min", "max", "feasibility"):
            raise ValueError("sense must be min, max, or feasibility")
        if self.sense == "feasibility" and self.fixed_scalar is None:
            raise ValueError("feasibility mode needs fixed_scalar")


@dataclass
class SdpSolution:
    status: str
    scalar: float | None
    gram: np.ndarray | None
    iterations: int = 0
    solve_time: float = 0.0
    raw_status: str = ""

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "almost_optimal")


_STATUS_MAP = {
    "Solved": "optimal",
    "AlmostSolved": "almost_optimal",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "AlmostDualInfeasible": "unbounded",
}


def _solve_clarabel(problem: GramSdp) -> SdpSolution:
    m = problem.rhs.shape[0]
    sd = svec_dim(problem.dim)
    pinned = problem.sense == "feasibility"
    n_var = sd if pinned else 1 + sd

    if pinned:
        eq = sparse.csc_matrix(problem.gram_coeff)
        b_eq = problem.rhs - problem.scalar_coeff * problem.fixed_scalar
        q_block = (-sparse.identity(sd)).tocsc()
        cost = np.zeros(n_var)
    else:
        eq = sparse.hstack(
            [sparse.csc_matrix(problem.scalar_coeff[:, None]),
             sparse.csc_matrix(problem.gram_coeff)],
            format="csc",
        )
        b_eq = problem.rhs.copy()
        q_block = sparse.hstack(
            [sparse.csc_matrix((sd, 1)), -sparse.identity(sd, format="csc")],
            format="csc",
        )
        cost = np.zeros(n_var)
        cost[0] = 1.0 if problem.sense == "min" else -1.0

    A = sparse.vstack([eq, q_block], format="csc")
    b = np.concatenate([b_eq, np.zeros(sd)])
    cones = [clarabel.ZeroConeT(m), clarabel.PSDTriangleConeT(problem.dim)]
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    P = sparse.csc_matrix((n_var, n_var))
    solver = clarabel.DefaultSolver(P, cost, A, b, cones, settings)
    t0 = time.perf_counter()
    sol = solver.solve()
    elapsed = time.perf_counter() - t0
    raw = str(sol.status)
    status = _STATUS_MAP.get(raw, "failed")
    if status in ("optimal", "almost_optimal"):
        x = np.asarray(sol.x)
        if pinned:
            scalar = problem.fixed_scalar
            gram = unsvec(x, problem.dim)
        else:
            scalar = float(x[0])
            gram = unsvec(x[1:], problem.dim)
        return SdpSolution(status, scalar, gram, int(sol.iterations), elapsed, raw)
    return SdpSolution(status, None, None, int(sol.iterations), elapsed, raw)


def _solve_cvxpy(problem: GramSdp) -> SdpSolution:
    try:
        import cvxpy as cp
    except ImportError as err:
        raise SdpBackendError(
            "cvxpy backend requested but cvxpy is not installed"
        ) from err

    dim = problem.dim
    rows_idx, cols_idx, scale = _triangle_indices(dim)
    # expand packed rows to full-matrix coefficient rows acting on vec(Q)
    m = problem.rhs.shape[0]
    full = np.zeros((m, dim * dim))
    upper = problem.gram_coeff / scale
    full[:, cols_idx * dim + rows_idx] += upper
    off = rows_idx != cols_idx
    full[:, rows_idx[off] * dim + cols_idx[off]] += upper[:, off]

    Q = cp.Variable((dim, dim), symmetric=True)
    constraints = [Q >> 0]
    if problem.sense == "feasibility":
        lhs = full @ cp.vec(Q, order="F") + problem.scalar_coeff * problem.fixed_scalar
        objective = cp.Minimize(0)
    else:
        t = cp.Variable()
        lhs = full @ cp.vec(Q, order="F") + problem.scalar_coeff * t
        objective = cp.Minimize(t) if problem.sense == "min" else cp.Maximize(t)
    constraints.append(lhs == problem.rhs)
    prob = cp.Problem(objective, constraints)
    t0 = time.perf_counter()
    try:
        prob.solve(solver=cp.SCS, eps=1e-9, max_iters=200000, verbose=False)
    except cp.error.SolverError:
        return SdpSolution("failed", None, None, 0, time.perf_counter() - t0, "solver error")
    elapsed = time.perf_counter() - t0
    if prob.status in ("optimal", "optimal_inaccurate"):
        status = "optimal" if prob.status == "optimal" else "almost_optimal"
        scalar = problem.fixed_scalar if problem.sense == "feasibility" else float(t.value)
        return SdpSolution(status, scalar, np.asarray(Q.value), 0, elapsed, prob.status)
    if prob.status in ("infeasible", "infeasible_inaccurate"):
        return SdpSolution("infeasible", None, None, 0, elapsed, prob.status)
    if prob.status in ("unbounded", "unbounded_inaccurate"):
        return SdpSolution("unbounded", None, None, 0, elapsed, prob.status)
    return SdpSolution("failed", None, None, 0, elapsed, str(prob.status))


_BACKENDS = {"clarabel": _solve_clarabel, "cvxpy": _solve_cvxpy}


def _row_reduce(problem: GramSdp) -> GramSdp | None:
    """Replace the equality rows by an orthonormal spanning set.

    Sampled rows are heavily dependent (their count exceeds the dimension of
    the function space the samples can distinguish), which derails direct
    KKT factorizations. The SVD-compressed system has identical solutions;
    returns None when the rows are inconsistent (no solution at all).
    """
    if problem.sense == "feasibility":
        A = problem.gram_coeff
        b = problem.rhs - problem.scalar_coeff * problem.fixed_scalar
    else:
        A = np.hstack([problem.scalar_coeff[:, None], problem.gram_coeff])
        b = problem.rhs
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    tol = (s[0] * max(A.shape) * np.finfo(float).eps) if s.size else 0.0
    r = int(np.sum(s > tol))
    coeff = U[:, :r].T @ b
    residual = b - U[:, :r] @ coeff
    if np.linalg.norm(residual) > 1e-8 * max(1.0, np.linalg.norm(b)):
        return None
    rows = Vt[:r]
    rhs = coeff / s[:r]
    if problem.sense == "feasibility":
        return GramSdp(dim=problem.dim, scalar_coeff=np.zeros(r), gram_coeff=rows,
                       rhs=rhs, sense="feasibility", fixed_scalar=problem.fixed_scalar)
    return GramSdp(dim=problem.dim, scalar_coeff=rows[:, 0], gram_coeff=rows[:, 1:],
                   rhs=rhs, sense=problem.sense)


def solve_sdp(problem: GramSdp, backend: str = "clarabel") -> SdpSolution:
    if backend not in _BACKENDS:
        raise ValueError(f"unknown SDP backend {backend!r}")
    reduced = _row_reduce(problem)
    if reduced is None:
        return SdpSolution("infeasible", None, None, 0, 0.0, "inconsistent equality rows")
    return _BACKENDS[backend](reduced)
