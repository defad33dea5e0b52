"""Samplers for the sets the certificates are checked on.

Three families: states rescaled onto an ellipsoid boundary, disturbances
rescaled onto the boundary of the admissible set W, and disturbances found
by Newton root-finding on the stationarity system of the Lyapunov rate
(interior extremum candidates). A rank-saturation probe estimates how many
samples make the Gram equality system exact on the variety.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from funnelkit.polynomials import BasisSpec, MultiPoly, newton_solve


@dataclass
class DisturbanceSet:
    """Ellipsoidal disturbance bound W = {w | 0.5 w^T U w <= 1}."""

    U: np.ndarray

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=float)
        if self.U.ndim != 2 or self.U.shape[0] != self.U.shape[1]:
            raise ValueError("U must be square")
        if not np.allclose(self.U, self.U.T, atol=1e-12):
            raise ValueError("U must be symmetric")
        if np.linalg.eigvalsh(self.U)[0] <= 0:
            raise ValueError("U must be positive definite")
        self.U = 0.5 * (self.U + self.U.T)

    @property
    def dim(self) -> int:
        return self.U.shape[0]

    def quadratic(self, w) -> np.ndarray:
        w = np.atleast_2d(np.asarray(w, dtype=float))
        return 0.5 * np.einsum("ij,jk,ik->i", w, self.U, w)

    def contains(self, w, tol: float = 1e-9) -> bool:
        return bool(np.all(self.quadratic(w) <= 1.0 + tol))

    def boundary_residual(self, w) -> np.ndarray:
        return self.quadratic(w) - 1.0

    def scaled(self, factor: float) -> "DisturbanceSet":
        """New set with U scaled; factor < 1 enlarges the admissible set."""
        return DisturbanceSet(self.U * factor)


def _boundary_rescale(M: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Points with 0.5 x^T M x = 1, uniform on the whitened unit sphere.

    Directions are drawn isotropically in the whitened frame (where the
    shell is the unit sphere) so badly scaled M still gets even coverage,
    then rescaled against the directly evaluated quadratic so the defining
    equation holds to roundoff.
    """
    n = M.shape[0]
    L = np.linalg.cholesky(M)
    out = np.empty((count, n))
    done = 0
    while done < count:
        draw = rng.standard_normal((count - done, n))
        norms = np.linalg.norm(draw, axis=1)
        keep = norms > 1e-150
        u = draw[keep] / norms[keep][:, None]
        x = math.sqrt(2.0) * scipy.linalg.solve_triangular(L, u.T, trans="T", lower=True).T
        q = 0.5 * np.einsum("ij,jk,ik->i", x, M, x)
        x = x / np.sqrt(q)[:, None]
        out[done : done + x.shape[0]] = x
        done += x.shape[0]
    return out


def sample_state_boundary(P: np.ndarray, rho: float, count: int, rng) -> np.ndarray:
    """States on the funnel-slice boundary {0.5 x^T (P/rho) x = 1}."""
    P = np.asarray(P, dtype=float)
    if rho <= 0:
        raise ValueError("rho must be positive")
    if count < 1:
        raise ValueError("count must be >= 1")
    return _boundary_rescale(P / rho, count, rng)


def sample_disturbance_boundary(dist: DisturbanceSet, count: int, rng) -> np.ndarray:
    """Disturbances on the shell {0.5 w^T U w = 1}."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return _boundary_rescale(dist.U, count, rng)


def vdot_disturbance_gradient(
    poly_dynamics: list[MultiPoly], P: np.ndarray, xbar: np.ndarray
) -> list[MultiPoly]:
    """Gradient in w of the Lyapunov rate at a fixed boundary state.

    The rate is vdot(xbar, w) = f(xbar, w)^T P xbar with f the polynomial
    deviation dynamics over (xbar, w). Substituting the numeric xbar leaves
    one polynomial per disturbance component, in the w variables only.
    """
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    nv = poly_dynamics[0].n_vars
    p = nv - n
    if p < 1:
        raise ValueError("dynamics polynomials carry no disturbance variables")
    weights = P @ np.asarray(xbar, dtype=float)
    vdot = MultiPoly.zero(nv)
    for i in range(n):
        if weights[i]:
            vdot = vdot + weights[i] * poly_dynamics[i]
    fixed = vdot.substitute({i: float(xbar[i]) for i in range(n)})
    reduced = fixed.restrict(list(range(n, nv)))
    return reduced.gradient()


class CriticalSampler:
    """Interior stationary points of the Lyapunov rate, batched per stage.

    The rate vdot(xbar, w) = f(xbar, w)^T P xbar splits into disturbance
    monomials with state-dependent coefficient polynomials. The split is
    computed once per (dynamics, P); scanning a batch of boundary states
    then costs one vectorized evaluation per coefficient plus small Newton
    solves in the w variables only.
    """

    def __init__(self, poly_dynamics: list[MultiPoly], P: np.ndarray):
        P = np.asarray(P, dtype=float)
        self.n = P.shape[0]
        nv = poly_dynamics[0].n_vars
        self.p = nv - self.n
        if self.p < 1:
            raise ValueError("dynamics polynomials carry no disturbance variables")
        vdot = MultiPoly.zero(nv)
        for i in range(self.n):
            row = MultiPoly.zero(nv)
            for j in range(self.n):
                if P[i, j]:
                    row = row + P[i, j] * MultiPoly.variable(nv, j)
            if not row.is_zero():
                vdot = vdot + poly_dynamics[i] * row
        buckets: dict[tuple, dict[tuple, float]] = {}
        for e, c in vdot.terms.items():
            e_x, e_w = e[: self.n], e[self.n :]
            buckets.setdefault(e_w, {})[e_x] = buckets.get(e_w, {}).get(e_x, 0.0) + c
        self.w_exponents: list[tuple] = sorted(buckets)
        self.coeff_polys = [MultiPoly(self.n, buckets[e]) for e in self.w_exponents]
        # gradient structure: per w-variable, (bucket index, shifted exponent, factor)
        self.grad_terms: list[list[tuple[int, tuple, float]]] = []
        for j in range(self.p):
            rows = []
            for b, e_w in enumerate(self.w_exponents):
                if e_w[j] >= 1:
                    shifted = list(e_w)
                    shifted[j] -= 1
                    rows.append((b, tuple(shifted), float(e_w[j])))
            self.grad_terms.append(rows)

    def coefficient_values(self, states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        return np.column_stack([poly.evaluate_many(states) for poly in self.coeff_polys])

    def _gradient_system(self, coeffs: np.ndarray) -> list[MultiPoly] | None:
        grads = []
        for rows in self.grad_terms:
            terms = {}
            for b, shifted, factor in rows:
                c = coeffs[b] * factor
                if c:
                    terms[shifted] = terms.get(shifted, 0.0) + c
            grads.append(MultiPoly(self.p, terms))
        if all(g.degree == 0 for g in grads):
            return None
        system = []
        for g in grads:
            scale = g.max_abs_coeff()
            system.append(g * (1.0 / scale) if scale > 0 else g)
        return system

    def root_for(self, coeffs: np.ndarray, rng, dist: DisturbanceSet | None,
                 tol: float, extra_starts: int):
        system = self._gradient_system(coeffs)
        if system is None:
            return None
        starts = [np.zeros(self.p)]
        if dist is not None:
            L = np.linalg.cholesky(np.linalg.inv(dist.U))
            for _ in range(extra_starts):
                direction = rng.standard_normal(self.p)
                norm = np.linalg.norm(direction)
                if norm > 0:
                    radius = rng.random() ** (1.0 / self.p)
                    starts.append(math.sqrt(2.0) * radius * (L @ direction) / norm)
        else:
            for _ in range(extra_starts):
                starts.append(rng.standard_normal(self.p))
        for guess in starts:
            result = newton_solve(system, guess, tol=tol)
            if not result.success:
                continue
            if dist is not None and not dist.contains(result.x, tol=1e-9):
                continue
            return result.x
        return None

    def roots_batch(self, states: np.ndarray, rng, dist: DisturbanceSet | None = None,
                    tol: float = 1e-10, extra_starts: int = 3):
        """(state index, w) for every state whose rate has an interior root."""
        C = self.coefficient_values(states)
        out = []
        for i in range(C.shape[0]):
            w = self.root_for(C[i], rng, dist, tol, extra_starts)
            if w is not None:
                out.append((i, w))
        return out


def sample_critical_set(
    poly_dynamics: list[MultiPoly],
    P: np.ndarray,
    xbar: np.ndarray,
    rng,
    dist: DisturbanceSet | None = None,
    tol: float = 1e-10,
    extra_starts: int = 3,
):
    """One interior stationary point of the Lyapunov rate in w, or None.

    Returns None when the rate is affine in w (constant gradient, extrema on
    the shell only), when Newton fails from every start, or when the root
    falls outside the admissible set. Gradient equations are normalized by
    their largest coefficient so the tolerance is scale-free.
    """
    sampler = CriticalSampler(poly_dynamics, P)
    coeffs = sampler.coefficient_values(xbar)[0]
    return sampler.root_for(coeffs, rng, dist, tol, extra_starts)


@dataclass
class SampleBatch:
    """Paired (state, disturbance) samples for one stage, with provenance.

    ``state_provenance`` entries are "rescale"; ``dist_provenance`` entries
    are "boundary" (shell rescale) or "critical" (Newton-found stationary
    point of the Lyapunov rate).
    """

    step: int
    states: np.ndarray
    dists: np.ndarray
    state_provenance: list[str]
    dist_provenance: list[str]

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.dists = np.atleast_2d(np.asarray(self.dists, dtype=float))
        m = self.states.shape[0]
        if self.dists.shape[0] != m:
            raise ValueError("states and dists must pair up row-wise")
        if len(self.state_provenance) != m or len(self.dist_provenance) != m:
            raise ValueError("provenance must tag every row")

    def __len__(self) -> int:
        return self.states.shape[0]

    def residuals(self, P: np.ndarray, rho: float, dist: DisturbanceSet,
                  poly_dynamics: list[MultiPoly] | None = None) -> dict:
        """Max violation of each defining equation, keyed by family."""
        M = np.asarray(P, dtype=float) / rho
        state_res = np.abs(0.5 * np.einsum("ij,jk,ik->i", self.states, M, self.states) - 1.0)
        boundary = [i for i, tag in enumerate(self.dist_provenance) if tag == "boundary"]
        critical = [i for i, tag in enumerate(self.dist_provenance) if tag == "critical"]
        out = {"state": float(np.max(state_res))}
        if boundary:
            out["boundary"] = float(np.max(np.abs(dist.boundary_residual(self.dists[boundary]))))
        if critical:
            if poly_dynamics is None:
                raise ValueError("critical rows need poly_dynamics to check")
            worst = 0.0
            for i in critical:
                grads = vdot_disturbance_gradient(poly_dynamics, P, self.states[i])
                vals = []
                for g in grads:
                    scale = g.max_abs_coeff()
                    vals.append(abs(g.evaluate(self.dists[i])) / scale if scale > 0 else 0.0)
                worst = max(worst, max(vals))
            out["critical"] = worst
        return out


def build_stage_batch(
    step: int,
    P: np.ndarray,
    rho: float,
    dist: DisturbanceSet,
    count: int,
    rng_states,
    rng_dists,
    poly_dynamics: list[MultiPoly] | None = None,
    critical: bool = True,
    critical_limit: int | None = None,
) -> SampleBatch:
    """Pair each boundary state with one shell disturbance, plus any
    critical-set root found for that state. ``critical_limit`` bounds how
    many states are scanned for roots; the Newton solves dominate the batch
    cost, and the fresh decrease check still guards the accepted level."""
    states = sample_state_boundary(P, rho, count, rng_states)
    shell = sample_disturbance_boundary(dist, count, rng_dists)
    rows_x = [states]
    rows_w = [shell]
    tags = ["boundary"] * count
    if critical and poly_dynamics is not None:
        sampler = CriticalSampler(poly_dynamics, P)
        scan = states if critical_limit is None else states[:critical_limit]
        for i, w in sampler.roots_batch(scan, rng_dists, dist):
            rows_x.append(states[i][None, :])
            rows_w.append(np.asarray(w)[None, :])
            tags.append("critical")
    all_x = np.vstack(rows_x)
    all_w = np.vstack(rows_w)
    return SampleBatch(
        step=step,
        states=all_x,
        dists=all_w,
        state_provenance=["rescale"] * all_x.shape[0],
        dist_provenance=tags,
    )


def estimate_min_samples(
    basis: BasisSpec,
    d: int,
    probe_sampler,
    rng,
    growth: float = 1.25,
    confirmations: int = 2,
) -> int:
    """Smallest sample count at which the stage equality system stops
    gaining rank.

    ``probe_sampler(count, rng)`` must return equality rows (count, n_cols)
    drawn from the variety under consideration, one row per sample, columns
    spanning the (rho, vec(Q)) unknowns. Grows the sample set by 25% until
    the rank is unchanged twice in a row, then reports the count at which
    the final rank first appeared. Errors out if rank keeps climbing past
    ten times the unknown count.
    """
    if d < 0:
        raise ValueError("d must be >= 0")
    n_b = basis.size
    n_unknowns = 1 + n_b * (n_b + 1) // 2
    cap = 10 * n_unknowns
    count = n_b
    rows = probe_sampler(count, rng)
    rank = int(np.linalg.matrix_rank(rows))
    first_at = count
    stable = 0
    while stable < confirmations:
        new_count = int(math.ceil(count * growth))
        extra = probe_sampler(new_count - count, rng)
        rows = np.vstack([rows, extra])
        count = new_count
        new_rank = int(np.linalg.matrix_rank(rows))
        if new_rank == rank:
            stable += 1
        else:
            rank = new_rank
            first_at = count
            stable = 0
        if stable < confirmations and count > cap:
            raise RuntimeError(
                f"rank still rising at {count} samples (cap {cap}); "
                "variety or basis looks degenerate"
            )
    return first_at
