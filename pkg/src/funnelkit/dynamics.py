"""Flight dynamics: planetary entry over a spherical planet, a Dubins car,
and closed-loop deviation models with polynomial expansion.

All rate functions are written against the dispatching math helpers in
``funnelkit.taylor``, so a single implementation evaluates on floats,
broadcast numpy arrays (vectorized Monte Carlo), and TaylorScalar jets
(exact linearization and polynomial expansion).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from funnelkit import taylor as tm
from funnelkit.polynomials import MultiPoly
from funnelkit.taylor import TaylorScalar


class DomainError(ValueError):
    """Dynamics evaluated outside the model's coordinate chart.

    ``denominator`` names the quantity that vanished.
    """

    def __init__(self, denominator: str, detail: str = ""):
        self.denominator = denominator
        msg = f"dynamics domain error: denominator {denominator} vanishes"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def _scalar_value(x) -> float:
    """Expansion-point value for jets, plain float otherwise."""
    if isinstance(x, TaylorScalar):
        return x.value
    return float(x)


# ----- atmosphere -----


@dataclass(frozen=True)
class AtmosphereModel:
    """Exponential density with a linear-in-altitude log slope.

    density(h) = exp(a0 + a1 * (h - h0)). Parameter offsets (da0, da1) shift
    the two log-density coefficients and model atmospheric uncertainty.
    """

    a0: float
    a1: float
    h0: float = 0.0

    def density(self, altitude, da0=0.0, da1=0.0):
        return tm.exp((self.a0 + da0) + (self.a1 + da1) * (altitude - self.h0))


# ----- entry vehicle -----


@dataclass
class EntryState:
    """Radius, longitude, latitude, speed, flight path angle, heading."""

    r: float
    theta: float
    phi: float
    V: float
    gamma: float
    psi: float

    def to_array(self) -> np.ndarray:
        return np.array([self.r, self.theta, self.phi, self.V, self.gamma, self.psi])

    @classmethod
    def from_array(cls, x) -> "EntryState":
        r, theta, phi, V, gamma, psi = (float(v) for v in x)
        return cls(r, theta, phi, V, gamma, psi)


ENTRY_DISTURBANCE_SLOTS = (
    "r_rate", "theta_rate", "phi_rate", "V_rate", "gamma_rate", "psi_rate",
    "density_a0", "density_a1",
)


@dataclass
class EntryParams:
    """Physical constants and uncertainty layout for the entry model.

    Gravity is mu / r^2. ``disturbance_mask`` selects which of the eight
    disturbance slots (six additive rate offsets, then the two density
    coefficient offsets) are active; the disturbance vector packs the active
    slots in that order. ``coriolis`` optionally supplies the rotating-planet
    rate corrections (C_gamma, C_psi); the default leaves both at zero,
    which is exact for omega_planet = 0.
    """

    mu: float
    planet_radius: float
    mass: float
    ref_area: float
    lift_coeff: float
    drag_coeff: float
    atmosphere: AtmosphereModel
    omega_planet: float = 0.0
    coriolis: Optional[Callable] = None
    disturbance_mask: tuple = (True,) * 8

    @classmethod
    def from_surface_gravity(cls, g0: float, planet_radius: float, **kw) -> "EntryParams":
        return cls(mu=g0 * planet_radius**2, planet_radius=planet_radius, **kw)

    @property
    def n_dist(self) -> int:
        return sum(bool(b) for b in self.disturbance_mask)

    def expand_disturbance(self, w):
        """Scatter the packed disturbance vector into the eight slots."""
        full = [0.0] * len(ENTRY_DISTURBANCE_SLOTS)
        j = 0
        for i, active in enumerate(self.disturbance_mask):
            if active:
                full[i] = w[j]
                j += 1
        return full


def _entry_rate_components(x, bank, w_full, params: EntryParams):
    r, theta, phi, V, gamma, psi = x[0], x[1], x[2], x[3], x[4], x[5]
    sg, cg = tm.sin(gamma), tm.cos(gamma)
    sp, cp = tm.sin(psi), tm.cos(psi)
    cphi = tm.cos(phi)
    tphi = tm.tan(phi)
    altitude = r - params.planet_radius
    rho = params.atmosphere.density(altitude, w_full[6], w_full[7])
    q = 0.5 * rho * V * V * params.ref_area / params.mass
    lift = q * params.lift_coeff
    drag = q * params.drag_coeff
    g = params.mu / (r * r)

    if params.coriolis is not None:
        c_gamma, c_psi = params.coriolis(x, params)
    else:
        c_gamma, c_psi = 0.0, 0.0

    r_dot = V * sg
    theta_dot = V * cg * cp / (r * cphi)
    phi_dot = V * cg * sp / r
    v_dot = -drag - g * sg
    gamma_dot = (lift * tm.cos(bank) - (g - V * V / r) * cg) / V + c_gamma
    psi_dot = -(lift * tm.sin(bank) + (V * V / r) * cg * cg * cp * tphi) / (V * cg) + c_psi

    return [
        r_dot + w_full[0],
        theta_dot + w_full[1],
        phi_dot + w_full[2],
        v_dot + w_full[3],
        gamma_dot + w_full[4],
        psi_dot + w_full[5],
    ]


def vinh_derivative(state, bank, w, params: EntryParams) -> np.ndarray:
    """Entry state derivative at a single state.

    Raises DomainError naming the offending denominator when the chart
    degenerates: nonpositive r or V, cos(phi) below 1e-12 in magnitude, or
    cos(gamma) exactly zero. Near-vertical flight (cos(gamma) tiny but
    nonzero) evaluates per formula.
    """
    x = state.to_array() if isinstance(state, EntryState) else np.asarray(state, dtype=float)
    if x.shape != (6,):
        raise ValueError("state must have six components")
    r, phi, V, gamma = x[0], x[2], x[3], x[4]
    if r <= 0.0:
        raise DomainError("r", f"r = {r}")
    if V <= 0.0:
        raise DomainError("V", f"V = {V}")
    if abs(np.cos(phi)) < 1e-12:
        raise DomainError("cos(phi)", f"phi = {phi}")
    if np.cos(gamma) == 0.0:
        raise DomainError("cos(gamma)", f"gamma = {gamma}")
    w = np.zeros(params.n_dist) if w is None else np.asarray(w, dtype=float)
    if w.shape != (params.n_dist,):
        raise ValueError(f"disturbance must have {params.n_dist} components")
    out = np.array(_entry_rate_components(x, bank, params.expand_disturbance(w), params))
    if not np.all(np.isfinite(out)):
        dens = {"r": r, "V": V, "cos(phi)": np.cos(phi), "cos(gamma)": np.cos(gamma)}
        worst = min(dens, key=lambda k: abs(dens[k]))
        raise DomainError(worst, "non-finite rate")
    return out


class EntryModel:
    """Open-loop entry dynamics with bank angle as the single control."""

    n_states = 6
    n_controls = 1

    def __init__(self, params: EntryParams):
        self.params = params

    @property
    def n_dist(self) -> int:
        return self.params.n_dist

    def rates(self, x, u, w):
        """Rates for float, broadcast-array, or jet inputs.

        ``x`` indexes six components, ``u`` one (bank), ``w`` the active
        disturbance slots. Array inputs propagate non-finite values instead
        of raising; use ``valid_mask`` to detect them.
        """
        if w is None:
            w_full = [0.0] * 8
        else:
            w_full = self.params.expand_disturbance(w)
        with np.errstate(all="ignore"):
            return _entry_rate_components(x, u[0], w_full, self.params)

    def valid_mask(self, x) -> np.ndarray:
        """Chart-validity mask for broadcast states x[0..5] of shape (m,)."""
        r, phi, V, gamma = x[0], x[2], x[3], x[4]
        ok = (r > 0) & (V > 0)
        ok &= np.abs(np.cos(phi)) >= 1e-12
        ok &= np.cos(gamma) != 0.0
        return ok


# ----- Dubins car -----


@dataclass
class DubinsState:
    x: float
    y: float
    heading: float

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])

    @classmethod
    def from_array(cls, arr) -> "DubinsState":
        x, y, heading = (float(v) for v in arr)
        return cls(x, y, heading)


def dubins_derivative(state, turn_rate: float, speed: float) -> np.ndarray:
    """Planar unicycle rates: constant speed, commanded turn rate."""
    arr = state.to_array() if isinstance(state, DubinsState) else np.asarray(state, dtype=float)
    heading = arr[2]
    return np.array([speed * np.cos(heading), speed * np.sin(heading), turn_rate])


class DubinsModel:
    """Open-loop Dubins car with additive disturbances on selected rates."""

    n_states = 3
    n_controls = 1

    def __init__(self, speed: float, disturbance_mask: tuple = (True, True, True)):
        self.speed = float(speed)
        self.disturbance_mask = tuple(bool(b) for b in disturbance_mask)

    @property
    def n_dist(self) -> int:
        return sum(self.disturbance_mask)

    def _expand(self, w):
        full = [0.0, 0.0, 0.0]
        j = 0
        for i, active in enumerate(self.disturbance_mask):
            if active:
                full[i] = w[j]
                j += 1
        return full

    def rates(self, x, u, w):
        heading = x[2]
        w_full = [0.0, 0.0, 0.0] if w is None else self._expand(w)
        return [
            self.speed * tm.cos(heading) + w_full[0],
            self.speed * tm.sin(heading) + w_full[1],
            u[0] + w_full[2],
        ]

    def valid_mask(self, x) -> np.ndarray:
        return np.ones(np.shape(x[0]), dtype=bool) if np.ndim(x[0]) else np.True_


# ----- linear test model -----


class LinearModel:
    """x_dot = A x + B u + G w; handy as a ground-truth fixture."""

    def __init__(self, A, B, G=None):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.G = np.eye(self.A.shape[0]) if G is None else np.asarray(G, dtype=float)
        self.n_states = self.A.shape[0]
        self.n_controls = self.B.shape[1]

    @property
    def n_dist(self) -> int:
        return self.G.shape[1]

    def rates(self, x, u, w):
        out = []
        for i in range(self.n_states):
            acc = 0.0
            for j in range(self.n_states):
                if self.A[i, j]:
                    acc = acc + self.A[i, j] * x[j]
            for j in range(self.n_controls):
                if self.B[i, j]:
                    acc = acc + self.B[i, j] * u[j]
            if w is not None:
                for j in range(self.G.shape[1]):
                    if self.G[i, j]:
                        acc = acc + self.G[i, j] * w[j]
            out.append(acc)
        return out

    def valid_mask(self, x) -> np.ndarray:
        return np.ones(np.shape(x[0]), dtype=bool) if np.ndim(x[0]) else np.True_


# ----- closed-loop deviation dynamics -----


@dataclass
class ClosedLoopModel:
    """Deviation dynamics around one reference point under linear feedback.

    The control applied at deviation xbar is u_ref + gain @ xbar, and the
    deviation rate is f(x_ref + xbar, u_ref + gain @ xbar, w) minus the
    undisturbed reference rate f(x_ref, u_ref, 0).
    """

    model: object
    x_ref: np.ndarray
    u_ref: np.ndarray
    gain: np.ndarray
    _nominal: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.x_ref = np.asarray(self.x_ref, dtype=float)
        self.u_ref = np.asarray(self.u_ref, dtype=float)
        self.gain = np.asarray(self.gain, dtype=float)
        if self.gain.shape != (self.model.n_controls, self.model.n_states):
            raise ValueError("gain must have shape (n_controls, n_states)")
        self._nominal = np.array(
            [float(v) for v in self.model.rates(self.x_ref, self.u_ref, None)]
        )

    @property
    def n_states(self) -> int:
        return self.model.n_states

    @property
    def n_dist(self) -> int:
        return self.model.n_dist

    def control(self, xbar):
        u = []
        for i in range(self.model.n_controls):
            acc = self.u_ref[i]
            for j in range(self.model.n_states):
                if self.gain[i, j]:
                    acc = acc + self.gain[i, j] * xbar[j]
            u.append(acc)
        return u

    def deviation_rates(self, xbar, w):
        x = [self.x_ref[i] + xbar[i] for i in range(self.model.n_states)]
        raw = self.model.rates(x, self.control(xbar), w)
        return [raw[i] - self._nominal[i] for i in range(self.model.n_states)]


def closed_loop_deviation(closed_loop: ClosedLoopModel, xbar, w) -> np.ndarray:
    """Deviation rate as a plain array; zero at (xbar, w) = (0, 0)."""
    return np.array([float(v) for v in closed_loop.deviation_rates(xbar, w)])


def polynomialize(closed_loop: ClosedLoopModel, degree: int = 3) -> list[MultiPoly]:
    """Taylor-expand the deviation dynamics about (xbar, w) = (0, 0).

    Returns one polynomial per state, each over n_states + n_dist variables
    (deviations first, disturbances after) with total degree <= degree and a
    structurally zero constant term. Coefficients are exact derivatives of
    the model, not fitted.
    """
    n, p = closed_loop.n_states, closed_loop.n_dist
    nv = n + p
    xbar = [TaylorScalar.variable(nv, i, 0.0, degree) for i in range(n)]
    w = [TaylorScalar.variable(nv, n + j, 0.0, degree) for j in range(p)]
    x = [TaylorScalar.constant(nv, closed_loop.x_ref[i], degree) + xbar[i] for i in range(n)]
    raw = closed_loop.model.rates(x, closed_loop.control(xbar), w)

    # evaluate the reference rate through the identical jet arithmetic so the
    # constant terms cancel exactly rather than to roundoff
    x0 = [TaylorScalar.constant(nv, closed_loop.x_ref[i], degree) for i in range(n)]
    u0 = [TaylorScalar.constant(nv, closed_loop.u_ref[i], degree)
          for i in range(closed_loop.model.n_controls)]
    w0 = [TaylorScalar.constant(nv, 0.0, degree) for _ in range(p)]
    nominal = closed_loop.model.rates(x0, u0, w0)

    out = []
    for i in range(n):
        poly = raw[i].poly - nominal[i].poly
        resid = poly.constant_term
        scale = max(1.0, poly.max_abs_coeff())
        if abs(resid) > 1e-9 * scale:
            raise ArithmeticError(
                f"deviation expansion kept a constant term {resid:.3e} in state {i}"
            )
        if resid:
            poly = poly - resid
        out.append(poly)
    return out
