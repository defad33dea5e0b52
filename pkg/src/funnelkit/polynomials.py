"""Sparse multivariate polynomials, graded bases, and a damped Newton solver.

Everything downstream (dynamics expansions, boundary constraints, Gram rows)
is built from ``MultiPoly``, so term storage is kept canonical: exponent
tuples sorted in graded lexicographic order with zero coefficients dropped.
Canonical ordering makes every floating-point reduction reproducible
bit-for-bit, which the run artifacts rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from math import comb

import numpy as np

Exponents = tuple[int, ...]


def _grlex_key(expts: Exponents):
    # total degree first, then x0 before x1 before x2 within a grade
    return (sum(expts), tuple(-e for e in expts))


def graded_exponents(n_vars: int, max_degree: int) -> list[Exponents]:
    """All exponent tuples with total degree <= max_degree, graded lex order."""
    if n_vars < 1 or max_degree < 0:
        raise ValueError("need n_vars >= 1 and max_degree >= 0")
    out: list[Exponents] = []
    for deg in range(max_degree + 1):
        level = []
        for bars in combinations_with_replacement(range(n_vars), deg):
            e = [0] * n_vars
            for i in bars:
                e[i] += 1
            level.append(tuple(e))
        out.extend(sorted(level, key=_grlex_key))
    return out


class MultiPoly:
    """Sparse polynomial in ``n_vars`` real variables.

    ``terms`` maps exponent tuples to nonzero coefficients. Instances are
    treated as immutable; arithmetic returns new polynomials.

    Example::

        x = MultiPoly.variable(2, 0)
        y = MultiPoly.variable(2, 1)
        p = x * x + 2.0 * y - 1.0
        p.evaluate(np.array([3.0, 0.5]))   # 9.0
    """

    __slots__ = ("n_vars", "terms", "_packed")

    def __init__(self, n_vars: int, terms: dict[Exponents, float] | None = None):
        if n_vars < 1:
            raise ValueError("n_vars must be >= 1")
        self.n_vars = int(n_vars)
        clean: dict[Exponents, float] = {}
        if terms:
            for e in sorted(terms, key=_grlex_key):
                c = float(terms[e])
                if len(e) != n_vars:
                    raise ValueError(f"exponent tuple {e} has wrong arity")
                if any(k < 0 for k in e):
                    raise ValueError(f"negative exponent in {e}")
                if c != 0.0:
                    clean[tuple(int(k) for k in e)] = c
        self.terms = clean
        self._packed = None

    # ----- constructors -----

    @classmethod
    def zero(cls, n_vars: int) -> "MultiPoly":
        return cls(n_vars)

    @classmethod
    def constant(cls, n_vars: int, value: float) -> "MultiPoly":
        return cls(n_vars, {(0,) * n_vars: float(value)})

    @classmethod
    def variable(cls, n_vars: int, index: int) -> "MultiPoly":
        if not 0 <= index < n_vars:
            raise ValueError("variable index out of range")
        e = [0] * n_vars
        e[index] = 1
        return cls(n_vars, {tuple(e): 1.0})

    # ----- basic queries -----

    @property
    def degree(self) -> int:
        """Total degree; zero polynomial reports 0."""
        if not self.terms:
            return 0
        return max(sum(e) for e in self.terms)

    def coefficient(self, expts: Exponents) -> float:
        return self.terms.get(tuple(expts), 0.0)

    @property
    def constant_term(self) -> float:
        return self.terms.get((0,) * self.n_vars, 0.0)

    def is_zero(self) -> bool:
        return not self.terms

    def max_abs_coeff(self) -> float:
        if not self.terms:
            return 0.0
        return max(abs(c) for c in self.terms.values())

    # ----- arithmetic -----

    def _coerce(self, other):
        if isinstance(other, MultiPoly):
            if other.n_vars != self.n_vars:
                raise ValueError("variable count mismatch")
            return other
        if isinstance(other, (int, float, np.integer, np.floating)):
            return MultiPoly.constant(self.n_vars, float(other))
        return None

    def __add__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        merged = dict(self.terms)
        for e, c in o.terms.items():
            merged[e] = merged.get(e, 0.0) + c
        return MultiPoly(self.n_vars, merged)

    __radd__ = __add__

    def __neg__(self):
        return MultiPoly(self.n_vars, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return self + (-o)

    def __rsub__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return o + (-self)

    def __mul__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        prod: dict[Exponents, float] = {}
        for e1, c1 in self.terms.items():
            for e2, c2 in o.terms.items():
                e = tuple(a + b for a, b in zip(e1, e2))
                prod[e] = prod.get(e, 0.0) + c1 * c2
        return MultiPoly(self.n_vars, prod)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        if not isinstance(k, (int, np.integer)) or k < 0:
            raise ValueError("exponent must be a nonnegative integer")
        out = MultiPoly.constant(self.n_vars, 1.0)
        for _ in range(int(k)):
            out = out * self
        return out

    def truncated(self, max_degree: int) -> "MultiPoly":
        """Drop every term of total degree above ``max_degree``."""
        return MultiPoly(
            self.n_vars,
            {e: c for e, c in self.terms.items() if sum(e) <= max_degree},
        )

    # ----- evaluation -----

    def _pack(self):
        if self._packed is None:
            exps = list(self.terms)
            E = np.array(exps, dtype=np.int64).reshape(len(exps), self.n_vars)
            c = np.array([self.terms[e] for e in exps], dtype=float)
            self._packed = (E, c)
        return self._packed

    def evaluate(self, point: np.ndarray) -> float:
        """Value at a single point, shape (n_vars,)."""
        return float(self.evaluate_many(np.asarray(point, dtype=float)[None, :])[0])

    def evaluate_many(self, points: np.ndarray) -> np.ndarray:
        """Values at points of shape (m, n_vars)."""
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != self.n_vars:
            raise ValueError("points must have shape (m, n_vars)")
        if not self.terms:
            return np.zeros(points.shape[0])
        E, c = self._pack()
        # prod over vars of x_j ** e_j for every term, summed in canonical order
        monos = np.prod(points[:, None, :] ** E[None, :, :], axis=2)
        return monos @ c

    # ----- calculus and substitution -----

    def partial(self, index: int) -> "MultiPoly":
        """Partial derivative with respect to variable ``index``."""
        if not 0 <= index < self.n_vars:
            raise ValueError("variable index out of range")
        out: dict[Exponents, float] = {}
        for e, c in self.terms.items():
            k = e[index]
            if k == 0:
                continue
            de = list(e)
            de[index] = k - 1
            key = tuple(de)
            out[key] = out.get(key, 0.0) + c * k
        return MultiPoly(self.n_vars, out)

    def gradient(self, indices: list[int] | None = None) -> list["MultiPoly"]:
        idx = range(self.n_vars) if indices is None else indices
        return [self.partial(i) for i in idx]

    def substitute(self, assignments: dict[int, float]) -> "MultiPoly":
        """Fix some variables to numbers; arity is unchanged."""
        out: dict[Exponents, float] = {}
        for e, c in self.terms.items():
            val = c
            new_e = list(e)
            for i, x in assignments.items():
                if e[i]:
                    val *= float(x) ** e[i]
                    new_e[i] = 0
            key = tuple(new_e)
            out[key] = out.get(key, 0.0) + val
        return MultiPoly(self.n_vars, out)

    def restrict(self, keep: list[int]) -> "MultiPoly":
        """Project onto a subset of variables.

        Every term must have zero exponent outside ``keep``; substitute first
        if it does not.
        """
        keep = list(keep)
        pos = {v: j for j, v in enumerate(keep)}
        out: dict[Exponents, float] = {}
        for e, c in self.terms.items():
            new_e = [0] * len(keep)
            for i, k in enumerate(e):
                if k == 0:
                    continue
                if i not in pos:
                    raise ValueError(f"term {e} depends on dropped variable {i}")
                new_e[pos[i]] = k
            key = tuple(new_e)
            out[key] = out.get(key, 0.0) + c
        return MultiPoly(len(keep), out)

    def embed(self, n_vars: int, mapping: list[int]) -> "MultiPoly":
        """Relabel variables into a larger space: old var i becomes mapping[i]."""
        if len(mapping) != self.n_vars:
            raise ValueError("mapping must list one target per variable")
        out: dict[Exponents, float] = {}
        for e, c in self.terms.items():
            new_e = [0] * n_vars
            for i, k in enumerate(e):
                new_e[mapping[i]] += k
            out[tuple(new_e)] = out.get(tuple(new_e), 0.0) + c
        return MultiPoly(n_vars, out)

    # ----- comparison and display -----

    def almost_equal(self, other: "MultiPoly", tol: float = 1e-12) -> bool:
        o = self._coerce(other)
        diff = self - o
        return diff.max_abs_coeff() <= tol

    def __eq__(self, other):
        o = self._coerce(other)
        if o is None:
            return NotImplemented
        return self.terms == o.terms

    def __hash__(self):
        return hash((self.n_vars, tuple(self.terms.items())))

    def __repr__(self):
        if not self.terms:
            return "MultiPoly(0)"
        bits = []
        for e, c in self.terms.items():
            mono = "*".join(
                f"x{i}" + (f"^{k}" if k > 1 else "")
                for i, k in enumerate(e)
                if k
            )
            bits.append(f"{c:g}" + (f"*{mono}" if mono else ""))
        return "MultiPoly(" + " + ".join(bits) + ")"


def quadratic_form(matrix: np.ndarray, scale: float = 1.0) -> MultiPoly:
    """The polynomial ``scale * x^T M x`` over len(M) variables."""
    M = np.asarray(matrix, dtype=float)
    n = M.shape[0]
    terms: dict[Exponents, float] = {}
    for i in range(n):
        for j in range(n):
            e = [0] * n
            e[i] += 1
            e[j] += 1
            key = tuple(e)
            terms[key] = terms.get(key, 0.0) + scale * M[i, j]
    return MultiPoly(n, terms)


# ----- graded polynomial bases -----


@dataclass(frozen=True)
class BasisSpec:
    """Recipe for a graded polynomial basis of all degrees <= max_degree."""

    n_vars: int
    max_degree: int
    kind: str = "hermite"

    def __post_init__(self):
        if self.n_vars < 1 or self.max_degree < 0:
            raise ValueError("need n_vars >= 1 and max_degree >= 0")
        if self.kind not in ("hermite", "monomial"):
            raise ValueError(f"unknown basis kind {self.kind!r}")

    @property
    def size(self) -> int:
        return comb(self.n_vars + self.max_degree, self.max_degree)


def _hermite_1d(max_degree: int) -> list[MultiPoly]:
    # probabilists' recurrence He_{k+1} = x He_k - k He_{k-1}
    x = MultiPoly.variable(1, 0)
    seq = [MultiPoly.constant(1, 1.0)]
    if max_degree >= 1:
        seq.append(x)
    for k in range(1, max_degree):
        seq.append(x * seq[k] - float(k) * seq[k - 1])
    return seq

def hermite_basis(spec: BasisSpec) -> list[MultiPoly]:
    """Basis as explicit polynomials, one per graded exponent tuple.

    Hermite entries are tensor products of probabilists' Hermite polynomials;
    when spec.kind is "monomial" the entries are plain monomials instead.
    Length is C(n_vars + max_degree, max_degree) either way.
    """
    out: list[MultiPoly] = []
    herm = _hermite_1d(spec.max_degree) if spec.kind == "hermite" else None
    for e in graded_exponents(spec.n_vars, spec.max_degree):
        p = MultiPoly.constant(spec.n_vars, 1.0)
        for i, k in enumerate(e):
            if k == 0:
                continue
            if herm is not None:
                factor = herm[k].embed(spec.n_vars, [i])
            else:
                factor = MultiPoly.variable(spec.n_vars, i) ** k
            p = p * factor
        out.append(p)
    return out


def evaluate_basis(spec: BasisSpec, points: np.ndarray) -> np.ndarray:
    """Basis values at points (m, n_vars), returned as (m, spec.size).

    Uses the three-term recurrence directly, so it is both faster and better
    conditioned than evaluating the expanded polynomials.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != spec.n_vars:
        raise ValueError("points must have shape (m, n_vars)")
    m = points.shape[0]
    # per-variable 1-d values, table[d][:, i] = He_d(x_i) or x_i**d
    table = [np.ones((m, spec.n_vars))]
    if spec.max_degree >= 1:
        table.append(points.copy())
    for k in range(1, spec.max_degree):
        if spec.kind == "hermite":
            table.append(points * table[k] - float(k) * table[k - 1])
        else:
            table.append(points * table[k])
    cols = np.empty((m, spec.size))
    for j, e in enumerate(graded_exponents(spec.n_vars, spec.max_degree)):
        col = np.ones(m)
        for i, k in enumerate(e):
            if k:
                col = col * table[k][:, i]
        cols[:, j] = col
    return cols


# ----- damped Newton root finding -----


@dataclass
class NewtonResult:
    x: np.ndarray
    success: bool
    iterations: int
    residual: float
    message: str


def newton_solve(
    system: list[MultiPoly],
    guess: np.ndarray,
    tol: float = 1e-12,
    max_iterations: int = 50,
) -> NewtonResult:
    """Find a root of a square or underdetermined polynomial system.

    Takes full Newton steps, halving the step until the max-norm residual
    decreases (at most 20 halvings per iteration). Underdetermined systems
    use the least-norm step. Never raises on failure; inspect ``success``
    and ``message``.
    """
    if not system:
        raise ValueError("empty system")
    n = system[0].n_vars
    if any(p.n_vars != n for p in system):
        raise ValueError("variable count mismatch in system")
    if len(system) > n:
        raise ValueError("overdetermined system: more equations than variables")

    grads = [p.gradient() for p in system]

    def fval(x):
        return np.array([p.evaluate(x) for p in system])

    def jac(x):
        return np.array([[g.evaluate(x) for g in row] for row in grads])

    x = np.asarray(guess, dtype=float).copy()
    if x.shape != (n,):
        raise ValueError("guess must have shape (n_vars,)")
    f = fval(x)
    res = float(np.max(np.abs(f)))
    for it in range(1, max_iterations + 1):
        if res <= tol:
            return NewtonResult(x, True, it - 1, res, "converged")
        J = jac(x)
        if not np.all(np.isfinite(J)):
            return NewtonResult(x, False, it - 1, res, "non-finite jacobian")
        if len(system) == n:
            try:
                step = np.linalg.solve(J, -f)
            except np.linalg.LinAlgError:
                return NewtonResult(x, False, it - 1, res, "singular jacobian")
        else:
            step = np.linalg.lstsq(J, -f, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            return NewtonResult(x, False, it - 1, res, "non-finite step")
        lam = 1.0
        for _ in range(20):
            trial = x + lam * step
            f_trial = fval(trial)
            res_trial = float(np.max(np.abs(f_trial)))
            if res_trial < res or res_trial <= tol:
                x, f, res = trial, f_trial, res_trial
                break
            lam *= 0.5
        else:
            return NewtonResult(x, False, it, res, "line search stalled")
    ok = res <= tol
    return NewtonResult(
        x, ok, max_iterations, res,
        "converged" if ok else "iteration limit reached",
    )
