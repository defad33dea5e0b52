"""Truncated multivariate Taylor arithmetic for exact local expansions.

A ``TaylorScalar`` carries a polynomial in deviation variables, truncated at
a fixed total degree, through ordinary arithmetic. Running a dynamics
function on TaylorScalar inputs therefore yields its Taylor polynomial about
the chosen point with exact (not finite-difference) coefficients. The module
math functions (``sin``, ``exp``, ...) dispatch on input type so the same
dynamics source serves floats, numpy arrays, and TaylorScalar.
"""

from __future__ import annotations

import math

import numpy as np

from funnelkit.polynomials import MultiPoly


class TaylorScalar:
    """A polynomial truncated at ``max_degree``, closed under arithmetic."""

    __slots__ = ("poly", "max_degree")

    def __init__(self, poly: MultiPoly, max_degree: int):
        if max_degree < 1:
            raise ValueError("max_degree must be >= 1")
        self.poly = poly.truncated(max_degree)
        self.max_degree = int(max_degree)

    @classmethod
    def constant(cls, n_vars: int, value: float, max_degree: int) -> "TaylorScalar":
        return cls(MultiPoly.constant(n_vars, float(value)), max_degree)

    @classmethod
    def variable(
        cls, n_vars: int, index: int, center: float, max_degree: int
    ) -> "TaylorScalar":
        """Represents ``center + delta_index`` as a jet."""
        p = MultiPoly.constant(n_vars, float(center)) + MultiPoly.variable(n_vars, index)
        return cls(p, max_degree)

    @classmethod
    def variables(cls, centers, max_degree: int, n_vars: int | None = None):
        """Object array of jets, one deviation variable per entry of centers."""
        centers = np.asarray(centers, dtype=float)
        n = centers.size if n_vars is None else n_vars
        out = np.empty(centers.size, dtype=object)
        for i, c in enumerate(centers):
            out[i] = cls.variable(n, i, float(c), max_degree)
        return out

    @property
    def n_vars(self) -> int:
        return self.poly.n_vars

    @property
    def value(self) -> float:
        """Value at the expansion point (the constant term)."""
        return self.poly.constant_term

    def _wrap(self, other) -> "TaylorScalar | None":
        if isinstance(other, TaylorScalar):
            if other.max_degree != self.max_degree or other.n_vars != self.n_vars:
                raise ValueError("mixed truncation orders or variable counts")
            return other
        if isinstance(other, (int, float, np.integer, np.floating)):
            return TaylorScalar.constant(self.n_vars, float(other), self.max_degree)
        return None

    def __add__(self, other):
        o = self._wrap(other)
        if o is None:
            return NotImplemented
        return TaylorScalar(self.poly + o.poly, self.max_degree)

    __radd__ = __add__

    def __neg__(self):
        return TaylorScalar(-self.poly, self.max_degree)

    def __sub__(self, other):
        o = self._wrap(other)
        if o is None:
            return NotImplemented
        return TaylorScalar(self.poly - o.poly, self.max_degree)

    def __rsub__(self, other):
        o = self._wrap(other)
        if o is None:
            return NotImplemented
        return TaylorScalar(o.poly - self.poly, self.max_degree)

    def __mul__(self, other):
        o = self._wrap(other)
        if o is None:
            return NotImplemented
        return TaylorScalar(self.poly * o.poly, self.max_degree)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._wrap(other)
        if o is None:
            return NotImplemented
        return self * reciprocal(o)

    def __rtruediv__(self, other):
        o = self._wrap(other)
        if o is None:
            return NotImplemented
        return o * reciprocal(self)

    def __pow__(self, k):
        if isinstance(k, (int, np.integer)) and k >= 0:
            out = TaylorScalar.constant(self.n_vars, 1.0, self.max_degree)
            for _ in range(int(k)):
                out = out * self
            return out
        raise ValueError("only nonnegative integer powers; use sqrt/exp otherwise")

    def __repr__(self):
        return f"TaylorScalar({self.poly!r}, max_degree={self.max_degree})"


def _compose(ts: TaylorScalar, series: list[float]) -> TaylorScalar:
    """Evaluate sum_j series[j] * (ts - ts.value)^j by truncated Horner."""
    u = TaylorScalar(ts.poly - ts.value, ts.max_degree)
    out = TaylorScalar.constant(ts.n_vars, series[-1], ts.max_degree)
    for c in reversed(series[:-1]):
        out = out * u + c
    return out


def _series(ts: TaylorScalar, deriv_at_center) -> TaylorScalar:
    d = ts.max_degree
    coeffs = [deriv_at_center(j) / math.factorial(j) for j in range(d + 1)]
    return _compose(ts, coeffs)


def sin(x):
    if isinstance(x, TaylorScalar):
        a = x.value
        table = [math.sin(a), math.cos(a), -math.sin(a), -math.cos(a)]
        return _series(x, lambda j: table[j % 4])
    return np.sin(x)


def cos(x):
    if isinstance(x, TaylorScalar):
        a = x.value
        table = [math.cos(a), -math.sin(a), -math.cos(a), math.sin(a)]
        return _series(x, lambda j: table[j % 4])
    return np.cos(x)


def tan(x):
    if isinstance(x, TaylorScalar):
        return sin(x) / cos(x)
    return np.tan(x)


def exp(x):
    if isinstance(x, TaylorScalar):
        e = math.exp(x.value)
        return _series(x, lambda j: e)
    return np.exp(x)


def log(x):
    if isinstance(x, TaylorScalar):
        a = x.value
        if a <= 0.0:
            raise ValueError("log expansion point must be positive")

        def deriv(j):
            return math.log(a) if j == 0 else (-1.0) ** (j + 1) * math.factorial(j - 1) / a**j

        return _series(x, deriv)
    return np.log(x)


def sqrt(x):
    if isinstance(x, TaylorScalar):
        a = x.value
        if a <= 0.0:
            raise ValueError("sqrt expansion point must be positive")
        root = math.sqrt(a)

        def deriv(j):
            # d^j/dx^j x^(1/2) = (1/2)(1/2 - 1)...(1/2 - j + 1) x^(1/2 - j)
            c = 1.0
            for i in range(j):
                c *= 0.5 - i
            return c * root / a**j

        return _series(x, deriv)
    return np.sqrt(x)


def reciprocal(x):
    if isinstance(x, TaylorScalar):
        a = x.value
        if a == 0.0:
            raise ZeroDivisionError("division by a jet with zero value")
        return _series(x, lambda j: (-1.0) ** j * math.factorial(j) / a ** (j + 1))
    return 1.0 / np.asarray(x, dtype=float)


def jet_vector(values, max_degree: int, n_vars: int, offset: int = 0):
    """Object array of jets where entry i varies with deviation offset + i."""
    values = np.asarray(values, dtype=float)
    out = np.empty(values.size, dtype=object)
    for i, c in enumerate(values):
        out[i] = TaylorScalar.variable(n_vars, offset + i, float(c), max_degree)
    return out


def constant_vector(values, max_degree: int, n_vars: int):
    values = np.asarray(values, dtype=float)
    out = np.empty(values.size, dtype=object)
    for i, c in enumerate(values):
        out[i] = TaylorScalar.constant(n_vars, float(c), max_degree)
    return out
