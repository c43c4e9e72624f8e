"""Multivariate polynomial algebra.

Polynomials are stored as a map from exponent multi-indices to float
coefficients, kept in canonical form (no explicitly stored zeros).  On top of
the plain arithmetic this module provides symbolic differentiation, affine
variable substitution, compiled (vectorized) evaluators, and Taylor expansion
of smooth maps through truncated-polynomial forward-mode arithmetic (jets).
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

# Coefficients below this magnitude are dropped during canonicalization so
# that downstream gram-matrix assembly stays well conditioned.
COEFF_DROP_TOL = 1e-14


def _canonical(terms: dict[tuple[int, ...], float]) -> dict[tuple[int, ...], float]:
    return {a: float(c) for a, c in terms.items() if abs(c) > COEFF_DROP_TOL}


class Polynomial:
    """A real multivariate polynomial with a fixed number of variables."""

    __slots__ = ("dimension", "terms")

    def __init__(self, dimension: int, terms: dict[tuple[int, ...], float] | None = None):
        if dimension < 1:
            raise DimensionError(f"dimension must be positive, got {dimension}")
        self.dimension = int(dimension)
        terms = _canonical(terms or {})
        for a in terms:
            if len(a) != dimension:
                raise DimensionError(f"multi-index {a} does not have length {dimension}")
        self.terms = terms

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zero(dimension: int) -> "Polynomial":
        return Polynomial(dimension, {})

    @staticmethod
    def constant(dimension: int, value: float) -> "Polynomial":
        return Polynomial(dimension, {(0,) * dimension: float(value)})

    @staticmethod
    def variable(dimension: int, index: int) -> "Polynomial":
        if not 0 <= index < dimension:
            raise DimensionError(f"variable index {index} out of range for dimension {dimension}")
        a = [0] * dimension
        a[index] = 1
        return Polynomial(dimension, {tuple(a): 1.0})

    # -- basic queries -----------------------------------------------------

    def degree(self) -> int:
        """Max total degree over stored terms; 0 for the zero polynomial."""
        if not self.terms:
            return 0
        return max(sum(a) for a in self.terms)

    def min_degree(self) -> int:
        if not self.terms:
            return 0
        return min(sum(a) for a in self.terms)

    def is_zero(self) -> bool:
        return not self.terms

    def constant_term(self) -> float:
        return self.terms.get((0,) * self.dimension, 0.0)

    def coefficient(self, alpha: tuple[int, ...]) -> float:
        return self.terms.get(tuple(alpha), 0.0)

    def sorted_terms(self) -> list[tuple[tuple[int, ...], float]]:
        """Terms in graded-lex order (total degree, then lexicographic)."""
        return sorted(self.terms.items(), key=lambda t: (sum(t[0]), t[0]))

    def __repr__(self) -> str:
        if not self.terms:
            return "Polynomial(0)"
        bits = []
        for a, c in self.sorted_terms():
            mono = "*".join(f"x{i}^{e}" for i, e in enumerate(a) if e) or "1"
            bits.append(f"{c:+.6g}*{mono}")
        return "Polynomial(" + " ".join(bits) + ")"

    # -- arithmetic --------------------------------------------------------

    def _check_same_dim(self, other: "Polynomial") -> None:
        if self.dimension != other.dimension:
            raise DimensionError(
                f"dimension mismatch: {self.dimension} vs {other.dimension}")

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.dimension, other)
        self._check_same_dim(other)
        out = dict(self.terms)
        for a, c in other.terms.items():
            out[a] = out.get(a, 0.0) + c
        return Polynomial(self.dimension, out)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial(self.dimension, {a: -c for a, c in self.terms.items()})

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = Polynomial.constant(self.dimension, other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        return self.mul(other)

    __rmul__ = __mul__

    def scale(self, c: float) -> "Polynomial":
        return Polynomial(self.dimension, {a: v * c for a, v in self.terms.items()})

    def mul(self, other: "Polynomial", max_degree: int | None = None) -> "Polynomial":
        """Product, optionally truncated at a total degree bound."""
        self._check_same_dim(other)
        out: dict[tuple[int, ...], float] = {}
        for a, ca in self.terms.items():
            da = sum(a)
            for b, cb in other.terms.items():
                if max_degree is not None and da + sum(b) > max_degree:
                    continue
                key = tuple(i + j for i, j in zip(a, b))
                out[key] = out.get(key, 0.0) + ca * cb
        return Polynomial(self.dimension, out)

    def __pow__(self, k: int) -> "Polynomial":
        if k < 0:
            raise ValueError("negative powers are not polynomials")
        result = Polynomial.constant(self.dimension, 1.0)
        base = self
        while k:
            if k & 1:
                result = result.mul(base)
            base = base.mul(base) if k > 1 else base
            k >>= 1
        return result

    def truncate(self, max_degree: int) -> "Polynomial":
        return Polynomial(
            self.dimension, {a: c for a, c in self.terms.items() if sum(a) <= max_degree})

    # -- calculus and substitution ------------------------------------------

    def differentiate(self, var: int) -> "Polynomial":
        if not 0 <= var < self.dimension:
            raise DimensionError(f"variable index {var} out of range")
        out: dict[tuple[int, ...], float] = {}
        for a, c in self.terms.items():
            e = a[var]
            if e == 0:
                continue
            b = list(a)
            b[var] = e - 1
            key = tuple(b)
            out[key] = out.get(key, 0.0) + c * e
        return Polynomial(self.dimension, out)

    def evaluate(self, point: Sequence[float]) -> float:
        point = np.asarray(point, dtype=float)
        if point.shape != (self.dimension,):
            raise DimensionError(
                f"point has shape {point.shape}, expected ({self.dimension},)")
        total = 0.0
        for a, c in self.terms.items():
            v = c
            for xi, e in zip(point, a):
                if e:
                    v *= xi ** e
            total += v
        return total

    def compose_affine(self, M: np.ndarray, v: np.ndarray) -> "Polynomial":
        """Substitute old variables y = M x + v; returns a polynomial in x.

        M maps the new variables to the old ones (shape old_dim x new_dim).
        """
        M = np.asarray(M, dtype=float)
        v = np.asarray(v, dtype=float)
        if M.shape[0] != self.dimension or v.shape != (self.dimension,):
            raise DimensionError(
                f"affine map shape {M.shape}/{v.shape} incompatible with dimension {self.dimension}")
        new_dim = M.shape[1]
        if new_dim == self.dimension and np.array_equal(M, np.eye(self.dimension)):
            return self._shift(v)
        subs = []
        for i in range(self.dimension):
            t: dict[tuple[int, ...], float] = {}
            if v[i] != 0.0:
                t[(0,) * new_dim] = v[i]
            for j in range(new_dim):
                if M[i, j] != 0.0:
                    a = [0] * new_dim
                    a[j] = 1
                    t[tuple(a)] = M[i, j]
            subs.append(Polynomial(new_dim, t))
        # Cache powers of each substituted variable up to its max exponent.
        max_pow = [0] * self.dimension
        for a in self.terms:
            for i, e in enumerate(a):
                max_pow[i] = max(max_pow[i], e)
        powers: list[list[Polynomial]] = []
        for i in range(self.dimension):
            row = [Polynomial.constant(new_dim, 1.0)]
            for _ in range(max_pow[i]):
                row.append(row[-1].mul(subs[i]))
            powers.append(row)
        out = Polynomial.zero(new_dim)
        for a, c in self.terms.items():
            term = Polynomial.constant(new_dim, c)
            for i, e in enumerate(a):
                if e:
                    term = term.mul(powers[i][e])
            out = out + term
        return out

    def _shift(self, v: np.ndarray) -> "Polynomial":
        """Fast path for pure translation x -> x + v (one variable at a time)."""
        p = self
        for i, c in enumerate(v):
            if c == 0.0:
                continue
            out: dict[tuple[int, ...], float] = {}
            for a, coeff in p.terms.items():
                e = a[i]
                base = list(a)
                for k in range(e + 1):
                    base[i] = k
                    key = tuple(base)
                    out[key] = out.get(key, 0.0) + coeff * math.comb(e, k) * c ** (e - k)
            p = Polynomial(p.dimension, out)
        return p


class PolynomialMap:
    """A vector-valued polynomial: an ordered list of components sharing input_dim."""

    __slots__ = ("input_dim", "components")

    def __init__(self, components: Sequence[Polynomial]):
        components = list(components)
        if not components:
            raise DimensionError("a polynomial map needs at least one component")
        dim = components[0].dimension
        for p in components:
            if p.dimension != dim:
                raise DimensionError("all components must share the input dimension")
        self.input_dim = dim
        self.components = components

    @property
    def output_dim(self) -> int:
        return len(self.components)

    def degree(self) -> int:
        return max(p.degree() for p in self.components)

    def evaluate(self, point: Sequence[float]) -> np.ndarray:
        return np.array([p.evaluate(point) for p in self.components])

    def jacobian(self, point: Sequence[float]) -> np.ndarray:
        point = np.asarray(point, dtype=float)
        if point.shape != (self.input_dim,):
            raise DimensionError(
                f"point has shape {point.shape}, expected ({self.input_dim},)")
        J = np.empty((self.output_dim, self.input_dim))
        for i, p in enumerate(self.components):
            for j in range(self.input_dim):
                J[i, j] = p.differentiate(j).evaluate(point)
        return J

    def compose_affine(self, M: np.ndarray, v: np.ndarray) -> "PolynomialMap":
        return PolynomialMap([p.compose_affine(M, v) for p in self.components])

    def compile(self) -> "CompiledMap":
        return CompiledMap(self)


# -- module-level operation wrappers ----------------------------------------

def poly_eval(p: Polynomial, point: Sequence[float]) -> float:
    return p.evaluate(point)


def poly_add(a: Polynomial, b: Polynomial) -> Polynomial:
    return a + b


def poly_mul(a: Polynomial, b: Polynomial) -> Polynomial:
    return a.mul(b)


def poly_scale(a: Polynomial, c: float) -> Polynomial:
    return a.scale(c)


def poly_compose_affine(a: Polynomial, M: np.ndarray, v: np.ndarray) -> Polynomial:
    return a.compose_affine(M, v)


def poly_jacobian(f: PolynomialMap, point: Sequence[float]) -> np.ndarray:
    return f.jacobian(point)


# -- compiled evaluators -----------------------------------------------------

class CompiledMap:
    """Vectorized evaluator for a PolynomialMap and its Jacobian.

    All components share one exponent matrix so a single batch of monomial
    values feeds every output; the symbolic partial derivatives are compiled
    the same way.  Hot loops (simulation, training) should go through this.
    """

    def __init__(self, pmap: PolynomialMap):
        self.input_dim = pmap.input_dim
        self.output_dim = pmap.output_dim
        self.E, self.C = _pack([p.terms for p in pmap.components], pmap.input_dim)
        derivs = []
        for p in pmap.components:
            for j in range(pmap.input_dim):
                derivs.append(p.differentiate(j).terms)
        EJ, CJ = _pack(derivs, pmap.input_dim)
        self.EJ = EJ
        self.CJ = CJ.reshape(self.output_dim, self.input_dim, -1)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.C @ _monomials(self.E, np.asarray(x, dtype=float))

    def batch(self, X: np.ndarray) -> np.ndarray:
        """Evaluate on a batch of points, shape (B, n) -> (B, m)."""
        return _monomials_batch(self.E, np.asarray(X, dtype=float)) @ self.C.T

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return self.CJ @ _monomials(self.EJ, np.asarray(x, dtype=float))

    def jacobian_batch(self, X: np.ndarray) -> np.ndarray:
        """Jacobians on a batch, shape (B, n) -> (B, m, n)."""
        MJ = _monomials_batch(self.EJ, np.asarray(X, dtype=float))
        return np.einsum("ijk,bk->bij", self.CJ, MJ)


def _pack(term_dicts: Iterable[dict], dim: int) -> tuple[np.ndarray, np.ndarray]:
    term_dicts = list(term_dicts)
    support = sorted({a for t in term_dicts for a in t}, key=lambda a: (sum(a), a))
    index = {a: i for i, a in enumerate(support)}
    E = np.array(support, dtype=np.int64).reshape(len(support), dim)
    C = np.zeros((len(term_dicts), len(support)))
    for r, t in enumerate(term_dicts):
        for a, c in t.items():
            C[r, index[a]] = c
    return E, C


def _monomials(E: np.ndarray, x: np.ndarray) -> np.ndarray:
    if E.shape[0] == 0:
        return np.zeros(0)
    return _monomials_batch(E, x[None, :])[0]


def _monomials_batch(E: np.ndarray, X: np.ndarray) -> np.ndarray:
    # power tables per variable followed by gathers; much faster than x**E
    if E.shape[0] == 0:
        return np.zeros((X.shape[0], 0))
    B, n = X.shape
    out = np.ones((B, E.shape[0]))
    for v in range(n):
        top = int(E[:, v].max())
        if top == 0:
            continue
        table = np.empty((B, top + 1))
        table[:, 0] = 1.0
        for e in range(1, top + 1):
            table[:, e] = table[:, e - 1] * X[:, v]
        out *= table[:, E[:, v]]
    return out


# -- truncated-polynomial jets for Taylor expansion ---------------------------

class Jet:
    """Truncated multivariate polynomial used for forward-mode differentiation.

    A Jet carries a polynomial in the displacement variables, truncated at a
    total degree bound.  Running an evaluator on jets yields the Taylor
    polynomial of the evaluator about the expansion point.
    """

    __slots__ = ("poly", "max_degree")

    def __init__(self, poly: Polynomial, max_degree: int):
        self.poly = poly.truncate(max_degree)
        self.max_degree = max_degree

    @staticmethod
    def variables(center: Sequence[float], max_degree: int) -> list["Jet"]:
        center = np.asarray(center, dtype=float)
        n = center.shape[0]
        out = []
        for i in range(n):
            p = Polynomial.variable(n, i) + Polynomial.constant(n, center[i])
            out.append(Jet(p, max_degree))
        return out

    def _coerce(self, other) -> "Jet":
        if isinstance(other, Jet):
            return other
        return Jet(Polynomial.constant(self.poly.dimension, float(other)), self.max_degree)

    def __add__(self, other):
        other = self._coerce(other)
        return Jet(self.poly + other.poly, self.max_degree)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.poly, self.max_degree)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return Jet(self.poly.scale(float(other)), self.max_degree)
        other = self._coerce(other)
        return Jet(self.poly.mul(other.poly, max_degree=self.max_degree), self.max_degree)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self * (1.0 / float(other))
        return self * self._coerce(other).reciprocal()

    def __rtruediv__(self, other):
        return self._coerce(other) * self.reciprocal()

    def __pow__(self, k: int):
        out = self._coerce(1.0)
        for _ in range(int(k)):
            out = out * self
        return out

    @property
    def constant(self) -> float:
        return self.poly.constant_term()

    def nilpotent(self) -> Polynomial:
        """The polynomial minus its constant term."""
        return self.poly - Polynomial.constant(self.poly.dimension, self.constant)

    def compose_series(self, coeffs: Sequence[float]) -> "Jet":
        """Evaluate sum_k coeffs[k] * (self - constant)^k, truncated."""
        tilde = self.nilpotent()
        out = Polynomial.constant(self.poly.dimension, coeffs[0])
        power = Polynomial.constant(self.poly.dimension, 1.0)
        for k in range(1, len(coeffs)):
            power = power.mul(tilde, max_degree=self.max_degree)
            if power.is_zero():
                break
            if coeffs[k] != 0.0:
                out = out + power.scale(coeffs[k])
        return Jet(out, self.max_degree)

    def reciprocal(self) -> "Jet":
        c = self.constant
        if c == 0.0:
            raise NumericError("reciprocal of a jet with zero constant part")
        coeffs = [(-1.0) ** k / c ** (k + 1) for k in range(self.max_degree + 1)]
        return self.compose_series(coeffs)

    def sin(self) -> "Jet":
        c = self.constant
        coeffs = [math.sin(c + 0.5 * math.pi * k) / math.factorial(k)
                  for k in range(self.max_degree + 1)]
        return self.compose_series(coeffs)

    def cos(self) -> "Jet":
        c = self.constant
        coeffs = [math.cos(c + 0.5 * math.pi * k) / math.factorial(k)
                  for k in range(self.max_degree + 1)]
        return self.compose_series(coeffs)

    def exp(self) -> "Jet":
        c = math.exp(self.constant)
        coeffs = [c / math.factorial(k) for k in range(self.max_degree + 1)]
        return self.compose_series(coeffs)

    def sqrt(self) -> "Jet":
        c = self.constant
        if c <= 0.0:
            raise NumericError("sqrt of a jet with non-positive constant part")
        coeffs = [_binom_half(k) * c ** (0.5 - k) for k in range(self.max_degree + 1)]
        return self.compose_series(coeffs)

    def atan_zero(self) -> "Jet":
        """arctan of a jet whose constant part is zero."""
        if abs(self.constant) > 1e-12:
            raise NumericError("atan_zero requires a zero constant part")
        coeffs = [0.0] * (self.max_degree + 1)
        for k in range(1, self.max_degree + 1, 2):
            coeffs[k] = (-1.0) ** ((k - 1) // 2) / k
        return self.compose_series(coeffs)


@lru_cache(maxsize=64)
def _binom_half(k: int) -> float:
    # binomial coefficient (1/2 choose k)
    out = 1.0
    for i in range(k):
        out *= (0.5 - i) / (i + 1)
    return out


# Smooth primitives that accept either floats or jets, so one evaluator body
# serves both plain simulation and Taylor expansion.

def smooth_sin(x):
    return x.sin() if isinstance(x, Jet) else math.sin(x)


def smooth_cos(x):
    return x.cos() if isinstance(x, Jet) else math.cos(x)


def smooth_sqrt(x):
    return x.sqrt() if isinstance(x, Jet) else math.sqrt(x)


def smooth_atan2(y, x):
    if not isinstance(y, Jet) and not isinstance(x, Jet):
        return math.atan2(y, x)
    if not isinstance(y, Jet):
        y = x._coerce(y)
    if not isinstance(x, Jet):
        x = y._coerce(x)
    y0, x0 = y.constant, x.constant
    if x0 == 0.0 and y0 == 0.0:
        raise NumericError("atan2 jet expansion at the origin is singular")
    base = math.atan2(y0, x0)
    # angle-difference identity, valid for rotations below pi/2 from the base
    num = y * x0 - x * y0
    den = x * x0 + y * y0
    return (num / den).atan_zero() + base


def taylor_expand(fn: Callable, center: Sequence[float], degree: int) -> PolynomialMap:
    """Taylor polynomial of total degree <= `degree` about `center`.

    `fn` must accept a list of jet-or-float inputs and return a sequence of
    jet-or-float outputs built from arithmetic and the smooth_* primitives.
    The result is expressed in displacement coordinates d = z - center.
    """
    if degree < 1:
        raise ValueError(f"degree must be >= 1, got {degree}")
    center = np.asarray(center, dtype=float)
    jets = Jet.variables(center, degree)
    try:
        outputs = fn(jets)
    except NumericError:
        raise
    except (ArithmeticError, ValueError) as exc:
        raise NumericError(f"derivative evaluation failed: {exc}") from exc
    comps = []
    for out in outputs:
        if isinstance(out, Jet):
            comps.append(out.poly)
        else:
            comps.append(Polynomial.constant(center.shape[0], float(out)))
    return PolynomialMap(comps)


def finite_difference_jacobian(fn: Callable, point: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a vector map; cross-check utility."""
    point = np.asarray(point, dtype=float)
    f0 = np.asarray(fn(point), dtype=float)
    J = np.empty((f0.shape[0], point.shape[0]))
    for j in range(point.shape[0]):
        hi = point.copy()
        lo = point.copy()
        hi[j] += step
        lo[j] -= step
        J[:, j] = (np.asarray(fn(hi)) - np.asarray(fn(lo))) / (2.0 * step)
    return J
