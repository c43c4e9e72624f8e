"""Sum-of-squares feasibility through semidefinite projection splitting.

A constraint asks for a polynomial identity

    base(x) + factor(x) * sigma(x) = m(x)' G m(x),    G >= 0, sigma SOS,

with sigma = w(x)' H w(x) over a monomial basis w and H >= 0 (factor may be
absent, leaving a plain SOS decomposition of base).  Matching coefficients
monomial by monomial gives an affine subspace in the symmetric matrices
(G, H); feasibility is the intersection of that subspace with the product of
positive semidefinite cones.  The intersection point is found by
Douglas-Rachford splitting between the two projections:

  * affine projection: one dense Cholesky factorization of A A' per problem,
    after which each step is a pair of triangular solves;
  * cone projection: an eigendecomposition per gram block, clipping negative
    eigenvalues.

The method is sound by construction.  A candidate is accepted only when it
lies exactly on the affine subspace (so the polynomial identity holds to
floating-point assembly error) and every gram block is positive semidefinite
up to a tiny tolerance; when the iteration stalls we report infeasibility,
which at worst makes the caller conservative.

Gram bases are pruned with Newton-polytope style bounds (total-degree window
and per-variable caps derived from the potential support), which removes the
boundary degeneracies that arise when the certified polynomial must vanish at
the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np
import scipy.linalg
import scipy.sparse

from .polyalg import Polynomial

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class SosConstraintSpec:
    """base + factor * sigma must be SOS, with sigma SOS of bounded degree."""
    base: Polynomial
    factor: Polynomial | None = None
    multiplier_degree: int = 0
    # set when the certified polynomial provably vanishes at the origin, so
    # the constant monomial can be pruned from the gram bases
    structural_zero_origin: bool = False
    name: str = "sos"


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 6000
    check_every: int = 25
    eig_accept: float = 1e-10
    affine_accept: float = 1e-9
    zero_row_tol: float = 1e-11
    stall_checks: int = 20
    stall_ratio: float = 0.995
    jitter: float = 1e-13


@dataclass
class GramSolution:
    basis: list[tuple[int, ...]]
    matrix: np.ndarray

    def min_eigenvalue(self) -> float:
        if self.matrix.size == 0:
            return 0.0
        return float(np.linalg.eigvalsh(self.matrix).min())

    def to_polynomial(self, dimension: int) -> Polynomial:
        terms: dict[tuple[int, ...], float] = {}
        n = len(self.basis)
        for i in range(n):
            for j in range(n):
                key = tuple(a + b for a, b in zip(self.basis[i], self.basis[j]))
                terms[key] = terms.get(key, 0.0) + self.matrix[i, j]
        return Polynomial(dimension, terms)


@dataclass
class ConstraintCertificate:
    name: str
    gram: GramSolution
    multiplier_gram: GramSolution | None
    multiplier: Polynomial
    reconstruction_residual: float

    def packed(self) -> np.ndarray:
        blocks = [self.gram.matrix]
        if self.multiplier_gram is not None:
            blocks.append(self.multiplier_gram.matrix)
        return np.concatenate([_pack(M) for M in blocks])


# -- monomial bookkeeping ------------------------------------------------------

def monomials_up_to(dim: int, dmin: int, dmax: int,
                    var_caps: tuple[int, ...] | None = None) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = []

    def rec(prefix, remaining, total):
        idx = len(prefix)
        if idx == dim:
            if total >= dmin:
                out.append(tuple(prefix))
            return
        cap = remaining if var_caps is None else min(remaining, var_caps[idx])
        for e in range(cap + 1):
            rec(prefix + [e], remaining - e, total + e)

    rec([], dmax, 0)
    return sorted(out, key=lambda a: (sum(a), a))


def _support_bounds(support: set[tuple[int, ...]], dim: int) -> tuple[int, int, tuple[int, ...]]:
    degrees = [sum(a) for a in support]
    dmin = (min(degrees) + 1) // 2
    dmax = max(degrees) // 2
    caps = tuple(max(a[i] for a in support) // 2 for i in range(dim))
    return dmin, dmax, caps


def gram_basis_for(spec: SosConstraintSpec) -> tuple[list[tuple[int, ...]], list[tuple[int, ...]]]:
    """Bases for the main gram and the multiplier gram of one constraint."""
    dim = spec.base.dimension
    mult_basis: list[tuple[int, ...]] = []
    support = set(spec.base.terms)
    if spec.factor is not None:
        mmin = 0
        if spec.structural_zero_origin and abs(spec.factor.constant_term()) > 0.0:
            # sigma(0) is forced to zero, so the constant monomial is inert
            mmin = 1
        mult_basis = monomials_up_to(dim, mmin, spec.multiplier_degree // 2)
        for m1, m2 in combinations_with_replacement(mult_basis, 2):
            prod = tuple(a + b for a, b in zip(m1, m2))
            for fa in spec.factor.terms:
                support.add(tuple(a + b for a, b in zip(fa, prod)))
    if not support:
        support = {(0,) * dim}
    dmin, dmax, caps = _support_bounds(support, dim)
    if spec.structural_zero_origin:
        dmin = max(dmin, 1)
    basis = monomials_up_to(dim, dmin, dmax, caps)
    return basis, mult_basis


# -- packing symmetric matrices -------------------------------------------------

def _pack(M: np.ndarray) -> np.ndarray:
    """Isometric packing: diagonal entries, then upper off-diagonals * sqrt(2)."""
    n = M.shape[0]
    iu = np.triu_indices(n, k=1)
    return np.concatenate([np.diag(M), SQRT2 * M[iu]])


def _unpack(z: np.ndarray, n: int) -> np.ndarray:
    M = np.diag(z[:n]).astype(float)
    iu = np.triu_indices(n, k=1)
    off = z[n:] / SQRT2
    M[iu] = off
    M[(iu[1], iu[0])] = off
    return M


def _packed_len(n: int) -> int:
    return n * (n + 1) // 2


def _pair_coeff(i: int, j: int) -> float:
    # contribution of packed entry (i, j) to the coefficient of monomial b_i+b_j
    return 1.0 if i == j else SQRT2


def _packed_index(i: int, j: int, n: int) -> int:
    if i == j:
        return i
    # offset into the strict upper triangle in row-major order
    return n + (i * (2 * n - i - 1)) // 2 + (j - i - 1)


# -- one constraint as an affine-plus-cone problem -------------------------------

class _ConstraintProblem:
    def __init__(self, spec: SosConstraintSpec, cfg: SolverConfig):
        self.spec = spec
        self.cfg = cfg
        dim = spec.base.dimension
        self.dim = dim
        self.basis, self.mult_basis = gram_basis_for(spec)
        self.block_sizes = [len(self.basis)]
        if spec.factor is not None:
            self.block_sizes.append(len(self.mult_basis))
        self.n_vars = sum(_packed_len(n) for n in self.block_sizes)

        rows: dict[tuple[int, ...], int] = {}

        def row_of(mono):
            if mono not in rows:
                rows[mono] = len(rows)
            return rows[mono]

        entries: list[tuple[int, int, float]] = []
        nb = len(self.basis)
        for i in range(nb):
            for j in range(i, nb):
                mono = tuple(a + b for a, b in zip(self.basis[i], self.basis[j]))
                entries.append((row_of(mono), _packed_index(i, j, nb), _pair_coeff(i, j)))
        offset = _packed_len(nb)
        if spec.factor is not None:
            nm = len(self.mult_basis)
            for k in range(nm):
                for l in range(k, nm):
                    prod = tuple(a + b for a, b in zip(self.mult_basis[k], self.mult_basis[l]))
                    col = offset + _packed_index(k, l, nm)
                    c = _pair_coeff(k, l)
                    for fa, fc in spec.factor.terms.items():
                        mono = tuple(a + b for a, b in zip(fa, prod))
                        entries.append((row_of(mono), col, -fc * c))
        for mono in spec.base.terms:
            row_of(mono)

        self.n_rows = len(rows)
        b = np.zeros(self.n_rows)
        for mono, c in spec.base.terms.items():
            b[rows[mono]] = c

        r_idx = np.array([e[0] for e in entries])
        c_idx = np.array([e[1] for e in entries])
        vals = np.array([e[2] for e in entries])
        A = scipy.sparse.coo_matrix((vals, (r_idx, c_idx)),
                                    shape=(self.n_rows, self.n_vars)).tocsr()
        A.sum_duplicates()

        # rows with no variables must have (near) zero right-hand side
        row_nnz = np.diff(A.indptr)
        self.trivially_infeasible = bool(
            np.any((row_nnz == 0) & (np.abs(b) > cfg.zero_row_tol)))
        keep = row_nnz > 0
        self.A = A[keep]
        self.b = b[keep]
        self._factorize()

    def _factorize(self):
        AAt = (self.A @ self.A.T).toarray()
        n = AAt.shape[0]
        try:
            self._cho = scipy.linalg.cho_factor(AAt + self.cfg.jitter * np.eye(n))
        except scipy.linalg.LinAlgError:
            self._cho = scipy.linalg.cho_factor(AAt + 1e-8 * np.eye(n))

    def project_affine(self, z: np.ndarray) -> np.ndarray:
        resid = self.A @ z - self.b
        return z - self.A.T @ scipy.linalg.cho_solve(self._cho, resid)

    def project_cone(self, z: np.ndarray) -> np.ndarray:
        out = np.empty_like(z)
        pos = 0
        for n in self.block_sizes:
            ln = _packed_len(n)
            M = _unpack(z[pos:pos + ln], n)
            w, V = np.linalg.eigh(M)
            np.clip(w, 0.0, None, out=w)
            out[pos:pos + ln] = _pack((V * w) @ V.T)
            pos += ln
        return out

    def cone_violation(self, z: np.ndarray) -> float:
        worst = 0.0
        pos = 0
        for n in self.block_sizes:
            ln = _packed_len(n)
            M = _unpack(z[pos:pos + ln], n)
            w = np.linalg.eigvalsh(M)
            worst = max(worst, max(0.0, -float(w.min())))
            pos += ln
        return worst

    def blocks_of(self, z: np.ndarray) -> list[np.ndarray]:
        out = []
        pos = 0
        for n in self.block_sizes:
            ln = _packed_len(n)
            out.append(_unpack(z[pos:pos + ln], n))
            pos += ln
        return out

    def solve(self, warm_start: np.ndarray | None = None
              ) -> ConstraintCertificate | None:
        if self.trivially_infeasible:
            return None
        cfg = self.cfg
        if warm_start is not None and warm_start.shape == (self.n_vars,):
            x = warm_start.copy()
        else:
            x = self.project_affine(np.zeros(self.n_vars))
        best = math.inf
        history: list[float] = []
        accepted: np.ndarray | None = None
        for it in range(cfg.max_iters):
            y = self.project_cone(x)
            z = self.project_affine(2.0 * y - x)
            x = x + z - y
            if (it + 1) % cfg.check_every:
                continue
            candidate = self.project_affine(y)
            viol = self.cone_violation(candidate)
            history.append(viol)
            best = min(best, viol)
            if viol <= cfg.eig_accept:
                accepted = candidate
                break
            if len(history) >= cfg.stall_checks:
                recent = history[-cfg.stall_checks:]
                if min(recent) > cfg.stall_ratio * recent[0] and best > 100 * cfg.eig_accept:
                    return None
        if accepted is None:
            return None
        if np.linalg.norm(self.A @ accepted - self.b, np.inf) > self.cfg.affine_accept:
            return None
        return self._certificate(accepted)

    def _certificate(self, z: np.ndarray) -> ConstraintCertificate:
        blocks = self.blocks_of(z)
        gram = GramSolution(self.basis, blocks[0])
        mult_gram = None
        multiplier = Polynomial.zero(self.dim)
        if self.spec.factor is not None:
            mult_gram = GramSolution(self.mult_basis, blocks[1])
            multiplier = mult_gram.to_polynomial(self.dim)
        target = self.spec.base
        if self.spec.factor is not None:
            target = target + self.spec.factor.mul(multiplier)
        diff = target - gram.to_polynomial(self.dim)
        resid = math.sqrt(sum(c * c for c in diff.terms.values()))
        return ConstraintCertificate(
            name=self.spec.name, gram=gram, multiplier_gram=mult_gram,
            multiplier=multiplier, reconstruction_residual=resid)


def solve_sos_constraint(spec: SosConstraintSpec,
                         cfg: SolverConfig | None = None,
                         warm_start: np.ndarray | None = None
                         ) -> ConstraintCertificate | None:
    """Certify one constraint, or return None (soundly) if the search fails."""
    return _ConstraintProblem(spec, cfg or SolverConfig()).solve(warm_start)
