"""Certified invariant sublevel sets for LQR controllers.

Verification happens on the polynomial surrogate dynamics.  For a controller
with cost-to-go matrix P and Lyapunov function V(d) = d' P d (d the
displacement from the target), the certified region is {V <= eps}.  Two
routes produce certificates:

  * the SOS route bisects on the level and, at each candidate level, asks the
    projection solver for sum-of-squares certificates of (a) one-step
    V-decrease under the closed loop and (b) containment in the polytope part
    of the safe region;
  * the exact route applies when the closed loop is linear in reduced
    coordinates, where the largest safe sublevel set has a closed form and
    the decrease condition holds globally by the Riccati identity.

The SOS subproblems are preconditioned into coordinates where the candidate
sublevel set is the unit ball, which keeps every gram matrix at unit scale.
Certificates are only ever accepted after validation, so a returned set is
sound; failures are reported as None and the caller falls back to
conservative behavior.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import Environment, SegmentClearance
from .lqr import LqrController, lqr_control, lqr_for_linear_system
from .polyalg import Polynomial, PolynomialMap
from .sdp import (
    ConstraintCertificate,
    GramSolution,
    SolverConfig,
    SosConstraintSpec,
    solve_sos_constraint,
)


@dataclass(frozen=True)
class VerifyConfig:
    multiplier_degree: int = 6
    bisection_tol: float = 1e-4
    eps_max: float | None = None
    constant_pin_tol: float = 1e-9
    solver: SolverConfig = field(default_factory=SolverConfig)


@dataclass
class SosCertificate:
    """Multipliers and gram matrices witnessing the level-set conditions.

    The certified polynomials live in preconditioned coordinates
    d_hat = inv(T) d in which the candidate set is the unit ball and the
    level is `rho`; `lam` multiplies the decrease constraint and `mu` the
    safety rows.
    """
    lam: Polynomial
    mu: list[Polynomial]
    gram_matrices: dict[str, GramSolution]
    multiplier_degree: int
    rho: float
    T: np.ndarray
    residuals: dict[str, float]

    def validate(self, eig_tol: float = -1e-8, resid_tol: float = 1e-7) -> bool:
        ok = all(g.min_eigenvalue() >= eig_tol for g in self.gram_matrices.values())
        return ok and all(r <= resid_tol for r in self.residuals.values())


@dataclass
class InvariantSet:
    """Sublevel set {x : V(x - target) <= epsilon} certified invariant and safe.

    V is stored with P normalized to unit spectral norm on the SOS route so
    that level values are comparable across problems; `contains` uses the
    quadratic form directly.
    """
    controller: LqrController
    V: Polynomial
    P_norm: np.ndarray
    epsilon: float
    method: str  # "sos" or "exact_linear"
    certificate: SosCertificate | None = None
    reduction: object | None = None
    manifold_tol: float = 1e-9

    @property
    def target_state(self) -> np.ndarray:
        return self.controller.target_state

    @property
    def target_action(self) -> np.ndarray:
        return self.controller.target_action

    def displacement(self, x: np.ndarray) -> tuple[np.ndarray, float]:
        x = np.asarray(x, dtype=float)
        if self.reduction is not None:
            return self.reduction.displacement(x, self.target_state)
        return x - self.target_state, 0.0

    def value(self, x: np.ndarray) -> float:
        delta, residual = self.displacement(x)
        if residual > self.manifold_tol:
            return math.inf
        return float(delta @ self.P_norm @ delta)

    def contains(self, x: np.ndarray) -> bool:
        return self.value(x) <= self.epsilon

    def recentered(self, target_state: np.ndarray,
                   target_action: np.ndarray) -> "InvariantSet":
        return replace(self, controller=self.controller.retargeted(
            target_state, target_action))


# -- public SOS feasibility interface ------------------------------------------

def sos_feasible(constraints: list, multiplier_degree: int = 6,
                 solver: SolverConfig | None = None,
                 warm_starts: dict[str, np.ndarray] | None = None
                 ) -> SosCertificate | None:
    """Certify every constraint as SOS, or return None (conservatively).

    Entries are Polynomials (plain SOS checks) or SosConstraintSpec values
    with a free SOS multiplier of degree up to `multiplier_degree`.  The
    constraints never share unknowns, so each is solved independently.  When
    a `warm_starts` dict is passed it is updated in place with the packed
    solutions, which speeds up nearby re-solves during bisection.
    """
    solver = solver or SolverConfig()
    specs: list[SosConstraintSpec] = []
    for i, c in enumerate(constraints):
        if isinstance(c, Polynomial):
            specs.append(SosConstraintSpec(base=c, name=f"sos{i}"))
        else:
            specs.append(c)
    certs: list[ConstraintCertificate] = []
    new_warm: dict[str, np.ndarray] = {}
    for spec in specs:
        start = warm_starts.get(spec.name) if warm_starts is not None else None
        got = solve_sos_constraint(spec, solver, start)
        if got is None:
            return None
        certs.append(got)
        new_warm[spec.name] = got.packed()
    if warm_starts is not None:
        warm_starts.update(new_warm)
    lam = Polynomial.zero(specs[0].base.dimension)
    mu = []
    grams: dict[str, GramSolution] = {}
    residuals: dict[str, float] = {}
    for spec, cert in zip(specs, certs):
        grams[cert.name] = cert.gram
        if cert.multiplier_gram is not None:
            grams[cert.name + "/multiplier"] = cert.multiplier_gram
        residuals[cert.name] = cert.reconstruction_residual
        if spec.factor is not None:
            if spec.name == "decrease":
                lam = cert.multiplier
            else:
                mu.append(cert.multiplier)
    return SosCertificate(lam=lam, mu=mu, gram_matrices=grams,
                          multiplier_degree=multiplier_degree, rho=math.nan,
                          T=np.zeros((0, 0)), residuals=residuals)


# -- closed-loop surrogate -----------------------------------------------------

def closed_loop_displacement_map(env: Environment, ctrl: LqrController,
                                 constant_pin_tol: float = 1e-9
                                 ) -> PolynomialMap | None:
    """Surrogate step under u = u_t + K d, written in displacement coordinates.

    Constant terms below the pin tolerance (equilibrium drift at rounding
    level) are removed so the origin is an exact fixed point; larger drift
    means the target is not an equilibrium and verification is refused.
    """
    n, m = env.n_x, env.n_u
    M = np.vstack([np.eye(n), ctrl.K])
    v = np.concatenate([ctrl.target_state, ctrl.target_action])
    absolute = env.poly_step.compose_affine(M, v)
    comps = []
    for i, p in enumerate(absolute.components):
        p = p - float(ctrl.target_state[i])
        c = p.constant_term()
        if abs(c) > constant_pin_tol:
            return None
        comps.append(p - c)
    return PolynomialMap(comps)


def _quadratic_form_poly(P: np.ndarray) -> Polynomial:
    n = P.shape[0]
    terms: dict[tuple[int, ...], float] = {}
    for i in range(n):
        for j in range(n):
            a = [0] * n
            a[i] += 1
            a[j] += 1
            key = tuple(a)
            terms[key] = terms.get(key, 0.0) + P[i, j]
    return Polynomial(n, terms)


def _sym_sqrt(P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w, V = np.linalg.eigh(P)
    w = np.maximum(w, 0.0)
    root = (V * np.sqrt(w)) @ V.T
    inv_root = (V * (1.0 / np.sqrt(w))) @ V.T
    return root, inv_root


# -- SOS verification route ------------------------------------------------------

def lqr_verify(env: Environment, ctrl: LqrController,
               config: VerifyConfig | None = None) -> InvariantSet | None:
    """Largest certified level found by bisection; None if even 0 fails."""
    config = config or VerifyConfig()
    scale = float(np.linalg.norm(ctrl.P, 2))
    if not np.isfinite(scale) or scale <= 0.0:
        return None
    Pn = ctrl.P / scale

    f_disp = closed_loop_displacement_map(env, ctrl, config.constant_pin_tol)
    if f_disp is None:
        return None
    n = env.n_x

    A_hs, b_hs = env.safe_region.A, env.safe_region.b
    margins = []
    rows = []
    for a, b in zip(A_hs, b_hs):
        beta = float(b - a @ ctrl.target_state)
        if beta < 0.0:
            return None
        rows.append((np.asarray(a, dtype=float), beta))
        margins.append(beta)
    Pn_inv = np.linalg.inv(Pn)
    eps_cap = math.inf
    for a, beta in rows:
        denom = float(a @ Pn_inv @ a)
        if denom > 0.0:
            eps_cap = min(eps_cap, beta * beta / denom)
    if config.eps_max is not None:
        eps_cap = min(eps_cap, config.eps_max / scale)
    if not math.isfinite(eps_cap) or eps_cap <= 0.0:
        return None

    # precondition: d = T d_hat maps the unit ball to the eps_cap sublevel set
    root, inv_root = _sym_sqrt(Pn)
    s = math.sqrt(eps_cap)
    T = s * inv_root
    W = root / s
    f_hat_comps = []
    composed = [p.compose_affine(T, np.zeros(n)) for p in f_disp.components]
    for i in range(n):
        acc = Polynomial.zero(n)
        for j in range(n):
            if W[i, j] != 0.0:
                acc = acc + composed[j].scale(W[i, j])
        f_hat_comps.append(acc)
    ball = _quadratic_form_poly(np.eye(n))
    v_of_f = Polynomial.zero(n)
    for i in range(n):
        v_of_f = v_of_f + f_hat_comps[i].mul(f_hat_comps[i])
    decrease_base = ball - v_of_f
    closed_deg = max(p.degree() for p in f_hat_comps)
    lam_degree = max(config.multiplier_degree, 2 * closed_deg - 2)
    lam_degree += lam_degree % 2

    row_bases = [(Polynomial.constant(n, beta)
                  - _linear_poly(T.T @ a)) for a, beta in rows]

    warm: dict[str, np.ndarray] = {}
    best: tuple[float, SosCertificate] | None = None

    def feasible(rho: float) -> SosCertificate | None:
        factor = ball - rho
        constraints: list[SosConstraintSpec] = [SosConstraintSpec(
            base=decrease_base, factor=factor, multiplier_degree=lam_degree,
            structural_zero_origin=True, name="decrease")]
        for i, base in enumerate(row_bases):
            constraints.append(SosConstraintSpec(
                base=base, factor=factor,
                multiplier_degree=config.multiplier_degree, name=f"safety{i}"))
        cert = sos_feasible(constraints, config.multiplier_degree,
                            solver=config.solver, warm_starts=warm)
        if cert is None:
            return None
        cert.rho = rho
        cert.T = T
        if not cert.validate():
            return None
        return cert

    hi_cert = feasible(1.0)
    if hi_cert is not None:
        best = (1.0, hi_cert)
    else:
        lo, hi = 0.0, 1.0
        lo_cert = feasible(lo)
        if lo_cert is None:
            return None
        best = (lo, lo_cert)
        while hi - lo > config.bisection_tol:
            mid = 0.5 * (lo + hi)
            cert = feasible(mid)
            if cert is None:
                hi = mid
            else:
                lo = mid
                best = (mid, cert)
    rho_star, cert = best
    return InvariantSet(
        controller=ctrl,
        V=_quadratic_form_poly(Pn),
        P_norm=Pn,
        epsilon=rho_star * eps_cap,
        method="sos",
        certificate=cert,
    )


def _linear_poly(coeffs: np.ndarray) -> Polynomial:
    n = coeffs.shape[0]
    terms = {}
    for i, c in enumerate(coeffs):
        if c != 0.0:
            a = [0] * n
            a[i] = 1
            terms[tuple(a)] = float(c)
    return Polynomial(n, terms)


# -- exact linear route ----------------------------------------------------------

def segment_clearance_bound(clearance: SegmentClearance) -> float | None:
    """Largest |s| so the sliding point stays `radius` away from the center.

    Returns None when the disk never intersects the line, 0.0 when the origin
    itself violates the clearance.
    """
    d = clearance.direction / np.linalg.norm(clearance.direction)
    rel = clearance.center - clearance.origin
    m = float(d @ rel)
    c2 = float(rel @ rel) - clearance.radius ** 2
    if c2 < 0.0:
        return 0.0
    disc = m * m - c2
    if disc <= 0.0:
        return None
    half = math.sqrt(disc)
    s1, s2 = m - half, m + half
    if s1 > 0.0:
        return s1
    if s2 < 0.0:
        return -s2
    return 0.0


def exact_linear_invariant(ctrl: LqrController,
                           halfspaces: list[tuple[np.ndarray, float]],
                           clearances: list[SegmentClearance] | None = None,
                           s_index: int = 0,
                           reduction: object | None = None) -> InvariantSet:
    """Closed-form largest safe sublevel set for an exactly linear closed loop.

    Half-spaces are (a, beta) pairs meaning a' d <= beta in the reduced
    displacement coordinates; clearances constrain the position projection
    (coordinate `s_index`) of the sublevel ellipsoid.  The Lyapunov decrease
    holds globally by the Riccati identity, so no SOS step is needed.
    """
    P = ctrl.P
    P_inv = np.linalg.inv(P)
    eps = math.inf
    for a, beta in halfspaces:
        if beta < 0.0:
            eps = 0.0
            break
        denom = float(a @ P_inv @ a)
        if denom > 0.0:
            eps = min(eps, beta * beta / denom)
    for clearance in clearances or []:
        bound = segment_clearance_bound(clearance)
        if bound is None:
            continue
        eps = min(eps, bound * bound / P_inv[s_index, s_index])
    if not math.isfinite(eps):
        raise ValueError("exact invariant set is unbounded; add constraints")
    return InvariantSet(
        controller=ctrl,
        V=_quadratic_form_poly(P),
        P_norm=P,
        epsilon=eps,
        method="exact_linear",
        reduction=reduction,
    )


# -- stability queries with a certificate cache -----------------------------------

class CertificateCache:
    """Keyed store of canonical controllers and invariant sets.

    Reads are lock-free; insertion happens under a lock and only completed,
    validated entries are ever published.
    """

    def __init__(self):
        self._entries: dict[str, object] = {}
        self._lock = threading.Lock()

    def get(self, key: str):
        return self._entries.get(key)

    def get_or_build(self, key: str, builder):
        entry = self._entries.get(key)
        if entry is not None:
            return entry
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                entry = builder()
                self._entries[key] = entry
            return entry

    def __len__(self):
        return len(self._entries)


@dataclass
class _CanonicalEntry:
    controller: LqrController | None
    invariant: InvariantSet | None


def _build_sos_entry(env: Environment, canonical_target, config: VerifyConfig
                     ) -> _CanonicalEntry:
    ctrl = lqr_control(env, canonical_target)
    if ctrl is None:
        return _CanonicalEntry(None, None)
    return _CanonicalEntry(ctrl, lqr_verify(env, ctrl, config))


def _build_exact_entry(env: Environment) -> _CanonicalEntry:
    red = env.exact_reduction
    ctrl = lqr_for_linear_system(red.A, red.B)
    return _CanonicalEntry(ctrl, None)


def invariant_set_for_target(env: Environment,
                             target: tuple[np.ndarray, np.ndarray],
                             cache: CertificateCache,
                             config: VerifyConfig | None = None
                             ) -> InvariantSet | None:
    """Certified invariant set for an LQR at `target`, using cached canonical
    results recentered through the environment's target symmetry."""
    config = config or VerifyConfig()
    key, transform = env.canonicalize_target(target)
    if env.cert_route == "exact_linear":
        entry = cache.get_or_build(key, lambda: _build_exact_entry(env))
        if entry.controller is None:
            return None
        red = env.exact_reduction
        target_state = np.asarray(target[0], dtype=float)
        ctrl = entry.controller.retargeted(target_state, np.asarray(target[1], float))
        inv = exact_linear_invariant(
            ctrl,
            halfspaces=red.halfspaces(entry.controller.K),
            clearances=red.clearances(target_state, env.safe_region),
            s_index=0,
            reduction=red,
        )
        return inv
    entry = cache.get_or_build(
        key, lambda: _build_sos_entry(env, transform.canonical, config))
    if entry.invariant is None:
        return None
    return entry.invariant.recentered(np.asarray(target[0], float),
                                      np.asarray(target[1], float))


def is_stable(x: np.ndarray, env: Environment, cache: CertificateCache,
              config: VerifyConfig | None = None
              ) -> tuple[bool, InvariantSet | None]:
    """Whether x lies in the certified set of the LQR for its own target."""
    target = env.lqr_target(np.asarray(x, dtype=float))
    inv = invariant_set_for_target(env, target, cache, config)
    if inv is None:
        return False, None
    return inv.contains(x), inv


# -- serialization -----------------------------------------------------------------

def save_certificate(inv: InvariantSet, path: str, env: Environment | None = None):
    doc = {
        "method": inv.method,
        "environment": env.name if env else None,
        "variant": env.variant if env else None,
        "target_state": inv.target_state.tolist(),
        "target_action": inv.target_action.tolist(),
        "K": inv.controller.K.tolist(),
        "P": inv.controller.P.tolist(),
        "Q": inv.controller.Q.tolist(),
        "R": inv.controller.R.tolist(),
        "A": inv.controller.A.tolist(),
        "B": inv.controller.B.tolist(),
        "P_norm": inv.P_norm.tolist(),
        "epsilon": inv.epsilon,
    }
    cert = inv.certificate
    if cert is not None:
        doc["certificate"] = {
            "rho": cert.rho,
            "multiplier_degree": cert.multiplier_degree,
            "coordinate_map": cert.T.tolist(),
            "lambda": _poly_doc(cert.lam),
            "mu": [_poly_doc(p) for p in cert.mu],
            "residuals": cert.residuals,
            "gram_matrices": {
                name: {"basis": [list(a) for a in g.basis],
                       "matrix": g.matrix.tolist()}
                for name, g in cert.gram_matrices.items()
            },
        }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_certificate(path: str, env: Environment) -> InvariantSet:
    with open(path) as fh:
        doc = json.load(fh)
    ctrl = LqrController(
        target_state=np.array(doc["target_state"]),
        target_action=np.array(doc["target_action"]),
        K=np.array(doc["K"]), P=np.array(doc["P"]),
        Q=np.array(doc["Q"]), R=np.array(doc["R"]),
        A=np.array(doc["A"]), B=np.array(doc["B"]))
    P_norm = np.array(doc["P_norm"])
    cert = None
    if "certificate" in doc:
        c = doc["certificate"]
        cert = SosCertificate(
            lam=_poly_from_doc(c["lambda"]),
            mu=[_poly_from_doc(p) for p in c["mu"]],
            gram_matrices={
                name: GramSolution(basis=[tuple(a) for a in g["basis"]],
                                   matrix=np.array(g["matrix"]))
                for name, g in c["gram_matrices"].items()},
            multiplier_degree=c["multiplier_degree"],
            rho=c["rho"],
            T=np.array(c["coordinate_map"]),
            residuals=dict(c["residuals"]))
    reduction = env.exact_reduction if doc["method"] == "exact_linear" else None
    return InvariantSet(
        controller=ctrl, V=_quadratic_form_poly(P_norm), P_norm=P_norm,
        epsilon=doc["epsilon"], method=doc["method"], certificate=cert,
        reduction=reduction)


def _poly_doc(p: Polynomial) -> dict:
    return {"dimension": p.dimension,
            "terms": [[list(a), c] for a, c in p.sorted_terms()]}


def _poly_from_doc(doc: dict) -> Polynomial:
    return Polynomial(doc["dimension"],
                      {tuple(a): c for a, c in doc["terms"]})
