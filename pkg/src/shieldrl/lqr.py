"""Discrete-time LQR synthesis around stabilization targets.

The dynamics are linearized from the polynomial surrogate at a target
state-action pair, and the infinite-horizon cost-to-go matrix is obtained by
iterating the discrete algebraic Riccati equation to a fixed point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import Environment
from .errors import DimensionError

DARE_TOL = 1e-12
DARE_MAX_ITERS = 100_000
RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class LqrController:
    """Affine LQR policy u = u_t + K (x - x_t) with cost-to-go V(d) = d' P d."""
    target_state: np.ndarray
    target_action: np.ndarray
    K: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    A: np.ndarray
    B: np.ndarray

    def action(self, x: np.ndarray) -> np.ndarray:
        return self.target_action + self.K @ (np.asarray(x, dtype=float) - self.target_state)

    def lyapunov_value(self, delta: np.ndarray) -> float:
        delta = np.asarray(delta, dtype=float)
        return float(delta @ self.P @ delta)

    def retargeted(self, target_state: np.ndarray,
                   target_action: np.ndarray) -> "LqrController":
        return LqrController(
            target_state=np.asarray(target_state, dtype=float).copy(),
            target_action=np.asarray(target_action, dtype=float).copy(),
            K=self.K, P=self.P, Q=self.Q, R=self.R, A=self.A, B=self.B)


def linearize(env: Environment, target: tuple[np.ndarray, np.ndarray]
              ) -> tuple[np.ndarray, np.ndarray, float]:
    """Jacobians of the surrogate step at the target, split into (A, B).

    Also returns the drift residual |f(x_t, u_t) - x_t|; targets with a large
    residual are not equilibria and cannot be stabilized in place.
    """
    x_t, u_t = (np.asarray(target[0], dtype=float), np.asarray(target[1], dtype=float))
    if x_t.shape != (env.n_x,) or u_t.shape != (env.n_u,):
        raise DimensionError(
            f"target shapes {x_t.shape}/{u_t.shape} do not match env ({env.n_x},)/({env.n_u},)")
    point = np.concatenate([x_t, u_t])
    J = env.poly_step.jacobian(point)
    A = J[:, :env.n_x]
    B = J[:, env.n_x:]
    residual = float(np.linalg.norm(env.poly_step.evaluate(point) - x_t))
    return A, B, residual


def solve_dare(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
               tol: float = DARE_TOL, max_iters: int = DARE_MAX_ITERS
               ) -> tuple[np.ndarray, np.ndarray] | None:
    """Fixed-point iteration for the DARE; returns (K, P) or None.

    None means the iteration did not converge, which happens exactly when the
    pair cannot be stabilized (the cost-to-go diverges).
    """
    P = Q.copy()
    for _ in range(max_iters):
        BtP = B.T @ P
        S = R + BtP @ B
        K = -np.linalg.solve(S, BtP @ A)
        P_next = Q + A.T @ P @ A + A.T @ P @ B @ K
        P_next = 0.5 * (P_next + P_next.T)
        delta = np.linalg.norm(P_next - P, "fro")
        P = P_next
        if not np.all(np.isfinite(P)):
            return None
        if delta <= tol:
            BtP = B.T @ P
            K = -np.linalg.solve(R + BtP @ B, BtP @ A)
            return K, P
    return None


def dare_residual(A, B, Q, R, P) -> float:
    BtP = B.T @ P
    inner = A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
    return float(np.linalg.norm(P - (Q + A.T @ P @ A - inner), "fro"))


def _validate_weights(Q: np.ndarray, R: np.ndarray) -> None:
    for name, M, strict in (("Q", Q, False), ("R", R, True)):
        if not np.allclose(M, M.T, atol=1e-12):
            raise ValueError(f"{name} must be symmetric")
        eigs = np.linalg.eigvalsh(M)
        if strict and eigs.min() <= 0:
            raise ValueError(f"{name} must be positive definite")
        if not strict and eigs.min() < -1e-12:
            raise ValueError(f"{name} must be positive semidefinite")


def lqr_control(env: Environment, target: tuple[np.ndarray, np.ndarray],
                Q: np.ndarray | None = None, R: np.ndarray | None = None,
                residual_tol: float = RESIDUAL_TOL) -> LqrController | None:
    """LQR controller for the surrogate linearization at `target`.

    Returns None when the target is not an equilibrium of the surrogate or
    when the Riccati iteration fails to converge (not stabilizable).
    """
    if Q is None:
        Q = np.eye(env.n_x)
    if R is None:
        R = np.eye(env.n_u)
    _validate_weights(Q, R)
    A, B, residual = linearize(env, target)
    if residual > residual_tol:
        return None
    sol = solve_dare(A, B, Q, R)
    if sol is None:
        return None
    K, P = sol
    if np.max(np.abs(np.linalg.eigvals(A + B @ K))) >= 1.0:
        return None
    return LqrController(
        target_state=np.asarray(target[0], dtype=float).copy(),
        target_action=np.asarray(target[1], dtype=float).copy(),
        K=K, P=P, Q=Q, R=R, A=A, B=B)


def lqr_for_linear_system(A: np.ndarray, B: np.ndarray,
                          Q: np.ndarray | None = None, R: np.ndarray | None = None,
                          target_state: np.ndarray | None = None,
                          target_action: np.ndarray | None = None
                          ) -> LqrController | None:
    """LQR directly from known linear dynamics (used by exact reductions)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n, m = B.shape
    if Q is None:
        Q = np.eye(n)
    if R is None:
        R = np.eye(m)
    _validate_weights(Q, R)
    sol = solve_dare(A, B, Q, R)
    if sol is None:
        return None
    K, P = sol
    if np.max(np.abs(np.linalg.eigvals(A + B @ K))) >= 1.0:
        return None
    return LqrController(
        target_state=np.zeros(n) if target_state is None else np.asarray(target_state, float),
        target_action=np.zeros(m) if target_action is None else np.asarray(target_action, float),
        K=K, P=P, Q=Q, R=R, A=A, B=B)
