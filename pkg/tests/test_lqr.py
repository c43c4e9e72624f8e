import math

import numpy as np
import pytest
import scipy.linalg

from shieldrl.dynamics import cartpole_env
from shieldrl.lqr import (
    LqrController,
    dare_residual,
    linearize,
    lqr_control,
    lqr_for_linear_system,
    solve_dare,
)
from shieldrl.polyalg import finite_difference_jacobian


@pytest.fixture(scope="module")
def cp():
    return cartpole_env()


@pytest.fixture(scope="module")
def cp_controller(cp):
    ctrl = lqr_control(cp, (np.zeros(4), np.zeros(1)))
    assert ctrl is not None
    return ctrl


def value_iteration_oracle(A, B, Q, R, horizon=10_000):
    """Finite-horizon Riccati recursion, independent of the fixed-point path."""
    P = np.zeros_like(Q)
    for _ in range(horizon):
        S = R + B.T @ P @ B
        P = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(S, B.T @ P @ A)
        P = 0.5 * (P + P.T)
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return K, P


class TestScalarCases:
    def test_golden_ratio_scalar_dare(self):
        A = np.array([[1.0]])
        B = np.array([[1.0]])
        Q = np.array([[1.0]])
        R = np.array([[1.0]])
        K, P = solve_dare(A, B, Q, R)
        golden = (1.0 + math.sqrt(5.0)) / 2.0
        assert P[0, 0] == pytest.approx(golden, abs=1e-10)
        assert K[0, 0] == pytest.approx(-golden / (1.0 + golden), abs=1e-10)

    def test_degenerate_zero_system(self):
        A = np.zeros((2, 2))
        B = np.zeros((2, 1))
        K, P = solve_dare(A, B, np.eye(2), np.eye(1))
        np.testing.assert_allclose(P, np.eye(2))
        np.testing.assert_allclose(K, np.zeros((1, 2)))


class TestLinearize:
    def test_matches_finite_differences(self, cp):
        A, B, res = linearize(cp, (np.zeros(4), np.zeros(1)))

        def fwd(p):
            return cp.poly_step.evaluate(p)

        J = finite_difference_jacobian(fwd, np.zeros(5), step=1e-6)
        np.testing.assert_allclose(A, J[:, :4], atol=1e-6)
        np.testing.assert_allclose(B, J[:, 4:], atol=1e-6)

    def test_equilibrium_residual(self, cp):
        _, _, res = linearize(cp, (np.zeros(4), np.zeros(1)))
        assert res <= 1e-12

    def test_exact_linear_system(self):
        # for linear dynamics the split returns (A, B) exactly
        from shieldrl.polyalg import Polynomial, PolynomialMap
        A = np.array([[0.9, 0.1], [0.0, 0.8]])
        B = np.array([[0.0], [0.1]])
        comps = []
        for i in range(2):
            terms = {}
            for j in range(2):
                a = [0, 0, 0]
                a[j] = 1
                terms[tuple(a)] = A[i, j]
            terms[(0, 0, 1)] = B[i, 0]
            comps.append(Polynomial(3, terms))
        pmap = PolynomialMap(comps)

        class FakeEnv:
            n_x, n_u = 2, 1
            poly_step = pmap

        A2, B2, res = linearize(FakeEnv(), (np.zeros(2), np.zeros(1)))
        np.testing.assert_array_equal(A2, A)
        np.testing.assert_array_equal(B2, B)
        assert res == 0.0


class TestCartPoleController:
    def test_matches_value_iteration_oracle(self, cp, cp_controller):
        A, B, _ = linearize(cp, (np.zeros(4), np.zeros(1)))
        K_vi, P_vi = value_iteration_oracle(A, B, np.eye(4), np.eye(1))
        np.testing.assert_allclose(cp_controller.K, K_vi, atol=1e-6)
        np.testing.assert_allclose(cp_controller.P, P_vi, atol=1e-6)

    def test_matches_scipy_dare(self, cp, cp_controller):
        A, B, _ = linearize(cp, (np.zeros(4), np.zeros(1)))
        P_ref = scipy.linalg.solve_discrete_are(A, B, np.eye(4), np.eye(1))
        np.testing.assert_allclose(cp_controller.P, P_ref, rtol=1e-8, atol=1e-8)

    def test_dare_residual_invariant(self, cp_controller):
        c = cp_controller
        assert dare_residual(c.A, c.B, c.Q, c.R, c.P) <= 1e-9

    def test_p_symmetric_psd(self, cp_controller):
        P = cp_controller.P
        np.testing.assert_allclose(P, P.T, atol=1e-12)
        assert np.linalg.eigvalsh(P).min() >= 0.0

    def test_closed_loop_decrease_identity(self, cp_controller):
        # V(x) - V((A+BK)x) = x'(Q + K'RK)x for the linear model
        c = cp_controller
        Acl = c.A + c.B @ c.K
        rng = np.random.default_rng(0)
        for _ in range(100):
            x = rng.normal(size=4)
            lhs = x @ c.P @ x - (Acl @ x) @ c.P @ (Acl @ x)
            rhs = x @ (c.Q + c.K.T @ c.R @ c.K) @ x
            assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)
            assert lhs >= 0.0

    def test_spectral_radius_below_one(self, cp_controller):
        c = cp_controller
        assert np.max(np.abs(np.linalg.eigvals(c.A + c.B @ c.K))) < 1.0

    def test_recentering_consistency(self, cp):
        origin = lqr_control(cp, (np.zeros(4), np.zeros(1)))
        shifted = lqr_control(cp, (np.array([3.7, 0, 0, 0]), np.zeros(1)))
        assert np.array_equal(origin.K, shifted.K)
        assert np.array_equal(origin.P, shifted.P)

    def test_control_law_affine(self, cp_controller):
        c = LqrController(
            target_state=np.array([2.0, 0, 0, 0]),
            target_action=np.array([0.5]),
            K=cp_controller.K, P=cp_controller.P, Q=cp_controller.Q,
            R=cp_controller.R, A=cp_controller.A, B=cp_controller.B)
        x = np.array([2.1, 0.05, -0.02, 0.01])
        expected = c.target_action + c.K @ (x - c.target_state)
        np.testing.assert_allclose(c.action(x), expected)


class TestRejections:
    def test_non_equilibrium_target_returns_none(self, cp):
        # moving-cart target drifts, so it cannot be held in place
        assert lqr_control(cp, (np.array([0.0, 0.4, 0.0, 0.0]), np.zeros(1))) is None

    def test_unstabilizable_returns_none(self):
        # growing mode with no control authority
        A = np.array([[1.5, 0.0], [0.0, 0.5]])
        B = np.array([[0.0], [1.0]])
        assert lqr_for_linear_system(A, B) is None

    def test_invalid_weights_raise(self, cp):
        with pytest.raises(ValueError):
            lqr_control(cp, (np.zeros(4), np.zeros(1)), Q=np.diag([1.0, 1, 1, -1]))
        with pytest.raises(ValueError):
            lqr_control(cp, (np.zeros(4), np.zeros(1)), R=np.zeros((1, 1)))
        asym = np.eye(4)
        asym[0, 1] = 0.5
        with pytest.raises(ValueError):
            lqr_control(cp, (np.zeros(4), np.zeros(1)), Q=asym)


def test_reduced_bicycle_system_lqr():
    # straight-line stop dynamics: position advances by v, velocity by dt*a
    dt = 0.02
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    B = np.array([[0.0], [dt]])
    ctrl = lqr_for_linear_system(A, B)
    assert ctrl is not None
    P_ref = scipy.linalg.solve_discrete_are(A, B, np.eye(2), np.eye(1))
    np.testing.assert_allclose(ctrl.P, P_ref, rtol=1e-8, atol=1e-8)
    assert np.max(np.abs(np.linalg.eigvals(A + B @ ctrl.K))) < 1.0
