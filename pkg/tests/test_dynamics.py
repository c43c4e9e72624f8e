import json
import math

import numpy as np
import pytest

from shieldrl.dynamics import (
    GoalWithObstaclesReward,
    QuadraticStateReward,
    SafeRegion,
    VelocityTrackingReward,
    bicycle_env,
    cartpole_env,
    is_safe,
    load_params,
    make_env,
    step,
)


@pytest.fixture(scope="module")
def cp():
    return cartpole_env()


@pytest.fixture(scope="module")
def bike():
    return bicycle_env(obstacle_seed=3)


def state(z=0.0, v=0.0, theta=0.0, omega=0.0):
    return np.array([z, v, theta, omega])


class TestSafeRegion:
    def test_theta_inside(self, cp):
        assert is_safe(cp.safe_region, state(theta=0.10))

    def test_theta_outside(self, cp):
        assert not is_safe(cp.safe_region, state(theta=0.16))
        assert not is_safe(cp.safe_region, state(theta=-0.16))

    def test_boundary_non_strict(self, cp):
        assert is_safe(cp.safe_region, state(theta=0.15))
        assert is_safe(cp.safe_region, state(theta=-0.15))

    def test_disk_exclusion(self, bike):
        excl = bike.safe_region.disk_exclusions[0]
        x = np.zeros(5)
        x[excl.ix], x[excl.iy] = excl.center
        assert not bike.safe_region.contains(x)
        assert bike.safe_region.contains(np.array([0, 0, -0.1, 0, 0.0]))

    def test_disk_boundary_non_strict(self):
        from shieldrl.dynamics import DiskExclusion
        excl = DiskExclusion(ix=0, iy=1, center=(0.5, 0.0), radius=0.25)
        assert excl.holds(np.array([0.75, 0.0]))
        assert not excl.holds(np.array([0.749, 0.0]))

    def test_batch_matches_scalar(self, bike):
        rng = np.random.default_rng(0)
        X = rng.uniform(-0.2, 1.2, size=(64, 5))
        got = bike.safe_region.contains_batch(X)
        want = np.array([bike.safe_region.contains(x) for x in X])
        assert np.array_equal(got, want)


class TestCartPole:
    def test_lqr_target_map(self, cp):
        xt, ut = cp.lqr_target(np.array([1.2, 0.3, 0.1, -0.2]))
        np.testing.assert_allclose(xt, [1.2, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(ut, [0.0])

    def test_canonicalize_roundtrip(self, cp):
        target = (np.array([1.2, 0.0, 0.0, 0.0]), np.zeros(1))
        key, transform = cp.canonicalize_target(target)
        assert key == "cartpole/upright"
        np.testing.assert_array_equal(transform.canonical[0], np.zeros(4))
        restored = transform.restore()
        np.testing.assert_array_equal(restored[0], target[0])
        np.testing.assert_array_equal(restored[1], target[1])

    def test_equilibrium_is_fixed_point(self, cp):
        x = state(z=4.2)
        np.testing.assert_array_equal(step(cp, x, np.zeros(1)), x)

    def test_surrogate_matches_true_nearby(self, cp):
        rng = np.random.default_rng(1)
        for _ in range(100):
            x = rng.uniform(-0.05, 0.05, 4)
            u = rng.uniform(-0.05, 0.05, 1)
            np.testing.assert_allclose(
                step(cp, x, u, use_surrogate=True),
                step(cp, x, u, use_surrogate=False), atol=1e-6)

    def test_translation_equivariance(self, cp):
        rng = np.random.default_rng(2)
        for _ in range(50):
            x = rng.uniform(-0.3, 0.3, 4)
            u = rng.uniform(-1.0, 1.0, 1)
            c = rng.uniform(-5.0, 5.0)
            shifted = step(cp, x + np.array([c, 0, 0, 0]), u)
            base = step(cp, x, u) + np.array([c, 0, 0, 0])
            np.testing.assert_allclose(shifted, base, atol=1e-12)

    def test_rho_fixed_point(self, cp):
        rng = np.random.default_rng(3)
        for _ in range(20):
            xt, ut = cp.lqr_target(rng.uniform(-0.5, 0.5, 4))
            assert np.linalg.norm(step(cp, xt, ut) - xt) <= 1e-9

    def test_determinism(self, cp):
        x = state(0.1, 0.2, 0.05, -0.1)
        u = np.array([0.3])
        a = step(cp, x, u)
        b = step(cp, x, u)
        assert np.array_equal(a, b)

    def test_variant_horizon(self):
        assert cartpole_env("original").default_horizon == 200
        assert cartpole_env("modified").default_horizon == 1000


class TestBicycle:
    def test_rho_zero_velocity(self, bike):
        x = np.array([0.3, 0.05, 0.21, 0.02, 0.0])
        xt, ut = bike.lqr_target(x)
        np.testing.assert_allclose(xt, x)
        np.testing.assert_allclose(ut, np.zeros(2))

    def test_rho_straight_advance(self, bike):
        x = np.array([0.0, 0.0, -0.1, 0.0, 0.1])
        xt, ut = bike.lqr_target(x)
        np.testing.assert_allclose(xt, [0.1, 0.0, 0.0, 0.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(ut, np.zeros(2))

    def test_straight_step_kinematics(self, bike):
        # closed-form: heading 0, no steering, both points advance by v
        x = np.array([0.0, 0.0, -0.1, 0.0, 0.1])
        nxt = step(bike, x, np.zeros(2))
        np.testing.assert_allclose(nxt, [0.1, 0.0, 0.0, 0.0, 0.1], atol=1e-12)

    def test_rho_fixed_point(self, bike):
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = np.array([0.0, 0.0, -0.1, 0.0, 0.0]) + rng.uniform(-0.05, 0.05, 5)
            xt, ut = bike.lqr_target(x)
            assert np.linalg.norm(step(bike, xt, ut) - xt) <= 1e-9

    def test_wheelbase_preserved(self, bike):
        rng = np.random.default_rng(5)
        x = np.array([0.0, 0.0, -0.1, 0.0, 0.05])
        for _ in range(100):
            u = np.array([rng.uniform(-0.25, 0.25), rng.uniform(-0.4, 0.4)])
            x = step(bike, x, u)
        wb = math.hypot(x[0] - x[2], x[1] - x[3])
        assert wb == pytest.approx(0.1, abs=1e-9)

    def test_action_clamping(self, bike):
        x = np.array([0.0, 0.0, -0.1, 0.0, 0.0])
        nxt = step(bike, x, np.array([5.0, 0.0]))
        # velocity update reflects the clamped acceleration bound 0.25
        assert nxt[4] == pytest.approx(0.25 * bike.dt)

    def test_obstacles_seeded(self):
        a = bicycle_env(obstacle_seed=1)
        b = bicycle_env(obstacle_seed=2)
        ya = [d.center[1] for d in a.safe_region.disk_exclusions]
        yb = [d.center[1] for d in b.safe_region.disk_exclusions]
        assert ya != yb
        for y in ya + yb:
            assert -0.05 <= y <= 0.05
        again = bicycle_env(obstacle_seed=1)
        assert ya == [d.center[1] for d in again.safe_region.disk_exclusions]

    def test_modified_radius(self):
        env = bicycle_env("modified", obstacle_seed=1)
        assert all(d.radius == 0.2 for d in env.safe_region.disk_exclusions)
        orig = bicycle_env("original", obstacle_seed=1)
        assert all(d.radius == 0.05 for d in orig.safe_region.disk_exclusions)

    def test_surrogate_matches_true_nearby(self, bike):
        rng = np.random.default_rng(6)
        center = np.array([0.0, 0.0, -0.1, 0.0, 0.0])
        for _ in range(100):
            x = center + rng.uniform(-0.005, 0.005, 5)
            u = rng.uniform(-0.005, 0.005, 2)
            np.testing.assert_allclose(
                step(bike, x, u, use_surrogate=True),
                step(bike, x, u, use_surrogate=False), atol=1e-6)

    def test_policy_extra_inputs_are_obstacle_ys(self, bike):
        ys = [d.center[1] for d in bike.safe_region.disk_exclusions[::2]]
        np.testing.assert_allclose(bike.policy_extra_inputs, ys)


class TestRewardModels:
    def check_grad(self, model, X):
        G = model.grad(X)
        eps = 1e-6
        for i in range(X.shape[0]):
            for j in range(X.shape[1]):
                hi = X.copy()
                lo = X.copy()
                hi[i, j] += eps
                lo[i, j] -= eps
                fd = (model.value(hi)[i] - model.value(lo)[i]) / (2 * eps)
                assert G[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_velocity_tracking_grad(self):
        rng = np.random.default_rng(7)
        self.check_grad(VelocityTrackingReward(1, 0.1), rng.normal(size=(5, 4)))

    def test_quadratic_grad(self):
        rng = np.random.default_rng(8)
        self.check_grad(QuadraticStateReward(np.array([0.0, 1.0, 2.0, 0.5])),
                        rng.normal(size=(5, 4)))

    def test_goal_obstacle_grad(self):
        rng = np.random.default_rng(9)
        model = GoalWithObstaclesReward(1.0, [0.4, 0.7], [0.01, -0.02], 0.05)
        X = rng.uniform(0.0, 1.0, size=(8, 5))
        self.check_grad(model, X)

    def test_goal_obstacle_extras_override(self):
        model = GoalWithObstaclesReward(1.0, [0.4], [0.0], 0.05)
        X = np.array([[0.4, 0.2, 0.3, 0.2, 0.0]])  # clear of y=0 obstacle
        base = model.value(X)
        moved = model.value(X, extras=np.array([[0.2]]))  # obstacle at the bike
        assert moved[0] < base[0]


def test_load_params_roundtrip(tmp_path):
    cfg = {"cartpole": {"dt": 0.01, "theta_max": 0.2},
           "bicycle": {"obstacle_radius": 0.07, "obstacle_xs": [0.3, 0.6]}}
    path = tmp_path / "env.json"
    path.write_text(json.dumps(cfg))
    params = load_params(str(path))
    assert params["cartpole"].dt == 0.01
    assert params["cartpole"].theta_max == 0.2
    assert params["cartpole"].gravity == 9.8
    assert params["bicycle"].obstacle_xs == (0.3, 0.6)
    env = make_env("cartpole", "original", params=params)
    assert env.safe_region.b[0] == 0.2
