"""Benchmark dynamical systems: cart-pole and a kinematic bicycle.

Each environment bundles the true smooth dynamics, a fixed-degree polynomial
surrogate (Taylor expansion of the true step), the safe region, the initial
state distribution, training rewards, the stabilization target map, and the
symmetry used to canonicalize targets for certificate caching.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError
from .polyalg import (
    CompiledMap,
    PolynomialMap,
    smooth_atan2,
    smooth_cos,
    smooth_sin,
    smooth_sqrt,
    taylor_expand,
)


# -- safe regions -------------------------------------------------------------

@dataclass(frozen=True)
class DiskExclusion:
    """Keep the projection (x[ix], x[iy]) at least `radius` away from `center`."""
    ix: int
    iy: int
    center: tuple[float, float]
    radius: float

    def distance(self, x: np.ndarray) -> float:
        dx = x[self.ix] - self.center[0]
        dy = x[self.iy] - self.center[1]
        return math.hypot(dx, dy)

    def holds(self, x: np.ndarray) -> bool:
        return self.distance(x) >= self.radius


@dataclass(frozen=True)
class SafeRegion:
    """Polytope A x <= b intersected with disk exclusions."""
    A: np.ndarray  # (k, n_x)
    b: np.ndarray  # (k,)
    disk_exclusions: tuple[DiskExclusion, ...] = ()

    def contains(self, x: np.ndarray) -> bool:
        x = np.asarray(x, dtype=float)
        if self.A.shape[0] and np.any(self.A @ x > self.b):
            return False
        return all(d.holds(x) for d in self.disk_exclusions)

    def contains_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        ok = np.ones(X.shape[0], dtype=bool)
        if self.A.shape[0]:
            ok &= np.all(X @ self.A.T <= self.b[None, :], axis=1)
        for d in self.disk_exclusions:
            dist = np.hypot(X[:, d.ix] - d.center[0], X[:, d.iy] - d.center[1])
            ok &= dist >= d.radius
        return ok


def is_safe(region: SafeRegion, x: np.ndarray) -> bool:
    return region.contains(x)


# -- reward models ------------------------------------------------------------

class RewardModel:
    """Batch state reward with analytic gradient, for rollout optimization.

    `extras` carries per-sample auxiliary task data (the bicycle obstacle
    y-positions); models that do not use it ignore the argument.
    """

    def value(self, X: np.ndarray, extras: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError

    def grad(self, X: np.ndarray, extras: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError


class VelocityTrackingReward(RewardModel):
    """-(v - v_target)^2 on the given state coordinate."""

    def __init__(self, coord: int, target: float):
        self.coord = coord
        self.target = target

    def value(self, X, extras=None):
        return -((X[:, self.coord] - self.target) ** 2)

    def grad(self, X, extras=None):
        G = np.zeros_like(X)
        G[:, self.coord] = -2.0 * (X[:, self.coord] - self.target)
        return G


class CartPoleTrainingReward(RewardModel):
    """Velocity tracking plus small upright-shaping terms.

    Pure velocity tracking is the task objective, but gradient training
    through the unrolled dynamics needs the pole-angle terms to find the
    balancing optimum; at the optimum they contribute nothing.
    """

    def __init__(self, target_velocity: float, angle_weight: float,
                 spin_weight: float):
        self.v0 = target_velocity
        self.wt = angle_weight
        self.ww = spin_weight

    def value(self, X, extras=None):
        return (-((X[:, 1] - self.v0) ** 2)
                - self.wt * X[:, 2] ** 2 - self.ww * X[:, 3] ** 2)

    def grad(self, X, extras=None):
        G = np.zeros_like(X)
        G[:, 1] = -2.0 * (X[:, 1] - self.v0)
        G[:, 2] = -2.0 * self.wt * X[:, 2]
        G[:, 3] = -2.0 * self.ww * X[:, 3]
        return G


class QuadraticStateReward(RewardModel):
    """-sum_i w_i x_i^2; used as the shaped stop-and-settle recovery reward."""

    def __init__(self, weights: np.ndarray):
        self.w = np.asarray(weights, dtype=float)

    def value(self, X, extras=None):
        return -np.sum(self.w[None, :] * X ** 2, axis=1)

    def grad(self, X, extras=None):
        return -2.0 * self.w[None, :] * X


class GoalWithObstaclesReward(RewardModel):
    """-(x_f - goal)^2 with a smooth hinge penalty around each obstacle disk.

    Obstacle y-positions default to the environment's fixed draw but can be
    overridden per sample through `extras` (one column per obstacle).
    """

    def __init__(self, goal_x: float, obstacle_xs: Sequence[float],
                 obstacle_ys: Sequence[float], radius: float,
                 weight: float = 30.0, margin: float = 0.02):
        self.goal_x = goal_x
        self.obstacle_xs = np.asarray(obstacle_xs, dtype=float)
        self.obstacle_ys = np.asarray(obstacle_ys, dtype=float)
        self.radius = radius
        self.weight = weight
        self.margin = margin
        self.points = [(0, 1), (2, 3)]  # front and back projections

    def _ys(self, X, extras):
        if extras is None:
            return np.broadcast_to(self.obstacle_ys, (X.shape[0], self.obstacle_ys.size))
        return extras

    def value(self, X, extras=None):
        out = -((X[:, 0] - self.goal_x) ** 2)
        clear = self.radius + self.margin
        ys = self._ys(X, extras)
        for k, cx in enumerate(self.obstacle_xs):
            for ix, iy in self.points:
                dist = np.hypot(X[:, ix] - cx, X[:, iy] - ys[:, k])
                out -= self.weight * np.maximum(0.0, clear - dist) ** 2
        return out

    def grad(self, X, extras=None):
        G = np.zeros_like(X)
        G[:, 0] = -2.0 * (X[:, 0] - self.goal_x)
        clear = self.radius + self.margin
        ys = self._ys(X, extras)
        for k, cx in enumerate(self.obstacle_xs):
            for ix, iy in self.points:
                dx = X[:, ix] - cx
                dy = X[:, iy] - ys[:, k]
                dist = np.hypot(dx, dy)
                gap = np.maximum(0.0, clear - dist)
                active = (gap > 0.0) & (dist > 1e-12)
                scale = np.where(active, 2.0 * self.weight * gap / np.maximum(dist, 1e-12), 0.0)
                G[:, ix] += scale * dx
                G[:, iy] += scale * dy
        return G


# -- exact linear reduction (bicycle) -----------------------------------------

@dataclass(frozen=True)
class SegmentClearance:
    """Clearance data: the point at `origin` slides along `direction`
    and must stay at least `radius` away from `center`."""
    origin: np.ndarray
    direction: np.ndarray
    center: np.ndarray
    radius: float


class StraightLineReduction:
    """Reduced coordinates (s, v) for straight-line motion toward a stop target.

    s is the signed position offset of the vehicle along its heading, measured
    from the target position; v is the velocity.  In these coordinates one
    step of the true dynamics with steering zero is exactly linear.
    """

    def __init__(self, dt: float, accel_max: float):
        self.A = np.array([[1.0, 1.0], [0.0, 1.0]])
        self.B = np.array([[0.0], [dt]])
        self.accel_max = accel_max

    def displacement(self, x: np.ndarray, target_state: np.ndarray) -> tuple[np.ndarray, float]:
        f = x[0:2] - target_state[0:2]
        b = x[2:4] - target_state[2:4]
        axis = target_state[0:2] - target_state[2:4]
        norm = np.linalg.norm(axis)
        if norm < 1e-12:
            return np.array([0.0, x[4]]), math.inf
        d = axis / norm
        s_f = float(d @ f)
        s_b = float(d @ b)
        residual = (np.linalg.norm(f - s_f * d) + np.linalg.norm(b - s_b * d)
                    + abs(s_f - s_b))
        return np.array([s_f, x[4]]), residual

    def halfspaces(self, K: np.ndarray) -> list[tuple[np.ndarray, float]]:
        k = np.asarray(K, dtype=float).reshape(-1)
        return [(k.copy(), self.accel_max), (-k, self.accel_max)]

    def clearances(self, target_state: np.ndarray,
                   region: SafeRegion) -> list[SegmentClearance]:
        axis = target_state[0:2] - target_state[2:4]
        norm = np.linalg.norm(axis)
        d = axis / norm if norm > 1e-12 else np.array([1.0, 0.0])
        out = []
        for excl in region.disk_exclusions:
            origin = np.array([target_state[excl.ix], target_state[excl.iy]])
            out.append(SegmentClearance(origin=origin, direction=d.copy(),
                                        center=np.asarray(excl.center, dtype=float),
                                        radius=excl.radius))
        return out


# -- target canonicalization ---------------------------------------------------

@dataclass(frozen=True)
class TargetTransform:
    """Maps a canonical target back to the original one."""
    original: tuple[np.ndarray, np.ndarray]
    canonical: tuple[np.ndarray, np.ndarray]

    def restore(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.original[0].copy(), self.original[1].copy())


# -- environment ---------------------------------------------------------------

@dataclass
class Environment:
    name: str
    variant: str
    n_x: int
    n_u: int
    dt: float
    true_step: Callable[[np.ndarray, np.ndarray], np.ndarray]
    poly_step: PolynomialMap
    safe_region: SafeRegion
    init_sampler: Callable[[np.random.Generator], np.ndarray]
    action_bounds: np.ndarray  # (n_u, 2) low/high, +-inf allowed
    training_reward: RewardModel
    shaped_recovery_reward: RewardModel
    task_metric: Callable[[np.ndarray], float]
    lqr_target: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    canonicalize_target: Callable[[tuple[np.ndarray, np.ndarray]],
                                  tuple[str, TargetTransform]]
    default_horizon: int
    policy_extra_inputs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # draws per-sample policy extras during training (None: extras are fixed)
    training_extras_sampler: Callable[[np.random.Generator, int], np.ndarray] | None = None
    # per-coordinate clip for training rollouts (None: scalar from TrainConfig)
    training_state_clip: np.ndarray | None = None
    cert_route: str = "sos"
    exact_reduction: StraightLineReduction | None = None
    _compiled: CompiledMap | None = None

    def compiled_step(self) -> CompiledMap:
        if self._compiled is None:
            self._compiled = self.poly_step.compile()
        return self._compiled

    def clamp_action(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return np.clip(u, self.action_bounds[:, 0], self.action_bounds[:, 1])

    def policy_input(self, x: np.ndarray) -> np.ndarray:
        if self.policy_extra_inputs.size:
            return np.concatenate([x, self.policy_extra_inputs])
        return np.asarray(x, dtype=float)


def step(env: Environment, x: np.ndarray, u: np.ndarray,
         use_surrogate: bool = False) -> np.ndarray:
    """One step of the selected dynamics with the action clamped to bounds."""
    x = np.asarray(x, dtype=float)
    if x.shape != (env.n_x,):
        raise DimensionError(f"state has shape {x.shape}, expected ({env.n_x},)")
    u = env.clamp_action(u)
    if u.shape != (env.n_u,):
        raise DimensionError(f"action has shape {u.shape}, expected ({env.n_u},)")
    if use_surrogate:
        out = env.compiled_step()(np.concatenate([x, u]))
    else:
        out = env.true_step(x, u)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"dynamics produced non-finite state from x={x}, u={u}")
    return out


# -- cart-pole -----------------------------------------------------------------

@dataclass(frozen=True)
class CartPoleParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_half_length: float = 0.5
    gravity: float = 9.8
    dt: float = 0.02
    theta_max: float = 0.15
    target_velocity: float = 0.1
    init_low: float = -0.5
    init_high: float = 0.5
    taylor_degree: int = 5
    angle_penalty: float = 1.0
    spin_penalty: float = 0.1


def _cartpole_rhs(params: CartPoleParams, z, v, theta, omega, u):
    """Smooth accelerations of the classic benchmark; works on floats or jets."""
    mt = params.cart_mass + params.pole_mass
    ml = params.pole_mass * params.pole_half_length
    s = smooth_sin(theta)
    c = smooth_cos(theta)
    tmp = (u + ml * omega * omega * s) / mt
    denom = params.pole_half_length * (4.0 / 3.0 - params.pole_mass * c * c / mt)
    theta_acc = (params.gravity * s - c * tmp) / denom
    z_acc = tmp - ml * theta_acc * c / mt
    return z_acc, theta_acc


def _cartpole_step_smooth(params: CartPoleParams, inp):
    # cart position advances by v per step (velocity stored as per-step
    # displacement); pole coordinates integrate with the physical time step
    z, v, theta, omega, u = inp
    z_acc, theta_acc = _cartpole_rhs(params, z, v, theta, omega, u)
    dt = params.dt
    return [z + v, v + dt * z_acc, theta + dt * omega, omega + dt * theta_acc]


def cartpole_env(variant: str = "original",
                 params: CartPoleParams | None = None) -> Environment:
    if variant not in ("original", "modified"):
        raise ValueError(f"unknown cart-pole variant: {variant}")
    p = params or CartPoleParams()

    def true_step(x, u):
        out = _cartpole_step_smooth(p, [x[0], x[1], x[2], x[3], u[0]])
        return np.array(out)

    poly = taylor_expand(lambda jets: _cartpole_step_smooth(p, jets),
                         np.zeros(5), p.taylor_degree)

    region = SafeRegion(
        A=np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, -1.0, 0.0]]),
        b=np.array([p.theta_max, p.theta_max]),
    )

    def init_sampler(rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(p.init_low, p.init_high, size=4)

    def lqr_target(x):
        return np.array([x[0], 0.0, 0.0, 0.0]), np.zeros(1)

    def canonicalize(target):
        x_t, u_t = target
        canonical = (np.zeros(4), np.zeros(1))
        return "cartpole/upright", TargetTransform(
            original=(np.asarray(x_t, float).copy(), np.asarray(u_t, float).copy()),
            canonical=canonical)

    def task_metric(states):
        return float(states[-1, 0] - states[0, 0])

    return Environment(
        name="cartpole",
        variant=variant,
        n_x=4,
        n_u=1,
        dt=p.dt,
        true_step=true_step,
        poly_step=poly,
        safe_region=region,
        init_sampler=init_sampler,
        action_bounds=np.array([[-np.inf, np.inf]]),
        training_reward=CartPoleTrainingReward(
            p.target_velocity, p.angle_penalty, p.spin_penalty),
        shaped_recovery_reward=QuadraticStateReward(np.array([0.0, 1.0, 1.0, 1.0])),
        task_metric=task_metric,
        lqr_target=lqr_target,
        canonicalize_target=canonicalize,
        default_horizon=1000 if variant == "modified" else 200,
        training_state_clip=np.array([500.0, 2.0, 3.0, 8.0]),
        cert_route="sos",
    )


# -- bicycle -------------------------------------------------------------------

@dataclass(frozen=True)
class BicycleParams:
    wheelbase: float = 0.1
    dt: float = 0.02
    accel_max: float = 0.25
    steer_max: float = 1.0
    obstacle_xs: tuple[float, ...] = (0.4, 0.7)
    obstacle_radius: float = 0.05
    obstacle_radius_modified: float = 0.2
    obstacle_y_low: float = -0.05
    obstacle_y_high: float = 0.05
    goal_x: float = 1.0
    init_state: tuple[float, ...] = (0.0, 0.0, -0.1, 0.0, 0.0)
    obstacle_penalty_weight: float = 80.0
    obstacle_penalty_margin: float = 0.03
    taylor_degree: int = 5


def _bicycle_step_smooth(params: BicycleParams, inp):
    """Two-point kinematic bicycle; per-step positional advance equals v."""
    xf, yf, xb, yb, v, a, steer = inp
    dxa = xf - xb
    dya = yf - yb
    phi = smooth_atan2(dya, dxa)
    cf = smooth_cos(phi + steer)
    sf = smooth_sin(phi + steer)
    cb = smooth_cos(phi)
    sb = smooth_sin(phi)
    xf2 = xf + v * cf
    yf2 = yf + v * sf
    xb_raw = xb + v * cb
    yb_raw = yb + v * sb
    # keep the frame rigid: back point sits at the current axle length behind
    # the new front point, along the new axle direction
    length = smooth_sqrt(dxa * dxa + dya * dya)
    ax = xf2 - xb_raw
    ay = yf2 - yb_raw
    anorm = smooth_sqrt(ax * ax + ay * ay)
    xb2 = xf2 - length * ax / anorm
    yb2 = yf2 - length * ay / anorm
    v2 = v + params.dt * a
    return [xf2, yf2, xb2, yb2, v2]


def bicycle_obstacles(params: BicycleParams, obstacle_seed: int) -> list[tuple[float, float]]:
    rng = np.random.default_rng(obstacle_seed)
    ys = rng.uniform(params.obstacle_y_low, params.obstacle_y_high, size=len(params.obstacle_xs))
    return [(float(x), float(y)) for x, y in zip(params.obstacle_xs, ys)]


def bicycle_env(variant: str = "original", obstacle_seed: int = 0,
                params: BicycleParams | None = None) -> Environment:
    if variant not in ("original", "modified"):
        raise ValueError(f"unknown bicycle variant: {variant}")
    p = params or BicycleParams()
    radius = p.obstacle_radius_modified if variant == "modified" else p.obstacle_radius
    obstacles = bicycle_obstacles(p, obstacle_seed)

    def true_step(x, u):
        out = _bicycle_step_smooth(p, [x[0], x[1], x[2], x[3], x[4], u[0], u[1]])
        return np.array(out)

    center = np.concatenate([np.asarray(p.init_state, dtype=float), np.zeros(2)])
    poly = taylor_expand(lambda jets: _bicycle_step_smooth(p, jets),
                         center, p.taylor_degree)
    # express the surrogate in absolute (x, u) coordinates
    poly = poly.compose_affine(np.eye(7), -center)

    disks = []
    for c in obstacles:
        disks.append(DiskExclusion(ix=0, iy=1, center=c, radius=radius))
        disks.append(DiskExclusion(ix=2, iy=3, center=c, radius=radius))
    region = SafeRegion(A=np.zeros((0, 5)), b=np.zeros(0), disk_exclusions=tuple(disks))

    init_state = np.asarray(p.init_state, dtype=float)

    def init_sampler(rng: np.random.Generator) -> np.ndarray:
        return init_state.copy()

    def lqr_target(x):
        phi = math.atan2(x[1] - x[3], x[0] - x[2])
        v = x[4]
        shift = np.array([v * math.cos(phi), v * math.sin(phi)])
        tx = np.array([x[0] + shift[0], x[1] + shift[1],
                       x[2] + shift[0], x[3] + shift[1], 0.0])
        return tx, np.zeros(2)

    def canonicalize(target):
        x_t, u_t = target
        canonical = (np.array([0.0, 0.0, -p.wheelbase, 0.0, 0.0]), np.zeros(2))
        return "bicycle/straight-stop", TargetTransform(
            original=(np.asarray(x_t, float).copy(), np.asarray(u_t, float).copy()),
            canonical=canonical)

    def task_metric(states):
        return float(states[-1, 0] - states[0, 0])

    return Environment(
        name="bicycle",
        variant=variant,
        n_x=5,
        n_u=2,
        dt=p.dt,
        true_step=true_step,
        poly_step=poly,
        safe_region=region,
        init_sampler=init_sampler,
        action_bounds=np.array([[-p.accel_max, p.accel_max],
                                [-p.steer_max, p.steer_max]]),
        training_reward=GoalWithObstaclesReward(
            p.goal_x, p.obstacle_xs, [c[1] for c in obstacles], radius,
            weight=p.obstacle_penalty_weight, margin=p.obstacle_penalty_margin),
        shaped_recovery_reward=QuadraticStateReward(np.array([0.0, 0.0, 0.0, 0.0, 3.0])),
        task_metric=task_metric,
        lqr_target=lqr_target,
        canonicalize_target=canonicalize,
        default_horizon=200,
        policy_extra_inputs=np.array([c[1] for c in obstacles]),
        training_extras_sampler=lambda rng, n: rng.uniform(
            p.obstacle_y_low, p.obstacle_y_high, size=(n, len(p.obstacle_xs))),
        training_state_clip=np.array([5.0, 5.0, 5.0, 5.0, 1.0]),
        cert_route="exact_linear",
        exact_reduction=StraightLineReduction(dt=p.dt, accel_max=p.accel_max),
    )


# -- configuration loading ------------------------------------------------------

def load_params(path: str) -> dict:
    """Read environment parameter overrides from a JSON config file.

    Top-level keys "cartpole" and "bicycle" hold field overrides for
    CartPoleParams and BicycleParams respectively (see README for the list).
    """
    with open(path) as fh:
        raw = json.load(fh)
    out = {}
    if "cartpole" in raw:
        out["cartpole"] = replace(CartPoleParams(), **raw["cartpole"])
    if "bicycle" in raw:
        bp = dict(raw["bicycle"])
        for tuple_key in ("obstacle_xs", "init_state"):
            if tuple_key in bp:
                bp[tuple_key] = tuple(bp[tuple_key])
        out["bicycle"] = replace(BicycleParams(), **bp)
    return out


def make_env(name: str, variant: str, obstacle_seed: int = 0,
             params: dict | None = None) -> Environment:
    params = params or {}
    if name == "cartpole":
        return cartpole_env(variant, params.get("cartpole"))
    if name == "bicycle":
        return bicycle_env(variant, obstacle_seed, params.get("bicycle"))
    raise ValueError(f"unknown environment: {name}")
