"""Single-hidden-layer policies trained by backpropagation through time.

Rollouts unroll the differentiable polynomial surrogate dynamics; gradients
flow through both the network and the dynamics via handwritten reverse-mode
adjoints, with Adam updates.  The same machinery trains the task policy and
the recovery policy; recovery training draws its initial states from the
distribution of safe states visited by the task policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import Environment, RewardModel
from .errors import ConfigurationError, DimensionError, NumericError


@dataclass
class MlpPolicy:
    """u = W2 relu(W1 inp + b1) + b2, clamped to the action bounds."""
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray

    @property
    def n_in(self) -> int:
        return self.W1.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def n_out(self) -> int:
        return self.W2.shape[0]

    def raw_forward(self, inp: np.ndarray) -> np.ndarray:
        inp = np.asarray(inp, dtype=float)
        if inp.shape != (self.n_in,):
            raise DimensionError(f"input has shape {inp.shape}, expected ({self.n_in},)")
        h = np.maximum(0.0, self.W1 @ inp + self.b1)
        return self.W2 @ h + self.b2

    def forward(self, inp: np.ndarray) -> np.ndarray:
        return np.clip(self.raw_forward(inp), self.action_low, self.action_high)

    def batch_raw(self, X: np.ndarray) -> np.ndarray:
        H = np.maximum(0.0, X @ self.W1.T + self.b1)
        return H @ self.W2.T + self.b2

    def batch_forward(self, X: np.ndarray) -> np.ndarray:
        return np.clip(self.batch_raw(X), self.action_low, self.action_high)

    def act(self, env: Environment, x: np.ndarray) -> np.ndarray:
        return self.forward(env.policy_input(x))

    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "MlpPolicy":
        return MlpPolicy(self.W1.copy(), self.b1.copy(), self.W2.copy(),
                         self.b2.copy(), self.action_low.copy(), self.action_high.copy())

    @staticmethod
    def zeros(n_in: int, n_out: int, action_bounds: np.ndarray,
              hidden: int = 200) -> "MlpPolicy":
        return MlpPolicy(
            W1=np.zeros((hidden, n_in)), b1=np.zeros(hidden),
            W2=np.zeros((n_out, hidden)), b2=np.zeros(n_out),
            action_low=np.asarray(action_bounds)[:, 0].astype(float),
            action_high=np.asarray(action_bounds)[:, 1].astype(float))

    @staticmethod
    def random_init(rng: np.random.Generator, n_in: int, n_out: int,
                    action_bounds: np.ndarray, hidden: int = 200,
                    scale: float = 0.1) -> "MlpPolicy":
        return MlpPolicy(
            W1=rng.normal(0.0, scale / np.sqrt(n_in), size=(hidden, n_in)),
            b1=np.zeros(hidden),
            W2=rng.normal(0.0, scale / np.sqrt(hidden), size=(n_out, hidden)),
            b2=np.zeros(n_out),
            action_low=np.asarray(action_bounds)[:, 0].astype(float),
            action_high=np.asarray(action_bounds)[:, 1].astype(float))

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(f"mlp {self.n_in} {self.n_hidden} {self.n_out}\n")
            fh.write("low " + " ".join(repr(float(v)) for v in self.action_low) + "\n")
            fh.write("high " + " ".join(repr(float(v)) for v in self.action_high) + "\n")
            for block in self.params():
                for v in np.asarray(block).reshape(-1):
                    fh.write(repr(float(v)) + "\n")

    @staticmethod
    def load(path: str) -> "MlpPolicy":
        with open(path) as fh:
            header = fh.readline().split()
            if header[0] != "mlp":
                raise ValueError(f"not a policy checkpoint: {path}")
            n_in, hidden, n_out = (int(t) for t in header[1:])
            low = np.array([float(t) for t in fh.readline().split()[1:]])
            high = np.array([float(t) for t in fh.readline().split()[1:]])
            vals = np.array([float(line) for line in fh if line.strip()])
        shapes = [(hidden, n_in), (hidden,), (n_out, hidden), (n_out,)]
        blocks = []
        pos = 0
        for s in shapes:
            ln = int(np.prod(s))
            blocks.append(vals[pos:pos + ln].reshape(s))
            pos += ln
        if pos != vals.size:
            raise ValueError(f"checkpoint has {vals.size} values, expected {pos}")
        return MlpPolicy(blocks[0], blocks[1], blocks[2], blocks[3], low, high)


def forward(policy: MlpPolicy, inp: np.ndarray) -> np.ndarray:
    return policy.forward(inp)


@dataclass
class TrainConfig:
    horizon: int = 200
    discount: float = 0.99
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 24
    iterations: int = 300
    seed: int = 0
    hidden: int = 200
    init_scale: float = 0.1
    # rollout states are clipped here during training to keep the unrolled
    # surrogate finite before the policy learns to stabilize
    state_clip: float = 50.0
    use_surrogate: bool = True


# -- reverse-mode rollout gradients ---------------------------------------------

def rollout_objective_and_grads(policy: MlpPolicy, env: Environment,
                                cfg: TrainConfig, X0: np.ndarray,
                                reward: RewardModel,
                                extras: np.ndarray | None = None,
                                need_grads: bool = True):
    """Mean discounted reward of a batch rollout and its parameter gradients.

    The objective is (1/B) sum_b sum_{t=1..N} gamma^t R(x_t); dynamics are the
    compiled polynomial surrogate (cfg.use_surrogate must hold: the true step
    is not exposed in differentiable form).
    """
    if not cfg.use_surrogate:
        raise ConfigurationError("gradient rollouts require the surrogate dynamics")
    cm = env.compiled_step()
    B, n = X0.shape
    m = env.n_u
    N = cfg.horizon
    gamma = cfg.discount
    if extras is None:
        extras = np.broadcast_to(env.policy_extra_inputs, (B, env.policy_extra_inputs.size))
    low, high = policy.action_low, policy.action_high
    if env.training_state_clip is not None:
        clip = np.asarray(env.training_state_clip, dtype=float)
    else:
        clip = np.full(n, cfg.state_clip)

    states = [X0.astype(float)]
    inputs, acts, actions, umasks, hmasks, smasks = [], [], [], [], [], []
    X = X0.astype(float)
    for _ in range(N):
        I = np.hstack([X, extras]) if extras.shape[1] else X
        Hpre = I @ policy.W1.T + policy.b1
        H = np.maximum(0.0, Hpre)
        Uraw = H @ policy.W2.T + policy.b2
        U = np.clip(Uraw, low, high)
        Xraw = cm.batch(np.hstack([X, U]))
        Xn = np.clip(Xraw, -clip, clip)
        inputs.append(I)
        acts.append(H)
        actions.append(U)
        umasks.append((Uraw > low) & (Uraw < high))
        hmasks.append(Hpre > 0.0)
        smasks.append(np.abs(Xraw) < clip)
        states.append(Xn)
        X = Xn

    disc = gamma ** np.arange(N + 1)
    J = 0.0
    for t in range(1, N + 1):
        J += disc[t] * float(np.mean(reward.value(states[t], extras)))
    if not np.isfinite(J):
        raise NumericError("rollout objective is not finite")
    if not need_grads:
        return J, None

    gW1 = np.zeros_like(policy.W1)
    gb1 = np.zeros_like(policy.b1)
    gW2 = np.zeros_like(policy.W2)
    gb2 = np.zeros_like(policy.b2)

    a = disc[N] * reward.grad(states[N], extras) / B
    for t in range(N - 1, -1, -1):
        upstream = a * smasks[t]
        Jb = cm.jacobian_batch(np.hstack([states[t], actions[t]]))
        Jx = Jb[:, :, :n]
        Ju = Jb[:, :, n:]
        gu = np.einsum("bij,bi->bj", Ju, upstream) * umasks[t]
        gW2 += gu.T @ acts[t]
        gb2 += gu.sum(axis=0)
        ga = (gu @ policy.W2) * hmasks[t]
        gW1 += ga.T @ inputs[t]
        gb1 += ga.sum(axis=0)
        gx_pol = ga @ policy.W1[:, :n]
        a = np.einsum("bij,bi->bj", Jx, upstream) + gx_pol
        if t >= 1:
            a = a + disc[t] * reward.grad(states[t], extras) / B
    grads = {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2}
    return J, grads


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr: float, beta1: float,
                 beta2: float, eps: float):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def ascend(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            p += self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    policy: MlpPolicy
    objectives: list[float] = field(default_factory=list)
    aborted: bool = False


def _draw_batch(env: Environment, rng: np.random.Generator, size: int,
                init_sampler: Callable | None) -> np.ndarray:
    if init_sampler is not None:
        return init_sampler(rng, size)
    return np.stack([env.init_sampler(rng) for _ in range(size)])


def train_bptt(env: Environment, cfg: TrainConfig,
               reward: RewardModel | None = None,
               init_sampler: Callable[[np.random.Generator, int], np.ndarray] | None = None,
               policy: MlpPolicy | None = None,
               snapshot_hook: Callable[[int, MlpPolicy], None] | None = None
               ) -> TrainResult:
    """Gradient-ascent BPTT training; returns the policy and objective trace.

    On a non-finite objective the run aborts and the last finite checkpoint
    is returned with `aborted` set.
    """
    rng = np.random.default_rng(cfg.seed)
    reward = reward or env.training_reward
    n_extra = env.policy_extra_inputs.size
    if policy is None:
        policy = MlpPolicy.random_init(
            rng, env.n_x + n_extra, env.n_u, env.action_bounds,
            hidden=cfg.hidden, scale=cfg.init_scale)
    opt = Adam(policy.params(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_adam)
    result = TrainResult(policy=policy)
    checkpoint = policy.copy()
    for it in range(cfg.iterations):
        X0 = _draw_batch(env, rng, cfg.batch_size, init_sampler)
        if env.training_extras_sampler is not None:
            extras = env.training_extras_sampler(rng, cfg.batch_size)
        else:
            extras = None
        try:
            J, grads = rollout_objective_and_grads(policy, env, cfg, X0, reward, extras)
        except NumericError:
            result.policy = checkpoint
            result.aborted = True
            return result
        result.objectives.append(J)
        opt.ascend(policy.params(), [grads["W1"], grads["b1"], grads["W2"], grads["b2"]])
        if not all(np.all(np.isfinite(p)) for p in policy.params()):
            result.policy = checkpoint
            result.aborted = True
            return result
        if (it + 1) % 25 == 0:
            checkpoint = policy.copy()
        if snapshot_hook is not None and (it + 1) % 50 == 0:
            snapshot_hook(it + 1, policy.copy())
    result.policy = policy
    return result


def evaluate_policy(env: Environment, policy: MlpPolicy, rollouts: int = 20,
                    horizon: int | None = None, seed: int = 123,
                    use_surrogate: bool = False) -> tuple[float, float]:
    """(fraction of fully safe rollouts, mean per-step training reward)."""
    from .dynamics import step as env_step

    rng = np.random.default_rng(seed)
    horizon = horizon or env.default_horizon
    safe_count = 0
    rewards = []
    for _ in range(rollouts):
        x = env.init_sampler(rng)
        safe = env.safe_region.contains(x)
        vals = []
        for _ in range(horizon):
            try:
                x = env_step(env, x, policy.act(env, x), use_surrogate=use_surrogate)
            except NumericError:
                safe = False
                break
            safe &= env.safe_region.contains(x)
            vals.append(float(env.training_reward.value(x[None, :])[0]))
        safe_count += safe
        rewards.append(np.mean(vals) if vals else -np.inf)
    return safe_count / rollouts, float(np.mean(rewards))


def train_task_policy(env: Environment, cfg: TrainConfig,
                      stages: Sequence[tuple[int, int]] | None = None,
                      n_seeds: int = 2) -> TrainResult:
    """Curriculum BPTT for the task policy.

    Training unrolls grow from short horizons (where the landscape is smooth
    enough to learn stabilization) to the full horizon; the run is repeated
    over a few seeds and the best policy under a held-out safety-then-reward
    score is kept.
    """
    from dataclasses import replace

    if stages is None:
        N = cfg.horizon
        base = cfg.iterations
        stages = [(h, it) for h, it in (
            (10, base // 2), (25, base // 2), (50, base // 2),
            (100, 2 * base // 3), (N, base)) if h <= N]
        if not stages or stages[-1][0] != N:
            stages.append((N, base))
    best: tuple[tuple[float, float], TrainResult] | None = None
    for k in range(n_seeds):
        policy = None
        result = TrainResult(policy=None)
        for horizon, iters in stages:
            stage_cfg = replace(cfg, horizon=horizon, iterations=iters,
                                seed=cfg.seed + 1000 * k + horizon)
            part = train_bptt(env, stage_cfg, policy=policy)
            policy = part.policy
            result.objectives.extend(part.objectives)
            result.aborted = part.aborted
        result.policy = policy
        score = evaluate_policy(env, policy, seed=cfg.seed + 7)
        if best is None or score > best[0]:
            best = (score, result)
    return best[1]


# -- recovery-state sampling and recovery training --------------------------------

@dataclass
class RecoverySamples:
    states: np.ndarray
    horizons: np.ndarray
    acceptance_rate: float


def sample_recovery_states(env: Environment, pi_hat: MlpPolicy, T_prime: int,
                           count: int, seed: int, use_surrogate: bool = True,
                           probe: int = 200) -> RecoverySamples:
    """Safe states visited by the task policy at uniformly random horizons.

    Draws x0 from the initial distribution and t uniform on {0..T'-1}, rolls
    the task policy for t steps, and keeps the endpoint iff it is safe.
    """
    from .dynamics import step as env_step

    rng = np.random.default_rng(seed)
    states: list[np.ndarray] = []
    horizons: list[int] = []
    attempts = 0
    accepted = 0
    while accepted < count:
        x = env.init_sampler(rng)
        t = int(rng.integers(0, T_prime))
        attempts += 1
        ok = True
        for _ in range(t):
            u = pi_hat.act(env, x)
            try:
                x = env_step(env, x, u, use_surrogate=use_surrogate)
            except NumericError:
                ok = False
                break
        if ok and env.safe_region.contains(x):
            states.append(x)
            horizons.append(t)
            accepted += 1
        if attempts == probe and accepted < max(1, probe // 100):
            raise ConfigurationError(
                f"recovery sampling acceptance below 1% after {probe} probes")
    return RecoverySamples(states=np.array(states),
                           horizons=np.array(horizons, dtype=int),
                           acceptance_rate=accepted / attempts)


def train_recovery(env: Environment, d_rec: np.ndarray, cfg: TrainConfig,
                   reward_mode: str = "shaped",
                   stability_oracle: Callable[[np.ndarray], bool] | None = None
                   ) -> TrainResult:
    """Train the recovery policy from initial states drawn from d_rec.

    The shaped mode maximizes the negative squared distance to the
    stabilization target.  The indicator mode keeps the shaped surrogate for
    gradients (the indicator is not differentiable) and uses the stability
    indicator only to select among periodic snapshots.
    """
    if reward_mode not in ("shaped", "indicator"):
        raise ValueError(f"unknown reward mode: {reward_mode}")
    if reward_mode == "indicator" and stability_oracle is None:
        raise ConfigurationError("indicator mode needs a stability oracle")
    d_rec = np.asarray(d_rec, dtype=float)

    def init_sampler(rng: np.random.Generator, size: int) -> np.ndarray:
        idx = rng.integers(0, d_rec.shape[0], size=size)
        return d_rec[idx]

    if reward_mode == "shaped":
        return train_bptt(env, cfg, reward=env.shaped_recovery_reward,
                          init_sampler=init_sampler)

    from .dynamics import step as env_step

    def indicator_score(policy: MlpPolicy) -> float:
        rng = np.random.default_rng(cfg.seed + 1)
        starts = init_sampler(rng, min(32, d_rec.shape[0]))
        hits = 0
        for x in starts:
            xi = x.copy()
            for _ in range(cfg.horizon):
                if stability_oracle(xi):
                    hits += 1
                    break
                xi = env_step(env, xi, policy.act(env, xi), use_surrogate=True)
        return hits / starts.shape[0]

    snapshots: list[MlpPolicy] = []
    result = train_bptt(env, cfg, reward=env.shaped_recovery_reward,
                        init_sampler=init_sampler,
                        snapshot_hook=lambda it, p: snapshots.append(p))
    snapshots.append(result.policy)
    scored = [(indicator_score(p), i) for i, p in enumerate(snapshots)]
    _, best_idx = max(scored)
    result.policy = snapshots[best_idx]
    return result
