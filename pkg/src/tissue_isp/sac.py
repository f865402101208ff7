"""Soft actor-critic with twin critics and automatic temperature.

Actions are handled internally in the squashed space [-1, 1]^A; the policy
multiplies by ``action_scale`` only when handing actions to an environment.
Log-probabilities are likewise those of the squashed action, so a target
entropy of ``-A`` has its usual meaning.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from tissue_isp.errors import ConfigError, ShapeError
from tissue_isp.mlp import (
    HIDDEN,
    AdamState,
    MlpParams,
    adam_update,
    backward_cached,
    forward,
    forward_cached,
    init_mlp,
)

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
SQUASH_EPS = 1e-6
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    polyak_tau: float = 0.005
    learning_rate: float = 7e-4
    batch_size: int = 256
    buffer_capacity: int = 5000
    total_steps: int = 20000  # environment steps after warmup, one update each
    warmup_steps: int = 5000
    target_entropy: float | None = None  # None: minus the action dimension
    eval_interval: int = 100
    eval_episodes: int = 5
    auto_temperature: bool = True
    initial_alpha: float = 1.0
    hidden: tuple[int, ...] = HIDDEN

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if not 0.0 < self.polyak_tau <= 1.0:
            raise ConfigError("polyak_tau must lie in (0, 1]")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ConfigError("buffer_capacity must be >= batch_size >= 1")
        if self.warmup_steps > self.buffer_capacity:
            raise ConfigError("warmup_steps must not exceed buffer_capacity")
        if self.warmup_steps < self.batch_size:
            raise ConfigError("warmup_steps must be >= batch_size")
        if self.total_steps < 0 or self.eval_interval < 1 or self.eval_episodes < 1:
            raise ConfigError("total_steps >= 0, eval_interval >= 1 and eval_episodes >= 1 required")
        if not self.learning_rate > 0 or not self.initial_alpha > 0:
            raise ConfigError("learning_rate and initial_alpha must be positive")


# -- replay ----------------------------------------------------------------------


class ReplayBuffer:
    """Fixed-capacity ring; the oldest transition is overwritten first."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.cursor = 0
        self.size = 0

    def add(self, obs, act, rew, next_obs, done) -> None:
        i = self.cursor
        if np.shape(obs) != self.obs.shape[1:] or np.shape(next_obs) != self.obs.shape[1:]:
            raise ShapeError("observation width does not match the buffer")
        self.obs[i] = obs
        self.act[i] = act
        self.rew[i] = rew
        self.next_obs[i] = next_obs
        self.done[i] = float(done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Uniform with replacement over the current contents."""
        idx = rng.integers(0, self.size, size=batch_size)
        return self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx]


# -- policy ----------------------------------------------------------------------


class Policy:
    """Squashed Gaussian; the actor emits per-axis means then log-stds."""

    def __init__(self, actor: MlpParams, action_scale: float):
        if actor.n_out % 2:
            raise ShapeError("actor output must hold a mean and a log-std per axis")
        self.actor = actor
        self.action_scale = float(action_scale)

    @property
    def obs_dim(self) -> int:
        return self.actor.n_in

    @property
    def act_dim(self) -> int:
        return self.actor.n_out // 2

    def act(self, obs) -> np.ndarray:
        return sample_action(self, obs, None, deterministic=True)[0]

    def act_env(self, env) -> np.ndarray:
        return self.act(env.observation().as_array())


def _head(policy: Policy, obs):
    out, cache = forward_cached(policy.actor, obs)
    A = policy.act_dim
    mu, raw = out[..., :A], out[..., A:]
    return mu, raw, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), cache


def squashed_log_prob(eps, log_std, a_unit):
    """Log-density of ``tanh(mu + std * eps)`` evaluated at the drawn sample."""
    per_axis = -0.5 * eps * eps - log_std - _HALF_LOG_2PI - np.log(1.0 - a_unit * a_unit + SQUASH_EPS)
    return per_axis.sum(axis=-1)


def sample_action(policy: Policy, obs, rng: np.random.Generator | None, deterministic: bool = False):
    """Returns ``(action scaled to the environment, log-probability)``.

    In deterministic mode the squashed mean is returned with the log-density
    of the mode (zero noise).
    """
    mu, _, ls, _ = _head(policy, obs)
    eps = np.zeros_like(mu) if deterministic else rng.standard_normal(mu.shape)
    a_unit = np.tanh(mu + np.exp(ls) * eps)
    return policy.action_scale * a_unit, squashed_log_prob(eps, ls, a_unit)


# -- critics ---------------------------------------------------------------------


@dataclass
class Critics:
    q1: MlpParams
    q2: MlpParams
    q1_target: MlpParams
    q2_target: MlpParams
    opt1: AdamState
    opt2: AdamState

    @classmethod
    def create(cls, obs_dim: int, act_dim: int, hidden, rng, lr: float) -> "Critics":
        widths = (obs_dim + act_dim, *hidden, 1)
        q1, q2 = init_mlp(widths, rng), init_mlp(widths, rng)
        n = q1.values.size
        return cls(q1, q2, q1.copy(), q2.copy(), AdamState.zeros(n, lr), AdamState.zeros(n, lr))

    def polyak(self, tau: float) -> None:
        for src, dst in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            dst.values *= 1.0 - tau
            dst.values += tau * src.values


def _cat(obs, act):
    return np.concatenate([obs, act], axis=-1)


def td_target(batch, critics: Critics, policy: Policy, alpha: float, gamma: float, rng=None, eps=None):
    """``r + gamma (1 - done) (min target Q(s', a') - alpha log pi(a'|s'))``."""
    _, _, rew, next_obs, done = batch
    mu, _, ls, _ = _head(policy, next_obs)
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    a_next = np.tanh(mu + np.exp(ls) * eps)
    logp = squashed_log_prob(eps, ls, a_next)
    x = _cat(next_obs, a_next)
    qmin = np.minimum(forward(critics.q1_target, x)[:, 0], forward(critics.q2_target, x)[:, 0])
    return rew + gamma * (1.0 - done) * (qmin - alpha * logp)


def critic_loss(critics: Critics, batch, targets) -> float:
    obs, act = batch[0], batch[1]
    x = _cat(obs, act)
    r1 = forward(critics.q1, x)[:, 0] - targets
    r2 = forward(critics.q2, x)[:, 0] - targets
    return float(0.5 * np.mean(r1 * r1) + 0.5 * np.mean(r2 * r2))


def critic_update(critics: Critics, batch, targets, report_post_loss: bool = True):
    """One Adam step on ``mean 1/2 (Q_i - y)^2`` for both critics.

    Returns ``(loss, applied)``; the loss is taken after the step unless
    ``report_post_loss`` is false, in which case it is the pre-step value.
    """
    obs, act = batch[0], batch[1]
    x = _cat(obs, act)
    B = x.shape[0]
    loss = 0.0
    grads = []
    for q in (critics.q1, critics.q2):
        out, cache = forward_cached(q, x)
        r = out[:, 0] - targets
        loss += 0.5 * float(np.mean(r * r))
        g, _ = backward_cached(q, cache, r[:, None] / B, need_input_grad=False)
        grads.append(g)
    if not math.isfinite(loss):
        return loss, False
    ok1 = adam_update(critics.q1.values, grads[0], critics.opt1)
    ok2 = adam_update(critics.q2.values, grads[1], critics.opt2)
    if report_post_loss:
        loss = critic_loss(critics, batch, targets)
    return loss, ok1 and ok2


def actor_loss_and_grad(policy: Policy, critics: Critics, obs, eps, alpha: float):
    """``mean(alpha log pi - min Q)`` under the reparametrized sample.

    Returns ``(loss, grad w.r.t. actor params, log-probs)``.
    """
    obs = np.atleast_2d(obs)
    B, A, od = obs.shape[0], policy.act_dim, policy.obs_dim
    mu, raw, ls, cache = _head(policy, obs)
    std = np.exp(ls)
    a = np.tanh(mu + std * eps)
    logp = squashed_log_prob(eps, ls, a)
    x = _cat(obs, a)
    q1, c1 = forward_cached(critics.q1, x)
    q2, c2 = forward_cached(critics.q2, x)
    use1 = (q1[:, 0] <= q2[:, 0]).astype(float)
    qmin = np.where(use1 > 0, q1[:, 0], q2[:, 0])
    loss = float(np.mean(alpha * logp - qmin))

    _, gx1 = backward_cached(critics.q1, c1, -use1[:, None] / B, need_param_grad=False)
    _, gx2 = backward_cached(critics.q2, c2, -(1.0 - use1)[:, None] / B, need_param_grad=False)
    d_a = (gx1 + gx2)[:, od:] + (alpha / B) * 2.0 * a / (1.0 - a * a + SQUASH_EPS)
    d_u = d_a * (1.0 - a * a)
    d_ls = d_u * std * eps - alpha / B
    d_raw = d_ls * ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX))
    grad, _ = backward_cached(policy.actor, cache, np.concatenate([d_u, d_raw], axis=1), need_input_grad=False)
    return loss, grad, logp


def actor_update(policy: Policy, critics: Critics, obs, alpha: float, opt: AdamState, rng=None, eps=None):
    """One Adam step on the actor. Returns ``(loss, applied, log_probs)``."""
    if eps is None:
        eps = rng.standard_normal((np.atleast_2d(obs).shape[0], policy.act_dim))
    loss, grad, logp = actor_loss_and_grad(policy, critics, obs, eps, alpha)
    if not math.isfinite(loss):
        return loss, False, logp
    return loss, adam_update(policy.actor.values, grad, opt), logp


@dataclass
class Temperature:
    log_alpha: np.ndarray  # shape (1,)
    opt: AdamState
    auto: bool = True

    @classmethod
    def create(cls, alpha: float, lr: float, auto: bool = True) -> "Temperature":
        return cls(np.array([math.log(alpha)]), AdamState.zeros(1, lr), auto)

    @property
    def alpha(self) -> float:
        return float(math.exp(self.log_alpha[0]))


def temperature_grad(log_probs, target_entropy: float) -> float:
    """d/d(log alpha) of ``mean(-log alpha * (log pi + target_entropy))``."""
    return -float(np.mean(np.asarray(log_probs) + target_entropy))


def temperature_update(temp: Temperature, log_probs, target_entropy: float) -> float:
    if temp.auto:
        adam_update(temp.log_alpha, np.array([temperature_grad(log_probs, target_entropy)]), temp.opt)
    return temp.alpha


# -- agent -----------------------------------------------------------------------


class SacAgent:
    def __init__(self, obs_dim: int, act_dim: int, action_scale: float, cfg: SacConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        lr = cfg.learning_rate
        self.policy = Policy(init_mlp((obs_dim, *cfg.hidden, 2 * act_dim), rng), action_scale)
        self.actor_opt = AdamState.zeros(self.policy.actor.values.size, lr)
        self.critics = Critics.create(obs_dim, act_dim, cfg.hidden, rng, lr)
        self.temp = Temperature.create(cfg.initial_alpha, lr, cfg.auto_temperature)
        self.target_entropy = -float(act_dim) if cfg.target_entropy is None else float(cfg.target_entropy)
        self.updates = 0
        self.skipped = 0

    def update(self, batch) -> dict:
        """One gradient step on temperature, critics and actor, then polyak."""
        obs = batch[0]
        B, A = obs.shape[0], self.policy.act_dim
        eps_pi = self.rng.standard_normal((B, A))
        eps_next = self.rng.standard_normal((B, A))

        # temperature first, using the value from before its own step
        mu, _, ls, _ = _head(self.policy, obs)
        logp = squashed_log_prob(eps_pi, ls, np.tanh(mu + np.exp(ls) * eps_pi))
        alpha = self.temp.alpha
        temperature_update(self.temp, logp, self.target_entropy)

        y = td_target(batch, self.critics, self.policy, alpha, self.cfg.gamma, eps=eps_next)
        q_loss, ok_q = critic_update(self.critics, batch, y, report_post_loss=False)
        pi_loss, ok_pi, _ = actor_update(self.policy, self.critics, obs, alpha, self.actor_opt, eps=eps_pi)
        self.critics.polyak(self.cfg.polyak_tau)
        self.updates += 1
        self.skipped += (not ok_q) + (not ok_pi)
        return {"critic_loss": q_loss, "actor_loss": pi_loss, "alpha": alpha}

    def networks(self) -> dict[str, MlpParams]:
        c = self.critics
        return {"actor": self.policy.actor, "q1": c.q1, "q2": c.q2, "q1_target": c.q1_target, "q2_target": c.q2_target}


# -- training loop ----------------------------------------------------------------


def _obs(o) -> np.ndarray:
    return o.as_array() if hasattr(o, "as_array") else np.asarray(o, dtype=float)


def run_episode(policy, env, spec=None, rng=None, trace=None) -> tuple[float, object]:
    """Deterministic rollout of one episode. Returns ``(return, last StepResult)``."""
    env.reset(fixed_spec=spec, rng=rng)
    total, res = 0.0, None
    while not env.done:
        res = env.step(policy.act_env(env))
        total += res.reward
        if trace is not None:
            trace.append(res)
    return total, res


def evaluate(policy, env_factory, episodes: int, seed: int):
    """Mean and std of deterministic episode returns on freshly drawn specs.

    Returns ``(mean, std, returns, final_errors)``; the policy is not modified.
    """
    env = env_factory(seed)
    rets, errs = [], []
    for _ in range(episodes):
        r, last = run_episode(policy, env)
        rets.append(r)
        errs.append(float(last.error_norm) if last is not None else float("nan"))
    rets = np.asarray(rets)
    return float(rets.mean()), float(rets.std()), rets, np.asarray(errs)


@dataclass
class TrainResult:
    agent: SacAgent
    curve: list  # (step, mean_return, std_return)
    losses: list
    episodes_diverged: int = 0

    @property
    def policy(self) -> Policy:
        return self.agent.policy


def train(env_factory, cfg: SacConfig, seed: int, progress=None) -> TrainResult:
    """Warm up with uniform random actions, then one update per environment step.

    ``env_factory(seed)`` must return a fresh environment. The training and
    evaluation environments and the agent draw from independent streams
    spawned from ``seed``.
    """
    ss = np.random.SeedSequence(seed)
    s_env, s_eval, s_agent = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    env = env_factory(s_env)
    eval_env = env_factory(s_eval)
    rng = np.random.default_rng(s_agent)
    scale = env.config.max_action_per_axis
    agent = SacAgent(env.obs_dim, env.action_dim, scale, cfg, rng)
    buf = ReplayBuffer(cfg.buffer_capacity, env.obs_dim, env.action_dim)

    curve, losses = [], []
    diverged = 0
    obs = _obs(env.reset()[0])
    for t in range(cfg.warmup_steps + cfg.total_steps):
        warm = t < cfg.warmup_steps
        if warm:
            a_unit = rng.uniform(-1.0, 1.0, env.action_dim)
        else:
            a_unit = sample_action(agent.policy, obs, rng)[0] / scale
        res = env.step(a_unit * scale)
        nxt = _obs(res.observation)
        # time-limit truncation is not a terminal state; only divergence is
        buf.add(obs, a_unit, res.reward, nxt, res.diverged)
        diverged += res.diverged
        obs = _obs(env.reset()[0]) if res.done else nxt
        if warm:
            continue
        info = agent.update(buf.sample(cfg.batch_size, rng))
        step_no = t - cfg.warmup_steps + 1
        if step_no % cfg.eval_interval == 0:
            losses.append((step_no, info["critic_loss"], info["actor_loss"], info["alpha"]))
            rets = [run_episode(agent.policy, eval_env)[0] for _ in range(cfg.eval_episodes)]
            curve.append((step_no, float(np.mean(rets)), float(np.std(rets))))
            if progress is not None:
                progress(curve[-1], agent)
    return TrainResult(agent, curve, losses, diverged)


def config_dict(cfg: SacConfig) -> dict:
    d = asdict(cfg)
    d["hidden"] = list(cfg.hidden)
    return d
