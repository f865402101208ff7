"""One-dimensional point mass with the same reward shape as the tissue task.

The state is the signed position error, the action is a bounded displacement,
and the reward is ``lam * (1 - sqrt(|e_t| / |e_0|))``. Moving straight at full
speed and stopping exactly on target is optimal, which gives a known maximum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tissue_isp.env import Observation, SolverSummary, StepResult, reward


@dataclass(frozen=True)
class PointMassConfig:
    max_action_per_axis: float = 0.2
    episode_length: int = 25
    initial_error_range: tuple[float, float] = (1.0, 2.0)
    reward_scale_lambda: float = 12.0


class PointMassEnv:
    obs_dim = 1
    action_dim = 1

    def __init__(self, config: PointMassConfig = PointMassConfig(), seed=None):
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.e = np.zeros(1)
        self.e0 = np.zeros(1)
        self.t = 0
        self.done = True

    def sample_spec(self, rng=None) -> float:
        rng = self.rng if rng is None else rng
        lo, hi = self.config.initial_error_range
        return float(rng.choice([-1.0, 1.0]) * rng.uniform(lo, hi))

    def reset(self, fixed_spec=None, rng=None):
        e0 = self.sample_spec(rng) if fixed_spec is None else float(fixed_spec)
        self.e0 = np.array([e0])
        self.e = self.e0.copy()
        self.t = 0
        self.done = False
        return self.observation(), e0

    def observation(self) -> Observation:
        return Observation(self.e.copy())

    def step(self, action) -> StepResult:
        if self.done:
            raise RuntimeError("episode is not active; call reset() first")
        m = self.config.max_action_per_axis
        self.e = self.e + np.clip(np.asarray(action, dtype=float).ravel(), -m, m)
        self.t += 1
        r = reward(self.e, self.e0, np.zeros(1), self.config.reward_scale_lambda)
        self.done = self.t >= self.config.episode_length
        return StepResult(self.observation(), float(r), self.done, SolverSummary(0, 0, 0), error_norm=float(abs(self.e[0])))
