"""Hand-crafted baseline controller.

Each grasp point follows the controlled point closest to it: it moves along the
direction from that point's current position toward its desired position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tissue_isp.errors import ParameterError


@dataclass(frozen=True)
class ExpertConfig:
    step_gain: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.step_gain <= 1.0:
            raise ParameterError("step_gain must lie in (0, 1]")


def expert_action(
    desired_positions,
    controlled_positions,
    grasp_positions,
    max_action: float = 0.2,
    config: ExpertConfig = ExpertConfig(),
) -> np.ndarray:
    """Action (M*2 values, mm) for the current configuration."""
    des = np.asarray(desired_positions, dtype=float).reshape(-1, 2)
    ctrl = np.asarray(controlled_positions, dtype=float).reshape(-1, 2)
    grasp = np.asarray(grasp_positions, dtype=float).reshape(-1, 2)
    out = np.zeros_like(grasp)
    for g, q in enumerate(grasp):
        d2 = np.sum((ctrl - q) ** 2, axis=1)
        i = int(np.argmin(d2))  # first minimum: ties go to the lower index
        err = des[i] - ctrl[i]
        dist = float(np.linalg.norm(err))
        if dist == 0.0:
            continue
        # slow down proportionally once the remaining error is below one step
        mag = config.step_gain * min(max_action, dist)
        out[g] = err / dist * mag
    return out.ravel()


class ExpertPolicy:
    """Adapter so the expert can be rolled out like a learned policy."""

    deterministic_only = True

    def __init__(self, config: ExpertConfig = ExpertConfig()):
        self.config = config

    def act_env(self, env) -> np.ndarray:
        return expert_action(
            env.spec.desired_positions,
            env.controlled_positions(),
            env.grasp_positions(),
            env.config.max_action_per_axis,
            self.config,
        )
