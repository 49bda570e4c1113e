"""Evaluation-time policies: ``policy(obs, env) -> action``.

Learned policies only look at ``obs``; the oracle and the spiral peek at the
environment state, which is what makes them reference points.
"""

from __future__ import annotations

import numpy as np

from ..baseline import SpiralParams, spiral_plan
from ..env import MAX_STEP_MM, GearEnv
from ..nn import Network
from .dqn import greedy
from .ppo import ACTION_LIMIT, split_head


class GreedyQPolicy:
    name = "dqn"

    def __init__(self, net: Network):
        self.net = net

    def reset(self, env: GearEnv) -> None:
        pass

    def __call__(self, obs, env=None) -> int:
        return greedy(self.net.forward(obs)[0])


class GaussianMeanPolicy:
    """PPO policy evaluated at its mean action."""

    name = "ppo"

    def __init__(self, net: Network):
        self.net = net

    def reset(self, env: GearEnv) -> None:
        pass

    def __call__(self, obs, env=None) -> np.ndarray:
        mean, _, _ = split_head(self.net.forward(obs).astype(np.float64))
        return np.clip(mean[0], -ACTION_LIMIT, ACTION_LIMIT)


class OraclePolicy:
    """Moves straight at the peg using the true position (command frame assumed exact)."""

    name = "oracle"

    def reset(self, env: GearEnv) -> None:
        pass

    def __call__(self, obs, env: GearEnv) -> np.ndarray:
        d = env.cfg.peg_mm - env.state.pos
        n = float(np.linalg.norm(d))
        if n > MAX_STEP_MM:
            d = d * (MAX_STEP_MM / n)
        return d


class SpiralPolicy:
    """Replays the spiral plan as relative moves; ``budget`` counts waypoints."""

    name = "spiral"

    def __init__(self, params: SpiralParams = SpiralParams()):
        self.params = params
        self.plan = spiral_plan((0.0, 0.0), params)
        self.budget = len(self.plan) - 1
        self.k = 0

    def reset(self, env: GearEnv) -> None:
        self.k = 0

    def __call__(self, obs, env=None) -> np.ndarray:
        self.k += 1
        if self.k >= len(self.plan):
            return np.zeros(2)
        return self.plan[self.k] - self.plan[self.k - 1]
