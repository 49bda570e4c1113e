"""Open-loop Archimedean spiral search around the stage-2 start point."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import REAL, GearEnv


@dataclass(frozen=True)
class SpiralParams:
    pitch_mm: float = 0.5
    arc_step_mm: float = 0.5
    max_radius_mm: float = 10.0

    def __post_init__(self):
        if not (self.pitch_mm > 0 and self.arc_step_mm > 0 and self.max_radius_mm > 0):
            raise ValueError("spiral parameters must be positive")

    @property
    def b(self) -> float:
        return self.pitch_mm / (2 * math.pi)

    @property
    def theta_max(self) -> float:
        return self.max_radius_mm / self.b

    @property
    def coverage_bound_mm(self) -> float:
        return self.pitch_mm / 2 + self.arc_step_mm / 2


def spiral_arc_length(b: float, theta) -> np.ndarray:
    """Exact arc length of r = b*theta from the centre to ``theta``."""
    theta = np.asarray(theta, dtype=float)
    return 0.5 * b * (theta * np.sqrt(1 + theta * theta) + np.arcsinh(theta))


def _theta_at_arc_length(b: float, s: np.ndarray) -> np.ndarray:
    theta = np.sqrt(2 * s / b)
    for _ in range(50):
        f = spiral_arc_length(b, theta) - s
        # ds/dtheta = b*sqrt(1+theta^2)
        step = f / (b * np.sqrt(1 + theta * theta))
        theta = np.maximum(theta - step, 0.0)
        if np.max(np.abs(step)) < 1e-13:
            break
    return theta


def spiral_plan(start, params: SpiralParams = SpiralParams()) -> np.ndarray:
    """Waypoints (N, 2) every ``arc_step_mm`` of arc length, first one at ``start``."""
    total = float(spiral_arc_length(params.b, params.theta_max))
    n = math.ceil(total / params.arc_step_mm)
    s = np.arange(n) * params.arc_step_mm
    theta = _theta_at_arc_length(params.b, s)
    r = params.b * theta
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return pts + np.asarray(start, dtype=float)


@dataclass
class SpiralResult:
    positions: list
    rewards: list
    success: bool
    steps: int


def spiral_run(env: GearEnv, params: SpiralParams = SpiralParams(), start=None,
               max_waypoints: int = None) -> SpiralResult:
    """Follow the spiral until contact with the peg or the waypoints run out.

    Each waypoint is one commanded move; offsets are computed in the command
    frame, so an unknown calibration rotates the spiral about its start.
    """
    if env.cfg.mode != REAL:
        raise ValueError("spiral search runs on the real_continuous environment")
    plan = spiral_plan((0.0, 0.0), params)
    if max_waypoints is not None:
        plan = plan[:max_waypoints]
    run_env = env.with_config(max_steps=max(len(plan), 1))
    if start is None:
        start = env.state.pos
    run_env.reset(start=start)
    positions = [run_env.state.pos.copy()]
    rewards: list[float] = []
    if np.linalg.norm(positions[0] - run_env.cfg.peg_mm) <= run_env.cfg.tolerance_mm:
        # already aligned: the first insertion attempt succeeds
        return SpiralResult(positions, [run_env.cfg.reward.success_reward], True, 1)
    success = False
    for k in range(1, len(plan)):
        res = run_env.step(plan[k] - plan[k - 1])
        positions.append(res.info["pos"])
        rewards.append(res.reward)
        if res.info["success"]:
            success = True
            break
        if res.done:
            break
    return SpiralResult(positions, rewards, success, len(rewards))
