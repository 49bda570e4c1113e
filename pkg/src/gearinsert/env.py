"""Insertion-phase POMDP: offline grid world and continuous "real" plane.

``offline_grid`` mode moves between grid points (continuous actions are snapped
to the nearest point) and pays the dense normalized-Manhattan reward.
``real_continuous`` mode keeps positions continuous, routes every commanded
move through a hidden :class:`Calibration`, and pays a sparse 0/1 reward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Union

import numpy as np

from .core import GridIndex, GridMap, in_bounds, rotation, snap_to_grid
from .render import SceneParams, load_grid_images, quantize, render_observation

OFFLINE = "offline_grid"
REAL = "real_continuous"

MAX_STEP_MM = 5.0
DISCRETE_STEPS = (-5.0, -1.0, 1.0, 5.0)
N_DISCRETE = 8


class ContractViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardParams:
    beta: float = 10.0
    success_reward: float = 1.0
    out_of_bounds_terminates: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass(frozen=True)
class Calibration:
    """Rigid transform from the command frame to the platform frame."""

    rot_deg: float = 0.0
    trans: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (math.isfinite(self.rot_deg) and all(math.isfinite(t) for t in self.trans)):
            raise ValueError("calibration must be finite")

    @property
    def matrix(self) -> np.ndarray:
        return rotation(self.rot_deg)

    def to_platform(self, p_cmd: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(p_cmd, dtype=float) + np.asarray(self.trans)

    def to_command(self, p_plat: np.ndarray) -> np.ndarray:
        return self.matrix.T @ (np.asarray(p_plat, dtype=float) - np.asarray(self.trans))


MISCALIBRATED = Calibration(rot_deg=5.0, trans=(2.0, 1.0))


@dataclass(frozen=True)
class EnvConfig:
    map: GridMap = field(default_factory=GridMap)
    scene: SceneParams = field(default_factory=SceneParams)
    reward: RewardParams = field(default_factory=RewardParams)
    max_steps: int = 64
    tolerance_mm: float = 0.3
    mode: str = OFFLINE
    calibration: Calibration = field(default_factory=Calibration)
    sparse_reward: bool = False
    approach_z_mm: float = 2.0
    insert_z_mm: float = 0.0
    dataset_dir: Optional[str] = None

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not self.tolerance_mm > 0:
            raise ValueError("tolerance_mm must be positive")
        if self.mode not in (OFFLINE, REAL):
            raise ValueError(f"unknown env mode {self.mode!r}")

    @property
    def peg_mm(self) -> np.ndarray:
        return self.map.target_mm


def offline_config(**kw) -> EnvConfig:
    return EnvConfig(mode=OFFLINE, sparse_reward=False, **kw)


def real_config(calibration: Calibration = MISCALIBRATED, **kw) -> EnvConfig:
    return EnvConfig(mode=REAL, sparse_reward=True, calibration=calibration, **kw)


@dataclass
class EnvState:
    pos: np.ndarray
    z: float
    t: int = 0
    seated: bool = False
    done: bool = False


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    info: dict
    state: EnvState


@dataclass(frozen=True)
class AssemblyOutcome:
    success: bool
    final_z: float
    rotation_deg: float
    steps: int


Action = Union[int, np.integer, np.ndarray, tuple]


def action_offset(action: Action) -> tuple[np.ndarray, bool]:
    """Commanded (dx, dy) in mm and whether the action was discrete."""
    if isinstance(action, (int, np.integer)):
        a = int(action)
        if not 0 <= a < N_DISCRETE:
            raise ValueError(f"discrete action {a} out of range")
        step = DISCRETE_STEPS[a % 4]
        return (np.array([step, 0.0]) if a < 4 else np.array([0.0, step])), True
    d = np.asarray(action, dtype=float).reshape(2)
    if not np.all(np.isfinite(d)):
        raise ValueError(f"non-finite continuous action {d}")
    return np.clip(d, -MAX_STEP_MM, MAX_STEP_MM), False


def discrete_action(axis: str, step: float) -> int:
    return (0 if axis == "x" else 4) + DISCRETE_STEPS.index(float(step))


def reward_fn(snapped: GridIndex, gmap: GridMap, params: RewardParams,
              out_of_bounds: bool, success: bool) -> float:
    if success:
        return params.success_reward
    nx, ny = gmap.n_cols, gmap.n_rows
    r = -(abs(snapped.col - nx / 2) / nx + abs(snapped.row - ny / 2) / ny) / 2
    if out_of_bounds:
        r -= params.beta
    return r


def _is_target(idx: GridIndex, cfg: EnvConfig) -> bool:
    return idx in cfg.map.target_cells()


def reset(cfg: EnvConfig, rng: np.random.Generator, obs_fn=None) -> tuple[EnvState, np.ndarray]:
    """Uniform start outside the success region."""
    obs_fn = obs_fn or ObservationSource(cfg)
    gmap = cfg.map
    if cfg.mode == OFFLINE:
        targets = gmap.target_cells()
        allowed = [i for i in gmap.indices() if i not in targets]
        pos = gmap.coords(allowed[int(rng.integers(len(allowed)))])
    else:
        while True:
            pos = rng.uniform(0.0, 1.0, size=2) * gmap.extent_mm
            if np.linalg.norm(pos - cfg.peg_mm) > cfg.tolerance_mm:
                break
    state = EnvState(pos=pos, z=cfg.approach_z_mm)
    return state, obs_fn(pos)


def _check_live(state: EnvState):
    if state.done:
        raise ContractViolation("step called on a terminal state; call reset first")


def step_offline(state: EnvState, action: Action, cfg: EnvConfig, obs_fn=None) -> StepResult:
    _check_live(state)
    obs_fn = obs_fn or ObservationSource(cfg)
    gmap = cfg.map
    offset, _ = action_offset(action)
    candidate = state.pos + offset
    oob = not in_bounds(candidate, gmap)
    snapped = snap_to_grid(candidate, gmap)
    pos = gmap.coords(snapped)
    success = (not oob) and _is_target(snapped, cfg)
    if cfg.sparse_reward:
        reward = 1.0 if success else 0.0
    else:
        reward = reward_fn(snapped, gmap, cfg.reward, oob, success)
    t = state.t + 1
    terminal_oob = oob and cfg.reward.out_of_bounds_terminates
    done = success or terminal_oob or t >= cfg.max_steps
    new = EnvState(pos=pos, z=state.z, t=t, seated=success, done=done)
    info = {"snapped": snapped, "out_of_bounds": oob, "success": success, "pos": pos.copy()}
    return StepResult(obs_fn(pos), float(reward), done, info, new)


def step_real(state: EnvState, action: Action, cfg: EnvConfig, obs_fn=None) -> StepResult:
    _check_live(state)
    obs_fn = obs_fn or ObservationSource(cfg)
    gmap = cfg.map
    offset, _ = action_offset(action)
    # the commanded setpoint lives in the (miscalibrated) command frame
    cal = cfg.calibration
    setpoint = cal.to_command(state.pos) + offset
    pos = cal.to_platform(setpoint)
    oob = not in_bounds(pos, gmap)
    success = (not oob) and float(np.linalg.norm(pos - cfg.peg_mm)) <= cfg.tolerance_mm
    if cfg.sparse_reward:
        reward = 1.0 if success else 0.0
    else:
        reward = reward_fn(snap_to_grid(pos, gmap), gmap, cfg.reward, False, success)
    t = state.t + 1
    done = success or oob or t >= cfg.max_steps
    new = EnvState(pos=pos, z=state.z, t=t, seated=success, done=done)
    info = {"snapped": snap_to_grid(pos, gmap), "out_of_bounds": oob, "success": success,
            "pos": pos.copy()}
    return StepResult(obs_fn(pos), float(reward), done, info, new)


def descend_and_mesh(state: EnvState, cfg: EnvConfig, z_step_mm: float = 0.5) -> AssemblyOutcome:
    """Lower the seated gear to the insertion height, then rotate it into mesh."""
    if not state.seated:
        raise ContractViolation("gear is not seated on the peg")
    steps = max(0, math.ceil((state.z - cfg.insert_z_mm) / z_step_mm))
    state.z = cfg.insert_z_mm
    max_rot = 360.0 / (2 * cfg.scene.mounted_gear_teeth)
    return AssemblyOutcome(success=True, final_z=state.z, rotation_deg=max_rot, steps=steps + 1)


class ObservationSource:
    """Maps a platform-frame position to the quantised camera image.

    Grid-point renders are cached. With ``cfg.dataset_dir`` set, grid-point
    images come from a dataset manifest instead of the renderer.
    """

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        self._cache: dict[tuple[int, int], np.ndarray] = {}
        self._dataset = None
        if cfg.dataset_dir is not None:
            manifest, imgs = load_grid_images(cfg.dataset_dir)
            if (manifest.n_rows, manifest.n_cols) != (cfg.map.n_rows, cfg.map.n_cols):
                raise ValueError("dataset grid does not match env map")
            self._dataset = imgs

    def grid_image(self, idx: GridIndex) -> np.ndarray:
        key = (idx.col, idx.row)
        img = self._cache.get(key)
        if img is None:
            if self._dataset is not None:
                img = self._dataset[idx.row, idx.col]
            else:
                img = quantize(render_observation(self.cfg.map.coords(idx), self.cfg.scene,
                                                  tuple(self.cfg.peg_mm)))
            img.setflags(write=False)
            self._cache[key] = img
        return img

    def __call__(self, pos: np.ndarray) -> np.ndarray:
        gmap = self.cfg.map
        idx = snap_to_grid(pos, gmap)
        if np.array_equal(gmap.coords(idx), pos):
            return self.grid_image(idx)
        return quantize(render_observation(pos, self.cfg.scene, tuple(self.cfg.peg_mm)))


class GearEnv:
    """Stateful wrapper around :func:`reset` / :func:`step_offline` / :func:`step_real`."""

    def __init__(self, cfg: EnvConfig, obs_source: Optional[Callable] = None):
        self.cfg = cfg
        self.obs_fn = obs_source or ObservationSource(cfg)
        self.state: Optional[EnvState] = None

    @property
    def real(self) -> bool:
        return self.cfg.mode == REAL

    @property
    def obs_shape(self) -> tuple:
        n = self.cfg.scene.image_size
        return (n, n, 3)

    n_actions = N_DISCRETE

    def reset(self, rng: np.random.Generator = None, start=None) -> np.ndarray:
        if start is not None:
            pos = np.asarray(start, dtype=float).copy()
            if self.cfg.mode == OFFLINE:
                pos = self.cfg.map.coords(snap_to_grid(pos, self.cfg.map))
            self.state = EnvState(pos=pos, z=self.cfg.approach_z_mm)
            return self.obs_fn(pos)
        if rng is None:
            raise ValueError("reset needs an rng stream or an explicit start")
        self.state, obs = reset(self.cfg, rng, self.obs_fn)
        return obs

    def step(self, action: Action) -> StepResult:
        if self.state is None:
            raise ContractViolation("step before reset")
        fn = step_real if self.real else step_offline
        res = fn(self.state, action, self.cfg, self.obs_fn)
        self.state = res.state
        return res

    def with_config(self, **changes) -> "GearEnv":
        keep = not ({"map", "scene", "dataset_dir"} & changes.keys())
        return GearEnv(replace(self.cfg, **changes), self.obs_fn if keep else None)


def discounted_return(rewards, gamma: float) -> float:
    g = 0.0
    for r in reversed(list(rewards)):
        g = r + gamma * g
    return g
