"""TOML experiment configuration.

Every section maps onto one dataclass; unknown sections or keys are errors.
``GEARINSERT_CONFIG`` overrides the config path when none is given.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import tomli
import tomli_w

from .agents.common import stable_hash
from .agents.curriculum import FinetuneConfig
from .agents.dqn import DqnConfig
from .agents.ppo import PpoConfig
from .baseline import SpiralParams
from .core import CameraIntrinsics, GridMap, SeedSpec
from .env import MISCALIBRATED, OFFLINE, REAL, Calibration, EnvConfig, RewardParams
from .render import SceneParams
from .stage1 import ContactParams, NoiseModel, Stage1Config

CONFIG_ENV_VAR = "GEARINSERT_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSection:
    max_steps: int = 64
    tolerance_mm: float = 0.3
    approach_z_mm: float = 2.0
    insert_z_mm: float = 0.0
    dataset_dir: str = ""


@dataclass(frozen=True)
class Stage1Section:
    true_peg_m: tuple[float, float, float] = (0.01, -0.02, 0.5)
    platform_offset_m: tuple[float, float, float] = (0.015, 0.01, 0.0)
    start_z_mm: float = 30.0


@dataclass(frozen=True)
class EvalSection:
    n_starts: int = 100
    budget: int = 50
    pipeline_trials: int = 100
    train_seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class Config:
    seed: SeedSpec = field(default_factory=SeedSpec)
    map: GridMap = field(default_factory=GridMap)
    scene: SceneParams = field(default_factory=SceneParams)
    reward: RewardParams = field(default_factory=RewardParams)
    env: EnvSection = field(default_factory=EnvSection)
    calibration: Calibration = MISCALIBRATED
    dqn: DqnConfig = field(default_factory=DqnConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    camera: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    noise: NoiseModel = field(default_factory=NoiseModel)
    contact: ContactParams = field(default_factory=ContactParams)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    spiral: SpiralParams = field(default_factory=SpiralParams)
    eval: EvalSection = field(default_factory=EvalSection)

    def env_config(self, mode: str = OFFLINE, **changes) -> EnvConfig:
        e = self.env
        base = EnvConfig(map=self.map, scene=self.scene, reward=self.reward, max_steps=e.max_steps,
                         tolerance_mm=e.tolerance_mm, mode=mode,
                         calibration=self.calibration if mode == REAL else Calibration(),
                         sparse_reward=(mode == REAL), approach_z_mm=e.approach_z_mm,
                         insert_z_mm=e.insert_z_mm, dataset_dir=e.dataset_dir or None)
        return replace(base, **changes) if changes else base

    def stage1_config(self) -> Stage1Config:
        s = self.stage1
        return Stage1Config(self.camera, self.noise, self.contact, s.true_peg_m,
                            s.platform_offset_m, s.start_z_mm)

    def algo(self, name: str):
        if name not in ("dqn", "ppo"):
            raise ConfigError(f"unknown algorithm {name!r}")
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {f.name: _section_dict(getattr(self, f.name)) for f in fields(self)}

    def hash(self) -> str:
        return stable_hash(self.to_dict())

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _section_dict(obj) -> dict:
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _coerce(name: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected an array, got {value!r}")
        if default and len(value) != len(default) and not isinstance(default[0], int):
            raise ConfigError(f"{name}: expected {len(default)} values, got {len(value)}")
        proto = default[0] if default else 0.0
        return tuple(_coerce(f"{name}[{i}]", proto, v) for i, v in enumerate(value))
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    return value


def _build_section(name: str, default, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(default)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"[{name}] unknown keys: {', '.join(unknown)}")
    changes = {k: _coerce(f"{name}.{k}", getattr(default, k), v) for k, v in raw.items()}
    try:
        return replace(default, **changes)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] {e}") from e


def config_from_dict(raw: dict) -> Config:
    base = Config()
    known = {f.name for f in fields(base)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")
    return replace(base, **{k: _build_section(k, getattr(base, k), v) for k, v in raw.items()})


def parse_config(text: str) -> Config:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML: {e}") from e
    return config_from_dict(raw)


def resolve_config_path(path: Optional[str]) -> Optional[Path]:
    if path:
        return Path(path)
    env = os.environ.get(CONFIG_ENV_VAR)
    return Path(env) if env else None


def load_config(path: Optional[str] = None) -> Config:
    """Defaults, overlaid with the file at ``path`` (or ``$GEARINSERT_CONFIG``)."""
    p = resolve_config_path(path)
    if p is None:
        return Config()
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e.strerror}") from e
    return parse_config(text)


def dump_config(cfg: Config, path) -> None:
    Path(path).write_text(cfg.to_toml())

