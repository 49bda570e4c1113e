from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path

import numpy as np

LOG_COLUMNS = ("step", "episode", "return", "success", "explore", "loss")


@dataclass
class TrainingLog:
    """One row per finished episode.

    ``explore`` holds epsilon for DQN and mean policy entropy for PPO.
    """

    rows: list[dict] = field(default_factory=list)

    def append(self, step: int, episode: int, ret: float, success: bool,
               explore: float, loss: float) -> None:
        self.rows.append({"step": int(step), "episode": int(episode), "return": float(ret),
                          "success": bool(success), "explore": float(explore), "loss": float(loss)})

    def success_rate(self, last: int = 100) -> float:
        tail = self.rows[-last:]
        return sum(r["success"] for r in tail) / len(tail) if tail else 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "success": int(r["success"]),
                            "return": repr(r["return"]), "loss": repr(r["loss"]),
                            "explore": repr(r["explore"])})

    @classmethod
    def read_csv(cls, path) -> "TrainingLog":
        log = cls()
        with open(path, newline="") as f:
            for r in csv.DictReader(f):
                log.append(int(r["step"]), int(r["episode"]), float(r["return"]),
                           bool(int(r["success"])), float(r["explore"]), float(r["loss"]))
        return log


def _jsonable(obj):
    if is_dataclass(obj):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))


def stable_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def env_hash(env_cfg) -> str:
    """Hash of what a policy depends on: grid geometry and scene rendering."""
    return stable_hash({"map": env_cfg.map, "scene": env_cfg.scene})


def rng_state(rng: np.random.Generator) -> dict:
    return _jsonable(rng.bit_generator.state)


def set_rng_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


def log_progress(stream, **fields) -> None:
    """Stable ``key=value`` progress lines for long-running commands."""
    if stream is None:
        return
    parts = []
    for k, v in fields.items():
        parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    print(" ".join(parts), file=stream, flush=True)
