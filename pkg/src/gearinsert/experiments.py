"""Cached training runs and the evaluations built on them.

Checkpoints live under ``<cache>/<config hash>/`` so a changed config never
reuses stale weights. Wall-clock times go to ``timing.json`` next to them,
which keeps the checkpoints themselves reproducible byte for byte.
"""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .agents import checkpoint as ckpt_io
from .agents.curriculum import finetune, to_checkpoint, train
from .agents.policies import GaussianMeanPolicy, GreedyQPolicy, SpiralPolicy
from .config import Config
from .env import OFFLINE, REAL, GearEnv, ObservationSource
from .evaluation import RunReport, canonical_starts, run_efficiency, run_full_assembly, run_robustness

DEFAULT_CACHE = Path(".acceptance_cache")


class RunCache:
    def __init__(self, cfg: Config, root=DEFAULT_CACHE, progress=None):
        self.cfg = cfg
        self.dir = Path(root) / cfg.hash()
        self.progress = progress
        self._sources: dict[str, ObservationSource] = {}

    def source(self, mode: str) -> ObservationSource:
        if mode not in self._sources:
            self._sources[mode] = ObservationSource(self.cfg.env_config(mode))
        return self._sources[mode]

    def path(self, algo: str, seed: int, phase: str) -> Path:
        return self.dir / f"{algo}_s{seed}_{phase}.ckpt"

    def _record_time(self, key: str, seconds: float) -> None:
        p = self.dir / "timing.json"
        data = json.loads(p.read_text()) if p.exists() else {}
        data[key] = round(seconds, 1)
        p.write_text(json.dumps(data, indent=1, sort_keys=True))

    def timing(self) -> dict:
        p = self.dir / "timing.json"
        return json.loads(p.read_text()) if p.exists() else {}

    def pretrained(self, algo: str, seed: int) -> ckpt_io.Checkpoint:
        p = self.path(algo, seed, "offline")
        if p.exists():
            return ckpt_io.load(p)
        cfg = self.cfg
        env = GearEnv(cfg.env_config(OFFLINE), self.source(OFFLINE))
        t0 = time.process_time()
        agent, log = train(algo, env, cfg.algo(algo), seed, progress=self.progress)
        ck = to_checkpoint(algo, agent, cfg.algo(algo), env, seed, cfg.hash())
        ckpt_io.save(ck, p)
        log.write_csv(p.with_suffix(".csv"))
        self._record_time(p.stem, time.process_time() - t0)
        return ck

    def finetuned(self, algo: str, seed: int) -> ckpt_io.Checkpoint:
        p = self.path(algo, seed, "finetuned")
        if p.exists():
            return ckpt_io.load(p)
        base = self.pretrained(algo, seed)
        cfg = self.cfg
        env = GearEnv(cfg.env_config(REAL), self.source(REAL))
        t0 = time.process_time()
        ck, log = finetune(base, env, seed, cfg.finetune, cfg.algo(algo), self.progress, cfg.hash())
        ckpt_io.save(ck, p)
        log.write_csv(p.with_suffix(".csv"))
        self._record_time(p.stem, time.process_time() - t0)
        return ck

    def checkpoint(self, algo: str, seed: int, phase: str) -> ckpt_io.Checkpoint:
        return self.finetuned(algo, seed) if phase == "finetuned" else self.pretrained(algo, seed)

    def robustness(self, algo: str, seed: int, phase: str, mode: str) -> RunReport:
        """100-start robustness report, cached as JSON next to the checkpoint."""
        p = self.dir / f"robustness_{algo}_s{seed}_{phase}_{mode}.json"
        if p.exists():
            return RunReport.from_dict(json.loads(p.read_text()))
        ck = self.checkpoint(algo, seed, phase)
        ev = self.cfg.eval
        rep = run_robustness(learned_policy(ck), self.cfg.env_config(mode), ev.n_starts, ev.budget,
                             seed=0, obs_source=self.source(mode), config_hash=self.cfg.hash(),
                             method=f"{algo}-{phase}")
        p.write_text(json.dumps(rep.to_dict(), sort_keys=True))
        return rep


def _no_image(pos):
    return None


def learned_policy(ck: ckpt_io.Checkpoint):
    return GreedyQPolicy(ck.net) if ck.algo == "dqn" else GaussianMeanPolicy(ck.net)


def median_seed(values: dict[int, float]) -> int:
    """Seed whose score is the median (lower median for an even count)."""
    order = sorted(values, key=lambda s: (values[s], s))
    return order[(len(order) - 1) // 2]


def efficiency_reports(cache: RunCache, seeds: dict[str, int]) -> dict[str, RunReport]:
    """Learned agents on the offline grid, the spiral on the real env, same 12 starts."""
    cfg = cache.cfg
    off = cfg.env_config(OFFLINE)
    policies = {algo: learned_policy(cache.pretrained(algo, s)) for algo, s in seeds.items()}
    reps = run_efficiency(policies, off, canonical_starts(off), cfg.eval.budget,
                          cache.source(OFFLINE), cfg.hash())
    real = cfg.env_config(REAL)
    # the spiral is open loop, so it never needs an image
    reps.update(run_efficiency({"spiral": SpiralPolicy(cfg.spiral)}, real, canonical_starts(real),
                               obs_source=_no_image, config_hash=cfg.hash()))
    return reps


def pipeline_report(cache: RunCache, algo: str, seed: int, phase: str = "finetuned",
                    n: Optional[int] = None) -> RunReport:
    cfg = cache.cfg
    ck = cache.checkpoint(algo, seed, phase)
    return run_full_assembly(learned_policy(ck), cfg.stage1_config(), cfg.env_config(REAL),
                             n or cfg.eval.pipeline_trials, seed=0, obs_source=cache.source(REAL),
                             config_hash=cfg.hash(), method=f"{algo}-{phase}")


def success_rates(cache: RunCache, algo: str, phase: str, mode: str) -> dict[int, float]:
    return {s: cache.robustness(algo, s, phase, mode).success_rate for s in cache.cfg.eval.train_seeds}


def spiral_beyond_radius(cfg: Config) -> list[bool]:
    """Success flags of the spiral for the canonical starts outside its reach."""
    real = cfg.env_config(REAL)
    starts = [s for s in canonical_starts(real)
              if np.linalg.norm(s - real.peg_mm) > cfg.spiral.max_radius_mm]
    rep = run_efficiency({"spiral": SpiralPolicy(cfg.spiral)}, real, starts,
                         obs_source=_no_image)["spiral"]
    return [r.success for r in rep.records]
