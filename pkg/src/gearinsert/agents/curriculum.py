"""Offline pretraining followed by sparse-reward fine-tuning on the real env."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

from .checkpoint import Checkpoint
from .common import TrainingLog, env_hash
from .dqn import DqnAgent, DqnConfig, dqn_train
from .ppo import PpoAgent, PpoConfig, ppo_train

ALGOS = ("dqn", "ppo")
# fine-tune runs draw from streams disjoint from pretraining
FINETUNE_STREAM_OFFSET = 10


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 20_000
    dqn_epsilon: float = 0.1
    dqn_learning_starts: int = 500
    lr_scale: float = 0.1  # full lr on the sparse reward wrecks the pretrained PPO policy


def default_config(algo: str):
    if algo == "dqn":
        return DqnConfig()
    if algo == "ppo":
        return PpoConfig()
    raise ValueError(f"unknown algorithm {algo!r}; expected one of {ALGOS}")


def to_checkpoint(algo: str, agent, algo_cfg, env, seed: int, config_hash: str = "",
                  phase: str = "offline", extra: Optional[dict] = None) -> Checkpoint:
    return Checkpoint(algo=algo, net=agent.net, config=asdict(algo_cfg), env_hash=env_hash(env.cfg),
                      config_hash=config_hash, rng_state={"master_seed": seed},
                      adam=agent.opt, extra={"phase": phase, **(extra or {})})


def agent_from_checkpoint(ckpt: Checkpoint, algo_cfg=None):
    cfg = algo_cfg or default_config(ckpt.algo)
    agent = DqnAgent(ckpt.net, cfg) if ckpt.algo == "dqn" else PpoAgent(ckpt.net, cfg)
    if ckpt.adam is not None:
        agent.opt = ckpt.adam
    return agent


def train(algo: str, env, algo_cfg, seed: int, agent=None, progress=None, stream_offset: int = 0,
          eps_override: Optional[float] = None) -> tuple[object, TrainingLog]:
    if algo == "dqn":
        return dqn_train(env, algo_cfg, seed, agent=agent, progress=progress,
                         eps_override=eps_override, stream_offset=stream_offset)
    if algo == "ppo":
        return ppo_train(env, algo_cfg, seed, agent=agent, progress=progress,
                         stream_offset=stream_offset)
    raise ValueError(f"unknown algorithm {algo!r}; expected one of {ALGOS}")


def finetune(ckpt: Checkpoint, real_env, seed: int, ft: FinetuneConfig = FinetuneConfig(),
             algo_cfg=None, progress=None, config_hash: str = "") -> tuple[Checkpoint, TrainingLog]:
    """Continue training a checkpoint on ``real_env`` (sparse reward forced on)."""
    if not real_env.cfg.sparse_reward:
        real_env = real_env.with_config(sparse_reward=True)
    base = algo_cfg or default_config(ckpt.algo)
    agent = agent_from_checkpoint(_clone(ckpt), base)
    eps = None
    if ckpt.algo == "dqn":
        cfg = replace(base, total_steps=ft.steps, lr=base.lr * ft.lr_scale,
                      learning_starts=min(ft.dqn_learning_starts, ft.steps),
                      buffer_capacity=max(min(base.buffer_capacity, ft.steps), base.batch))
        eps = ft.dqn_epsilon
    else:
        cfg = replace(base, total_steps=ft.steps, lr=base.lr * ft.lr_scale)
    if ft.steps > 0:
        agent, log = train(ckpt.algo, real_env, cfg, seed, agent=agent, progress=progress,
                           stream_offset=FINETUNE_STREAM_OFFSET, eps_override=eps)
    else:
        log = TrainingLog()
    out = to_checkpoint(ckpt.algo, agent, base, real_env, seed, config_hash, phase="finetuned",
                        extra={"finetune_steps": ft.steps})
    return out, log


def _clone(ckpt: Checkpoint) -> Checkpoint:
    adam = None
    if ckpt.adam is not None:
        a = ckpt.adam
        adam = replace(a, m={k: v.copy() for k, v in a.m.items()}, v={k: v.copy() for k, v in a.v.items()})
    return replace(ckpt, net=ckpt.net.copy(), adam=adam, extra=dict(ckpt.extra))


def pretrain_then_finetune(algo: str, offline_env, real_env, algo_cfg=None, seed: int = 0,
                           ft: FinetuneConfig = FinetuneConfig(), progress=None,
                           config_hash: str = "", pretrained: Optional[Checkpoint] = None):
    """Returns (offline checkpoint, fine-tuned checkpoint, offline log, fine-tune log).

    ``pretrained`` skips the offline phase. The offline checkpoint is never
    mutated by fine-tuning.
    """
    algo_cfg = algo_cfg or default_config(algo)
    if pretrained is None:
        agent, off_log = train(algo, offline_env, algo_cfg, seed, progress=progress)
        pretrained = to_checkpoint(algo, agent, algo_cfg, offline_env, seed, config_hash)
    else:
        off_log = TrainingLog()
    tuned, ft_log = finetune(_clone(pretrained), real_env, seed, ft, algo_cfg, progress, config_hash)
    return pretrained, tuned, off_log, ft_log
