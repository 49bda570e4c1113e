"""Deep Q-learning with experience replay and a periodically synced target net."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core import SeedSpec
from ..nn import AdamState, NetSpec, Network, adam_step, assert_finite, build_network, clip_grad_norm
from .buffer import ReplayBuffer
from .common import TrainingLog, log_progress


@dataclass(frozen=True)
class DqnConfig:
    gamma: float = 0.99
    lr: float = 1e-4
    buffer_capacity: int = 50_000
    batch: int = 64
    target_sync_every: int = 1000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 50_000
    total_steps: int = 200_000
    learning_starts: int = 1000
    train_freq: int = 4
    max_grad_norm: float = 10.0
    hidden: int = 128
    # small initial Q-head keeps the max in the TD target from amplifying init noise
    head_scale: float = 0.01
    # opt-in: evaluate the target net at the online argmax instead of its own max
    double_q: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.buffer_capacity < self.batch:
            raise ValueError("buffer_capacity must be at least the batch size")

    def epsilon(self, step: int) -> float:
        if self.eps_decay_steps <= 0:
            return self.eps_end
        frac = min(1.0, step / self.eps_decay_steps)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


def q_net_spec(obs_shape=(64, 64, 3), n_actions: int = 8, hidden: int = 128,
               convs=((8, 5, 2), (16, 3, 2), (32, 3, 2))) -> NetSpec:
    return NetSpec(tuple(obs_shape), tuple(convs), (hidden,), n_actions)


def greedy(q: np.ndarray) -> int:
    # np.argmax returns the first maximum: ties go to the lowest id
    return int(np.argmax(q))


def dqn_act(net: Network, obs: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy action; one uniform draw per call keeps streams aligned."""
    explore = rng.random() < epsilon
    n = net.output_shape[0]
    if explore:
        return int(rng.integers(n))
    return greedy(net.forward(obs)[0])


def td_targets(rewards, next_q_target, dones, gamma: float, next_q_online=None) -> np.ndarray:
    if next_q_online is None:
        boot = next_q_target.max(axis=1)
    else:
        boot = next_q_target[np.arange(len(rewards)), next_q_online.argmax(axis=1)]
    return rewards + gamma * (1.0 - dones) * boot


class DqnAgent:
    def __init__(self, net: Network, cfg: DqnConfig):
        self.net = net
        self.target = net.copy()
        self.cfg = cfg
        self.opt = AdamState(lr=cfg.lr)
        # the target net is frozen between syncs, so its outputs can be memoised
        # per observation; the offline env has only ~1k distinct images
        self._memo: dict[bytes, np.ndarray] = {}

    def act(self, obs, epsilon: float, rng) -> int:
        return dqn_act(self.net, obs, epsilon, rng)

    def sync_target(self) -> None:
        self.target = self.net.copy()
        self._memo.clear()

    def target_q(self, next_obs: np.ndarray) -> np.ndarray:
        keys = [o.tobytes() for o in next_obs]
        missing = [i for i, k in enumerate(keys) if k not in self._memo]
        if missing:
            fresh = self.target.forward(next_obs[missing])
            for i, row in zip(missing, fresh):
                self._memo[keys[i]] = row
        return np.stack([self._memo[k] for k in keys])

    def train_batch(self, obs, actions, rewards, next_obs, dones) -> float:
        cfg = self.cfg
        next_q = self.target_q(next_obs)
        online = self.net.forward(next_obs) if cfg.double_q else None
        y = td_targets(rewards, next_q, dones, cfg.gamma, online).astype(np.float32)
        q = self.net.forward(obs)
        rows = np.arange(len(actions))
        err = q[rows, actions] - y
        loss = float(np.mean(err ** 2))
        if not np.isfinite(loss):
            raise FloatingPointError(f"DQN loss is not finite (loss={loss}, max|q|={np.abs(q).max()})")
        dq = np.zeros_like(q)
        dq[rows, actions] = 2.0 * err / len(actions)
        grads = self.net.backward(dq)
        clip_grad_norm(grads, cfg.max_grad_norm)
        adam_step(self.net.params, grads, self.opt)
        assert_finite(self.net.params, "after DQN update")
        return loss


def dqn_train(env, cfg: DqnConfig, seed: int, net: Optional[Network] = None,
              agent: Optional[DqnAgent] = None, progress=None, tag: str = "dqn",
              eps_override: Optional[float] = None, stream_offset: int = 0):
    """Train (or keep training) a Q-network on ``env``; returns (agent, log).

    ``env`` needs ``reset(rng) -> obs`` and ``step(a) -> result`` with
    ``result.obs / reward / done / info['success'] / info['out_of_bounds']``.
    ``eps_override`` pins exploration (used for fine-tuning).
    """
    seeds = SeedSpec(seed)
    if agent is None:
        if net is None:
            obs_shape = getattr(env, "obs_shape", (64, 64, 3))
            n_actions = getattr(env, "n_actions", 8)
            net = build_network(q_net_spec(obs_shape, n_actions, cfg.hidden), seeds.stream(0),
                                head_scale=cfg.head_scale)
        agent = DqnAgent(net, cfg)
    else:
        agent.cfg = cfg
        agent.opt.lr = cfg.lr
    rng_env = seeds.stream(1 + stream_offset)
    rng_act = seeds.stream(2 + stream_offset)
    rng_buf = seeds.stream(3 + stream_offset)
    buf = ReplayBuffer(cfg.buffer_capacity, agent.net.input_shape)
    log = TrainingLog()

    obs = env.reset(rng_env)
    ep, ep_ret, ep_losses = 0, 0.0, []
    for step in range(cfg.total_steps):
        eps = cfg.epsilon(step) if eps_override is None else eps_override
        a = agent.act(obs, eps, rng_act)
        res = env.step(a)
        terminal = bool(res.info.get("success") or res.info.get("out_of_bounds"))
        buf.add(obs, a, res.reward, res.obs, terminal)
        ep_ret += res.reward
        obs = res.obs
        if step >= cfg.learning_starts and step % cfg.train_freq == 0:
            ep_losses.append(agent.train_batch(*buf.sample(cfg.batch, rng_buf)))
        if (step + 1) % cfg.target_sync_every == 0:
            agent.sync_target()
        if res.done:
            loss = float(np.mean(ep_losses)) if ep_losses else float("nan")
            log.append(step + 1, ep, ep_ret, bool(res.info.get("success")), eps, loss)
            ep += 1
            if ep % 200 == 0:
                log_progress(progress, algo=tag, step=step + 1, episode=ep, eps=eps,
                             sr100=log.success_rate(100), loss=loss)
            ep_ret, ep_losses = 0.0, []
            obs = env.reset(rng_env)
    return agent, log
