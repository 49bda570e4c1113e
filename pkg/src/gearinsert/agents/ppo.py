"""Clipped-surrogate PPO with a diagonal Gaussian policy over (dx, dy) in mm.

The network head emits five numbers per observation: the action mean (2),
the log standard deviation (2) and the state value (1). Actions are clamped
to the +/-5 mm command range; log-probabilities are taken before clamping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core import SeedSpec
from ..nn import AdamState, NetSpec, Network, adam_step, assert_finite, build_network, clip_grad_norm
from .common import TrainingLog, log_progress

ACTION_LIMIT = 5.0
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
INIT_STD_MM = 2.5
_LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    rollout_len: int = 2048
    epochs: int = 10
    minibatch: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    total_steps: int = 200_000
    max_grad_norm: float = 0.5
    hidden: int = 128

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")


def policy_net_spec(obs_shape=(64, 64, 3), hidden: int = 128,
                    convs=((8, 5, 2), (16, 3, 2), (32, 3, 2))) -> NetSpec:
    return NetSpec(tuple(obs_shape), tuple(convs), (hidden,), 5)


def build_policy(spec: NetSpec, rng: np.random.Generator) -> Network:
    net = build_network(spec, rng)
    head = net.layers[-1]
    W, b = head.params["W"], head.params["b"]
    W[:, 0:2] *= 0.01
    W[:, 2:4] *= 0.01
    b[2:4] = math.log(INIT_STD_MM)
    return net


def split_head(out: np.ndarray):
    mean = out[:, 0:2]
    log_std = np.clip(out[:, 2:4], LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std, out[:, 4]


def gaussian_log_prob(x, mean, log_std) -> np.ndarray:
    z = (x - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI, axis=-1)


def gaussian_entropy(log_std) -> np.ndarray:
    return np.sum(log_std + 0.5 * (_LOG_2PI + 1.0), axis=-1)


def ppo_act(net: Network, obs, rng: np.random.Generator, deterministic: bool = False):
    """Returns (clamped action, log-prob of the raw sample, value, raw sample)."""
    mean, log_std, value = split_head(net.forward(obs).astype(np.float64))
    mean, log_std = mean[0], log_std[0]
    noise = rng.standard_normal(2)
    raw = mean if deterministic else mean + np.exp(log_std) * noise
    logp = float(gaussian_log_prob(raw, mean, log_std))
    return np.clip(raw, -ACTION_LIMIT, ACTION_LIMIT), logp, float(value[0]), raw


def gae(rewards, values, dones, gamma: float, lam: float, last_value: float):
    """Generalized advantage estimates and returns (= advantages + values).

    ``dones[t]`` marks that the episode ended after step ``t``; ``last_value``
    bootstraps the step after the final entry.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError(f"length mismatch: rewards={len(rewards)} values={len(values)} dones={len(dones)}")
    T = len(rewards)
    adv = np.zeros(T)
    running = 0.0
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        next_v = last_value if t == T - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv, adv + values


def surrogate_terms(ratio, adv, clip: float):
    """Per-sample clipped objective and its derivative with respect to the ratio."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - clip, 1 + clip) * adv
    obj = np.minimum(unclipped, clipped)
    dratio = np.where(unclipped <= clipped, adv, 0.0)
    return obj, dratio


def ppo_loss_and_grad(out: np.ndarray, raw_actions, old_logp, adv, returns, cfg: PpoConfig):
    """Loss over one minibatch and d loss / d network output."""
    out64 = out.astype(np.float64)
    mean, log_std, value = split_head(out64)
    B = len(adv)
    logp = gaussian_log_prob(raw_actions, mean, log_std)
    ratio = np.exp(logp - old_logp)
    obj, dratio = surrogate_terms(ratio, adv, cfg.clip)
    entropy = gaussian_entropy(log_std)
    v_err = value - returns
    loss = -obj.mean() + cfg.value_coef * np.mean(v_err ** 2) - cfg.entropy_coef * entropy.mean()

    dlogp = -(dratio * ratio) / B
    inv_var = np.exp(-2 * log_std)
    diff = raw_actions - mean
    d = np.zeros_like(out64)
    d[:, 0:2] = dlogp[:, None] * diff * inv_var
    dls = dlogp[:, None] * (diff * diff * inv_var - 1.0) - cfg.entropy_coef / B
    inside = (out64[:, 2:4] > LOG_STD_MIN) & (out64[:, 2:4] < LOG_STD_MAX)
    d[:, 2:4] = dls * inside
    d[:, 4] = 2.0 * cfg.value_coef * v_err / B
    stats = {"loss": float(loss), "policy": float(-obj.mean()), "value": float(np.mean(v_err ** 2)),
             "entropy": float(entropy.mean()),
             "clip_frac": float(np.mean(np.abs(ratio - 1) > cfg.clip))}
    return float(loss), d, stats


@dataclass
class Rollout:
    obs: np.ndarray
    raw_actions: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    last_value: float


class PpoAgent:
    def __init__(self, net: Network, cfg: PpoConfig):
        self.net = net
        self.cfg = cfg
        self.opt = AdamState(lr=cfg.lr)

    def act(self, obs, rng, deterministic: bool = False):
        return ppo_act(self.net, obs, rng, deterministic)


def ppo_update(agent: PpoAgent, rollout: Rollout, cfg: PpoConfig, rng: np.random.Generator) -> dict:
    adv, returns = gae(rollout.rewards, rollout.values, rollout.dones, cfg.gamma, cfg.gae_lambda,
                       rollout.last_value)
    n = len(adv)
    totals: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = perm[start:start + cfg.minibatch]
            a = adv[idx]
            if len(idx) > 1:
                a = (a - a.mean()) / (a.std() + 1e-8)
            out = agent.net.forward(rollout.obs[idx].astype(np.float32) / np.float32(255.0))
            loss, dout, stats = ppo_loss_and_grad(out, rollout.raw_actions[idx], rollout.logp[idx],
                                                  a, returns[idx], cfg)
            if not np.isfinite(loss):
                raise FloatingPointError(f"PPO loss is not finite: {stats}")
            grads = agent.net.backward(dout.astype(np.float32))
            clip_grad_norm(grads, cfg.max_grad_norm)
            adam_step(agent.net.params, grads, agent.opt)
            assert_finite(agent.net.params, "after PPO update")
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    return {k: v / max(count, 1) for k, v in totals.items()}


def ppo_train(env, cfg: PpoConfig, seed: int, agent: Optional[PpoAgent] = None,
              progress=None, tag: str = "ppo", stream_offset: int = 0):
    """Collect ``rollout_len`` steps, update, repeat until ``total_steps``."""
    seeds = SeedSpec(seed)
    if agent is None:
        obs_shape = getattr(env, "obs_shape", (64, 64, 3))
        agent = PpoAgent(build_policy(policy_net_spec(obs_shape, cfg.hidden), seeds.stream(0)), cfg)
    else:
        agent.cfg = cfg
        agent.opt.lr = cfg.lr
    rng_env = seeds.stream(1 + stream_offset)
    rng_act = seeds.stream(2 + stream_offset)
    rng_upd = seeds.stream(3 + stream_offset)
    log = TrainingLog()
    shape = agent.net.input_shape

    obs = env.reset(rng_env)
    ep, ep_ret, step, last_stats = 0, 0.0, 0, {"loss": float("nan"), "entropy": float("nan")}
    while step < cfg.total_steps:
        T = min(cfg.rollout_len, cfg.total_steps - step)
        buf_obs = np.zeros((T, *shape), np.uint8)
        raw = np.zeros((T, 2))
        logp, values, rewards, dones = (np.zeros(T) for _ in range(4))
        for t in range(T):
            action, lp, v, r_act = agent.act(obs, rng_act)
            res = env.step(action)
            buf_obs[t] = np.round(obs * 255.0)
            raw[t], logp[t], values[t] = r_act, lp, v
            reward = res.reward
            terminal = bool(res.info.get("success") or res.info.get("out_of_bounds"))
            if res.done and not terminal:
                # time-limit cut: bootstrap from the value of the final observation
                _, _, v_last, _ = agent.act(res.obs, rng_act, deterministic=True)
                reward += cfg.gamma * v_last
            rewards[t], dones[t] = reward, float(res.done)
            ep_ret += res.reward
            step += 1
            obs = res.obs
            if res.done:
                log.append(step, ep, ep_ret, bool(res.info.get("success")),
                           last_stats["entropy"], last_stats["loss"])
                ep += 1
                ep_ret = 0.0
                obs = env.reset(rng_env)
        _, _, last_v, _ = agent.act(obs, rng_act, deterministic=True)
        rollout = Rollout(buf_obs, raw, logp, values, rewards, dones, last_v)
        last_stats = ppo_update(agent, rollout, cfg, rng_upd)
        log_progress(progress, algo=tag, step=step, episode=ep, sr100=log.success_rate(100),
                     **{k: v for k, v in last_stats.items()})
    return agent, log
