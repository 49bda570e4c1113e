from __future__ import annotations

import numpy as np


class ReplayBuffer:
    """FIFO ring buffer of transitions; images are stored as uint8."""

    def __init__(self, capacity: int, obs_shape: tuple):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, *obs_shape), np.uint8)
        self.next_obs = np.zeros((capacity, *obs_shape), np.uint8)
        self.actions = np.zeros(capacity, np.int64)
        self.rewards = np.zeros(capacity, np.float32)
        self.dones = np.zeros(capacity, np.float32)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, obs, action: int, reward: float, next_obs, done: bool) -> None:
        i = self.cursor
        self.obs[i] = np.round(np.asarray(obs) * 255.0)
        self.next_obs[i] = np.round(np.asarray(next_obs) * 255.0)
        self.actions[i] = action
        self.rewards[i] = reward
        self.dones[i] = float(done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch)
        scale = np.float32(1.0 / 255.0)
        return (self.obs[idx].astype(np.float32) * scale, self.actions[idx], self.rewards[idx],
                self.next_obs[idx].astype(np.float32) * scale, self.dones[idx])

    def order(self) -> np.ndarray:
        """Storage indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.cursor) % self.capacity
