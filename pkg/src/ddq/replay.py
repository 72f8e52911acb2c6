"""Fixed-capacity experience replay with uniform sampling."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import UsageError


class Experience(NamedTuple):
    phi: np.ndarray
    action: int
    reward: float
    phi_next: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Ring of the last ``capacity`` experiences.

    Entries are stored by reference; consecutive experiences normally share
    the stacked-state array between ``phi_next`` and the following ``phi``.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self._entries: list[Experience] = []
        self._next = 0
        self.insert_count = 0

    def __len__(self) -> int:
        return len(self._entries)

    def store(self, e: Experience) -> None:
        if len(self._entries) < self.capacity:
            self._entries.append(e)
        else:
            self._entries[self._next] = e
        self._next = (self._next + 1) % self.capacity
        self.insert_count += 1

    def contents(self) -> list[Experience]:
        """Current entries, oldest first."""
        if len(self._entries) < self.capacity:
            return list(self._entries)
        return self._entries[self._next:] + self._entries[:self._next]

    def sample_uniform(self, b: int, rng: np.random.Generator) -> list[Experience]:
        if not self._entries:
            raise UsageError("cannot sample from an empty replay buffer")
        if b == 0:
            return []
        idx = rng.integers(0, len(self._entries), size=b)
        return [self._entries[i] for i in idx]


def stack_batch(batch: list[Experience]):
    """Column arrays ``(phi, actions, rewards, phi_next, terminal)`` for a minibatch."""
    phi = np.stack([e.phi for e in batch])
    phi_next = np.stack([e.phi_next for e in batch])
    actions = np.array([e.action for e in batch], dtype=np.intp)
    rewards = np.array([e.reward for e in batch], dtype=np.float64)
    terminal = np.array([e.terminal for e in batch], dtype=bool)
    return phi, actions, rewards, phi_next, terminal
