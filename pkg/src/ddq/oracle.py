"""Exact tabular solutions used as ground truth for the Q-learning code."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dqn import epsilon_greedy, tabular_q_update


class NotConvergedError(RuntimeError):
    pass


@dataclass
class TabularMdp:
    """``transitions[s, a, s']`` probabilities, ``rewards[s, a]``, discount ``gamma``."""

    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        s, a, s2 = self.transitions.shape
        if s != s2 or self.rewards.shape != (s, a):
            raise ValueError("transition and reward tables disagree in shape")
        if not np.allclose(self.transitions.sum(axis=2), 1.0, rtol=0.0, atol=1e-12):
            raise ValueError("transition rows must sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[1]


def bellman_backup(mdp: TabularMdp, Q: np.ndarray) -> np.ndarray:
    return mdp.rewards + mdp.gamma * mdp.transitions @ Q.max(axis=1)


def value_iteration(mdp: TabularMdp, tol: float = 1e-9, max_iters: int = 100_000,
                    residuals: list | None = None) -> np.ndarray:
    """Iterate the Bellman optimality backup until the sup-norm residual is <= ``tol``.

    If ``residuals`` is given, the residual of every sweep is appended to it.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    Q = np.zeros_like(mdp.rewards)
    for _ in range(max_iters):
        nxt = bellman_backup(mdp, Q)
        res = float(np.abs(nxt - Q).max())
        if residuals is not None:
            residuals.append(res)
        Q = nxt
        if res <= tol:
            return Q
    raise NotConvergedError(f"value iteration did not reach tol={tol} in {max_iters} sweeps")


def greedy_policy(Q: np.ndarray) -> np.ndarray:
    return np.argmax(Q, axis=1)


@dataclass(frozen=True)
class Gridworld:
    """Deterministic grid; bumping a wall leaves the agent in place.

    Stepping from the goal cell, whatever the action, pays +1 and returns the
    agent to the start cell. All other transitions pay 0.
    """

    size: int = 4
    start: tuple = (0, 0)
    goal: tuple = (3, 3)
    gamma: float = 0.95

    n_actions = 4
    _moves = ((-1, 0), (1, 0), (0, -1), (0, 1))

    @property
    def n_states(self) -> int:
        return self.size * self.size

    def index(self, cell) -> int:
        return cell[0] * self.size + cell[1]

    def step(self, s: int, a: int) -> tuple[int, float]:
        if s == self.index(self.goal):
            return self.index(self.start), 1.0
        r, c = divmod(s, self.size)
        dr, dc = self._moves[a]
        nr, nc = r + dr, c + dc
        if not (0 <= nr < self.size and 0 <= nc < self.size):
            nr, nc = r, c
        return self.index((nr, nc)), 0.0

    def to_mdp(self) -> TabularMdp:
        S, A = self.n_states, self.n_actions
        T = np.zeros((S, A, S))
        R = np.zeros((S, A))
        for s in range(S):
            for a in range(A):
                nxt, rew = self.step(s, a)
                T[s, a, nxt] = 1.0
                R[s, a] = rew
        return TabularMdp(T, R, self.gamma)


def q_learning(world: Gridworld, steps: int, rng: np.random.Generator, epsilon: float = 0.2,
               alpha_decay: float = 0.4, q_init: float | None = None) -> np.ndarray:
    """Tabular Q-learning on ``world`` with epsilon-greedy behaviour.

    The learning rate of a pair decays as ``visits ** -alpha_decay``. The table
    starts at the optimistic bound ``1 / (1 - gamma)`` unless ``q_init`` is
    given; with an all-zero start and lowest-index tie breaking the greedy
    policy pins the agent to a wall and the goal is practically never found.
    """
    if q_init is None:
        q_init = 1.0 / (1.0 - world.gamma)
    Q = np.full((world.n_states, world.n_actions), float(q_init))
    visits = np.zeros_like(Q)
    s = world.index(world.start)
    for _ in range(steps):
        a = epsilon_greedy(Q[s], epsilon, rng)
        nxt, r = world.step(s, a)
        visits[s, a] += 1
        tabular_q_update(Q, s, a, r, nxt, visits[s, a] ** -alpha_decay, world.gamma)
        s = nxt
    return Q
