"""
Snake on an n x n grid, rendered straight to a grayscale frame.

Rewards: +1 per apple, -1 on death (self or wall), 0 otherwise. An episode
that goes ``200 * n`` steps without eating ends with reward 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import ConfigError, UsageError

UP, DOWN, LEFT, RIGHT = range(4)
N_ACTIONS = 4
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}
_OPPOSITE = {UP: DOWN, DOWN: UP, LEFT: RIGHT, RIGHT: LEFT}

EMPTY, BODY, HEAD, APPLE = 0.0, 0.5, 0.75, 1.0

FRAME_WIDTH = 32
FRAME_COUNT = 4
STALL_FACTOR = 200


@dataclass(frozen=True)
class SnakeState:
    grid_size: int
    body: tuple  # (row, col) cells, head first
    apple: tuple | None
    direction: int
    score: int = 0
    terminal: bool = False
    apples: int = 0
    steps_since_apple: int = 0


def _place_apple(n: int, body, rng: np.random.Generator):
    occupied = set(body)
    free = [(r, c) for r in range(n) for c in range(n) if (r, c) not in occupied]
    if not free:
        return None
    return free[int(rng.integers(len(free)))]


def snake_reset(n: int, rng: np.random.Generator) -> SnakeState:
    if n < 4:
        raise ConfigError(f"grid size must be at least 4, got {n}")
    mid = n // 2
    body = ((mid, mid), (mid, mid - 1))
    return SnakeState(n, body, _place_apple(n, body, rng), RIGHT)


def snake_step(s: SnakeState, action: int, rng: np.random.Generator):
    """Advance one tick. Returns ``(next_state, reward)``."""
    if s.terminal:
        raise UsageError("cannot step a terminal snake state")
    direction = int(action)
    if direction not in _MOVES:
        raise UsageError(f"invalid action {action}")
    if direction == _OPPOSITE[s.direction]:
        direction = s.direction
    dr, dc = _MOVES[direction]
    hr, hc = s.body[0]
    head = (hr + dr, hc + dc)
    n = s.grid_size

    if not (0 <= head[0] < n and 0 <= head[1] < n):
        return replace(s, direction=direction, score=s.score - 1, terminal=True), -1.0

    eats = head == s.apple
    # the tail cell is vacated this tick unless the snake grows
    blocking = s.body if eats else s.body[:-1]
    if head in blocking:
        return replace(s, direction=direction, score=s.score - 1, terminal=True), -1.0

    if eats:
        body = (head,) + s.body
        apple = _place_apple(n, body, rng)
        return SnakeState(n, body, apple, direction, s.score + 1, apple is None, s.apples + 1, 0), 1.0

    body = (head,) + s.body[:-1]
    stalled = s.steps_since_apple + 1
    return replace(
        s,
        body=body,
        direction=direction,
        steps_since_apple=stalled,
        terminal=stalled >= STALL_FACTOR * n,
    ), 0.0


def render(s: SnakeState) -> np.ndarray:
    img = np.zeros((s.grid_size, s.grid_size))
    for cell in s.body[1:]:
        img[cell] = BODY
    img[s.body[0]] = HEAD
    if s.apple is not None:
        img[s.apple] = APPLE
    return img


@lru_cache(maxsize=32)
def _resample_matrix(n: int, d: int) -> np.ndarray:
    # row i averages source cells weighted by their overlap with [i*n/d, (i+1)*n/d)
    m = np.zeros((d, n))
    scale = n / d
    for i in range(d):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(n, int(np.ceil(hi)))):
            m[i, j] = max(0.0, min(hi, j + 1) - max(lo, j))
    m /= m.sum(axis=1, keepdims=True)
    m.setflags(write=False)
    return m


def preprocess(raw: np.ndarray, d: int = FRAME_WIDTH) -> np.ndarray:
    """Area-weighted resampling of an n x n grayscale image to d x d."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[0] == d and raw.shape[1] == d:
        return raw.copy()
    rows = _resample_matrix(raw.shape[0], d)
    cols = _resample_matrix(raw.shape[1], d)
    return np.clip(rows @ raw @ cols.T, 0.0, 1.0)


def initial_stack(frame: np.ndarray, frames: int = FRAME_COUNT) -> np.ndarray:
    return np.repeat(frame[None], frames, axis=0)


def push_frame(stack: np.ndarray, frame: np.ndarray) -> np.ndarray:
    if stack.shape[1:] != frame.shape:
        raise ConfigError(f"frame {frame.shape} does not fit stack {stack.shape}")
    return np.concatenate([stack[1:], frame[None]])


class SnakeEnv:
    """Snake game plus the frame pipeline, producing stacked F x d x d states."""

    n_actions = N_ACTIONS

    def __init__(self, grid_size: int, rng: np.random.Generator,
                 d: int = FRAME_WIDTH, frames: int = FRAME_COUNT):
        self.grid_size = grid_size
        self.rng = rng
        self.d = d
        self.frames = frames
        self.state: SnakeState | None = None
        self.stack: np.ndarray | None = None

    def reset(self) -> np.ndarray:
        self.state = snake_reset(self.grid_size, self.rng)
        self.stack = initial_stack(preprocess(render(self.state), self.d), self.frames)
        return self.stack

    def step(self, action: int):
        self.state, reward = snake_step(self.state, action, self.rng)
        self.stack = push_frame(self.stack, preprocess(render(self.state), self.d))
        return self.stack, reward, self.state.terminal


EPISODE_FIELDS = ("episode", "steps", "apples", "reward")


def write_episode_log(path, rows) -> None:
    """Rows of ``(episode, steps, apples, reward)``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPISODE_FIELDS)
        writer.writerows(rows)


def read_episode_log(path) -> list[tuple[int, int, int, float]]:
    with open(path, newline="") as fh:
        return [(int(r["episode"]), int(r["steps"]), int(r["apples"]), float(r["reward"]))
                for r in csv.DictReader(fh)]
