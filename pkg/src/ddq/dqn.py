"""Q-learning pieces: targets, exploration, RMSProp, target-network sync."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore
from .nncore import Gradient, ModelParams
from .replay import Experience, stack_batch


class NonFiniteGradientError(ValueError):
    pass


@dataclass
class Hyperparams:
    gamma: float = 0.95
    alpha: float = 1e-3
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    anneal_steps: int = 50_000
    batch_size: int = 32
    target_sync: int = 1000
    worker_target_sync: int = 16
    rms_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        for eps in (self.epsilon_start, self.epsilon_end):
            if not 0.0 <= eps <= 1.0:
                raise ValueError(f"epsilon {eps} outside [0, 1]")
        if self.target_sync < 1 or self.worker_target_sync < 1:
            raise ValueError("target sync periods must be >= 1")


@dataclass
class TargetModel:
    params: ModelParams
    generation_synced: int = 0

    @classmethod
    def from_live(cls, live: ModelParams) -> "TargetModel":
        return cls(live.copy(), live.generation)


class RmsState:
    """Running average of squared gradients, one entry per parameter."""

    # elements per block; small enough that the temporaries stay in cache
    CHUNK = 32768

    def __init__(self, size: int):
        self.r = np.zeros(size)
        self._scratch = np.empty(min(size, self.CHUNK))


def compute_targets(batch: list[Experience], target: TargetModel, gamma: float, specs) -> np.ndarray:
    """Bootstrapped targets from the frozen network; terminal transitions use the reward alone."""
    _, _, rewards, phi_next, terminal = stack_batch(batch)
    return targets_from_arrays(rewards, phi_next, terminal, target, gamma, specs)


def targets_from_arrays(rewards, phi_next, terminal, target: TargetModel, gamma: float, specs):
    y = np.array(rewards, dtype=np.float64)
    live = ~terminal
    if gamma != 0.0 and live.any():
        q_next = nncore.q_values(target.params, specs, phi_next[live])
        y[live] += gamma * q_next.max(axis=1)
    return y


def epsilon_greedy(q: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    # exactly one uniform draw per call, plus one integer draw when exploring
    if rng.random() < eps:
        return int(rng.integers(len(q)))
    return int(np.argmax(q))


def epsilon_at(step: int, hp: Hyperparams) -> float:
    if step >= hp.anneal_steps or hp.anneal_steps <= 0:
        return hp.epsilon_end
    frac = step / hp.anneal_steps
    return hp.epsilon_start + frac * (hp.epsilon_end - hp.epsilon_start)


def rmsprop_update(model: ModelParams, rms: RmsState, grad: Gradient | np.ndarray,
                   alpha: float, rms_eps: float) -> None:
    """In-place ``r <- 0.9 r + 0.1 g^2``; ``theta <- theta - alpha g / sqrt(r + eps)``."""
    g = grad.flat if isinstance(grad, Gradient) else np.asarray(grad, dtype=np.float64)
    if g.shape != model.flat.shape:
        raise ValueError(f"gradient of length {g.size} does not match model of {model.size}")
    # a finite sum of squares proves every element finite; only overflow needs the full scan
    if not np.isfinite(g @ g) and not np.isfinite(g).all():
        raise NonFiniteGradientError("gradient contains NaN or Inf; update rejected")
    r, theta, scratch = rms.r, model.flat, rms._scratch
    step = max(len(scratch), 1)
    for i in range(0, g.size, step):
        gs, rs = g[i:i + step], r[i:i + step]
        tmp = scratch[:gs.size]
        np.multiply(gs, gs, out=tmp)
        tmp *= 0.1
        rs *= 0.9
        rs += tmp
        np.add(rs, rms_eps, out=tmp)
        np.sqrt(tmp, out=tmp)
        np.divide(gs, tmp, out=tmp)
        tmp *= alpha
        theta[i:i + step] -= tmp
    model.generation += 1


def sync_target(target: TargetModel, live: ModelParams) -> None:
    np.copyto(target.params.flat, live.flat)
    target.params.generation = live.generation
    target.generation_synced = live.generation


def tabular_q_update(Q: np.ndarray, s, a, r, s_next, alpha, gamma, terminal: bool = False) -> None:
    """``Q[s, a] += alpha * (r + gamma * max_a' Q[s', a'] - Q[s, a])`` on a dense table."""
    bootstrap = 0.0 if terminal else gamma * Q[s_next].max()
    Q[s, a] += alpha * (r + bootstrap - Q[s, a])
