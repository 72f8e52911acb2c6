"""
Worker side of the distributed trainer.

``Actor`` owns one game, its frame stack, a private replay memory and the
worker's random stream. The serial trainer drives the same class, which is
what makes a lock-step single worker reproduce it bit for bit.
"""

from __future__ import annotations

import csv
import logging
import socket
import time

import numpy as np

from . import nncore
from .config import RunConfig
from .dqn import TargetModel, epsilon_at, epsilon_greedy, sync_target, targets_from_arrays
from .envs import SnakeEnv, write_episode_log
from .errors import ProtocolError
from .nncore import ModelParams, layer_shapes
from .protocol import FetchRequest, GradientPush, ModelReply, Shutdown, recv_message, send_message
from .replay import Experience, ReplayBuffer, stack_batch

log = logging.getLogger(__name__)


def actor_rng(seed: int, worker_id: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, worker_id])


class Actor:
    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.specs = cfg.specs()
        self.hp = cfg.hyperparams()
        self.rng = rng
        self.env = SnakeEnv(cfg.grid_size, rng, cfg.d, cfg.frames)
        self.replay = ReplayBuffer(cfg.replay_capacity)
        self.phi = self.env.reset()
        self.step_count = 0
        self.recording = False
        # (episode, steps, apples, reward) for episodes played after warm-up
        self.episodes: list[tuple[int, int, int, float]] = []
        self._ep_steps = 0
        self._ep_reward = 0.0

    def warmup(self, min_size: int) -> None:
        """Fill the replay memory with uniformly random play."""
        while len(self.replay) < min_size:
            self.env_step(int(self.rng.integers(self.env.n_actions)))
        self.recording = True
        self.phi = self.env.reset()
        self._ep_steps, self._ep_reward = 0, 0.0

    def choose(self, model: ModelParams) -> int:
        q = nncore.forward(model, self.specs, self.phi)
        action = epsilon_greedy(q, epsilon_at(self.step_count, self.hp), self.rng)
        self.step_count += 1
        return action

    def env_step(self, action: int) -> Experience:
        phi_next, reward, terminal = self.env.step(action)
        e = Experience(self.phi, action, reward, phi_next, terminal)
        self.replay.store(e)
        self._ep_steps += 1
        self._ep_reward += reward
        if terminal:
            if self.recording:
                self.episodes.append((len(self.episodes), self._ep_steps, self.env.state.apples, self._ep_reward))
            self._ep_steps, self._ep_reward = 0, 0.0
            self.phi = self.env.reset()
        else:
            self.phi = phi_next
        return e

    def gradient(self, model: ModelParams, target: TargetModel):
        """Sample a minibatch and return ``(loss, grad)`` for the live model."""
        batch = self.replay.sample_uniform(self.hp.batch_size, self.rng)
        phi, actions, rewards, phi_next, terminal = stack_batch(batch)
        y = targets_from_arrays(rewards, phi_next, terminal, target, self.hp.gamma, self.specs)
        return nncore.backward(model, self.specs, phi, actions, y)


class ServerConnection:
    """Blocking request/reply channel to the parameter server."""

    def __init__(self, sock: socket.socket, worker_id: int, param_count: int):
        self.sock = sock
        self.worker_id = worker_id
        self.param_count = param_count

    @classmethod
    def connect(cls, host: str, port: int, worker_id: int, param_count: int,
                attempts: int = 20, backoff: float = 0.1) -> "ServerConnection":
        delay = backoff
        for attempt in range(1, attempts + 1):
            try:
                sock = socket.create_connection((host, port))
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                return cls(sock, worker_id, param_count)
            except OSError as exc:
                if attempt == attempts:
                    raise ConnectionError(f"cannot reach server at {host}:{port}: {exc}") from exc
                time.sleep(delay)
                delay = min(delay * 2, 2.0)
        raise AssertionError("unreachable")

    def fetch(self) -> ModelReply | None:
        """Latest model, or ``None`` once the server has shut down."""
        try:
            send_message(self.sock, FetchRequest(self.worker_id))
            msg = recv_message(self.sock, self.param_count)
        except (OSError, ProtocolError):
            return None
        if msg is None or isinstance(msg, Shutdown):
            return None
        if not isinstance(msg, ModelReply):
            raise ProtocolError("tag", f"expected ModelReply, got {type(msg).__name__}")
        return msg

    def push(self, grad: np.ndarray, base_generation: int) -> bool:
        try:
            send_message(self.sock, GradientPush(self.worker_id, base_generation, grad))
            return True
        except OSError:
            return False

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class Worker:
    """One data-parallel replica: fetch, act, store, sample, differentiate, push."""

    def __init__(self, cfg: RunConfig, worker_id: int, rng: np.random.Generator):
        self.cfg = cfg
        self.worker_id = worker_id
        self.actor = Actor(cfg, rng)
        self.shapes, _ = layer_shapes(self.actor.specs, cfg.input_shape)
        self.target: TargetModel | None = None
        self.fetches = 0
        self.iterations = 0
        # (iteration, event, duration_us) with event in {"comms", "gradient"}
        self.timings: list[tuple[int, str, float]] = []
        self.last_base_generation: int | None = None

    def warmup(self, min_size: int | None = None) -> None:
        self.actor.warmup(self.cfg.warmup if min_size is None else min_size)

    def iteration(self, conn: ServerConnection) -> bool:
        """Run one worker iteration; ``False`` once the server is gone."""
        t0 = time.perf_counter()
        reply = conn.fetch()
        t1 = time.perf_counter()
        if reply is None:
            return False
        live = ModelParams(self.shapes, reply.params, reply.generation)
        if self.fetches % self.cfg.worker_target_sync == 0:
            if self.target is None:
                self.target = TargetModel.from_live(live)
            else:
                sync_target(self.target, live)
        self.fetches += 1

        action = self.actor.choose(live)
        self.actor.env_step(action)
        _, grad = self.actor.gradient(live, self.target)
        t2 = time.perf_counter()

        self.last_base_generation = reply.generation
        ok = conn.push(grad.flat, reply.generation)
        self.timings.append((self.iterations, "comms", (t1 - t0) * 1e6))
        self.timings.append((self.iterations, "gradient", (t2 - t1) * 1e6))
        self.iterations += 1
        return ok

    def run(self, conn: ServerConnection) -> int:
        while self.iteration(conn):
            pass
        conn.close()
        return self.iterations


TIMING_FIELDS = ("iteration", "event", "duration_us")


def write_timings(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIMING_FIELDS)
        w.writerows(rows)


def read_timings(path) -> list[tuple[int, str, float]]:
    with open(path, newline="") as fh:
        return [(int(r["iteration"]), r["event"], float(r["duration_us"])) for r in csv.DictReader(fh)]


def run_worker(cfg: RunConfig, host: str, port: int, worker_id: int, seed: int | None = None,
               metrics_path=None, episodes_path=None, attempts: int = 20) -> Worker:
    worker = Worker(cfg, worker_id, actor_rng(cfg.seed if seed is None else seed, worker_id))
    worker.warmup()
    conn = ServerConnection.connect(host, port, worker_id, cfg.param_count(), attempts=attempts)
    n = worker.run(conn)
    log.info("worker %d finished after %d iterations", worker_id, n)
    if metrics_path:
        write_timings(metrics_path, worker.timings)
    if episodes_path:
        write_episode_log(episodes_path, worker.actor.episodes)
    return worker
