"""Serial trainer, evaluation, timing benchmark and local multi-process launcher."""

from __future__ import annotations

import csv
import logging
import os
import socket
import subprocess
import sys
import tempfile
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nncore
from .config import RunConfig
from .dqn import RmsState, TargetModel, epsilon_greedy, rmsprop_update, sync_target
from .envs import SnakeEnv, write_episode_log
from .nncore import ModelParams
from .protocol import FetchRequest, GradientPush, decode, encode, recv_message
from .server import ParameterServer, ServerRunner
from .worker import Actor, ServerConnection, Worker, actor_rng

log = logging.getLogger(__name__)

CURVE_FIELDS = ("updates", "wall_s", "mean_reward")


@dataclass
class RewardCurve:
    points: list[tuple[int, float, float]] = field(default_factory=list)

    def add(self, updates: int, wall_s: float, mean_reward: float) -> None:
        if self.points and updates <= self.points[-1][0]:
            return
        self.points.append((updates, wall_s, mean_reward))

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CURVE_FIELDS)
            for u, t, r in self.points:
                w.writerow((u, repr(t), repr(r)))

    @classmethod
    def read(cls, path) -> "RewardCurve":
        with open(path, newline="") as fh:
            return cls([(int(r["updates"]), float(r["wall_s"]), float(r["mean_reward"]))
                        for r in csv.DictReader(fh)])


def init_model(cfg: RunConfig) -> ModelParams:
    return nncore.init_model(cfg.specs(), cfg.input_shape, np.random.default_rng(cfg.seed), cfg.xi)


def train_serial(cfg: RunConfig, max_iters: int | None = None, worker_id: int = 0, seed: int | None = None,
                 on_update=None, curve_path=None, episodes_path=None, progress_every: int = 0):
    """In-process DQN: the worker loop and the server update fused, no network.

    Targets come from a frozen copy refreshed every ``cfg.target_sync`` updates.
    Returns ``(model, curve, actor)``.
    """
    max_iters = cfg.max_iters if max_iters is None else max_iters
    hp = cfg.hyperparams()
    model = init_model(cfg)
    rms = RmsState(model.size)
    actor = Actor(cfg, actor_rng(cfg.seed if seed is None else seed, worker_id))
    actor.warmup(cfg.warmup)
    target = TargetModel.from_live(model)
    curve = RewardCurve()
    window: deque = deque(maxlen=cfg.reward_window)
    start = time.perf_counter()
    seen = 0
    for t in range(max_iters):
        if t % hp.target_sync == 0:
            sync_target(target, model)
        actor.env_step(actor.choose(model))
        _, grad = actor.gradient(model, target)
        rmsprop_update(model, rms, grad, hp.alpha, hp.rms_eps)
        if on_update is not None:
            on_update(model)
        if len(actor.episodes) > seen:
            window.extend(ep[3] for ep in actor.episodes[seen:])
            seen = len(actor.episodes)
            curve.add(model.generation, time.perf_counter() - start, float(np.mean(window)))
        if progress_every and (t + 1) % progress_every == 0:
            log.info("update %d  mean reward(last %d) %.3f", t + 1, len(window),
                     float(np.mean(window)) if window else float("nan"))
    if curve_path:
        curve.write(curve_path)
    if episodes_path:
        write_episode_log(episodes_path, actor.episodes)
    return model, curve, actor


def evaluate(model: ModelParams, cfg: RunConfig, episodes: int, eps_eval: float | None = None,
             seed: int = 0) -> tuple[float, float]:
    """Play ``episodes`` full games with an epsilon-greedy policy; mean and std of episode reward."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    eps = cfg.eval_eps if eps_eval is None else eps_eval
    specs = cfg.specs()
    rng = np.random.default_rng(seed)
    env = SnakeEnv(cfg.grid_size, rng, cfg.d, cfg.frames)
    totals = []
    for _ in range(episodes):
        phi, done, total = env.reset(), False, 0.0
        while not done:
            if eps >= 1.0:
                # no network needed for a uniformly random policy
                a = epsilon_greedy(np.zeros(env.n_actions), 1.0, rng)
            else:
                a = epsilon_greedy(nncore.forward(model, specs, phi), eps, rng)
            phi, r, done = env.step(a)
            total += r
        totals.append(total)
    return float(np.mean(totals)), float(np.std(totals))


def lockstep_distributed(cfg: RunConfig, max_iters: int, worker_id: int = 0, seed: int | None = None,
                         on_update=None) -> ParameterServer:
    """One worker against a real TCP server, strictly fetch -> compute -> push."""
    ps = ParameterServer.from_config(cfg, max_iters, on_update=on_update)
    worker = Worker(cfg, worker_id, actor_rng(cfg.seed if seed is None else seed, worker_id))
    worker.warmup()
    with ServerRunner(ps) as runner:
        # the server reads one connection in order, so each push lands before the next fetch
        conn = ServerConnection.connect(runner.host, runner.port, worker_id, ps.model.size)
        worker.run(conn)
    return ps


# --- benchmark -------------------------------------------------------------

@dataclass
class BenchRow:
    hidden: int
    params: int
    comms_us: float
    gradient_us: float
    latency_us: float

    @property
    def saturation_workers(self) -> float:
        return self.gradient_us / self.latency_us


def measure_latency(ps: ParameterServer, frame: bytes, repeats: int) -> float:
    """Mean seconds the server spends updating its weights, after one untimed warm-up update."""
    msg = decode(frame, ps.model.size)
    ps.handle_gradient(msg)
    start = len(ps.update_log)
    for _ in range(repeats):
        ps.handle_gradient(msg)
    applied = ps.update_log[start:]
    if len(applied) != repeats:
        raise RuntimeError(f"expected {repeats} updates, server applied {len(applied)}")
    return float(np.mean([rec.apply_duration for rec in applied]))


def bench_sizes(cfg: RunConfig, hidden_sizes=(32, 64, 128, 256), repeats: int = 20) -> list[BenchRow]:
    """Mean comms / gradient / server-latency times for a sweep of model sizes (loopback)."""
    rows = []
    for h in hidden_sizes:
        c = cfg.replace(hidden=str(h), warmup=max(cfg.batch_size, 64), replay_capacity=max(cfg.batch_size, 64))
        ps = ParameterServer.from_config(c, max_iters=10 ** 9)
        worker = Worker(c, 0, actor_rng(c.seed, 0))
        worker.warmup()
        with ServerRunner(ps) as runner:
            conn = ServerConnection.connect(runner.host, runner.port, 0, ps.model.size)
            for _ in range(repeats + 1):
                worker.iteration(conn)
            conn.close()
        comms = [d for i, e, d in worker.timings if e == "comms" and i > 0]
        grads = [d for i, e, d in worker.timings if e == "gradient" and i > 0]
        frame = encode(GradientPush(0, ps.generation, np.zeros(ps.model.size)))
        fresh = ParameterServer(ps.model.copy(), c.alpha, c.rms_eps, max_iters=10 ** 9)
        tau = measure_latency(fresh, frame, repeats)
        rows.append(BenchRow(h, ps.model.size, float(np.mean(comms)), float(np.mean(grads)), tau * 1e6))
    return rows


def flood_throughput(ps: ParameterServer, clients: int = 8, seconds: float = 5.0,
                     frames_per_client: int | None = None, grad: np.ndarray | None = None) -> tuple[float, int]:
    """Hammer a served ``ps`` with pre-serialized gradients from mock clients.

    Returns ``(updates_per_second, updates)`` measured at the server between the
    first and the last applied update.
    """
    frame = encode(GradientPush(0, 0, np.zeros(ps.model.size) if grad is None else grad))
    hello = encode(FetchRequest(0))
    stop = threading.Event()

    def client(host, port):
        with socket.create_connection((host, port)) as s:
            s.sendall(hello)
            recv_message(s, ps.model.size)
            sent = 0
            try:
                while not stop.is_set() and (frames_per_client is None or sent < frames_per_client):
                    s.sendall(frame)
                    sent += 1
            except OSError:
                pass

    with ServerRunner(ps) as runner:
        threads = [threading.Thread(target=client, args=(runner.host, runner.port), daemon=True)
                   for _ in range(clients)]
        for t in threads:
            t.start()
        ps.done.wait(seconds)
        stop.set()
        ps.stop()
    for t in threads:
        t.join(timeout=5)
    log_ = ps.update_log
    if not log_:
        return 0.0, 0
    span = log_[-1].recv_time + log_[-1].latency - log_[0].recv_time
    return len(log_) / span, len(log_)


def measure_server_latency(ps: ParameterServer, grad: np.ndarray, repeats: int) -> float:
    """Mean seconds from a gradient frame's arrival to the end of its update.

    One client sends one gradient at a time and waits for a fetch reply before
    the next, so no two updates overlap and the lock is never contended.
    """
    frame = encode(GradientPush(0, 0, grad))
    fetch = encode(FetchRequest(0))
    start = len(ps.update_log)
    with ServerRunner(ps) as runner:
        with socket.create_connection((runner.host, runner.port)) as s:
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            s.sendall(fetch)
            recv_message(s, ps.model.size)
            for _ in range(repeats):
                s.sendall(frame)
                s.sendall(fetch)
                recv_message(s, ps.model.size)
    records = ps.update_log[start:]
    if len(records) != repeats:
        raise RuntimeError(f"expected {repeats} updates, server applied {len(records)}")
    return float(np.mean([r.latency for r in records]))


def _worker_proc(cfg_text, host, port, worker_id, seed):
    import os as _os
    _os.environ.setdefault("OMP_NUM_THREADS", "1")
    from .config import RunConfig as _RC
    from .worker import run_worker
    run_worker(_RC.from_text(cfg_text), host, port, worker_id, seed)


def throughput_vs_workers(cfg: RunConfig, worker_counts=(1, 2), seconds: float = 10.0) -> dict[int, float]:
    """Server updates/sec with K real worker processes for each K."""
    import multiprocessing as mp

    out = {}
    ctx = mp.get_context("spawn")
    for k in worker_counts:
        ps = ParameterServer.from_config(cfg, max_iters=10 ** 9)
        with ServerRunner(ps) as runner:
            procs = [ctx.Process(target=_worker_proc, args=(cfg.to_text(), runner.host, runner.port, i, cfg.seed),
                                 daemon=True) for i in range(k)]
            for p in procs:
                p.start()
            while ps.generation == 0:
                time.sleep(0.01)
            n0, t0 = ps.generation, time.perf_counter()
            time.sleep(seconds)
            out[k] = (ps.generation - n0) / (time.perf_counter() - t0)
            ps.stop()
        for p in procs:
            p.join(timeout=10)
            if p.is_alive():
                p.terminate()
    return out


def write_bench(path, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("hidden", "params", "comms_us", "gradient_us", "latency_us", "saturation_workers"))
        for r in rows:
            w.writerow((r.hidden, r.params, r.comms_us, r.gradient_us, r.latency_us, r.saturation_workers))


# --- local multi-process launch ------------------------------------------

def launch_local(config_path, workers: int, outdir, max_iters: int | None = None,
                 max_seconds: float | None = None, port: int = 0, seed: int | None = None) -> dict:
    """Start one server and ``workers`` worker processes through the CLI; wait for all of them."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1")
    exe = [sys.executable, "-m", "ddq.cli"]
    portfile = Path(tempfile.mkdtemp()) / "port"
    cmd = exe + ["server", "--listen", f"127.0.0.1:{port}", "--config", str(config_path),
                 "--checkpoint", str(outdir / "model.ddq"), "--metrics", str(outdir / "server.csv"),
                 "--port-file", str(portfile)]
    if max_iters is not None:
        cmd += ["--max-iters", str(max_iters)]
    if max_seconds is not None:
        cmd += ["--max-seconds", str(max_seconds)]
    server = subprocess.Popen(cmd, env=env)
    while not portfile.exists() or not portfile.read_text().strip():
        if server.poll() is not None:
            raise RuntimeError("server exited before listening")
        time.sleep(0.05)
    addr = portfile.read_text().strip()
    procs = []
    for k in range(workers):
        wcmd = exe + ["worker", "--server", addr, "--id", str(k), "--config", str(config_path),
                      "--metrics", str(outdir / f"worker{k}_timing.csv"),
                      "--episodes", str(outdir / f"worker{k}_episodes.csv")]
        if seed is not None:
            wcmd += ["--seed", str(seed)]
        procs.append(subprocess.Popen(wcmd, env=env))
    codes = [p.wait() for p in procs]
    server_code = server.wait()
    return {"server": server_code, "workers": codes, "outdir": str(outdir)}
