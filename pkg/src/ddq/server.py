"""
Parameter server: owns the global model and its RMSProp state.

Gradients are applied the moment they arrive, whatever their staleness. One
lock covers the parameters, the RMSProp accumulator and the generation
counter, so every fetched snapshot corresponds to exactly one generation.
"""

from __future__ import annotations

import csv
import logging
import socket
import socketserver
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import nncore
from .config import RunConfig
from .dqn import RmsState, rmsprop_update
from .errors import ProtocolError
from .nncore import ModelParams
from .protocol import FetchRequest, GradientPush, ModelReply, Shutdown, recv_body, recv_header, send_message

log = logging.getLogger(__name__)

METRIC_FIELDS = ("event", "worker_id", "generation", "staleness", "duration_us")


@dataclass(frozen=True)
class UpdateRecord:
    recv_time: float  # perf_counter when the frame started arriving
    worker_id: int
    staleness: int
    apply_duration: float  # seconds inside the RMSProp update
    latency: float  # seconds from frame arrival to the end of the update


class ParameterServer:
    def __init__(self, model: ModelParams, alpha: float, rms_eps: float, max_iters: int,
                 on_update=None):
        self.model = model
        self.rms = RmsState(model.size)
        self.alpha = alpha
        self.rms_eps = rms_eps
        self.max_iters = max_iters
        self.lock = threading.Lock()
        self.update_log: list[UpdateRecord] = []
        self.events: list[tuple[str, int, int, int, float]] = []
        self.done = threading.Event()
        # called with the model, under the lock, after every applied update
        self.on_update = on_update
        if max_iters <= 0:
            self.done.set()

    @classmethod
    def from_config(cls, cfg: RunConfig, max_iters: int | None = None, **kw) -> "ParameterServer":
        model = nncore.init_model(cfg.specs(), cfg.input_shape, np.random.default_rng(cfg.seed), cfg.xi)
        return cls(model, cfg.alpha, cfg.rms_eps, cfg.max_iters if max_iters is None else max_iters, **kw)

    @property
    def generation(self) -> int:
        return self.model.generation

    def handle_fetch(self, req: FetchRequest) -> ModelReply:
        t0 = time.perf_counter()
        with self.lock:
            params = self.model.flat.copy()
            n = self.model.generation
            self.events.append(("fetch", req.worker_id, n, 0, (time.perf_counter() - t0) * 1e6))
        return ModelReply(n, params)

    def handle_gradient(self, msg: GradientPush, recv_time: float | None = None) -> bool:
        """Apply one gradient. Returns ``False`` when it is rejected or arrives after shutdown."""
        recv_time = time.perf_counter() if recv_time is None else recv_time
        grad = np.asarray(msg.grad)
        with self.lock:
            n = self.model.generation
            if self.done.is_set():
                return False
            problem = None
            if grad.shape != self.model.flat.shape:
                problem = f"gradient of length {grad.size}, model has {self.model.size}"
            elif msg.base_generation > n:
                problem = f"base generation {msg.base_generation} is ahead of server generation {n}"
            if problem is None:
                t0 = time.perf_counter()
                try:
                    rmsprop_update(self.model, self.rms, grad, self.alpha, self.rms_eps)
                except ValueError as exc:
                    problem = str(exc)
                else:
                    done = time.perf_counter()
                    tau = done - t0
            if problem is not None:
                log.warning("rejected gradient from worker %d: %s", msg.worker_id, problem)
                self.events.append(("reject", msg.worker_id, n, 0, 0.0))
                return False
            staleness = n - msg.base_generation
            self.update_log.append(UpdateRecord(recv_time, msg.worker_id, staleness, tau, done - recv_time))
            self.events.append(("update", msg.worker_id, self.model.generation, staleness, tau * 1e6))
            if self.on_update is not None:
                self.on_update(self.model)
            if self.model.generation >= self.max_iters:
                self.done.set()
        return True

    def stop(self) -> None:
        self.done.set()

    def write_metrics(self, path) -> None:
        with self.lock:
            rows = list(self.events)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_FIELDS)
            w.writerows(rows)


def read_metrics(path) -> list[tuple[str, int, int, int, float]]:
    with open(path, newline="") as fh:
        return [(r["event"], int(r["worker_id"]), int(r["generation"]), int(r["staleness"]),
                 float(r["duration_us"])) for r in csv.DictReader(fh)]


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        ps: ParameterServer = self.server.ps
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.server.track(sock, add=True)
        first = True
        try:
            while True:
                length = recv_header(sock)
                if length is None:
                    return
                arrived = time.perf_counter()
                msg = recv_body(sock, length, ps.model.size)
                if first and not isinstance(msg, FetchRequest):
                    raise ProtocolError("tag", f"first message must be FetchRequest, got {type(msg).__name__}")
                first = False
                if isinstance(msg, FetchRequest):
                    if ps.done.is_set():
                        send_message(sock, Shutdown())
                        return
                    send_message(sock, ps.handle_fetch(msg))
                elif isinstance(msg, GradientPush):
                    ps.handle_gradient(msg, arrived)
                elif isinstance(msg, Shutdown):
                    return
                else:
                    raise ProtocolError("tag", f"unexpected {type(msg).__name__} from worker")
        except ProtocolError as exc:
            log.warning("closing connection from %s: %s", self.client_address, exc)
        except OSError:
            pass
        finally:
            self.server.track(sock, add=False)


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, ps: ParameterServer):
        super().__init__(addr, _Handler)
        self.ps = ps
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()

    def track(self, sock, add: bool):
        with self._conns_lock:
            (self._conns.add if add else self._conns.discard)(sock)

    def open_connections(self) -> int:
        with self._conns_lock:
            return len(self._conns)

    def drop_all(self):
        with self._conns_lock:
            conns = list(self._conns)
        for s in conns:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


class ServerRunner:
    """Serves a ``ParameterServer`` over TCP from a background thread."""

    def __init__(self, ps: ParameterServer, host: str = "127.0.0.1", port: int = 0):
        self.ps = ps
        self._tcp = _TCPServer((host, port), ps)
        self.host, self.port = self._tcp.server_address[:2]
        self._thread = threading.Thread(target=self._tcp.serve_forever, kwargs={"poll_interval": 0.05},
                                        daemon=True)
        self.started_at: float | None = None

    def start(self) -> "ServerRunner":
        self.started_at = time.perf_counter()
        self._thread.start()
        return self

    def wait(self, max_seconds: float | None = None, grace: float = 5.0) -> None:
        """Block until MaxIters (or the time budget), then shut workers down."""
        self.ps.done.wait(max_seconds if max_seconds else None)
        self.ps.stop()
        # workers learn about the shutdown on their next fetch
        deadline = time.perf_counter() + grace
        while self._tcp.open_connections() and time.perf_counter() < deadline:
            time.sleep(0.01)
        self.close()

    def close(self) -> None:
        self.ps.stop()
        self._tcp.drop_all()
        self._tcp.shutdown()
        self._tcp.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def run_server(cfg: RunConfig, host: str = "127.0.0.1", port: int = 0, max_iters: int | None = None,
               checkpoint=None, metrics=None, max_seconds: float | None = None, on_listen=None):
    """Serve until ``max_iters`` updates (or ``max_seconds``), then write outputs.

    Returns the ``ParameterServer`` holding the final model and logs.
    """
    ps = ParameterServer.from_config(cfg, max_iters)
    runner = ServerRunner(ps, host, port).start()
    log.info("parameter server listening on %s:%d", runner.host, runner.port)
    if on_listen is not None:
        on_listen(runner.host, runner.port)
    runner.wait(max_seconds if max_seconds is not None else cfg.max_seconds)
    if checkpoint:
        nncore.save_checkpoint(checkpoint, ps.model)
    if metrics:
        ps.write_metrics(metrics)
    return ps
