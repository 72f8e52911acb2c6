import socket
import threading

import numpy as np
import pytest

from ddq import nncore
from ddq.config import RunConfig
from ddq.dqn import TargetModel, targets_from_arrays
from ddq.nncore import ModelParams
from ddq.protocol import ModelReply
from ddq.replay import stack_batch
from ddq.server import ParameterServer, ServerRunner
from ddq.worker import Actor, ServerConnection, Worker, actor_rng, read_timings, run_worker, write_timings

from helpers import tiny_config


class ScriptedConnection:
    """Stands in for the server: hands out a fixed list of models and records pushes."""

    def __init__(self, models):
        self.models = list(models)
        self.pushes = []

    def fetch(self):
        if not self.models:
            return None
        m = self.models.pop(0)
        return ModelReply(m.generation, m.flat.copy())

    def push(self, grad, base_generation):
        self.pushes.append((grad.copy(), base_generation))
        return True

    def close(self):
        pass


def model_for(cfg, seed, generation=0):
    m = nncore.init_model(cfg.specs(), cfg.input_shape, np.random.default_rng(seed), 0.1)
    m.generation = generation
    return m


def test_warmup_default_shapes_and_size():
    cfg = RunConfig(warmup=1000)
    actor = Actor(cfg, actor_rng(0))
    actor.warmup(1000)
    assert len(actor.replay) >= 1000
    for e in actor.replay.contents()[::97]:
        assert e.phi.shape == e.phi_next.shape == (4, 32, 32)
    assert actor.episodes == []


def test_warmup_reproducible():
    cfg = tiny_config(warmup=300, replay_capacity=300)
    a, b = Actor(cfg, actor_rng(5, 1)), Actor(cfg, actor_rng(5, 1))
    a.warmup(300)
    b.warmup(300)
    for x, y in zip(a.replay.contents(), b.replay.contents()):
        assert x.action == y.action and x.reward == y.reward and x.terminal == y.terminal
        assert x.phi.tobytes() == y.phi.tobytes()


def test_warmup_actions_uniform():
    cfg = tiny_config(warmup=4000, replay_capacity=4000)
    a = Actor(cfg, actor_rng(2))
    a.warmup(4000)
    counts = np.bincount([e.action for e in a.replay.contents()], minlength=4)
    assert counts.min() > 900


def test_action_comes_from_fetched_model():
    cfg = tiny_config(epsilon_start=0.0, epsilon_end=0.0)
    models = []
    for g, favourite in enumerate([2, 3, 0]):
        m = ModelParams(nncore.layer_shapes(cfg.specs(), cfg.input_shape)[0], generation=g)
        m.layers[-1][1][favourite] = 5.0
        models.append(m)
    w = Worker(cfg, 0, actor_rng(0))
    w.warmup()
    conn = ScriptedConnection(models)
    actions = []
    while w.iteration(conn):
        actions.append(w.actor.replay.contents()[-1].action)
    assert actions == [2, 3, 0]
    assert [b for _, b in conn.pushes] == [0, 1, 2]


def test_pushed_gradient_is_backward_output():
    cfg = tiny_config()
    live = model_for(cfg, 1, generation=7)
    w = Worker(cfg, 0, actor_rng(3))
    w.warmup()
    conn = ScriptedConnection([live])
    assert w.iteration(conn)
    assert w.last_base_generation == 7
    grad, base = conn.pushes[0]
    assert base == 7

    # replay the same computation by hand with an identically seeded actor
    twin = Actor(cfg, actor_rng(3))
    twin.warmup(cfg.warmup)
    twin.env_step(twin.choose(live))
    batch = twin.replay.sample_uniform(cfg.batch_size, twin.rng)
    phi, actions, rewards, phi_next, terminal = stack_batch(batch)
    y = targets_from_arrays(rewards, phi_next, terminal, TargetModel.from_live(live), cfg.gamma, cfg.specs())
    _, expected = nncore.backward(live, cfg.specs(), phi, actions, y)
    assert grad.tobytes() == expected.flat.tobytes()


def test_target_perturbation_changes_gradients_not_actions():
    cfg = tiny_config(worker_target_sync=100)
    models = [model_for(cfg, 10 + i, generation=i) for i in range(6)]

    def run(perturb):
        w = Worker(cfg, 0, actor_rng(8))
        w.warmup()
        conn = ScriptedConnection(models)
        w.iteration(conn)
        if perturb:
            w.target.params.flat += np.random.default_rng(0).normal(0, 0.5, w.target.params.size)
        while w.iteration(conn):
            pass
        trace = [e.action for e in w.actor.replay.contents()[-6:]]
        return trace, [g for g, _ in conn.pushes]

    trace_a, grads_a = run(False)
    trace_b, grads_b = run(True)
    assert trace_a == trace_b
    assert grads_a[0].tobytes() == grads_b[0].tobytes()
    assert all(a.tobytes() != b.tobytes() for a, b in zip(grads_a[1:], grads_b[1:]))


def test_target_tracks_fetch_count():
    cfg = tiny_config(worker_target_sync=2)
    models = [model_for(cfg, i, generation=i) for i in range(5)]
    w = Worker(cfg, 0, actor_rng(0))
    w.warmup()
    conn = ScriptedConnection(models)
    synced = []
    while w.iteration(conn):
        synced.append(w.target.generation_synced)
    assert synced == [0, 0, 2, 2, 4]
    assert all(s <= g for s, g in zip(synced, range(5)))


def test_lockstep_iteration_increments_server():
    cfg = tiny_config()
    ps = ParameterServer.from_config(cfg, 100)
    w = Worker(cfg, 0, actor_rng(0))
    w.warmup()
    with ServerRunner(ps) as runner:
        conn = ServerConnection.connect(runner.host, runner.port, 0, ps.model.size)
        for n in range(1, 4):
            w.iteration(conn)
            conn.fetch()  # the push is handled before this reply is sent
            assert ps.generation == n
        conn.close()


def test_run_worker_until_shutdown(tmp_path):
    cfg = tiny_config()
    ps = ParameterServer.from_config(cfg, 100)
    with ServerRunner(ps) as runner:
        t = threading.Thread(target=runner.wait, daemon=True)
        t.start()
        w = run_worker(cfg, runner.host, runner.port, 0, seed=1, metrics_path=tmp_path / "t.csv",
                       episodes_path=tmp_path / "e.csv")
        t.join(10)
    assert ps.generation == 100
    assert w.iterations >= 100
    rows = read_timings(tmp_path / "t.csv")
    for k in range(w.iterations):
        assert sorted(e for i, e, _ in rows if i == k) == ["comms", "gradient"]
    assert (tmp_path / "e.csv").exists()


def test_timing_csv_roundtrip(tmp_path):
    rows = [(0, "comms", 12.5), (0, "gradient", 3400.25), (1, "comms", 0.1)]
    write_timings(tmp_path / "t.csv", rows)
    assert read_timings(tmp_path / "t.csv") == rows


def test_workers_have_independent_replays():
    cfg = tiny_config(warmup=200)
    a, b = Worker(cfg, 0, actor_rng(1, 0)), Worker(cfg, 1, actor_rng(2, 1))
    a.warmup()
    b.warmup()
    ids_a = {id(e) for e in a.actor.replay.contents()}
    assert ids_a.isdisjoint(id(e) for e in b.actor.replay.contents())
    assert [e.action for e in a.actor.replay.contents()] != [e.action for e in b.actor.replay.contents()]


def test_connect_gives_up():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    with pytest.raises(ConnectionError):
        ServerConnection.connect("127.0.0.1", port, 0, 10, attempts=2, backoff=0.01)
