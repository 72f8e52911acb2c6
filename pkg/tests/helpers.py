import hashlib

from ddq.config import RunConfig


def tiny_config(**kw) -> RunConfig:
    """A model small enough that a full worker iteration takes well under a millisecond."""
    base = dict(d=8, conv="4:2:2", hidden="8", warmup=40, replay_capacity=200, batch_size=4,
                target_sync=16, worker_target_sync=16, anneal_steps=200, max_iters=50)
    base.update(kw)
    return RunConfig(**base)


def digest(arr) -> str:
    return hashlib.sha256(arr.tobytes()).hexdigest()
