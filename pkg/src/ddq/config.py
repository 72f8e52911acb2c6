"""Run configuration, read from and written to ``key=value`` text files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from . import envs
from .dqn import Hyperparams
from .errors import ConfigError
from .nncore import LayerSpec, layer_shapes, param_count


def parse_conv(text: str) -> list[tuple[int, int, int]]:
    """``"16:4:2,32:3:1"`` -> ``[(16, 4, 2), (32, 3, 1)]`` as (filters, width, stride)."""
    layers = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        parts = item.split(":")
        if len(parts) not in (2, 3):
            raise ConfigError(f"conv layer {item!r} must be filters:width[:stride]")
        n, k, *s = (int(p) for p in parts)
        layers.append((n, k, s[0] if s else 1))
    return layers


@dataclass
class RunConfig:
    grid_size: int = 5
    d: int = envs.FRAME_WIDTH
    frames: int = envs.FRAME_COUNT
    conv: str = "16:4:2,32:3:1"
    hidden: str = "128"
    xi: float = 0.01

    gamma: float = 0.95
    alpha: float = 1e-3
    rms_eps: float = 1e-8
    batch_size: int = 32
    target_sync: int = 1000
    worker_target_sync: int = 16
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    anneal_steps: int = 50_000

    replay_capacity: int = 50_000
    warmup: int = 1000
    max_iters: int = 20_000
    max_seconds: float = 0.0
    seed: int = 0

    eval_eps: float = 0.05
    eval_episodes: int = 100
    reward_window: int = 100

    def __post_init__(self):
        self.hyperparams()
        layer_shapes(self.specs(), self.input_shape)
        if self.warmup > self.replay_capacity:
            raise ConfigError("warmup size exceeds replay capacity")
        if self.warmup < 1:
            raise ConfigError("warmup must store at least one experience")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.frames, self.d, self.d)

    @property
    def n_actions(self) -> int:
        return envs.N_ACTIONS

    def specs(self) -> list[LayerSpec]:
        out = []
        for n, k, s in parse_conv(self.conv):
            out += [LayerSpec.conv(n, k, s), LayerSpec.relu()]
        for h in filter(None, (t.strip() for t in self.hidden.split(","))):
            out += [LayerSpec.fc(int(h)), LayerSpec.relu()]
        out.append(LayerSpec.fc(self.n_actions))
        return out

    def param_count(self) -> int:
        return param_count(self.specs(), self.d, self.frames)

    def hyperparams(self) -> Hyperparams:
        try:
            return Hyperparams(
                gamma=self.gamma, alpha=self.alpha, epsilon_start=self.epsilon_start,
                epsilon_end=self.epsilon_end, anneal_steps=self.anneal_steps,
                batch_size=self.batch_size, target_sync=self.target_sync,
                worker_target_sync=self.worker_target_sync, rms_eps=self.rms_eps,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (p.strip() for p in line.partition("="))
            if not sep:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _cast(types[key], value, key)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


def _cast(type_name, value: str, key: str):
    try:
        if type_name in (int, "int"):
            return int(value)
        if type_name in (float, "float"):
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r}") from exc
