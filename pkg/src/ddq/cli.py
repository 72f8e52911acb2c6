"""Command-line entry point: ``ddq {serial,server,worker,eval,bench,launch-local}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness, nncore
from .config import RunConfig
from .server import run_server
from .worker import run_worker


def _addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def _config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "max_iters", None) is not None:
        overrides["max_iters"] = args.max_iters
    if args.config:
        return RunConfig.load(args.config, **overrides)
    return RunConfig(**overrides)


def cmd_serial(args):
    cfg = _config(args)
    model, curve, _ = harness.train_serial(cfg, seed=args.seed, curve_path=args.curve,
                                           episodes_path=args.episodes, progress_every=1000)
    if args.checkpoint:
        nncore.save_checkpoint(args.checkpoint, model)
    last = curve.points[-1][2] if curve.points else float("nan")
    print(f"updates={model.generation} trailing_mean_reward={last:.3f}")


def cmd_server(args):
    cfg = _config(args)
    host, port = _addr(args.listen)

    def announce(h, p):
        if args.port_file:
            Path(args.port_file).write_text(f"{h}:{p}\n")

    ps = run_server(cfg, host, port, checkpoint=args.checkpoint, metrics=args.metrics,
                    max_seconds=args.max_seconds, on_listen=announce)
    print(f"server finished at generation {ps.generation}")


def cmd_worker(args):
    cfg = _config(args)
    host, port = _addr(args.server)
    w = run_worker(cfg, host, port, args.id, args.seed, args.metrics, args.episodes)
    print(f"worker {args.id} ran {w.iterations} iterations")


def cmd_eval(args):
    cfg = _config(args)
    model = nncore.load_checkpoint(args.checkpoint) if args.checkpoint else harness.init_model(cfg)
    mean, std = harness.evaluate(model, cfg, args.episodes, args.eps, seed=args.seed)
    print(f"episodes={args.episodes} mean_reward={mean:.4f} std={std:.4f}")


def cmd_bench(args):
    cfg = _config(args)
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = harness.bench_sizes(cfg, sizes, repeats=args.repeats)
    print("hidden  params    comms_us  gradient_us  latency_us  P=T/tau")
    for r in rows:
        print(f"{r.hidden:6d} {r.params:8d} {r.comms_us:10.0f} {r.gradient_us:12.0f} "
              f"{r.latency_us:11.0f} {r.saturation_workers:8.1f}")
    if args.out:
        harness.write_bench(args.out, rows)
    if args.workers:
        counts = [int(k) for k in args.workers.split(",")]
        for k, rate in harness.throughput_vs_workers(cfg, counts, args.seconds).items():
            print(f"workers={k} updates_per_s={rate:.1f}")


def cmd_launch(args):
    result = harness.launch_local(args.config, args.workers, args.out, args.max_iters,
                                  args.max_seconds, seed=args.seed)
    print(result)
    return 0 if result["server"] == 0 and not any(result["workers"]) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddq", description="Distributed deep Q-learning on Snake")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serial", help="single-process trainer")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--max-iters", type=int)
    s.add_argument("--checkpoint")
    s.add_argument("--curve", help="reward curve CSV")
    s.add_argument("--episodes", help="episode log CSV")
    s.set_defaults(func=cmd_serial)

    s = sub.add_parser("server", help="parameter server")
    s.add_argument("--listen", default="127.0.0.1:5555")
    s.add_argument("--config")
    s.add_argument("--max-iters", type=int)
    s.add_argument("--max-seconds", type=float)
    s.add_argument("--checkpoint")
    s.add_argument("--metrics")
    s.add_argument("--port-file", help="write the bound host:port here once listening")
    s.set_defaults(func=cmd_server)

    s = sub.add_parser("worker", help="gradient worker")
    s.add_argument("--server", required=True)
    s.add_argument("--id", type=int, required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--metrics", help="timing CSV")
    s.add_argument("--episodes", help="episode log CSV")
    s.set_defaults(func=cmd_worker)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--episodes", type=int, default=100)
    s.add_argument("--eps", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="comms / gradient / latency timing sweep")
    s.add_argument("--config")
    s.add_argument("--sizes", default="32,64,128,256", help="hidden layer widths to sweep")
    s.add_argument("--repeats", type=int, default=20)
    s.add_argument("--workers", default="", help="e.g. 1,2 to also measure updates/sec")
    s.add_argument("--seconds", type=float, default=10.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("launch-local", help="server plus K worker processes on this machine")
    s.add_argument("--config", required=True)
    s.add_argument("--workers", type=int, default=2)
    s.add_argument("--out", default="run")
    s.add_argument("--max-iters", type=int)
    s.add_argument("--max-seconds", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_launch)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
