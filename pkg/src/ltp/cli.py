"""Command-line benchmark runner (`ltp-bench`)."""

from __future__ import annotations

import argparse
import sys

from .bench import MODES, ConfigError, ExperimentSpec, export, run_experiment


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ltp-bench",
        description="Run the loss-tolerant vs reliable synchronization benchmark grid.",
    )
    p.add_argument("--workers", type=int, default=8, help="worker node count")
    p.add_argument("--model-bytes", type=int, default=8 * 2**20, help="gradient buffer size")
    p.add_argument(
        "--loss",
        type=float,
        action="append",
        default=None,
        help="loss rate grid point (repeatable); default 0, 0.01%%, 0.1%%, 0.5%%, 1%%",
    )
    p.add_argument("--batches", type=int, default=2)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument(
        "--mode",
        choices=list(MODES) + ["both"],
        default="both",
        help="which protocol mode(s) to run",
    )
    p.add_argument("--profile", choices=["dcn", "wan"], default="dcn")
    p.add_argument("--pct-threshold", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="ltp-bench-out", metavar="DIR")
    p.add_argument("--format", choices=["csv", "jsonl"], action="append", default=None)
    p.add_argument("--bandwidth", type=float, default=1e9, help="bottleneck bits/s")
    p.add_argument("--delay", type=float, default=0.5e-3, help="one-way delay seconds")
    p.add_argument("--queue-capacity", type=int, default=128)
    p.add_argument(
        "--real-udp",
        action="store_true",
        help="run a live loopback exchange over UDP sockets instead of the simulator",
    )
    p.add_argument("--config", metavar="FILE", help="flat key=value file mirroring the flags")
    return p


def _apply_config_file(args: argparse.Namespace, path: str) -> None:
    aliases = {k.replace("_", "-"): k for k in vars(args)}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip().replace("_", "-")
            if key not in aliases:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            attr = aliases[key]
            current = getattr(args, attr)
            if key == "loss":
                setattr(args, attr, [float(v) for v in value.split(",")])
            elif key == "format":
                setattr(args, attr, value.split(","))
            elif isinstance(current, bool):
                setattr(args, attr, value.strip().lower() in ("1", "true", "yes"))
            elif isinstance(current, int):
                setattr(args, attr, int(value))
            elif isinstance(current, float):
                setattr(args, attr, float(value))
            else:
                setattr(args, attr, value.strip())


def _run_real_udp(args: argparse.Namespace) -> int:
    from .realtime import run_loopback_round

    loss = (args.loss or [0.0])[0]
    result = run_loopback_round(
        n_workers=args.workers,
        n_elements=max(1, args.model_bytes // 4),
        loss_rate=loss,
        seed=args.seed,
    )
    print(
        f"live loopback round: {args.workers} workers, "
        f"{args.model_bytes} bytes, loss {loss:.4%}"
    )
    print(f"  gather time    {result.gather_time * 1e3:8.2f} ms")
    print(f"  broadcast time {result.broadcast_time * 1e3:8.2f} ms")
    print(f"  broadcast exact: {result.broadcast_exact}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            _apply_config_file(args, args.config)
        if args.real_udp:
            return _run_real_udp(args)
        spec = ExperimentSpec(
            n_workers=args.workers,
            model_bytes=args.model_bytes,
            loss_grid=tuple(args.loss) if args.loss else ExperimentSpec.loss_grid,
            batches=args.batches,
            epochs=args.epochs,
            modes=MODES if args.mode == "both" else (args.mode,),
            profile=args.profile,
            pct_threshold=args.pct_threshold,
            seed=args.seed,
            bandwidth=args.bandwidth,
            one_way_delay=args.delay,
            queue_capacity=args.queue_capacity,
        )
        report = run_experiment(spec)
        paths = export(report, args.out, formats=tuple(args.format or ["csv"]))
    except (ConfigError, OSError) as exc:
        print(f"ltp-bench: error: {exc}", file=sys.stderr)
        return 2
    for row in report.summary_rows():
        print(
            f"loss={row['loss_rate']:<8} mode={row['mode']:<14} "
            f"mean_bst={row['mean_bst']}s frac={row['mean_received_fraction']}"
        )
    for path in paths:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
