"""Benchmark grid runner and metrics export.

Runs the training simulation across a loss-rate grid in two modes:

* ``loss_tolerant`` - gather uses Early Close at the configured percentage;
* ``reliable`` - identical protocol with every packet critical, percentage
  1.0, and no deadline (the in-library stand-in for a reliable transport).

Both modes of one grid point use the same channel seed, so the batch
synchronization time (BST) comparison sees identical network randomness.
Results export as CSV (one row per flow, plus a per-grid-point summary) or
JSONL with the same records.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .channel import ChannelConfig, SimulatedChannel
from .sync import SyncPlan, TrainingResult, run_training_sim

DEFAULT_LOSS_GRID = (0.0, 0.0001, 0.001, 0.005, 0.01)
MODES = ("loss_tolerant", "reliable")

_FLOW_FIELDS = [
    "loss_rate",
    "mode",
    "epoch",
    "batch",
    "direction",
    "worker",
    "fct",
    "received_fraction",
    "close_reason",
    "retransmissions",
    "losses_declared",
]

_SUMMARY_FIELDS = [
    "loss_rate",
    "mode",
    "batches",
    "mean_bst",
    "mean_gather_fct",
    "max_gather_fct",
    "mean_received_fraction",
    "total_retransmissions",
    "close_all_received",
    "close_early_closed",
    "close_deadline_forced",
    "throughput_proxy",
]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    n_workers: int = 8
    model_bytes: int = 8 * 2**20
    loss_grid: tuple = DEFAULT_LOSS_GRID
    batches: int = 2
    epochs: int = 1
    modes: tuple = MODES
    profile: str = "dcn"
    pct_threshold: float = 0.8
    seed: int = 0
    bandwidth: float = 1e9
    one_way_delay: float = 0.5e-3
    delay_jitter: float = 20e-6
    queue_capacity: int = 128

    def validate(self) -> None:
        if self.n_workers < 1:
            raise ConfigError("n_workers must be >= 1")
        if self.model_bytes < 4:
            raise ConfigError("model_bytes must be >= 4")
        if not self.loss_grid:
            raise ConfigError("loss_grid must not be empty")
        for rate in self.loss_grid:
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"loss rate {rate} outside [0, 1]")
        if self.batches < 1 or self.epochs < 1:
            raise ConfigError("batches and epochs must be >= 1")
        for mode in self.modes:
            if mode not in MODES:
                raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
        if not 0.0 < self.pct_threshold <= 1.0:
            raise ConfigError("pct_threshold must be in (0, 1]")

    def channel_config(self, loss_rate: float, grid_index: int) -> ChannelConfig:
        # One channel seed per grid point, shared by both modes (paired runs).
        return ChannelConfig(
            loss_rate=loss_rate,
            one_way_delay=self.one_way_delay,
            delay_jitter=self.delay_jitter,
            bandwidth=self.bandwidth,
            queue_capacity=self.queue_capacity,
            seed=self.seed * 1_000_003 + grid_index,
        )

    def plan(self, mode: str) -> SyncPlan:
        return SyncPlan(
            n_workers=self.n_workers,
            model_bytes=self.model_bytes,
            epochs=self.epochs,
            batches_per_epoch=self.batches,
            profile=self.profile,
            pct_threshold=self.pct_threshold,
            loss_tolerant=(mode == "loss_tolerant"),
        )


@dataclass
class RunResult:
    loss_rate: float
    mode: str
    result: TrainingResult


@dataclass
class MetricsReport:
    spec: ExperimentSpec
    runs: list[RunResult] = field(default_factory=list)

    def run(self, loss_rate: float, mode: str) -> RunResult:
        for r in self.runs:
            if r.loss_rate == loss_rate and r.mode == mode:
                return r
        raise KeyError((loss_rate, mode))

    def mean_bst(self, loss_rate: float, mode: str) -> float:
        return self.run(loss_rate, mode).result.mean_bst()

    def flow_rows(self):
        for r in self.runs:
            for f in r.result.flows:
                yield {
                    "loss_rate": _fmt(r.loss_rate),
                    "mode": r.mode,
                    "epoch": f.epoch,
                    "batch": f.batch,
                    "direction": f.direction,
                    "worker": f.worker,
                    "fct": _fmt(f.fct),
                    "received_fraction": _fmt(f.received_fraction),
                    "close_reason": f.close_reason,
                    "retransmissions": f.retransmissions,
                    "losses_declared": f.losses_declared,
                }

    def summary_rows(self):
        for r in self.runs:
            gather = [f for f in r.result.flows if f.direction == "gather"]
            reasons = Counter(f.close_reason for f in gather)
            mean_bst = r.result.mean_bst()
            yield {
                "loss_rate": _fmt(r.loss_rate),
                "mode": r.mode,
                "batches": len(r.result.batches),
                "mean_bst": _fmt(mean_bst),
                "mean_gather_fct": _fmt(sum(f.fct for f in gather) / len(gather)),
                "max_gather_fct": _fmt(max(f.fct for f in gather)),
                "mean_received_fraction": _fmt(
                    sum(f.received_fraction for f in gather) / len(gather)
                ),
                "total_retransmissions": sum(f.retransmissions for f in r.result.flows),
                "close_all_received": reasons.get("all_received", 0),
                "close_early_closed": reasons.get("early_closed", 0),
                "close_deadline_forced": reasons.get("deadline_forced", 0),
                "throughput_proxy": _fmt(
                    self.spec.model_bytes * self.spec.n_workers / mean_bst
                ),
            }


def _fmt(value: float) -> str:
    return format(value, ".9g")


def run_experiment(spec: ExperimentSpec) -> MetricsReport:
    """Execute the full (loss rate x mode) grid; deterministic given the
    spec's seed."""
    spec.validate()
    report = MetricsReport(spec)
    for i, loss_rate in enumerate(spec.loss_grid):
        for mode in spec.modes:
            channel = SimulatedChannel(spec.channel_config(loss_rate, i))
            result = run_training_sim(
                spec.plan(mode),
                channel,
                workload_seed=spec.seed,
                session_seed=spec.seed,
            )
            report.runs.append(RunResult(loss_rate, mode, result))
    return report


def export(report: MetricsReport, out_dir, formats=("csv",)) -> list[Path]:
    """Write flows + summary files; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for fmt in formats:
        if fmt == "csv":
            written.append(_write_csv(out / "flows.csv", _FLOW_FIELDS, report.flow_rows()))
            written.append(
                _write_csv(out / "summary.csv", _SUMMARY_FIELDS, report.summary_rows())
            )
        elif fmt == "jsonl":
            written.append(_write_jsonl(out / "flows.jsonl", report.flow_rows()))
            written.append(_write_jsonl(out / "summary.jsonl", report.summary_rows()))
        else:
            raise ConfigError(f"unknown export format {fmt!r}")
    return written


def _write_csv(path: Path, fields, rows) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def _write_jsonl(path: Path, rows) -> Path:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path
