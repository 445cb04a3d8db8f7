"""Parameter-server synchronization over LTP.

One batch is two phases on the shared channel: gather (every worker sends
its gradient buffer to the PS, loss-tolerant) and broadcast (the PS sends
the aggregate back, fully reliable).  Missing gather segments become zeros
in the aggregate, so transport loss behaves like threshold-controlled
random sparsification of the gradient vector.

The whole exchange runs on the simulated channel's virtual clock: senders
and receivers are cooperatively scheduled actors, and the driver advances
time to the next packet delivery or protocol timer.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import numpy as np

from .channel import SimulatedChannel
from .congestion import DEFAULT_BTLBW_BPS, DEFAULT_RTPROP_S, CongestionState
from .receiver import (
    CloseReason,
    CloseRecord,
    FlowParams,
    LtThresholdState,
    ReceiverEndpoint,
    init_lt_threshold,
)
from .sender import FlowSendState, Idle, Paced, critical_seq_ids, segment_length
from .wire import Packet, PacketType, decode_packet, encode_packet

PROFILE_C = {"dcn": 30e-3, "wan": 100e-3}

PS_ADDR = "ps"

#: Bound on one phase's virtual duration before the round is abandoned.
PHASE_GUARD_DEADLINES = 10.0
PHASE_GUARD_FLOOR_S = 120.0


class WorkerUnreachable(RuntimeError):
    pass


@dataclass
class SyncPlan:
    n_workers: int = 8
    model_bytes: int = 8 * 2**20
    element_size: int = 4
    epochs: int = 1
    batches_per_epoch: int = 1
    profile: str = "dcn"
    pct_threshold: float = 0.8
    critical_head_bytes: int = 64
    critical_tail_bytes: int = 64
    loss_tolerant: bool = True

    def __post_init__(self) -> None:
        if self.profile not in PROFILE_C:
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.n_workers < 1:
            raise ValueError("need at least one worker")
        if self.model_bytes < self.element_size:
            raise ValueError("model smaller than one element")
        if not 0.0 < self.pct_threshold <= 1.0:
            raise ValueError("pct_threshold must be in (0, 1]")

    @property
    def c_constant(self) -> float:
        return PROFILE_C[self.profile]

    @property
    def seg_len(self) -> int:
        return segment_length(self.element_size)

    def critical_ranges(self, total_bytes: int) -> list[tuple[int, int]]:
        head = min(self.critical_head_bytes, total_bytes)
        tail = min(self.critical_tail_bytes, total_bytes)
        return [(0, head), (total_bytes - tail, total_bytes)]


@dataclass
class FlowRecord:
    epoch: int
    batch: int
    direction: str  # "gather" | "broadcast"
    worker: int
    fct: float
    received_fraction: float
    close_reason: str
    retransmissions: int
    losses_declared: int
    missing_seqs: tuple = ()


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    gather_time: float
    broadcast_time: float
    max_gather_fct: float
    max_broadcast_fct: float

    @property
    def bst(self) -> float:
        return self.max_gather_fct + self.max_broadcast_fct


@dataclass
class TrainingResult:
    flows: list[FlowRecord] = field(default_factory=list)
    batches: list[BatchRecord] = field(default_factory=list)

    def mean_bst(self) -> float:
        return sum(b.bst for b in self.batches) / len(self.batches)


def gradient_workload(plan: SyncPlan, seed: int):
    """Seeded gradient generator; one float32 buffer per (epoch, batch,
    worker), independent of call order."""
    n_elements = plan.model_bytes // plan.element_size

    def make(epoch: int, batch: int, worker: int) -> np.ndarray:
        rng = np.random.default_rng((seed, epoch, batch, worker))
        return rng.standard_normal(n_elements, dtype=np.float32)

    return make


def aggregate_buffers(buffers: list[np.ndarray]) -> np.ndarray:
    """Element-wise mean in fixed worker order; missing gradients are
    already zeros in their buffers, and still divide by n."""
    stacked = np.stack([np.asarray(b, dtype=np.float32) for b in buffers])
    return (stacked.astype(np.float64).sum(axis=0) / len(buffers)).astype(np.float32)


def missing_element_ranges(missing_seqs, seg_len: int, total_bytes: int, element_size: int):
    """Element-index ranges zero-filled for the given missing segments."""
    ranges = []
    for seq in missing_seqs:
        start = seq * seg_len
        stop = min(start + seg_len, total_bytes)
        ranges.append((start // element_size, stop // element_size))
    return ranges


@dataclass
class _SenderBinding:
    addr: object
    dest: object
    flow: FlowSendState
    #: Next time this flow needs polling; incoming events reset it to 0.
    wake: float = 0.0


def _run_phase(
    channel: SimulatedChannel,
    senders: list[_SenderBinding],
    receivers: list[tuple[object, ReceiverEndpoint]],
    flow_keys: list[tuple],
    *,
    guard: float,
) -> float:
    """Drive one phase to quiescence; returns the finish time.

    Quiescence: every sender flow complete and every expected receiver
    flow closed.  Raises WorkerUnreachable when the guard duration passes
    without that happening.
    """
    t0 = channel.now
    send_index: dict[tuple, _SenderBinding] = {
        (b.addr, b.dest, b.flow.flow_id): b for b in senders
    }
    rx_index = dict(receivers)
    # Per-endpoint wake cache; a delivered datagram makes it stale because
    # arrivals can complete a flow (immediate close) or create one.
    rx_wake: dict[object, float] = {addr: 0.0 for addr, _ in receivers}

    while True:
        wake = math.inf
        for b in senders:
            flow = b.flow
            if flow.complete:
                continue
            if channel.now < b.wake:
                wake = min(wake, b.wake)
                continue
            while True:
                r = flow.next_packet(channel.now)
                if isinstance(r, Packet):
                    channel.send(encode_packet(r), b.addr, b.dest)
                    continue
                if isinstance(r, Paced):
                    b.wake = channel.now + r.delay
                    wake = min(wake, b.wake)
                elif r.wake_after is not None:
                    b.wake = channel.now + r.wake_after
                    wake = min(wake, b.wake)
                else:
                    b.wake = math.inf
                break
        for addr, endpoint in receivers:
            if channel.now < rx_wake[addr]:
                wake = min(wake, rx_wake[addr])
                continue
            for datagram, dest in endpoint.poll(channel.now):
                channel.send(datagram, addr, dest)
            w = endpoint.next_wake(channel.now)
            rx_wake[addr] = math.inf if w is None else w
            if w is not None:
                wake = min(wake, w)

        if all(b.flow.complete for b in senders) and all(
            key in rx_index[addr].flows and rx_index[addr].flows[key].closed
            for addr, key in flow_keys
        ):
            for addr, key in flow_keys:
                rx_index[addr].cancel_stops([key])
            return channel.now

        t = channel.next_delivery_time()
        if t is not None:
            wake = min(wake, t)
        if wake == math.inf:
            raise RuntimeError("simulation stalled with incomplete flows")
        if wake - t0 > guard:
            raise WorkerUnreachable(f"phase made no progress within {guard:.3f}s")
        for d in channel.advance_clock(max(wake, channel.now)):
            _dispatch(d, send_index, rx_index, channel)
            if d.dest in rx_wake:
                rx_wake[d.dest] = 0.0


def _dispatch(delivery, send_index, rx_index, channel) -> None:
    packet = decode_packet(delivery.datagram)
    h = packet.header
    binding = send_index.get((delivery.dest, delivery.src, h.flow_id))
    if binding is not None and h.ptype in (PacketType.ACK, PacketType.END):
        if h.ptype == PacketType.ACK:
            try:
                binding.flow.on_ack(h.seq_id, channel.now)
            except KeyError:
                pass  # corrupted or stale ACK: log-and-drop semantics
        else:
            binding.flow.on_stop(channel.now)
        binding.wake = 0.0
        return
    endpoint = rx_index.get(delivery.dest)
    if endpoint is None:
        return
    for datagram, dest in endpoint.on_datagram(packet, delivery.src, channel.now):
        channel.send(datagram, delivery.dest, dest)


class SyncSession:
    """Parameter-server state that persists across batches of one run."""

    def __init__(
        self,
        plan: SyncPlan,
        channel: SimulatedChannel,
        *,
        seed: int = 0,
        event_log: list | None = None,
        collect_missing: bool = False,
    ) -> None:
        self.plan = plan
        self.channel = channel
        self.rng = random.Random(seed)
        self.event_log = event_log
        self.collect_missing = collect_missing
        self.lt_state = LtThresholdState(plan.c_constant)
        self.ps_rx = ReceiverEndpoint(event_log=event_log)
        self.worker_rx = {w: ReceiverEndpoint() for w in range(plan.n_workers)}
        self._flow_counter = 0

    def _worker_addr(self, w: int) -> str:
        return f"w{w}"

    def _next_flow_id(self) -> int:
        fid = self._flow_counter & 0xFFFF
        self._flow_counter += 1
        return fid

    def _make_cc(self, link: tuple) -> CongestionState:
        # Every flow starts from the configured line rate, not from the
        # previous flow's estimates: the in-flight cap is one BDP, so a flow
        # whose estimate decayed under contention has no way to probe back
        # up, and carrying estimates over would compound that decay from
        # batch to batch.  Gather flows fan in to the server's ingress, so
        # their seed is the fair share of the line rate; seeding at the
        # full rate would burst n_workers windows into one queue.
        rate = self.channel.config.bandwidth
        if link[1] == PS_ADDR:
            rate /= self.plan.n_workers
        return CongestionState(btlbw_init=rate)

    def start_epoch(self) -> None:
        """First batch of an epoch: reset full-completion minima and apply
        the ECT-based initial threshold on every link."""
        self.lt_state.start_epoch()
        for w in range(self.plan.n_workers):
            rtprop, btlbw = self.ps_rx.peer_echo.get(self._worker_addr(w), (0.0, 0.0))
            rtprop = rtprop or DEFAULT_RTPROP_S
            btlbw = btlbw or DEFAULT_BTLBW_BPS
            # All gather flows share the PS ingress link, so the expected
            # completion of each link covers the whole batch volume.
            self.lt_state.set_init(
                self._worker_addr(w),
                init_lt_threshold(
                    rtprop, self.plan.model_bytes * self.plan.n_workers, btlbw
                ),
            )

    # -- rounds -------------------------------------------------------------

    def gather_round(
        self, buffers: list[np.ndarray], epoch: int, batch: int
    ) -> tuple[np.ndarray, list[FlowRecord]]:
        plan = self.plan
        if len(buffers) != plan.n_workers:
            raise ValueError("one buffer per worker required")
        fid = self._next_flow_id()
        deadline = self.lt_state.deadline() if plan.loss_tolerant else math.inf
        senders: list[_SenderBinding] = []
        flow_keys: list[tuple] = []
        for w, buf in enumerate(buffers):
            addr = self._worker_addr(w)
            data = np.asarray(buf, dtype="<f4").tobytes()
            ranges = plan.critical_ranges(len(data))
            crit = (
                frozenset(range(-(-len(data) // plan.seg_len)))
                if not plan.loss_tolerant
                else frozenset(critical_seq_ids(len(data), plan.seg_len, ranges))
            )
            self.ps_rx.expect_flow(
                addr,
                fid,
                FlowParams(
                    seg_len=plan.seg_len,
                    lt_threshold=self.lt_state.lt[addr] if plan.loss_tolerant else math.inf,
                    deadline=deadline,
                    pct_threshold=plan.pct_threshold if plan.loss_tolerant else 1.0,
                    critical_seqs=crit,
                ),
            )
            flow = FlowSendState.segment_buffer(
                data,
                plan.element_size,
                ranges,
                flow_id=fid,
                cc=self._make_cc((addr, PS_ADDR)),
                rng=random.Random(self.rng.getrandbits(64)),
                all_critical=not plan.loss_tolerant,
                event_log=self.event_log,
            )
            senders.append(_SenderBinding(addr, PS_ADDR, flow))
            flow_keys.append((PS_ADDR, (addr, fid)))

        guard = max(PHASE_GUARD_FLOOR_S, PHASE_GUARD_DEADLINES * (0 if deadline == math.inf else deadline))
        _run_phase(self.channel, senders, [(PS_ADDR, self.ps_rx)], flow_keys, guard=guard)

        records: list[FlowRecord] = []
        parts: list[np.ndarray] = []
        for w, binding in enumerate(senders):
            addr = self._worker_addr(w)
            state = self.ps_rx.flows[(addr, fid)]
            parts.append(np.frombuffer(state.reassemble(), dtype="<f4"))
            if state.close_reason == CloseReason.ALL_RECEIVED:
                self.lt_state.observe_full_completion(
                    addr, state.close_time - state.start_time
                )
            records.append(
                FlowRecord(
                    epoch=epoch,
                    batch=batch,
                    direction="gather",
                    worker=w,
                    fct=state.close_time - state.start_time,
                    received_fraction=state.received_fraction,
                    close_reason=state.close_reason.value,
                    retransmissions=binding.flow.retransmission_count,
                    losses_declared=binding.flow.loss_declared_count,
                    missing_seqs=tuple(state.missing_seqs()) if self.collect_missing else (),
                )
            )
        return aggregate_buffers(parts), records

    def broadcast_round(
        self, aggregate: np.ndarray, epoch: int, batch: int
    ) -> list[FlowRecord]:
        plan = self.plan
        fid = self._next_flow_id()
        data = np.asarray(aggregate, dtype="<f4").tobytes()
        n_segments = -(-len(data) // plan.seg_len)
        senders: list[_SenderBinding] = []
        receivers: list[tuple[object, ReceiverEndpoint]] = []
        flow_keys: list[tuple] = []
        for w in range(plan.n_workers):
            addr = self._worker_addr(w)
            rx = self.worker_rx[w]
            rx.expect_flow(
                PS_ADDR,
                fid,
                FlowParams(
                    seg_len=plan.seg_len,
                    pct_threshold=1.0,
                    critical_seqs=frozenset(range(n_segments)),
                ),
            )
            flow = FlowSendState.segment_buffer(
                data,
                plan.element_size,
                flow_id=fid,
                cc=self._make_cc((PS_ADDR, addr)),
                rng=random.Random(self.rng.getrandbits(64)),
                all_critical=True,
                event_log=self.event_log,
            )
            senders.append(_SenderBinding(PS_ADDR, addr, flow))
            receivers.append((addr, rx))
            flow_keys.append((addr, (PS_ADDR, fid)))

        _run_phase(self.channel, senders, receivers, flow_keys, guard=PHASE_GUARD_FLOOR_S)

        records: list[FlowRecord] = []
        for w, binding in enumerate(senders):
            addr = self._worker_addr(w)
            state = self.worker_rx[w].flows[(PS_ADDR, fid)]
            records.append(
                FlowRecord(
                    epoch=epoch,
                    batch=batch,
                    direction="broadcast",
                    worker=w,
                    fct=state.close_time - state.start_time,
                    received_fraction=state.received_fraction,
                    close_reason=state.close_reason.value,
                    retransmissions=binding.flow.retransmission_count,
                    losses_declared=binding.flow.loss_declared_count,
                )
            )
        return records

    def delivered_buffer(self, worker: int, batch_fid: int) -> bytes:
        state = self.worker_rx[worker].flows[(PS_ADDR, batch_fid)]
        return state.reassemble()


def run_training_sim(
    plan: SyncPlan,
    channel: SimulatedChannel,
    *,
    workload_seed: int = 0,
    session_seed: int = 0,
    event_log: list | None = None,
    collect_missing: bool = False,
) -> TrainingResult:
    """Run the full epoch/batch grid and collect per-flow and per-batch
    metrics."""
    session = SyncSession(
        plan,
        channel,
        seed=session_seed,
        event_log=event_log,
        collect_missing=collect_missing,
    )
    workload = gradient_workload(plan, workload_seed)
    result = TrainingResult()
    for epoch in range(plan.epochs):
        session.start_epoch()
        for batch in range(plan.batches_per_epoch):
            batch_start = channel.now
            buffers = [workload(epoch, batch, w) for w in range(plan.n_workers)]
            aggregate, gather_records = session.gather_round(buffers, epoch, batch)
            gather_end = channel.now
            broadcast_records = session.broadcast_round(aggregate, epoch, batch)
            result.flows.extend(gather_records)
            result.flows.extend(broadcast_records)
            result.batches.append(
                BatchRecord(
                    epoch=epoch,
                    batch=batch,
                    gather_time=gather_end - batch_start,
                    broadcast_time=channel.now - gather_end,
                    max_gather_fct=max(r.fct for r in gather_records),
                    max_broadcast_fct=max(r.fct for r in broadcast_records),
                )
            )
    return result
