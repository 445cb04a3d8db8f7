"""Live UDP transport: the same sender/receiver state machines as the
simulator, driven by real sockets, `selectors`, and the monotonic clock.

A :class:`LiveNode` owns one datagram socket and multiplexes any number of
outgoing flows and incoming reassemblies over it.  Incoming flows are
announced by flow id alone (:meth:`LiveNode.expect_any`), since a peer's
ephemeral port is unknown until its registration arrives.

``loss_rate`` injects seeded Bernoulli drops at the socket boundary so
lossy-network behavior can be exercised over loopback, where the OS never
loses anything.
"""

from __future__ import annotations

import random
import selectors
import socket
import time
from dataclasses import dataclass

from .receiver import FlowParams, ReceiverEndpoint
from .sender import FlowSendState, Idle, Paced, segment_length
from .wire import (
    MAX_DATAGRAM_BYTES,
    MalformedHeader,
    Packet,
    PacketType,
    decode_packet,
    encode_packet,
)

#: Upper bound on one select() sleep, so guard deadlines stay responsive.
MAX_POLL_S = 50e-3

#: Wall-clock bound on one blocking call before the peer is declared gone.
DEFAULT_GUARD_S = 30.0

#: After a blocking receive completes, keep answering duplicate End packets
#: for this long so the peer's final handshake can survive injected loss.
DEFAULT_LINGER_S = 0.25


class PeerUnreachable(RuntimeError):
    pass


class _AnyPeerReceiver(ReceiverEndpoint):
    """Receiver endpoint that can expect a flow id from a yet-unknown peer."""

    def __init__(self, **kw) -> None:
        super().__init__(**kw)
        self._any: dict[int, FlowParams] = {}

    def expect_any(self, flow_id: int, params: FlowParams) -> None:
        self._any[flow_id] = params

    def on_datagram(self, packet, peer, now):
        h = packet.header
        key = (peer, h.flow_id)
        if key not in self.expected and h.flow_id in self._any:
            self.expect_flow(peer, h.flow_id, self._any[h.flow_id])
        return super().on_datagram(packet, peer, now)


@dataclass
class _Binding:
    flow: FlowSendState
    dest: tuple
    wake: float = 0.0


@dataclass
class FlowSpec:
    """One outgoing flow for :meth:`LiveNode.send_flows`."""

    data: bytes
    dest: tuple
    flow_id: int
    element_size: int = 4
    critical_ranges: tuple = ()
    all_critical: bool = False


@dataclass
class ReceivedFlow:
    peer: tuple
    flow_id: int
    data: bytes
    received_fraction: float
    close_reason: str
    missing_seqs: tuple = ()


class LiveNode:
    """One UDP endpoint: a bound socket plus LTP send/receive state."""

    def __init__(
        self,
        bind: tuple = ("127.0.0.1", 0),
        *,
        loss_rate: float = 0.0,
        seed: int = 0,
    ) -> None:
        if not 0.0 <= loss_rate <= 1.0:
            raise ValueError("loss_rate must be in [0, 1]")
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(bind)
        self.sock.setblocking(False)
        self.address = self.sock.getsockname()
        self.loss_rate = loss_rate
        self._rng = random.Random(seed)
        self.rx = _AnyPeerReceiver()
        self._bindings: list[_Binding] = []
        self._sel = selectors.DefaultSelector()
        self._sel.register(self.sock, selectors.EVENT_READ)
        self.sent = 0
        self.injected_drops = 0

    def close(self) -> None:
        self._sel.unregister(self.sock)
        self.sock.close()

    def expect_any(self, flow_id: int, params: FlowParams) -> None:
        self.rx.expect_any(flow_id, params)

    # -- plumbing -----------------------------------------------------------

    def _emit(self, datagram: bytes, dest: tuple) -> None:
        self.sent += 1
        if self.loss_rate > 0 and self._rng.random() < self.loss_rate:
            self.injected_drops += 1
            return
        self.sock.sendto(datagram, dest)

    def _pump(self, now: float) -> float:
        """One scheduling pass; returns the next wake instant (may be inf)."""
        wake = float("inf")
        for b in self._bindings:
            flow = b.flow
            if flow.complete:
                continue
            if now < b.wake:
                wake = min(wake, b.wake)
                continue
            while True:
                r = flow.next_packet(now)
                if isinstance(r, Packet):
                    self._emit(encode_packet(r), b.dest)
                    continue
                if isinstance(r, Paced):
                    b.wake = now + r.delay
                    wake = min(wake, b.wake)
                elif isinstance(r, Idle) and r.wake_after is not None:
                    b.wake = now + r.wake_after
                    wake = min(wake, b.wake)
                else:
                    b.wake = float("inf")
                break
        for datagram, dest in self.rx.poll(now):
            self._emit(datagram, dest)
        w = self.rx.next_wake(now)
        if w is not None:
            wake = min(wake, w)
        return wake

    def _drain_socket(self, now: float) -> bool:
        """Read every waiting datagram; returns True when any arrived."""
        got = False
        while True:
            try:
                raw, peer = self.sock.recvfrom(MAX_DATAGRAM_BYTES)
            except BlockingIOError:
                break
            got = True
            try:
                packet = decode_packet(raw)
            except MalformedHeader:
                continue
            h = packet.header
            if h.ptype in (PacketType.ACK, PacketType.END):
                binding = self._find_binding(peer, h.flow_id)
                if binding is not None:
                    if h.ptype == PacketType.ACK:
                        try:
                            binding.flow.on_ack(h.seq_id, now)
                        except KeyError:
                            pass
                        binding.wake = 0.0
                        continue
                    if not binding.flow.complete:
                        binding.flow.on_stop(now)
                        binding.wake = 0.0
                        continue
            for datagram, dest in self.rx.on_datagram(packet, peer, now):
                self._emit(datagram, dest)
        return got

    def _find_binding(self, peer: tuple, flow_id: int) -> _Binding | None:
        for b in self._bindings:
            if b.dest == peer and b.flow.flow_id == flow_id:
                return b
        return None

    def _step(self, guard_end: float) -> None:
        now = time.monotonic()
        if now > guard_end:
            raise PeerUnreachable("no progress within the guard interval")
        wake = self._pump(now)
        timeout = min(max(0.0, wake - now), MAX_POLL_S)
        if self._sel.select(timeout):
            self._drain_socket(time.monotonic())

    # -- blocking operations ------------------------------------------------

    def send_flows(self, flows: list[FlowSpec], *, guard: float = DEFAULT_GUARD_S) -> None:
        """Send every flow to completion (all criticals ACKed or stopped)."""
        new = []
        for spec in flows:
            flow = FlowSendState.segment_buffer(
                spec.data,
                spec.element_size,
                list(spec.critical_ranges),
                flow_id=spec.flow_id,
                all_critical=spec.all_critical,
            )
            b = _Binding(flow, spec.dest)
            self._bindings.append(b)
            new.append(b)
        guard_end = time.monotonic() + guard
        while not all(b.flow.complete for b in new):
            self._step(guard_end)
        self._bindings = [b for b in self._bindings if not b.flow.complete]

    def collect(
        self,
        flow_id: int,
        n_flows: int,
        *,
        guard: float = DEFAULT_GUARD_S,
        linger: float = DEFAULT_LINGER_S,
    ) -> list[ReceivedFlow]:
        """Receive `n_flows` flows with this id through to close."""

        def done_keys():
            return [
                key
                for key, state in self.rx.flows.items()
                if key[1] == flow_id and state.closed
            ]

        guard_end = time.monotonic() + guard
        while len(done_keys()) < n_flows:
            self._step(guard_end)
        keys = done_keys()
        # Stay responsive a little longer: stop repeats flush out, and the
        # peer retries its End packet until a final ACK survives the path.
        linger_end = time.monotonic() + linger
        while time.monotonic() < linger_end:
            self._step(guard_end)
        out = []
        for key in keys[:n_flows]:
            state = self.rx.flows[key]
            out.append(
                ReceivedFlow(
                    peer=key[0],
                    flow_id=flow_id,
                    data=state.reassemble(),
                    received_fraction=state.received_fraction,
                    close_reason=state.close_reason.value,
                    missing_seqs=tuple(state.missing_seqs()),
                )
            )
        return out


@dataclass
class LoopbackResult:
    gather_time: float
    broadcast_time: float
    broadcast_exact: bool
    aggregate: bytes = b""


def run_loopback_round(
    *,
    n_workers: int,
    n_elements: int,
    loss_rate: float = 0.0,
    seed: int = 0,
    guard: float = DEFAULT_GUARD_S,
) -> LoopbackResult:
    """One gather + broadcast exchange between in-process nodes over real
    loopback sockets; workers run on threads, the PS on the caller's."""
    import threading

    import numpy as np

    from .sync import aggregate_buffers

    rng = np.random.default_rng(seed)
    buffers = [
        rng.standard_normal(n_elements).astype(np.float32) for _ in range(n_workers)
    ]

    ps = LiveNode(loss_rate=loss_rate, seed=seed)
    workers = [LiveNode(loss_rate=loss_rate, seed=seed + 1 + w) for w in range(n_workers)]
    ps.expect_any(0, FlowParams(seg_len=segment_length(4)))
    errors: list[BaseException] = []
    results: dict[int, bytes] = {}

    def worker_main(w: int) -> None:
        node = workers[w]
        try:
            node.expect_any(1, FlowParams(seg_len=segment_length(4)))
            node.send_flows(
                [FlowSpec(buffers[w].tobytes(), ps.address, 0, all_critical=True)],
                guard=guard,
            )
            (received,) = node.collect(1, 1, guard=guard)
            results[w] = received.data
        except BaseException as exc:  # surfaced on join
            errors.append(exc)

    threads = [
        threading.Thread(target=worker_main, args=(w,), daemon=True)
        for w in range(n_workers)
    ]
    t0 = time.monotonic()
    for t in threads:
        t.start()
    gathered = ps.collect(0, n_workers, guard=guard)
    t1 = time.monotonic()
    parts = [
        np.frombuffer(f.data, dtype="<f4")
        for f in sorted(gathered, key=lambda f: f.peer)
    ]
    aggregate = aggregate_buffers(parts)
    agg_bytes = aggregate.astype("<f4").tobytes()
    by_peer = {f.peer for f in gathered}
    ps.send_flows(
        [FlowSpec(agg_bytes, peer, 1, all_critical=True) for peer in by_peer],
        guard=guard,
    )
    for t in threads:
        t.join(timeout=guard)
    t2 = time.monotonic()
    for node in workers:
        node.close()
    ps.close()
    if errors:
        raise errors[0]
    exact = all(results.get(w) == agg_bytes for w in range(n_workers))
    return LoopbackResult(
        gather_time=t1 - t0,
        broadcast_time=t2 - t1,
        broadcast_exact=exact,
        aggregate=agg_bytes,
    )
