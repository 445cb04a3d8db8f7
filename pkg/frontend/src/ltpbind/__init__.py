"""Array-level gather/broadcast over live UDP loopback.

Thin binding around :mod:`ltp.realtime`: one process holds one
:class:`LtpSession` in a fixed role (worker or parameter server) and the
two module functions move contiguous float32 arrays through it.  Gather
fans worker arrays in to the server, which returns their element-wise
mean; broadcast fans the server's array back out bit-exactly.  Calls
block until the transfer completes, and both sides must make the same
sequence of calls.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ltp.realtime import DEFAULT_GUARD_S, FlowSpec, LiveNode
from ltp.receiver import FlowParams
from ltp.sender import segment_length
from ltp.sync import aggregate_buffers

__all__ = [
    "ELEMENT_SIZE",
    "LtpSession",
    "Ps",
    "RoleError",
    "Worker",
    "broadcast",
    "gather",
]

ELEMENT_SIZE = 4  # float32 only
_FLOW_ID_MASK = 0xFFFF
_CRITICAL_HEAD_BYTES = 64
_CRITICAL_TAIL_BYTES = 64


class RoleError(RuntimeError):
    """The call is not valid for this session's role."""


@dataclass(frozen=True)
class Worker:
    """Worker role: sends gradients to, and receives models from, `ps_address`."""

    ps_address: tuple


@dataclass(frozen=True)
class Ps:
    """Parameter-server role: aggregates arrays from `n_workers` peers."""

    n_workers: int


class LtpSession:
    """One endpoint of a gather/broadcast group, bound to a UDP socket.

    A session keeps a single role for its whole lifetime.  Worker
    addresses are learned by the server from the first gather, so a
    broadcast must be preceded by at least one gather.
    """

    def __init__(
        self,
        role: Worker | Ps,
        *,
        pct_threshold: float = 0.8,
        bind: tuple = ("127.0.0.1", 0),
        loss_rate: float = 0.0,
        seed: int = 0,
    ):
        if not isinstance(role, (Worker, Ps)):
            raise TypeError(f"role must be Worker or Ps, not {type(role).__name__}")
        self.role = role
        self.pct_threshold = pct_threshold
        self.node = LiveNode(bind, loss_rate=loss_rate, seed=seed)
        # Even ids for gathers, odd for broadcasts.  Both sides advance the
        # counters call by call, so matching call sequences agree on ids.
        self._gather_ids = itertools.count(0, 2)
        self._broadcast_ids = itertools.count(1, 2)
        self._workers: list[tuple] = []

    @property
    def address(self) -> tuple:
        return self.node.address

    def close(self) -> None:
        self.node.close()

    def __enter__(self) -> "LtpSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _as_float32(array) -> np.ndarray:
    arr = np.ascontiguousarray(array, dtype="<f4").reshape(-1)
    if arr.size == 0:
        raise ValueError("array must hold at least one element")
    return arr


def _params(session: LtpSession) -> FlowParams:
    return FlowParams(
        seg_len=segment_length(ELEMENT_SIZE), pct_threshold=session.pct_threshold
    )


def _critical_ranges(nbytes: int) -> tuple:
    head = min(_CRITICAL_HEAD_BYTES, nbytes)
    tail_start = max(nbytes - _CRITICAL_TAIL_BYTES, 0)
    return ((0, head), (tail_start, nbytes))


def gather(session: LtpSession, array, *, guard: float = DEFAULT_GUARD_S):
    """Combine one array per worker into their element-wise mean.

    Workers pass their local array and block until the server has it;
    the return value is ``True`` as a send confirmation.  The server
    passes an array of the expected shape (its current model, say) and
    receives the aggregate, with any loss-waived stretches already
    zero-filled on element boundaries.
    """
    arr = _as_float32(array)
    flow_id = next(session._gather_ids) & _FLOW_ID_MASK
    if isinstance(session.role, Worker):
        spec = FlowSpec(
            data=arr.tobytes(),
            dest=session.role.ps_address,
            flow_id=flow_id,
            element_size=ELEMENT_SIZE,
            critical_ranges=_critical_ranges(arr.nbytes),
        )
        session.node.send_flows([spec], guard=guard)
        return True

    session.node.expect_any(flow_id, _params(session))
    flows = session.node.collect(flow_id, session.role.n_workers, guard=guard)
    for flow in flows:
        if len(flow.data) != arr.nbytes:
            raise ValueError(
                f"worker {flow.peer} sent {len(flow.data)} bytes, "
                f"expected {arr.nbytes}"
            )
    # Stable worker order for the broadcast fan-out later.
    session._workers = sorted(flow.peer for flow in flows)
    buffers = [np.frombuffer(flow.data, dtype="<f4") for flow in flows]
    return aggregate_buffers(buffers)


def broadcast(session: LtpSession, array=None, *, guard: float = DEFAULT_GUARD_S):
    """Send the server's array to every worker, fully reliably.

    Only the server may pass an array; it blocks until every worker has
    acknowledged the whole thing.  Workers call with no array and block
    until their bit-exact copy arrives, which is the return value.
    """
    flow_id = next(session._broadcast_ids) & _FLOW_ID_MASK
    if isinstance(session.role, Worker):
        if array is not None:
            raise RoleError("only the parameter server may broadcast an array")
        session.node.expect_any(flow_id, _params(session))
        (flow,) = session.node.collect(flow_id, 1, guard=guard)
        return np.frombuffer(flow.data, dtype="<f4").copy()

    if array is None:
        raise ValueError("the parameter server must pass the array to broadcast")
    if not session._workers:
        raise RoleError("no workers known yet; broadcast must follow a gather")
    arr = _as_float32(array)
    specs = [
        FlowSpec(
            data=arr.tobytes(),
            dest=dest,
            flow_id=flow_id,
            element_size=ELEMENT_SIZE,
            all_critical=True,
        )
        for dest in session._workers
    ]
    session.node.send_flows(specs, guard=guard)
    return arr
