"""End-to-end tests for the array binding over real loopback sockets."""

import threading

import numpy as np
import pytest

from ltp.sync import aggregate_buffers

from ltpbind import LtpSession, Ps, RoleError, Worker, broadcast, gather

GUARD = 30.0


def _run_round(n_workers, arrays, model, *, loss_rate=0.0, do_broadcast=True):
    """Drive one gather (and optionally one broadcast) across threads.

    The parameter server runs on the calling thread; each worker runs on
    its own thread, as separate processes would in real use.
    """
    ps = LtpSession(Ps(n_workers), loss_rate=loss_rate, seed=7)
    results = {}
    errors = []

    def worker_main(idx):
        try:
            with LtpSession(
                Worker(ps.address), loss_rate=loss_rate, seed=100 + idx
            ) as session:
                gather(session, arrays[idx], guard=GUARD)
                if do_broadcast:
                    results[idx] = broadcast(session, guard=GUARD)
        except Exception as exc:  # pragma: no cover - surfaced via `errors`
            errors.append(exc)

    threads = [
        threading.Thread(target=worker_main, args=(i,), daemon=True)
        for i in range(n_workers)
    ]
    for t in threads:
        t.start()
    try:
        aggregate = gather(ps, model, guard=GUARD)
        if do_broadcast:
            broadcast(ps, aggregate, guard=GUARD)
    finally:
        for t in threads:
            t.join(timeout=GUARD)
        ps.close()
    assert not errors, errors
    return aggregate, results


class TestLosslessRound:
    def test_gather_matches_core_aggregate_elementwise(self):
        rng = np.random.default_rng(1)
        arrays = [rng.standard_normal(1000).astype(np.float32) for _ in range(2)]
        model = np.zeros(1000, dtype=np.float32)

        aggregate, received = _run_round(2, arrays, model)

        expected = aggregate_buffers(arrays)
        assert aggregate.dtype == np.float32
        assert np.array_equal(aggregate, expected)
        for copy in received.values():
            assert np.array_equal(copy, expected)

    def test_known_values(self):
        arrays = [
            np.array([1.0, 2.0], dtype=np.float32),
            np.array([3.0, 4.0], dtype=np.float32),
        ]
        aggregate, _ = _run_round(
            2, arrays, np.zeros(2, dtype=np.float32), do_broadcast=False
        )
        assert np.array_equal(aggregate, np.array([2.0, 3.0], dtype=np.float32))


class TestLossyBroadcast:
    def test_broadcast_bit_exact_under_injected_loss(self):
        rng = np.random.default_rng(2)
        arrays = [rng.standard_normal(1000).astype(np.float32) for _ in range(2)]
        model = np.zeros(1000, dtype=np.float32)

        aggregate, received = _run_round(2, arrays, model, loss_rate=0.01)

        assert len(received) == 2
        for copy in received.values():
            assert copy.tobytes() == aggregate.tobytes()


class TestErrors:
    def test_empty_array_rejected(self):
        with LtpSession(Worker(("127.0.0.1", 9))) as session:
            with pytest.raises(ValueError):
                gather(session, np.array([], dtype=np.float32))

    def test_worker_may_not_broadcast_an_array(self):
        with LtpSession(Worker(("127.0.0.1", 9))) as session:
            with pytest.raises(RoleError):
                broadcast(session, np.ones(4, dtype=np.float32))

    def test_broadcast_before_gather_rejected(self):
        with LtpSession(Ps(2)) as session:
            with pytest.raises(RoleError):
                broadcast(session, np.ones(4, dtype=np.float32))

    def test_mismatched_lengths_rejected(self):
        ps = LtpSession(Ps(2))
        errors = []

        def worker_main(n):
            try:
                with LtpSession(Worker(ps.address)) as session:
                    gather(session, np.ones(n, dtype=np.float32), guard=GUARD)
            except Exception as exc:
                errors.append(exc)

        threads = [
            threading.Thread(target=worker_main, args=(n,), daemon=True)
            for n in (8, 12)
        ]
        for t in threads:
            t.start()
        try:
            with pytest.raises(ValueError, match="expected"):
                gather(ps, np.zeros(8, dtype=np.float32), guard=GUARD)
        finally:
            for t in threads:
                t.join(timeout=GUARD)
            ps.close()

    def test_role_must_be_worker_or_ps(self):
        with pytest.raises(TypeError):
            LtpSession("ps")
