"""Sender state machine: segmentation, queues, loss detection, draining."""

import random

import pytest

from ltp.congestion import CongestionState
from ltp.sender import (
    LOSS_ACK_THRESHOLD,
    FlowSendState,
    Idle,
    OutOfOrderLossDetector,
    Paced,
    UnknownSeq,
    critical_seq_ids,
    segment_length,
)
from ltp.wire import END_SEQ, REG_SEQ, Importance, Packet, PacketType


def brute_force_lost_sets(send_events, ack_events, threshold=3):
    """Oracle: after each ACK, recount from scratch how many later-sent,
    still-unacked packets exist for every candidate.

    `send_events` is the chronological list of seqs as transmitted (repeats
    allowed; a retransmission refreshes the packet's position).  `ack_events`
    is interleaved with sends as (index_into_send_log_so_far, seq).  Returns
    the list of (ack_index, sorted lost seqs declared at that ack).
    """
    declared = set()
    acked = set()
    out = []
    for ack_idx, (log_len, seq) in enumerate(ack_events):
        acked.add(seq)
        latest_pos = {}
        for pos, s in enumerate(send_events[:log_len]):
            latest_pos[s] = pos
        newly = []
        for s, pos in latest_pos.items():
            if s in acked or s in declared:
                continue
            later_acked = sum(
                1
                for other, opos in latest_pos.items()
                if opos > pos and other in acked
            )
            if later_acked >= threshold:
                newly.append(s)
        declared.update(newly)
        out.append((ack_idx, sorted(newly, key=latest_pos.__getitem__)))
    return out


class TestLossDetectorOracle:
    def test_paper_style_example(self):
        # Send P1..P6; ACKs for P2, P4, P5 arrive -> P1 has three later ACKs.
        det = OutOfOrderLossDetector()
        for seq in (1, 2, 3, 4, 5, 6):
            det.on_sent(seq)
        assert det.on_ack(2) == []
        assert det.on_ack(4) == []
        assert det.on_ack(5) == [1]  # P1 now has three later ACKs, P3 only two
        assert det.on_ack(6) == [3]

    def test_exactly_three_not_two(self):
        det = OutOfOrderLossDetector()
        for seq in (1, 2, 3, 4):
            det.on_sent(seq)
        assert det.on_ack(2) == []
        assert det.on_ack(3) == []
        assert det.on_ack(4) == [1]  # third later ACK declares, not earlier

    def test_retransmission_resets_count(self):
        det = OutOfOrderLossDetector()
        for seq in (1, 2, 3):
            det.on_sent(seq)
        det.on_ack(2)
        det.on_ack(3)
        det.on_sent(1)  # retransmit: fresh position
        det.on_sent(4)
        det.on_sent(5)
        assert det.on_ack(4) == []
        assert det.on_ack(5) == []  # only two ACKs after the fresh position

    def test_unknown_seq_raises(self):
        det = OutOfOrderLossDetector()
        with pytest.raises(UnknownSeq):
            det.on_ack(99)

    def test_oracle_equivalence_random_traces(self):
        rng = random.Random(20240901)
        for _ in range(200):
            det = OutOfOrderLossDetector()
            n = rng.randint(1, 64)
            send_events = []
            ack_events = []
            sendable = list(range(n))
            rng.shuffle(sendable)
            unacked_sent = []
            incremental = []
            ack_idx = 0
            while sendable or unacked_sent:
                do_send = sendable and (not unacked_sent or rng.random() < 0.5)
                if do_send:
                    seq = sendable.pop()
                    det.on_sent(seq)
                    send_events.append(seq)
                    unacked_sent.append(seq)
                else:
                    seq = unacked_sent.pop(rng.randrange(len(unacked_sent)))
                    newly = det.on_ack(seq)
                    ack_events.append((len(send_events), seq))
                    incremental.append((ack_idx, newly))
                    ack_idx += 1
            expected = brute_force_lost_sets(send_events, ack_events)
            assert incremental == expected


class TestSegmentation:
    def test_segment_length_alignment(self):
        assert segment_length(1) == 1460
        assert segment_length(2) == 1460
        assert segment_length(4) == 1460
        assert segment_length(8) == 1456

    def test_unsupported_element_size(self):
        with pytest.raises(ValueError):
            segment_length(3)

    def test_12000_bytes_element_4(self):
        flow = FlowSendState.segment_buffer(bytes(12000), 4)
        assert flow.n_segments == 9
        assert [len(s) for s in flow.segments] == [1460] * 8 + [320]

    def test_no_element_straddles_boundary(self):
        for element in (2, 4, 8):
            flow = FlowSendState.segment_buffer(bytes(10_001 * element), element)
            offset = 0
            for seg in flow.segments[:-1]:
                assert len(seg) % element == 0
                offset += len(seg)
                assert offset % element == 0

    def test_critical_ranges_map_to_segments(self):
        # head and tail ranges of a 12000-byte buffer hit segments 0 and 8
        crit = critical_seq_ids(12000, 1460, [(0, 64), (12000 - 64, 12000)])
        assert crit == {0, 8}

    def test_empty_buffer_rejected(self):
        with pytest.raises(ValueError):
            FlowSendState.segment_buffer(b"", 4)

    def test_bad_critical_range_rejected(self):
        with pytest.raises(ValueError):
            critical_seq_ids(100, 1460, [(50, 200)])


def drain(flow, now=0.0, limit=100_000):
    """Pull packets until the flow goes idle; returns the emitted packets."""
    out = []
    for _ in range(limit):
        r = flow.next_packet(now)
        if isinstance(r, Packet):
            out.append(r)
        elif isinstance(r, Paced):
            now += r.delay
        else:
            return out, now
    raise AssertionError("flow never went idle")


class TestQueueDiscipline:
    def make_flow(self, **kwargs):
        cc = CongestionState()
        cc.on_send()
        cc.on_ack_sample(0.0, 2e-3, int(2e-3 * 1e9 / 8))  # wide-open gate
        return FlowSendState.segment_buffer(
            bytes(1460 * 6), 4, [(0, 1460)], cc=cc, rng=random.Random(1), **kwargs
        )

    def test_registration_first_then_critical_then_normal(self):
        flow = self.make_flow()
        pkts, _ = drain(flow)
        assert pkts[0].header.ptype == PacketType.REGISTRATION
        assert pkts[1].header.seq_id == 0  # the critical segment
        assert pkts[1].header.importance == Importance.CRITICAL
        assert [p.header.seq_id for p in pkts[2:]] == [1, 2, 3, 4, 5]
        for p in pkts[2:]:
            assert p.header.importance == Importance.NOT_CRITICAL

    def test_end_only_after_criticals_acked_and_queues_empty(self):
        flow = self.make_flow()
        pkts, now = drain(flow)
        assert all(p.header.seq_id != END_SEQ for p in pkts)
        flow.on_ack(REG_SEQ, 1e-3)
        flow.on_ack(0, 1e-3)
        pkts, _ = drain(flow, 2e-3)
        assert [p.header.seq_id for p in pkts] == [END_SEQ]

    def test_lost_normal_reenters_random_queue(self):
        flow = self.make_flow()
        drain(flow)
        flow.on_ack(REG_SEQ, 1e-3)
        flow.on_ack(0, 1e-3)
        # three ACKs after seq 1 declare it lost
        flow.on_ack(2, 1.1e-3)
        flow.on_ack(3, 1.2e-3)
        newly = flow.on_ack(4, 1.3e-3)
        assert newly == [1]
        assert 1 in flow.rq

    def test_lost_critical_reenters_cq(self):
        flow = self.make_flow()
        drain(flow)
        flow.on_ack(REG_SEQ, 1e-3)
        flow.on_ack(1, 1.0e-3)
        flow.on_ack(2, 1.1e-3)
        newly = flow.on_ack(3, 1.2e-3)
        assert newly == [0]
        assert 0 in flow.cq

    def test_late_ack_cancels_retransmission(self):
        flow = self.make_flow()
        drain(flow)
        flow.on_ack(REG_SEQ, 1e-3)
        flow.on_ack(0, 1e-3)
        flow.on_ack(2, 1.1e-3)
        flow.on_ack(3, 1.2e-3)
        assert flow.on_ack(4, 1.3e-3) == [1]
        flow.on_ack(1, 1.4e-3)  # late ACK lands before the retransmission
        pkts, _ = drain(flow, 2e-3)
        assert all(p.header.seq_id != 1 for p in pkts)

    def test_stop_discards_normals_keeps_criticals(self):
        flow = self.make_flow()
        r = flow.next_packet(0.0)  # registration only
        assert r.header.ptype == PacketType.REGISTRATION
        flow.on_stop(1e-3)
        assert not flow.nq and not flow.rq
        assert list(flow.cq) == [0]
        flow.on_ack(REG_SEQ, 1.1e-3)
        pkts, _ = drain(flow, 2e-3)
        assert [p.header.seq_id for p in pkts] == [0]
        flow.on_ack(0, 3e-3)
        assert flow.complete

    def test_complete_requires_everything_without_stop(self):
        flow = self.make_flow()
        pkts, now = drain(flow)
        for seq in (REG_SEQ, 0, 1, 2, 3, 4, 5):
            flow.on_ack(seq, 1e-3)
            assert not flow.complete
        pkts, _ = drain(flow, 2e-3)
        assert [p.header.seq_id for p in pkts] == [END_SEQ]
        flow.on_ack(END_SEQ, 3e-3)
        assert flow.complete

    def test_duplicate_ack_is_idempotent(self):
        flow = self.make_flow()
        drain(flow)
        flow.on_ack(2, 1e-3)
        assert flow.on_ack(2, 1.1e-3) == []

    def test_threshold_constant(self):
        assert LOSS_ACK_THRESHOLD == 3


class TestCongestionGate:
    def test_inflight_capped_at_bdp(self):
        cc = CongestionState()  # defaults: bdp small
        flow = FlowSendState.segment_buffer(bytes(1460 * 200), 4, cc=cc)
        pkts, _ = drain(flow)
        assert len(pkts) == cc.inflight_cap
        result = flow.next_packet(0.0)
        assert isinstance(result, Idle)
        assert result.wake_after is not None
