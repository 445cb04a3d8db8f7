"""Loss-tolerant transmission protocol (LTP) for gradient synchronization.

Core pieces:

* :mod:`ltp.wire` - 9-byte header codec and packet framing;
* :mod:`ltp.congestion` - BDP-capped, loss-agnostic congestion control;
* :mod:`ltp.sender` / :mod:`ltp.receiver` - per-flow state machines
  (CQ/NQ/RQ queues, out-of-order ACK loss detection, Early Close,
  bubble-filling reassembly);
* :mod:`ltp.channel` - deterministic simulated lossy network;
* :mod:`ltp.sync` - parameter-server gather/broadcast rounds;
* :mod:`ltp.bench` / :mod:`ltp.cli` - benchmark grid and `ltp-bench` CLI;
* :mod:`ltp.realtime` - the same protocol over live UDP sockets.
"""

from .channel import ChannelConfig, SimulatedChannel
from .congestion import CongestionState
from .receiver import (
    CloseReason,
    FlowParams,
    LtThresholdState,
    ReassemblyState,
    ReceiverEndpoint,
    init_lt_threshold,
)
from .sender import FlowSendState, OutOfOrderLossDetector
from .sync import SyncPlan, SyncSession, run_training_sim
from .wire import (
    Importance,
    MalformedHeader,
    Packet,
    PacketHeader,
    PacketType,
    decode_header,
    decode_packet,
    encode_header,
    encode_packet,
    quantize_cc,
)

__version__ = "0.1.0"
