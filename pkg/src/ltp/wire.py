"""Bit-exact packet codec for the LTP datagram format.

Every LTP packet starts with a fixed 9-byte header (68 payload bits plus 4
zero pad bits) followed by a type-dependent payload:

====================  =====  ==========================================
field                 bits   meaning
====================  =====  ==========================================
flow_id                 16   per-transfer flow identifier
seq_id                  24   segment index within the flow
importance               2   00 = not critical, 11 = critical
ptype                    2   00 reg / 01 data / 10 ack / 11 end
rtprop_q                12   sender's RTprop estimate, unit 100 us
btlbw_q                 12   sender's BtlBw estimate, unit 10 Mbit/s
pad                      4   must be zero
====================  =====  ==========================================

Fields are packed big-endian in the order above.  The congestion fields are
informational echoes; 0 means "unknown".  Registration payloads carry two
unsigned 32-bit values (total segment count, total byte length), data
payloads carry segment bytes, ack and end payloads are empty.

All functions here are pure and safe to call concurrently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

HEADER_BYTES = 9
MTU = 1500
#: Largest datagram we will hand to UDP (IPv4 20 B + UDP 8 B of overhead).
MAX_DATAGRAM_BYTES = MTU - 28
#: Largest data payload: biggest multiple of 4 that fits beside the header,
#: so float32 segment boundaries stay element-aligned by default.
MAX_SEGMENT_BYTES = 1460

RTPROP_UNIT_S = 100e-6
BTLBW_UNIT_BPS = 10e6
_QUANT_MAX = 4095

#: Reserved sequence ids used by the sender for non-data packets, so that
#: per-seq ACKs are unambiguous within a flow.
REG_SEQ = 0xFFFFFF
END_SEQ = 0xFFFFFE
MAX_DATA_SEQ = END_SEQ - 1

_REG_STRUCT = struct.Struct(">II")


class Importance(IntEnum):
    NOT_CRITICAL = 0b00
    CRITICAL = 0b11


class PacketType(IntEnum):
    REGISTRATION = 0b00
    DATA = 0b01
    ACK = 0b10
    END = 0b11


class MalformedHeader(ValueError):
    """Raised when 9 bytes do not parse as an LTP header."""


def _check_range(name: str, value: int, bits: int) -> None:
    if not 0 <= value < (1 << bits):
        raise ValueError(f"{name}={value} does not fit in {bits} bits")


@dataclass(frozen=True)
class PacketHeader:
    flow_id: int
    seq_id: int
    importance: Importance
    ptype: PacketType
    rtprop_q: int = 0
    btlbw_q: int = 0

    def __post_init__(self) -> None:
        _check_range("flow_id", self.flow_id, 16)
        _check_range("seq_id", self.seq_id, 24)
        _check_range("rtprop_q", self.rtprop_q, 12)
        _check_range("btlbw_q", self.btlbw_q, 12)
        if self.importance not in (Importance.NOT_CRITICAL, Importance.CRITICAL):
            raise ValueError(f"undefined importance code {self.importance}")


@dataclass(frozen=True)
class Packet:
    header: PacketHeader
    payload: bytes = b""


def encode_header(h: PacketHeader) -> bytes:
    """Pack a header into its 9-byte wire form."""
    word = (
        (h.flow_id << 56)
        | (h.seq_id << 32)
        | (int(h.importance) << 30)
        | (int(h.ptype) << 28)
        | (h.rtprop_q << 16)
        | (h.btlbw_q << 4)
    )
    return word.to_bytes(HEADER_BYTES, "big")


def decode_header(buf: bytes) -> PacketHeader:
    """Inverse of :func:`encode_header`.

    Raises :class:`MalformedHeader` on short input, an undefined importance
    code, or nonzero pad bits (a cheap corruption check).
    """
    if len(buf) < HEADER_BYTES:
        raise MalformedHeader(f"header needs {HEADER_BYTES} bytes, got {len(buf)}")
    word = int.from_bytes(buf[:HEADER_BYTES], "big")
    if word & 0xF:
        raise MalformedHeader("nonzero pad bits")
    imp = (word >> 30) & 0b11
    if imp not in (Importance.NOT_CRITICAL, Importance.CRITICAL):
        raise MalformedHeader(f"undefined importance code {imp:02b}")
    return PacketHeader(
        flow_id=(word >> 56) & 0xFFFF,
        seq_id=(word >> 32) & 0xFFFFFF,
        importance=Importance(imp),
        ptype=PacketType((word >> 28) & 0b11),
        rtprop_q=(word >> 16) & 0xFFF,
        btlbw_q=(word >> 4) & 0xFFF,
    )


def encode_packet(p: Packet) -> bytes:
    data = encode_header(p.header) + p.payload
    if len(data) > MAX_DATAGRAM_BYTES:
        raise ValueError(f"datagram of {len(data)} bytes exceeds {MAX_DATAGRAM_BYTES}")
    return data


def decode_packet(buf: bytes) -> Packet:
    header = decode_header(buf)
    return Packet(header, bytes(buf[HEADER_BYTES:]))


def quantize_cc(rtprop: float, btlbw: float) -> tuple[int, int]:
    """Quantize congestion estimates (seconds, bits/s) for the header echo.

    Saturates at the 12-bit maximum instead of wrapping; (0, 0) means the
    estimates are unknown.
    """
    if rtprop < 0 or btlbw < 0:
        raise ValueError("congestion estimates must be non-negative")
    rtprop_q = min(round(rtprop / RTPROP_UNIT_S), _QUANT_MAX)
    btlbw_q = min(round(btlbw / BTLBW_UNIT_BPS), _QUANT_MAX)
    return rtprop_q, btlbw_q


def dequantize_cc(rtprop_q: int, btlbw_q: int) -> tuple[float, float]:
    """Header echo back to (seconds, bits/s); zeros stay zero ("unknown")."""
    return rtprop_q * RTPROP_UNIT_S, btlbw_q * BTLBW_UNIT_BPS


def registration_payload(total_segments: int, total_bytes: int) -> bytes:
    return _REG_STRUCT.pack(total_segments, total_bytes)


def parse_registration(payload: bytes) -> tuple[int, int]:
    if len(payload) != _REG_STRUCT.size:
        raise MalformedHeader(f"registration payload must be {_REG_STRUCT.size} bytes")
    total_segments, total_bytes = _REG_STRUCT.unpack(payload)
    return total_segments, total_bytes
