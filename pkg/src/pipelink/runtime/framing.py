"""Wire format for the loopback pipeline ring.

Frame layout, all little-endian:

    magic "PLK1" | type u8 | sample u32 | token u32 | source_module u16 |
    target_module u16 | payload_len u32 | payload | digest u64

The payload starts with a u16 count of residual annotation entries, each
entry '<HHIQ' (producer module, consumer module, simulated bytes, digest),
then zero padding up to payload_len. payload_len is the simulated size of
the tensor the frame stands for, so traffic shaping can meter real bytes;
when the simulated size is smaller than the encoded entries the frame is
sent unpadded at its structural size.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

MAGIC = b"PLK1"

HEADER = struct.Struct("<4sBIIHHI")
DIGEST = struct.Struct("<Q")
ENTRY = struct.Struct("<HHIQ")
COUNT = struct.Struct("<H")

# module-field sentinels
TOKEN_SOURCE = 0xFFFE  # frame enters the ring, no producing module
NO_MODULE = 0xFFFF

MAX_PAYLOAD = 256 * 1024 * 1024


class MsgType(IntEnum):
    ACTIVATION = 1
    RESIDUAL = 2
    LOGITS = 3
    CONTROL = 4


class CtrlKind(IntEnum):
    HELLO = 1
    REBALANCE = 2
    SHUTDOWN = 3


class ProtocolError(RuntimeError):
    pass


class LinkClosed(ConnectionError):
    """Peer closed the stream between frames; an orderly end, not an error."""


@dataclass
class ResEntry:
    """One residual annotation: producer's output digest bound for consumer."""

    producer: int
    consumer: int
    sim_bytes: int
    digest: int


@dataclass
class Message:
    msg_type: MsgType
    sample_id: int
    token_index: int
    source_module: int
    target_module: int
    digest: int
    entries: List[ResEntry] = field(default_factory=list)
    sim_bytes: int = 0
    extra: bytes = b""  # structured control payload, before padding

    @property
    def wire_payload_len(self) -> int:
        structural = COUNT.size + ENTRY.size * len(self.entries) + len(self.extra)
        return max(structural, self.sim_bytes)


def encode_message(msg: Message) -> bytes:
    body = COUNT.pack(len(msg.entries))
    for e in msg.entries:
        body += ENTRY.pack(e.producer, e.consumer, e.sim_bytes, e.digest)
    body += msg.extra
    payload_len = msg.wire_payload_len
    if payload_len > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {payload_len} bytes exceeds the cap")
    header = HEADER.pack(
        MAGIC,
        int(msg.msg_type),
        msg.sample_id,
        msg.token_index,
        msg.source_module,
        msg.target_module,
        payload_len,
    )
    padding = b"\x00" * (payload_len - len(body))
    return header + body + padding + DIGEST.pack(msg.digest)


def _recv_exact(sock: socket.socket, size: int, at_boundary: bool = False) -> bytes:
    chunks = []
    remaining = size
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            if at_boundary and remaining == size:
                raise LinkClosed("peer closed the stream")
            raise ConnectionError("peer closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket) -> Message:
    raw = _recv_exact(sock, HEADER.size, at_boundary=True)
    magic, mtype, sample, token, src, dst, payload_len = HEADER.unpack(raw)
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    if payload_len > MAX_PAYLOAD:
        raise ProtocolError(f"frame claims {payload_len} payload bytes")
    payload = _recv_exact(sock, payload_len) if payload_len else b""
    digest = DIGEST.unpack(_recv_exact(sock, DIGEST.size))[0]
    if len(payload) < COUNT.size:
        raise ProtocolError("payload too short for the entry count")
    (count,) = COUNT.unpack_from(payload, 0)
    need = COUNT.size + count * ENTRY.size
    if len(payload) < need:
        raise ProtocolError(f"payload holds {len(payload)} bytes, entries need {need}")
    entries = [
        ResEntry(*ENTRY.unpack_from(payload, COUNT.size + i * ENTRY.size))
        for i in range(count)
    ]
    extra = payload[need:]
    try:
        kind = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type {mtype}")
    return Message(
        msg_type=kind,
        sample_id=sample,
        token_index=token,
        source_module=src,
        target_module=dst,
        digest=digest,
        entries=entries,
        sim_bytes=payload_len,
        extra=extra,
    )


# --- control payloads -----------------------------------------------------

def hello_message(src_device: int) -> Message:
    return Message(
        msg_type=MsgType.CONTROL,
        sample_id=src_device,
        token_index=0,
        source_module=int(CtrlKind.HELLO),
        target_module=NO_MODULE,
        digest=0,
    )


def shutdown_message() -> Message:
    return Message(
        msg_type=MsgType.CONTROL,
        sample_id=0,
        token_index=0,
        source_module=int(CtrlKind.SHUTDOWN),
        target_module=NO_MODULE,
        digest=0,
    )


_SPAN = struct.Struct("<HHHHH")

Span = Optional[Tuple[int, int]]


def rebalance_message(
    epoch_index: int,
    switch_sample: int,
    device_order: Sequence[int],
    active: Dict[int, Span],
    hosted: Dict[int, Span],
) -> Message:
    """Broadcast frame announcing new spans effective from switch_sample on."""
    body = COUNT.pack(len(device_order))
    for dev in device_order:
        a = active.get(dev)
        h = hosted.get(dev)
        body += _SPAN.pack(
            dev,
            a[0] if a else NO_MODULE,
            a[1] if a else NO_MODULE,
            h[0] if h else NO_MODULE,
            h[1] if h else NO_MODULE,
        )
    return Message(
        msg_type=MsgType.CONTROL,
        sample_id=switch_sample,
        token_index=epoch_index,
        source_module=int(CtrlKind.REBALANCE),
        target_module=NO_MODULE,
        digest=0,
        extra=body,
    )


def parse_rebalance(msg: Message) -> Tuple[int, int, List[int], Dict[int, Span], Dict[int, Span]]:
    if msg.source_module != int(CtrlKind.REBALANCE):
        raise ProtocolError("not a rebalance frame")
    body = msg.extra
    if len(body) < COUNT.size:
        raise ProtocolError("rebalance payload truncated")
    (count,) = COUNT.unpack_from(body, 0)
    need = COUNT.size + count * _SPAN.size
    if len(body) < need:
        raise ProtocolError("rebalance payload truncated")
    order: List[int] = []
    active: Dict[int, Span] = {}
    hosted: Dict[int, Span] = {}
    for i in range(count):
        dev, a0, a1, h0, h1 = _SPAN.unpack_from(body, COUNT.size + i * _SPAN.size)
        order.append(dev)
        active[dev] = None if a0 == NO_MODULE else (a0, a1)
        hosted[dev] = None if h0 == NO_MODULE else (h0, h1)
    return msg.token_index, msg.sample_id, order, active, hosted
