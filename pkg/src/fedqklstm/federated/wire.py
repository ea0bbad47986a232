"""Length-prefixed message framing for the TCP transport.

Frame: ``"FQKL" | version u8 | type u8 | payload length u64 LE | payload``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from ..numerics import ParamTree
from .checkpoint import deserialize_checkpoint, serialize_checkpoint

MAGIC = b"FQKL"
VERSION = 1
HEADER = struct.Struct("<4sBBQ")
DEFAULT_MAX_PAYLOAD = 1 << 30


class MessageType(enum.IntEnum):
    HELLO = 0x01
    GLOBAL = 0x02
    UPDATE = 0x03
    DONE = 0x04


class ProtocolError(Exception):
    pass


class BadMagicError(ProtocolError):
    pass


class BadVersionError(ProtocolError):
    pass


class UnknownTypeError(ProtocolError):
    pass


class TruncatedFrameError(ProtocolError):
    pass


class FrameTooLargeError(ProtocolError):
    pass


@dataclass
class WireMessage:
    type: MessageType
    payload: bytes = b""


def encode_message(msg: WireMessage) -> bytes:
    return HEADER.pack(MAGIC, VERSION, int(msg.type), len(msg.payload)) + msg.payload


def _parse_header(header: bytes, max_payload: int) -> tuple[MessageType, int]:
    magic, version, type_code, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported protocol version {version}")
    try:
        mtype = MessageType(type_code)
    except ValueError:
        raise UnknownTypeError(f"unknown message type 0x{type_code:02x}") from None
    if length > max_payload:
        raise FrameTooLargeError(f"payload of {length} bytes exceeds limit {max_payload}")
    return mtype, length


def decode_message(buf: bytes, max_payload: int = DEFAULT_MAX_PAYLOAD) -> tuple[WireMessage, int]:
    """Decode one frame from the front of ``buf``; returns ``(message, bytes consumed)``."""
    if len(buf) < HEADER.size:
        raise TruncatedFrameError(f"frame header needs {HEADER.size} bytes, got {len(buf)}")
    mtype, length = _parse_header(bytes(buf[: HEADER.size]), max_payload)
    end = HEADER.size + length
    if len(buf) < end:
        raise TruncatedFrameError(f"payload declared {length} bytes, got {len(buf) - HEADER.size}")
    return WireMessage(mtype, bytes(buf[HEADER.size : end])), end


def _read_exact(stream, n: int, what: str) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise TruncatedFrameError(f"stream ended after {got} of {n} {what} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_message(stream, max_payload: int = DEFAULT_MAX_PAYLOAD) -> WireMessage:
    """Read one frame from a binary file-like object (e.g. ``socket.makefile('rb')``)."""
    mtype, length = _parse_header(_read_exact(stream, HEADER.size, "header"), max_payload)
    return WireMessage(mtype, _read_exact(stream, length, "payload"))


def write_message(stream, msg: WireMessage) -> None:
    stream.write(encode_message(msg))
    stream.flush()


# -----------------------------------------------------------------------------
# Typed payloads
# -----------------------------------------------------------------------------

_HELLO = struct.Struct("<IQ")
_ROUND = struct.Struct("<I")
_UPDATE = struct.Struct("<IQ")


def hello(client_id: int, n_k: int) -> WireMessage:
    return WireMessage(MessageType.HELLO, _HELLO.pack(client_id, n_k))


def parse_hello(msg: WireMessage) -> tuple[int, int]:
    _expect(msg, MessageType.HELLO, _HELLO.size)
    return _HELLO.unpack(msg.payload)


def global_params(round_id: int, params: ParamTree) -> WireMessage:
    return WireMessage(MessageType.GLOBAL, _ROUND.pack(round_id) + serialize_checkpoint(params))


def parse_global(msg: WireMessage) -> tuple[int, ParamTree]:
    _expect(msg, MessageType.GLOBAL, _ROUND.size)
    (round_id,) = _ROUND.unpack_from(msg.payload)
    return round_id, deserialize_checkpoint(msg.payload[_ROUND.size :])


def update(round_id: int, n_k: int, params: ParamTree) -> WireMessage:
    return WireMessage(MessageType.UPDATE, _UPDATE.pack(round_id, n_k) + serialize_checkpoint(params))


def parse_update(msg: WireMessage) -> tuple[int, int, ParamTree]:
    _expect(msg, MessageType.UPDATE, _UPDATE.size)
    round_id, n_k = _UPDATE.unpack_from(msg.payload)
    return round_id, n_k, deserialize_checkpoint(msg.payload[_UPDATE.size :])


def done() -> WireMessage:
    return WireMessage(MessageType.DONE)


def _expect(msg: WireMessage, mtype: MessageType, min_size: int) -> None:
    if msg.type != mtype:
        raise ProtocolError(f"expected {mtype.name}, got {msg.type.name}")
    if len(msg.payload) < min_size:
        raise TruncatedFrameError(f"{mtype.name} payload too short")
