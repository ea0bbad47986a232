"""Federated averaging: checkpoints, wire framing, local training, transports.

Only the dependency-free pieces are imported here; ``training`` and
``transport`` are imported explicitly by callers.
"""

from .checkpoint import CheckpointError, deserialize_checkpoint, serialize_checkpoint
from .wire import MessageType, ProtocolError, WireMessage, decode_message, encode_message

__all__ = [
    "CheckpointError",
    "MessageType",
    "ProtocolError",
    "WireMessage",
    "decode_message",
    "deserialize_checkpoint",
    "encode_message",
    "serialize_checkpoint",
]
