"""Message envelopes plus simulated (``network.sim``) and TCP (``network.tcp``) transports."""

from .envelope import (
    MAX_FRAME,
    Envelope,
    FrameError,
    MsgType,
    decode_envelope,
    encode_envelope,
    seal,
    wire_decode,
    wire_encode,
)

__all__ = [
    "MAX_FRAME",
    "Envelope",
    "FrameError",
    "MsgType",
    "decode_envelope",
    "encode_envelope",
    "seal",
    "wire_decode",
    "wire_encode",
]
