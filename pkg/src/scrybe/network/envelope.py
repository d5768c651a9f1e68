"""Signed message envelopes and their length-prefixed wire frames."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace

from .. import crypto
from ..crypto import Digest, KeyPair, Signature
from ..encoding import DecodeError, Reader, Writer

ENVELOPE_TAG = b"scrybe.envelope\x00"
MAX_FRAME = 4 * 1024 * 1024
_LEN = struct.Struct(">I")


class MsgType(enum.IntEnum):
    COMMIT = 1
    REVEAL = 2
    PROPOSAL = 3
    CHAIN_REQUEST = 4
    CHAIN_RESPONSE = 5
    TXN_SUBMIT = 6


class FrameError(Exception):
    def __init__(self, code: str, message: str) -> None:
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class Envelope:
    msg_type: MsgType
    round: int
    attempt: int
    sender_key_id: Digest
    payload: bytes
    signature: Signature

    def signing_bytes(self) -> bytes:
        return ENVELOPE_TAG + _body(self)

    def verify(self, public_key: bytes) -> bool:
        return self.signature.signer == self.sender_key_id and crypto.verify(
            self.signing_bytes(), self.signature, public_key
        )


def _body(env: Envelope) -> bytes:
    return (
        Writer()
        .u8(int(env.msg_type))
        .u64(env.round)
        .u32(env.attempt)
        .digest(env.sender_key_id)
        .blob(env.payload)
        .getvalue()
    )


def seal(msg_type: MsgType, round_: int, attempt: int, payload: bytes, key: KeyPair) -> Envelope:
    env = Envelope(msg_type, round_, attempt, key.key_id, bytes(payload), Signature.empty())
    return replace(env, signature=crypto.sign(env.signing_bytes(), key))


def encode_envelope(env: Envelope) -> bytes:
    return _body(env) + Writer().signature(env.signature).getvalue()


def decode_envelope(data: bytes) -> Envelope:
    r = Reader(data)
    code = r.u8()
    try:
        msg_type = MsgType(code)
    except ValueError:
        raise DecodeError(f"unknown message type {code}") from None
    env = Envelope(msg_type, r.u64(), r.u32(), r.digest(), r.blob(), r.signature())
    r.finish()
    return env


def wire_encode(env: Envelope) -> bytes:
    body = encode_envelope(env)
    if len(body) > MAX_FRAME:
        raise FrameError("FRAME_TOO_LARGE", f"{len(body)} bytes exceeds {MAX_FRAME}")
    return _LEN.pack(len(body)) + body


def wire_decode(frame: bytes) -> Envelope:
    """Decode one complete frame; the signature is left for the caller."""
    if len(frame) < _LEN.size:
        raise FrameError("TRUNCATED", "frame shorter than its length prefix")
    (length,) = _LEN.unpack_from(frame)
    if length > MAX_FRAME:
        raise FrameError("FRAME_TOO_LARGE", f"declared length {length}")
    if len(frame) - _LEN.size < length:
        raise FrameError("TRUNCATED", f"need {length} bytes, have {len(frame) - _LEN.size}")
    if len(frame) - _LEN.size > length:
        raise FrameError("TRAILING", "bytes after frame end")
    try:
        return decode_envelope(frame[_LEN.size:])
    except (DecodeError, ValueError) as exc:
        raise FrameError("MALFORMED", str(exc)) from None


def read_frame(recv_exact) -> Envelope:
    """Read one frame using ``recv_exact(n) -> bytes``."""
    header = recv_exact(_LEN.size)
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME:
        raise FrameError("FRAME_TOO_LARGE", f"declared length {length}")
    return wire_decode(header + recv_exact(length))
