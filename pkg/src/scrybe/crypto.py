"""Hashing and signature primitives.

SHA-256 digests and Ed25519 signatures.  Every signature carries the
key id of its signer (the SHA-256 of the raw 32-byte public key), so a
verifier can look the signer up in a registry before checking it.
"""

from __future__ import annotations

import functools
import hashlib
import os
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

DIGEST_SIZE = 32
SIGNATURE_SIZE = 64
PUBLIC_KEY_SIZE = 32
SEED_SIZE = 32


class Digest(bytes):
    """A 32-byte SHA-256 value."""

    def __new__(cls, value: bytes = b"\x00" * DIGEST_SIZE) -> "Digest":
        if len(value) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(value)}")
        return super().__new__(cls, value)

    @classmethod
    def fromhex(cls, text: str) -> "Digest":  # type: ignore[override]
        return cls(bytes.fromhex(text))

    @classmethod
    def zero(cls) -> "Digest":
        return cls(b"\x00" * DIGEST_SIZE)

    def __repr__(self) -> str:
        return f"Digest({self.hex()[:16]}…)"


@dataclass(frozen=True)
class Signature:
    value: bytes
    signer: Digest

    def __post_init__(self) -> None:
        if len(self.value) != SIGNATURE_SIZE:
            raise ValueError(f"signature must be {SIGNATURE_SIZE} bytes")
        if not isinstance(self.signer, Digest):
            object.__setattr__(self, "signer", Digest(self.signer))

    @classmethod
    def empty(cls) -> "Signature":
        """All-zero placeholder, used only by the unsigned genesis block."""
        return cls(b"\x00" * SIGNATURE_SIZE, Digest.zero())

    def to_json(self) -> dict:
        return {"signature": self.value.hex(), "signer": self.signer.hex()}

    @classmethod
    def from_json(cls, obj: dict) -> "Signature":
        return cls(bytes.fromhex(obj["signature"]), Digest.fromhex(obj["signer"]))


def hash_bytes(message: bytes) -> Digest:
    return Digest(hashlib.sha256(message).digest())


def key_id_for(public_key: bytes) -> Digest:
    return hash_bytes(public_key)


class Ed25519Scheme:
    """The signature scheme behind :func:`sign` and :func:`verify`.

    A replacement scheme needs the same four methods; swap it in with
    :func:`use_scheme`.
    """

    name = "ed25519"

    def private_from_seed(self, seed: bytes):
        return Ed25519PrivateKey.from_private_bytes(seed)

    def public_bytes(self, private_key) -> bytes:
        return private_key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )

    def sign(self, private_key, message: bytes) -> bytes:
        return private_key.sign(message)

    def verify(self, public_key: bytes, signature: bytes, message: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        except (InvalidSignature, ValueError, TypeError):
            return False
        return True


_scheme = Ed25519Scheme()


def use_scheme(scheme):
    """Install ``scheme`` for sign/verify; returns the one it replaced."""
    global _scheme
    previous, _scheme = _scheme, scheme
    _verify_cached.cache_clear()
    return previous


@dataclass(frozen=True)
class KeyPair:
    private_key: object = field(repr=False)
    public_key: bytes
    key_id: Digest

    def private_bytes(self) -> bytes:
        return self.private_key.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )

    def export_public(self) -> dict:
        return {"public_key": self.public_key.hex(), "key_id": self.key_id.hex()}


def generate_keypair(seed: bytes | None = None) -> KeyPair:
    """Create a signing keypair.

    ``seed`` makes the result reproducible and exists for tests and the
    simulator; services always call this without one.
    """
    if seed is None:
        seed = os.urandom(SEED_SIZE)
    elif len(seed) != SEED_SIZE:
        raise ValueError(f"seed must be {SEED_SIZE} bytes, got {len(seed)}")
    private_key = _scheme.private_from_seed(bytes(seed))
    public = _scheme.public_bytes(private_key)
    return KeyPair(private_key, public, key_id_for(public))


def sign(message: bytes, key: KeyPair) -> Signature:
    return Signature(_scheme.sign(key.private_key, bytes(message)), key.key_id)


# Broadcast messages reach every peer with identical bytes, and the
# simulator runs all peers in one process; verification is pure, so a
# bounded memo avoids re-checking the same triple n times.
@functools.lru_cache(maxsize=1 << 16)
def _verify_cached(public_key: bytes, signature: bytes, message: bytes) -> bool:
    return _scheme.verify(public_key, signature, message)


def verify(message: bytes, signature: Signature, public_key: bytes) -> bool:
    """True iff ``signature`` is valid for exactly ``message`` under ``public_key``.

    Never raises: malformed keys or signatures simply fail.
    """
    try:
        if len(public_key) != PUBLIC_KEY_SIZE:
            return False
        if signature.signer != key_id_for(public_key):
            return False
        return _verify_cached(bytes(public_key), bytes(signature.value), bytes(message))
    except (AttributeError, TypeError, ValueError):
        return False
