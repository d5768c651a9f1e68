"""Commit-reveal arithmetic shared by block validation and the mining round."""

from __future__ import annotations

from typing import Iterable, Mapping

from .crypto import Digest, hash_bytes
from .encoding import Writer

NONCE_SIZE = 32


class NoQuorum(Exception):
    pass


def round_suffix(round_: int, attempt: int) -> bytes:
    return Writer().u64(round_).u32(attempt).getvalue()


def commitment_for(nonce: bytes, round_: int, attempt: int) -> Digest:
    return hash_bytes(bytes(nonce) + round_suffix(round_, attempt))


def quorum_size(registry_size: int) -> int:
    """Strictly more than half of the registered miners."""
    return registry_size // 2 + 1


def selection_seed(reveals: Mapping[bytes, bytes], round_: int, attempt: int) -> Digest:
    ordered = b"".join(reveals[k] for k in sorted(reveals))
    return hash_bytes(ordered + round_suffix(round_, attempt))


def select_miner(
    reveals: Mapping[bytes, bytes],
    registry: Iterable[bytes] | None,
    round_: int,
    attempt: int,
    excluded: Iterable[bytes] = (),
) -> Digest:
    """Pick the producer for ``(round_, attempt)`` from the valid reveals.

    ``reveals`` maps miner key id to its 32-byte nonce.  Participants are
    ordered by key id bytes and the seed, read as a big-endian integer,
    indexes into that order.  With a ``registry``, the reveals must come
    from a strict majority of the registered miners not ``excluded`` for
    this round; ``registry=None`` skips the quorum check.
    """
    if not reveals:
        raise NoQuorum("no valid reveals")
    if registry is not None:
        eligible = set(registry) - set(excluded)
        counted = sum(1 for k in reveals if k in eligible)
        if counted < quorum_size(len(eligible)):
            raise NoQuorum(f"{counted} reveals, need {quorum_size(len(eligible))}")
    participants = sorted(reveals)
    seed = selection_seed(reveals, round_, attempt)
    return Digest(participants[int.from_bytes(seed, "big") % len(participants)])
