"""A node's local chain, optionally persisted block-by-block."""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Sequence

from . import model
from .crypto import Digest
from .logfile import AppendOnlyLog, read_records
from .model import Block, MinerRegistry

logger = logging.getLogger(__name__)

BLOCK_FILE = "blocks.log"


class ChainError(Exception):
    pass


class ChainStore:
    """Blocks 0..tip with an index of every anchored transaction.

    With a ``path`` each block is durably appended before :meth:`append`
    returns, so an acknowledged block survives a crash.  On open the
    persisted chain is validated; anything after the longest valid prefix
    is dropped from the file (and logged) so the node never serves an
    invalid chain.
    """

    def __init__(
        self,
        registry: MinerRegistry,
        path: str | os.PathLike | None = None,
        *,
        genesis_timestamp: int = model.GENESIS_TIMESTAMP_MS,
        fsync: bool = True,
    ) -> None:
        self.registry = registry
        self.genesis = model.genesis_block(genesis_timestamp)
        self._log = AppendOnlyLog(path, fsync=fsync) if path is not None else None
        self._blocks: list[Block] = []
        self._hashes: list[Digest] = []
        self.txn_digests: set[Digest] = set()
        self.dropped_on_load = 0
        if self._log is not None and len(self._log):
            self._load_persisted()
        else:
            self._push(self.genesis)
            if self._log is not None:
                self._log.append(model.canonical_encode(self.genesis))

    def _load_persisted(self) -> None:
        raw = self._log.snapshot()
        for index, payload in enumerate(raw):
            try:
                block = model.decode_block(payload)
            except ValueError as exc:
                logger.error("stored block %d undecodable: %s", index, exc)
                break
            if index == 0:
                if block != self.genesis:
                    raise ChainError("persisted genesis differs from configured genesis")
                self._push(block)
                continue
            result = model.verify_block(block, self._blocks[-1], self.registry)
            if not result:
                logger.error("stored chain invalid at height %d: %s %s", index, result.code.value, result.detail)
                break
            self._push(block)
        self.dropped_on_load = len(raw) - len(self._blocks)
        if self.dropped_on_load:
            self._log.rewrite(raw[: len(self._blocks)])

    def _push(self, block: Block) -> None:
        self._blocks.append(block)
        self._hashes.append(model.compute_block_hash(block))
        for txn in block.transactions:
            self.txn_digests.add(model.compute_txn_digest(txn))

    @property
    def height(self) -> int:
        return len(self._blocks) - 1

    @property
    def tip(self) -> Block:
        return self._blocks[-1]

    @property
    def tip_hash(self) -> Digest:
        return self._hashes[-1]

    def block_at(self, height: int) -> Block:
        return self._blocks[height]

    def hash_at(self, height: int) -> Digest:
        return self._hashes[height]

    def append(self, block: Block) -> None:
        """Persist then adopt a block already validated against the tip."""
        if block.height != self.height + 1 or block.prev_hash != self.tip_hash:
            raise ChainError(f"block {block.height} does not extend tip {self.height}")
        if self._log is not None:
            self._log.append(model.canonical_encode(block))
        self._push(block)

    def truncate(self, height: int) -> list[Block]:
        """Drop every block above ``height`` (fork resolution); returns them."""
        if not 0 <= height <= self.height:
            raise ChainError(f"OUT_OF_RANGE: height {height}, tip {self.height}")
        removed = self._blocks[height + 1:]
        if not removed:
            return []
        if self._log is not None:
            self._log.rewrite([model.canonical_encode(b) for b in self._blocks[: height + 1]])
        del self._blocks[height + 1:]
        del self._hashes[height + 1:]
        self.txn_digests = {model.compute_txn_digest(t) for b in self._blocks for t in b.transactions}
        return removed

    def blocks(self, from_height: int = 0) -> list[Block]:
        if not 0 <= from_height <= self.height:
            raise ChainError(f"OUT_OF_RANGE: height {from_height}, tip {self.height}")
        return self._blocks[from_height: len(self._blocks)]

    def close(self) -> None:
        if self._log is not None:
            self._log.close()


def read_chain_file(path: str | os.PathLike) -> list[Block]:
    """Decode a persisted block file as-is, without validating or repairing it."""
    return [model.decode_block(p) for p in read_records(path)]


def chain_file(data_dir: str | os.PathLike) -> Path:
    return Path(data_dir) / BLOCK_FILE


def blocks_equal(a: Sequence[Block], b: Sequence[Block]) -> bool:
    return [model.canonical_encode(x) for x in a] == [model.canonical_encode(x) for x in b]
