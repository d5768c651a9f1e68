from __future__ import annotations

import hashlib
import socket
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from scrybe import model  # noqa: E402
from scrybe.crypto import Signature, generate_keypair  # noqa: E402
from scrybe.model import Block, FieldOp, MinerRegistry, MiningRecord  # noqa: E402
from scrybe.selection import select_miner  # noqa: E402

T0 = model.GENESIS_TIMESTAMP_MS


def seeded_key(n: int):
    return generate_keypair(bytes([n]) * 32)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class ChainBuilder:
    """Builds valid chains block by block without running consensus."""

    def __init__(self, miners, author, genesis_ts: int = T0) -> None:
        self.miners = {k.key_id: k for k in miners}
        self.author = author
        self.registry = MinerRegistry.from_keys([k.public_key for k in miners], [author.public_key])
        self.blocks = [model.genesis_block(genesis_ts)]

    def nonce(self, key_id: bytes, height: int) -> bytes:
        return hashlib.sha256(b"nonce" + key_id + height.to_bytes(8, "big")).digest()

    def next_block(self, txns=(), attempt: int = 0, ts_step: int = 10_000) -> Block:
        prev = self.blocks[-1]
        h = prev.height + 1
        participants = tuple(
            sorted(
                (model.make_participant(h, attempt, self.nonce(k, h), key) for k, key in self.miners.items()),
                key=lambda p: p.miner_key_id,
            )
        )
        record = MiningRecord(h, attempt, participants)
        producer = select_miner(record.reveals(), None, h, attempt)
        block = Block(h, model.compute_block_hash(prev), prev.timestamp + ts_step, producer,
                      tuple(txns), record, Signature.empty())
        block = model.sign_block(block, self.miners[producer])
        self.blocks.append(block)
        return block

    def anchor(self, entries, per_block: int = 3) -> list[Block]:
        txns = [model.make_transaction(e, self.author) for e in entries]
        for i in range(0, len(txns), per_block):
            self.next_block(txns[i:i + per_block])
        return self.blocks


def entry_series(author, n: int, trial: str = "T1", start_ts: int = T0 + 1):
    return [
        model.make_entry(i, trial, start_ts + i, (FieldOp.set(f"r{i}", "blood_type", "AB"),
                                                  FieldOp.set(f"r{i}", "age", str(30 + i))), author)
        for i in range(1, n + 1)
    ]


@pytest.fixture
def miners():
    return [seeded_key(i) for i in (1, 2, 3)]


@pytest.fixture
def author():
    return seeded_key(9)


@pytest.fixture
def builder(miners, author):
    return ChainBuilder(miners, author)


def write_cluster(root: Path, keys, author, *, interval_ms: int = 500, timeouts_ms: int = 1500) -> list[Path]:
    """Key, registry, peers and config files for a local TCP cluster; returns config paths."""
    from scrybe.config import save_keypair
    from scrybe.network.tcp import Peer, format_peers

    root.mkdir(parents=True, exist_ok=True)
    registry = MinerRegistry.from_keys([k.public_key for k in keys], [author.public_key])
    (root / "registry.txt").write_text(registry.dumps())
    ports = [free_port() for _ in keys]
    (root / "peers.txt").write_text(format_peers([Peer(k.key_id, "127.0.0.1", p) for k, p in zip(keys, ports)]))
    configs = []
    for i, (key, port) in enumerate(zip(keys, ports)):
        save_keypair(key, root / f"miner{i}.key")
        cfg = root / f"node{i}.conf"
        cfg.write_text(
            f"key_path = miner{i}.key\n"
            "registry_file = registry.txt\n"
            "peers_file = peers.txt\n"
            f"data_dir = data{i}\n"
            f"listen = 127.0.0.1:{port}\n"
            "http_listen = 127.0.0.1:0\n"
            f"block_interval_ms = {interval_ms}\n"
            f"commit_timeout_ms = {timeouts_ms}\n"
            f"reveal_timeout_ms = {timeouts_ms}\n"
            f"produce_timeout_ms = {2 * timeouts_ms}\n"
        )
        configs.append(cfg)
    return configs


def wait_for(predicate, timeout: float = 30.0, interval: float = 0.1) -> bool:
    import time

    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}\t{'PASS' if ok else 'FAIL'}\t{title}\t{detail}")
