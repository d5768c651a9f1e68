"""The miner process: consensus over TCP, a persisted chain and an HTTP API.

HTTP endpoints::

    GET  /chain?from=H    blocks H..tip as JSON
    GET  /status          height, tip hash, key id, round progress
    POST /transactions    submit one transaction (JSON)

Config file keys (``key = value``)::

    key_path            miner key file                        (required)
    registry_file       miner/author registry                 (required)
    peers_file          "<key_id> <host:port>" per line       (required)
    data_dir            where blocks.log and pool.log live    (required)
    listen              host:port for peer traffic            (required)
    http_listen         host:port for the HTTP API            (default 127.0.0.1:0)
    block_interval_ms   target spacing between blocks         (default 10000)
    commit_timeout_ms, reveal_timeout_ms, produce_timeout_ms  phase deadlines
    genesis_timestamp_ms                                      shared genesis time
"""

from __future__ import annotations

import heapq
import itertools
import logging
import queue
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass
from pathlib import Path

from . import model
from .chainstore import ChainError, ChainStore, chain_file
from .config import Config, ConfigError, load_config, load_keypair
from .consensus import ConsensusParams, Miner, Verdict
from .crypto import Digest, KeyPair
from .encoding import DecodeError
from .logfile import AppendOnlyLog
from .model import Block, MinerRegistry, Transaction
from .network.envelope import Envelope
from .network.tcp import Peer, TcpTransport, load_peers
from .web import HttpError, JsonClient, JsonServer, Unreachable

logger = logging.getLogger(__name__)

POOL_FILE = "pool.log"


@dataclass
class NodeConfig:
    key: KeyPair
    registry: MinerRegistry
    peers: list[Peer]
    data_dir: Path
    listen: tuple[str, int]
    http_listen: tuple[str, int]
    params: ConsensusParams
    genesis_timestamp_ms: int = model.GENESIS_TIMESTAMP_MS

    @classmethod
    def from_config(cls, cfg: Config) -> "NodeConfig":
        key = load_keypair(cfg.path("key_path"))
        try:
            registry = MinerRegistry.loads(cfg.path("registry_file").read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"registry: {exc}") from None
        try:
            peers = load_peers(cfg.path("peers_file"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"peers: {exc}") from None
        if key.key_id not in registry:
            # allowed, but every honest peer will drop our messages
            logger.warning("this node's key %s is not in the registry", key.key_id.hex()[:16])
        defaults = ConsensusParams()
        params = ConsensusParams(
            block_interval_ms=cfg.integer("block_interval_ms", defaults.block_interval_ms),
            commit_timeout_ms=cfg.integer("commit_timeout_ms", defaults.commit_timeout_ms),
            reveal_timeout_ms=cfg.integer("reveal_timeout_ms", defaults.reveal_timeout_ms),
            produce_timeout_ms=cfg.integer("produce_timeout_ms", defaults.produce_timeout_ms),
        )
        return cls(
            key=key,
            registry=registry,
            peers=[p for p in peers if p.key_id != key.key_id],
            data_dir=cfg.path("data_dir"),
            listen=cfg.address("listen"),
            http_listen=cfg.address("http_listen", "127.0.0.1:0"),
            params=params,
            genesis_timestamp_ms=cfg.integer("genesis_timestamp_ms", model.GENESIS_TIMESTAMP_MS),
        )


class NodeService:
    """One miner: a single event-loop thread owns the :class:`Miner`.

    Network reader threads and HTTP handlers never touch consensus state;
    they post onto ``events`` and the loop processes them in order.
    """

    def __init__(self, config: NodeConfig) -> None:
        self.config = config
        config.data_dir.mkdir(parents=True, exist_ok=True)
        self.chain = ChainStore(
            config.registry, chain_file(config.data_dir), genesis_timestamp=config.genesis_timestamp_ms
        )
        if self.chain.dropped_on_load:
            logger.warning("dropped %d invalid trailing blocks from disk", self.chain.dropped_on_load)
        self.pool_log = AppendOnlyLog(config.data_dir / POOL_FILE)
        self._recovered = self._load_pool()
        self.events: queue.Queue = queue.Queue()
        self._timers: list[tuple[int, int, tuple]] = []
        self._seq = itertools.count()
        self._stop = threading.Event()
        self.transport = TcpTransport(config.listen, config.peers, self._deliver)
        self.miner = Miner(config.key, config.registry, self.chain, self, config.params)
        self.http = JsonServer(self._http, *config.http_listen)
        self._thread: threading.Thread | None = None

    def _load_pool(self) -> list[Transaction]:
        """Acknowledged transactions not yet on chain; compacts the pool file."""
        pending, seen = [], set()
        for payload in self.pool_log.snapshot():
            try:
                txn = model.decode_transaction(payload)
            except (DecodeError, ValueError):
                continue
            digest = model.compute_txn_digest(txn)
            if digest not in self.chain.txn_digests and digest not in seen:
                seen.add(digest)
                pending.append(txn)
        if len(pending) != len(self.pool_log):
            self.pool_log.rewrite(model.canonical_encode(t) for t in pending)
        return pending

    # -- outbox used by the Miner (event-loop thread only) ---------------------------

    def now_ms(self) -> int:
        return time.time_ns() // 1_000_000

    def broadcast(self, env: Envelope) -> int:
        return self.transport.broadcast(env)

    def send(self, peer: Digest, env: Envelope) -> bool:
        return self.transport.send(peer, env)

    def schedule(self, at_ms: int, tag: tuple) -> None:
        heapq.heappush(self._timers, (at_ms, next(self._seq), tag))

    def peer_ids(self) -> list[Digest]:
        return self.transport.peer_ids()

    # -- event loop -----------------------------------------------------------------

    def _deliver(self, env: Envelope) -> None:
        self.events.put(("env", env))

    def call(self, fn, *args, timeout: float = 10.0):
        """Run ``fn(*args)`` on the event loop and wait for its result."""
        fut: Future = Future()
        self.events.put(("call", fn, args, fut))
        return fut.result(timeout)

    def _loop(self) -> None:
        for txn in self._recovered:
            self.miner.submit_transaction(txn)
        if self._recovered:
            logger.info("re-submitted %d pending transactions from %s", len(self._recovered), POOL_FILE)
        self.miner.boot()
        self.miner.request_sync()
        while not self._stop.is_set():
            now = self.now_ms()
            while self._timers and self._timers[0][0] <= now:
                _, _, tag = heapq.heappop(self._timers)
                self._guard(self.miner.on_timer, tag)
            wait = 0.1
            if self._timers:
                wait = min(wait, max(0.0, (self._timers[0][0] - now) / 1000))
            try:
                item = self.events.get(timeout=wait)
            except queue.Empty:
                continue
            if item[0] == "env":
                self._guard(self.miner.handle, item[1])
            elif item[0] == "call":
                _, fn, args, fut = item
                try:
                    fut.set_result(fn(*args))
                except Exception as exc:  # noqa: BLE001 - handed back to the caller
                    fut.set_exception(exc)
            elif item[0] == "stop":
                break

    def _guard(self, fn, *args) -> None:
        try:
            fn(*args)
        except Exception:  # noqa: BLE001 - runtime errors must not halt the round loop
            logger.exception("error in event loop")

    # -- lifecycle -------------------------------------------------------------------

    def start(self) -> "NodeService":
        self.transport.start()
        self.http.start()
        self._thread = threading.Thread(target=self._loop, name="node-loop", daemon=True)
        self._thread.start()
        logger.info(
            "node ready key=%s height=%d listen=%s:%d http=%s",
            self.config.key.key_id.hex()[:16], self.chain.height, *self.transport.address, self.http.url,
        )
        return self

    def stop(self) -> None:
        self._stop.set()
        self.events.put(("stop",))
        if self._thread is not None:
            self._thread.join(5)
        self.http.stop()
        self.transport.close()
        self.chain.close()
        self.pool_log.close()

    def wait(self) -> None:
        self._stop.wait()

    # -- API --------------------------------------------------------------------------

    def submit_transaction(self, txn: Transaction) -> Verdict:
        """Pool a client transaction; it is on disk before this returns ACCEPT."""
        return self.call(self._accept_client_txn, txn)

    def _accept_client_txn(self, txn: Transaction) -> Verdict:
        verdict = self.miner.submit_transaction(txn)
        if verdict:
            self.pool_log.append(model.canonical_encode(txn))
        return verdict

    def get_chain(self, from_height: int = 0) -> list[Block]:
        """Blocks ``from_height..tip``; raises ChainError OUT_OF_RANGE past the tip."""
        # the block list is append-only, so a slice is a consistent snapshot
        return self.chain.blocks(from_height)

    def status(self) -> dict:
        s = self.miner.state
        return {
            "key_id": self.config.key.key_id.hex(),
            "height": self.chain.height,
            "tip_hash": self.chain.tip_hash.hex(),
            "round": s.round,
            "attempt": s.attempt,
            "phase": s.phase.value,
            "pool": len(self.miner.pool),
        }

    def _http(self, method, path, query, body, headers):
        if method == "GET" and path == "/chain":
            try:
                start = int(query.get("from", 0))
                blocks = self.get_chain(start)
            except ValueError:
                raise HttpError(400, "from must be an integer", "BAD_REQUEST") from None
            except ChainError as exc:
                raise HttpError(416, str(exc), "OUT_OF_RANGE") from None
            return 200, {"blocks": [model.block_to_json(b) for b in blocks]}
        if method == "GET" and path == "/status":
            return 200, self.status()
        if method == "POST" and path == "/transactions":
            try:
                txn = model.txn_from_json(body)
            except (TypeError, KeyError, ValueError) as exc:
                raise HttpError(400, f"malformed transaction: {exc}", "BAD_REQUEST") from None
            verdict = self.submit_transaction(txn)
            if not verdict:
                code = verdict.reason.split(":", 1)[0]
                raise HttpError(409 if code == "DUPLICATE" else 422, verdict.reason, code)
            return 202, {"status": "accepted", "digest": model.compute_txn_digest(txn).hex()}
        raise HttpError(404, f"no route {method} {path}", "NOT_FOUND")


def run_node(config: Config | NodeConfig) -> NodeService:
    """Start a node in background threads; call ``stop()`` to shut it down."""
    if isinstance(config, Config):
        config = NodeConfig.from_config(config)
    return NodeService(config).start()


def load_node_config(path) -> NodeConfig:
    return NodeConfig.from_config(load_config(path))


class NodeError(Exception):
    def __init__(self, code: str, message: str) -> None:
        super().__init__(f"{code}: {message}")
        self.code = code


class NodeClient:
    """Talks to one or more nodes; requests fail over to the next address."""

    def __init__(self, urls: str | list[str], timeout: float = 10.0) -> None:
        if isinstance(urls, str):
            urls = [u for u in urls.split(",") if u]
        self.clients = [JsonClient(u, timeout=timeout) for u in urls]

    def _request(self, method: str, path: str, body=None):
        last: Exception = Unreachable("no node addresses configured")
        for client in self.clients:
            try:
                return client.request(method, path, body)
            except Unreachable as exc:
                last = exc
        raise last

    def submit(self, txn: Transaction) -> str:
        try:
            return self._request("POST", "/transactions", model.txn_to_json(txn))["digest"]
        except HttpError as exc:
            raise NodeError(exc.code or "ERROR", exc.message) from None

    def get_chain(self, from_height: int = 0) -> list[Block]:
        try:
            obj = self._request("GET", f"/chain?from={from_height}")
        except HttpError as exc:
            raise NodeError(exc.code or "ERROR", exc.message) from None
        return [model.block_from_json(b) for b in obj["blocks"]]

    def status(self) -> dict:
        return self._request("GET", "/status")
