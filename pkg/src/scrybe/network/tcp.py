"""Length-prefixed envelope frames over TCP.

Connections are one-directional: a node dials each peer and only writes to
that socket, and only reads from sockets peers dialed into it.  Nothing
on the wire identifies a connection with a key; every envelope is signed,
so the consensus layer checks the sender itself.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from ..crypto import Digest
from .envelope import Envelope, FrameError, read_frame, wire_encode

logger = logging.getLogger(__name__)

OUTBOX_LIMIT = 10_000
RECONNECT_DELAY_S = 0.5


@dataclass(frozen=True)
class Peer:
    key_id: Digest
    host: str
    port: int


def parse_peers(text: str) -> list[Peer]:
    """``<key_id hex> <host:port>`` per line; ``#`` starts a comment."""
    peers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError("expected '<key_id> <host:port>'")
            host, _, port = parts[1].rpartition(":")
            peers.append(Peer(Digest.fromhex(parts[0]), host or "127.0.0.1", int(port)))
        except ValueError as exc:
            raise ValueError(f"peers line {lineno}: {exc}") from None
    return peers


def load_peers(path: str | Path) -> list[Peer]:
    return parse_peers(Path(path).read_text())


def format_peers(peers: list[Peer]) -> str:
    return "".join(f"{p.key_id.hex()} {p.host}:{p.port}\n" for p in peers)


def _recv_exact(sock: socket.socket) -> Callable[[int], bytes]:
    def recv(n: int) -> bytes:
        chunks, need = [], n
        while need:
            chunk = sock.recv(need)
            if not chunk:
                raise ConnectionError("peer closed the connection")
            chunks.append(chunk)
            need -= len(chunk)
        return b"".join(chunks)
    return recv


class _PeerLink:
    """Outgoing connection to one peer with its own writer thread."""

    def __init__(self, peer: Peer, stopping: threading.Event) -> None:
        self.peer = peer
        self.queue: queue.Queue[bytes | None] = queue.Queue(OUTBOX_LIMIT)
        self._stopping = stopping
        self._sock: socket.socket | None = None
        self.thread = threading.Thread(target=self._run, name=f"tcp-out-{peer.port}", daemon=True)

    def enqueue(self, frame: bytes) -> bool:
        try:
            self.queue.put_nowait(frame)
            return True
        except queue.Full:
            return False

    def _connect(self) -> socket.socket | None:
        try:
            sock = socket.create_connection((self.peer.host, self.peer.port), timeout=2.0)
        except OSError:
            return None
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        return sock

    def _run(self) -> None:
        while not self._stopping.is_set():
            frame = self.queue.get()
            if frame is None:
                break
            if self._sock is None:
                self._sock = self._connect()
                if self._sock is None:
                    # peer down: drop the frame, the protocol tolerates loss
                    time.sleep(RECONNECT_DELAY_S)
                    continue
            try:
                self._sock.sendall(frame)
            except OSError:
                self._sock.close()
                self._sock = None
        if self._sock is not None:
            self._sock.close()

    def close(self) -> None:
        try:
            self.queue.put_nowait(None)
        except queue.Full:
            pass


class TcpTransport:
    """Listens for peer connections and delivers envelopes to ``deliver``.

    ``deliver`` is called from reader threads; the node hands the envelope
    to its event queue there.
    """

    def __init__(self, listen: tuple[str, int], peers: list[Peer], deliver: Callable[[Envelope], None]) -> None:
        self.peers = {p.key_id: p for p in peers}
        self.deliver = deliver
        self._stopping = threading.Event()
        self._server = socket.create_server(listen, reuse_port=False)
        self._server.settimeout(0.2)
        self._links = {k: _PeerLink(p, self._stopping) for k, p in self.peers.items()}
        self._readers: list[socket.socket] = []
        self._lock = threading.Lock()
        self.frame_errors = 0

    @property
    def address(self) -> tuple[str, int]:
        return self._server.getsockname()[:2]

    def start(self) -> "TcpTransport":
        threading.Thread(target=self._accept_loop, name="tcp-accept", daemon=True).start()
        for link in self._links.values():
            link.thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, _ = self._server.accept()
            except (socket.timeout, TimeoutError):
                continue
            except OSError:
                break
            conn.settimeout(None)
            with self._lock:
                self._readers.append(conn)
            threading.Thread(target=self._read_loop, args=(conn,), name="tcp-in", daemon=True).start()

    def _read_loop(self, conn: socket.socket) -> None:
        recv = _recv_exact(conn)
        try:
            while not self._stopping.is_set():
                try:
                    env = read_frame(recv)
                except FrameError as exc:
                    # framing is lost after a bad length; drop the connection
                    self.frame_errors += 1
                    logger.warning("dropping connection after bad frame: %s", exc)
                    break
                self.deliver(env)
        except OSError:
            pass
        finally:
            conn.close()
            with self._lock:
                if conn in self._readers:
                    self._readers.remove(conn)

    def broadcast(self, env: Envelope) -> int:
        frame = wire_encode(env)
        return sum(link.enqueue(frame) for link in self._links.values())

    def send(self, peer: Digest, env: Envelope) -> bool:
        link = self._links.get(peer)
        return link is not None and link.enqueue(wire_encode(env))

    def peer_ids(self) -> list[Digest]:
        return list(self.peers)

    def close(self) -> None:
        self._stopping.set()
        for link in self._links.values():
            link.close()
        self._server.close()
        with self._lock:
            for conn in self._readers:
                try:
                    conn.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                conn.close()
