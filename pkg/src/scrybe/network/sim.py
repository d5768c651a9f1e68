"""Deterministic discrete-event network for running many miners in one process.

Virtual time is an integer millisecond counter starting at the genesis
timestamp.  Every random choice (link delays, drops, miner nonces, key
generation) comes from a stream derived from the run seed and the
identities involved, so a run is reproducible byte-for-byte and adding a
node never perturbs the randomness seen by the others.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import os
import random
import statistics
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .. import crypto, model
from ..chainstore import ChainStore
from ..consensus import Commit, ConsensusParams, Miner
from ..crypto import Digest, KeyPair
from ..model import Block, MinerRegistry, Transaction
from ..selection import commitment_for
from .envelope import Envelope, MsgType, seal

HONEST = "honest"
ROGUE = "rogue"  # key not in the registry
EQUIVOCATE = "equivocate"  # sends conflicting commits to different peers
SILENT_PRODUCER = "silent_producer"  # takes part but never publishes a block
BEHAVIOURS = (HONEST, ROGUE, EQUIVOCATE, SILENT_PRODUCER)


# -- fault plan -------------------------------------------------------------------

@dataclass(frozen=True)
class LinkFault:
    drop_probability: float = 0.0
    delay_min_ms: int = 5
    delay_max_ms: int = 50


@dataclass(frozen=True)
class Partition:
    start_ms: int
    end_ms: int
    groups: tuple[frozenset[int], ...]

    def separates(self, a: int, b: int, t: int) -> bool:
        if not self.start_ms <= t < self.end_ms:
            return False
        for group in self.groups:
            if (a in group) != (b in group):
                return True
        return False


@dataclass(frozen=True)
class Crash:
    node: int
    at_ms: int
    restart_ms: int | None = None


@dataclass
class FaultPlan:
    """Faults to inject; times are virtual milliseconds since the run started."""

    default: LinkFault = field(default_factory=LinkFault)
    links: dict[tuple[int, int], LinkFault] = field(default_factory=dict)
    partitions: list[Partition] = field(default_factory=list)
    partition_mode: str = "defer"  # or "drop"
    crashes: list[Crash] = field(default_factory=list)
    # round -> downtime: the miner selected to produce that round crashes
    # instead of publishing (first attempt only) and restarts after downtime
    producer_crashes: dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for link in [self.default, *self.links.values()]:
            if not 0.0 <= link.drop_probability <= 1.0:
                raise ValueError("drop probability must be in [0, 1]")
            if not 0 <= link.delay_min_ms <= link.delay_max_ms:
                raise ValueError("delay range must satisfy 0 <= min <= max")
        if self.partition_mode not in ("defer", "drop"):
            raise ValueError("partition_mode must be 'defer' or 'drop'")
        by_node: dict[int, list[Crash]] = {}
        for c in self.crashes:
            by_node.setdefault(c.node, []).append(c)
        for node, crashes in by_node.items():
            crashes.sort(key=lambda c: c.at_ms)
            for a, b in zip(crashes, crashes[1:]):
                if a.restart_ms is None or a.restart_ms > b.at_ms:
                    raise ValueError(f"overlapping crash schedule for node {node}")

    def link(self, src: int, dst: int) -> LinkFault:
        return self.links.get((src, dst), self.default)

    @classmethod
    def from_json(cls, obj: dict) -> "FaultPlan":
        def lf(o: dict) -> LinkFault:
            return LinkFault(float(o.get("drop_probability", 0.0)), int(o.get("delay_min_ms", 5)), int(o.get("delay_max_ms", 50)))

        return cls(
            default=lf(obj.get("default", {})),
            links={(int(l["src"]), int(l["dst"])): lf(l) for l in obj.get("links", [])},
            partitions=[
                Partition(int(p["start_ms"]), int(p["end_ms"]), tuple(frozenset(g) for g in p["groups"]))
                for p in obj.get("partitions", [])
            ],
            partition_mode=obj.get("partition_mode", "defer"),
            crashes=[Crash(int(c["node"]), int(c["at_ms"]), c.get("restart_ms")) for c in obj.get("crashes", [])],
            producer_crashes={int(k): int(v) for k, v in obj.get("producer_crashes", {}).items()},
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FaultPlan":
        return cls.from_json(json.loads(Path(path).read_text()))


# -- deterministic randomness ----------------------------------------------------

def derive_seed(seed: int, *parts: object) -> bytes:
    h = hashlib.sha256(str(seed).encode())
    for part in parts:
        h.update(b"\x00")
        h.update(part if isinstance(part, bytes) else str(part).encode())
    return h.digest()


def derive_rng(seed: int, *parts: object) -> random.Random:
    return random.Random(int.from_bytes(derive_seed(seed, *parts), "big"))


def sim_keypair(seed: int, index: int, role: str = "miner") -> KeyPair:
    return crypto.generate_keypair(derive_seed(seed, "key", role, index))


# -- adversarial miners ------------------------------------------------------------

class RogueMiner(Miner):
    """Unregistered node that keeps pushing commits and forged proposals."""

    def start_attempt(self, attempt: int) -> Envelope:
        env = super().start_attempt(attempt)
        s = self.state
        forged = model.sign_block(
            Block(s.round, self.chain.tip_hash, self._now(), self.me, (),
                  model.MiningRecord(s.round, attempt, (model.make_participant(s.round, attempt, s.my_nonce, self.key),)),
                  crypto.Signature.empty()),
            self.key,
        )
        self.out.broadcast(seal(MsgType.PROPOSAL, s.round, attempt, model.canonical_encode(forged), self.key))
        return env


class EquivocatingMiner(Miner):
    """Sends one commitment to half of its peers and a different one to the rest."""

    def _broadcast(self, msg_type: MsgType, payload: bytes) -> Envelope:
        if msg_type is not MsgType.COMMIT:
            return super()._broadcast(msg_type, payload)
        s = self.state
        env = seal(msg_type, s.round, s.attempt, payload, self.key)
        other = commitment_for(self._nonce(), s.round, s.attempt)
        psig = crypto.sign(model.commit_signing_bytes(s.round, s.attempt, self.me, other), self.key)
        twin = seal(msg_type, s.round, s.attempt, Commit(other, psig, ()).encode(), self.key)
        for i, peer in enumerate(self.out.peer_ids()):
            self.out.send(peer, env if i % 2 == 0 else twin)
        return env


# -- simulator -------------------------------------------------------------------

class _Outbox:
    def __init__(self, sim: "Simulator", index: int) -> None:
        self.sim = sim
        self.index = index

    def now_ms(self) -> int:
        return self.sim.now

    def broadcast(self, env: Envelope) -> int:
        return sum(self.sim._send(self.index, dst, env) for dst in self.sim.peers_of(self.index))

    def send(self, peer: Digest, env: Envelope) -> bool:
        dst = self.sim.index_of.get(peer)
        if dst is None:
            return False
        return self.sim._send(self.index, dst, env)

    def schedule(self, at_ms: int, tag: tuple) -> None:
        node = self.sim.nodes[self.index]
        self.sim._push(at_ms, "timer", (self.index, node.incarnation, tag))

    def peer_ids(self) -> list[Digest]:
        return [self.sim.nodes[i].key.key_id for i in self.sim.peers_of(self.index)]


@dataclass
class SimNode:
    index: int
    key: KeyPair
    behaviour: str
    chain: ChainStore
    miner: Miner | None = None
    alive: bool = True
    incarnation: int = 0
    crashes: int = 0


@dataclass
class SimResult:
    trace: list[str]
    chains: dict[int, list[Block]]
    honest: list[int]
    keys: list[Digest]
    sent: Counter
    sent_by_type: Counter
    rejected: Counter
    end_ms: int

    def chain_hashes(self, index: int) -> list[str]:
        return [model.compute_block_hash(b).hex() for b in self.chains[index]]

    def agreement(self) -> bool:
        """All honest nodes hold the same chain."""
        reference = self.chain_hashes(self.honest[0])
        return all(self.chain_hashes(i) == reference for i in self.honest)

    def selection_counts(self, index: int | None = None) -> Counter:
        chain = self.chains[self.honest[0] if index is None else index]
        return Counter(b.miner_key_id for b in chain[1:])

    def attempt_log(self, index: int | None = None) -> dict[int, int]:
        chain = self.chains[self.honest[0] if index is None else index]
        return {b.height: b.mining_record.attempt for b in chain[1:]}

    def trace_text(self) -> str:
        return "\n".join(self.trace) + ("\n" if self.trace else "")


class Simulator:
    """Runs ``n_miners`` registered miners (plus optional extra nodes).

    ``behaviours`` assigns a behaviour per node index; nodes beyond the
    registered miners are always rogue.  ``submissions`` is a list of
    ``(time_ms, node_index, Transaction)`` fed in through
    :meth:`Miner.submit_transaction`.
    """

    def __init__(
        self,
        n_miners: int,
        seed: int,
        fault_plan: FaultPlan | None = None,
        params: ConsensusParams = ConsensusParams(),
        *,
        rounds: int | None = None,
        behaviours: Sequence[str] = (),
        rogue_nodes: int = 0,
        authors: Iterable[bytes] = (),
        submissions: Sequence[tuple[int, int, Transaction]] = (),
        data_dir: str | os.PathLike | None = None,
        record_trace: bool = True,
    ) -> None:
        if n_miners < 1:
            raise ValueError("need at least one miner")
        self.seed = seed
        self.plan = fault_plan or FaultPlan()
        self.params = params
        self.rounds = rounds
        self.record_trace = record_trace
        self.trace: list[str] = []
        self.now = model.GENESIS_TIMESTAMP_MS
        self._start = self.now
        self._heap: list = []
        self._seq = 0
        self.sent: Counter = Counter()
        self.sent_by_type: Counter = Counter()
        self._link_rngs: dict[tuple[int, int], random.Random] = {}

        keys = [sim_keypair(seed, i) for i in range(n_miners)]
        keys += [sim_keypair(seed, i, "rogue") for i in range(rogue_nodes)]
        self.registry = MinerRegistry.from_keys([k.public_key for k in keys[:n_miners]], authors)
        behaviours = list(behaviours) + [HONEST] * (n_miners - len(behaviours))
        behaviours += [ROGUE] * rogue_nodes
        self.nodes: list[SimNode] = []
        for i, key in enumerate(keys):
            path = None if data_dir is None else Path(data_dir) / f"node{i}" / "blocks.log"
            registry = self.registry
            if behaviours[i] == ROGUE:
                registry = MinerRegistry.from_keys(
                    [*(k.public_key for k in keys[:n_miners]), key.public_key], authors
                )
            chain = ChainStore(registry, path, fsync=False)
            self.nodes.append(SimNode(i, key, behaviours[i], chain))
        self.index_of = {n.key.key_id: n.index for n in self.nodes}
        self.n_miners = n_miners
        for c in self.plan.crashes:
            self._push(self._start + c.at_ms, "crash", (c.node, None))
            if c.restart_ms is not None:
                self._push(self._start + c.restart_ms, "restart", c.node)
        for at, node, txn in submissions:
            self._push(self._start + at, "submit", (node, txn))
        self._producer_crashed: set[int] = set()

    # -- topology ---------------------------------------------------------------

    def peers_of(self, index: int) -> list[int]:
        # registered miners only know each other; a rogue node sprays everyone
        if index < self.n_miners:
            return [i for i in range(self.n_miners) if i != index]
        return [i for i in range(len(self.nodes)) if i != index]

    @property
    def honest_indices(self) -> list[int]:
        return [n.index for n in self.nodes if n.behaviour == HONEST]

    # -- event plumbing -----------------------------------------------------------

    def _push(self, at: int, kind: str, data) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (at, self._seq, kind, data))

    def _log(self, text: str) -> None:
        if self.record_trace:
            self.trace.append(f"{self.now - self._start:>10} {text}")

    def _link_rng(self, src: int, dst: int) -> random.Random:
        rng = self._link_rngs.get((src, dst))
        if rng is None:
            rng = derive_rng(self.seed, "link", self.nodes[src].key.key_id, self.nodes[dst].key.key_id)
            self._link_rngs[(src, dst)] = rng
        return rng

    def _send(self, src: int, dst: int, env: Envelope) -> bool:
        self.sent[src] += 1
        self.sent_by_type[(src, env.msg_type.name)] += 1
        tag = f"{env.msg_type.name} r={env.round} a={env.attempt} {src}->{dst}"
        link = self.plan.link(src, dst)
        rng = self._link_rng(src, dst)
        if link.drop_probability and rng.random() < link.drop_probability:
            self._log(f"DROP {tag} link")
            return False
        at = self.now + rng.randint(link.delay_min_ms, link.delay_max_ms)
        for p in self.plan.partitions:
            if p.separates(src, dst, self.now - self._start):
                if self.plan.partition_mode == "drop":
                    self._log(f"DROP {tag} partition")
                    return False
                at = max(at, self._start + p.end_ms)
        self._log(f"SEND {tag} at={at - self._start}")
        self._push(at, "deliver", (dst, src, env))
        return True

    def _make_miner(self, node: SimNode) -> Miner:
        cls = {ROGUE: RogueMiner, EQUIVOCATE: EquivocatingMiner}.get(node.behaviour, Miner)
        miner = cls(
            node.key,
            node.chain.registry,
            node.chain,
            _Outbox(self, node.index),
            self.params,
            rng=derive_rng(self.seed, "nonce", node.key.key_id, node.incarnation),
            max_height=self.rounds,
            trace=lambda kind, text, i=node.index: self._log(f"{kind} node={i} {text}"),
        )
        if node.behaviour == SILENT_PRODUCER:
            miner.before_produce = lambda m, b: False
        elif self.plan.producer_crashes:
            miner.before_produce = self._maybe_crash_producer
        return miner

    def _maybe_crash_producer(self, miner: Miner, block: Block) -> bool:
        r = block.height
        downtime = self.plan.producer_crashes.get(r)
        if downtime is None or r in self._producer_crashed:
            return True
        self._producer_crashed.add(r)
        index = self.index_of[miner.me]
        self._log(f"PRODUCER_CRASH node={index} r={r} a={block.mining_record.attempt}")
        self._crash(index)
        self._push(self.now + downtime, "restart", index)
        return False

    def _crash(self, index: int) -> None:
        node = self.nodes[index]
        if not node.alive:
            return
        node.alive = False
        node.incarnation += 1
        node.crashes += 1
        node.miner = None
        self._log(f"CRASH node={index}")

    def _restart(self, index: int) -> None:
        node = self.nodes[index]
        if node.alive:
            return
        node.alive = True
        node.miner = self._make_miner(node)
        self._log(f"RESTART node={index} height={node.chain.height}")
        node.miner.boot()

    # -- run ---------------------------------------------------------------------

    def run(self, duration_ms: int | None = None) -> SimResult:
        if duration_ms is None:
            if self.rounds is None:
                raise ValueError("give rounds or duration_ms")
            p = self.params
            per_round = p.block_interval_ms + p.commit_timeout_ms + p.reveal_timeout_ms + p.produce_timeout_ms
            duration_ms = (self.rounds + 5) * per_round * 4
        end = self._start + duration_ms
        for node in self.nodes:
            node.miner = self._make_miner(node)
            node.miner.boot()
        rejected: Counter = Counter()
        # run to quiescence: miners stop scheduling once they reach the round cap
        while self._heap:
            at, _, kind, data = heapq.heappop(self._heap)
            if at > end:
                break
            self.now = at
            if kind == "deliver":
                dst, src, env = data
                node = self.nodes[dst]
                if not node.alive:
                    self._log(f"DROP {env.msg_type.name} r={env.round} a={env.attempt} {src}->{dst} dead")
                    continue
                self._log(f"DELIVER {env.msg_type.name} r={env.round} a={env.attempt} {src}->{dst}")
                miner = node.miner
                before = miner.rejected_envelopes
                miner.handle(env)
                rejected[dst] += miner.rejected_envelopes - before
            elif kind == "timer":
                index, incarnation, tag = data
                node = self.nodes[index]
                if node.alive and node.incarnation == incarnation:
                    node.miner.on_timer(tag)
            elif kind == "crash":
                self._crash(data[0])
            elif kind == "restart":
                self._restart(data)
            elif kind == "submit":
                index, txn = data
                node = self.nodes[index]
                if node.alive:
                    verdict = node.miner.submit_transaction(txn)
                    self._log(f"SUBMIT node={index} entry={txn.entry_id} {'OK' if verdict else verdict.reason}")
        for node in self.nodes:
            node.chain.close()
        return SimResult(
            trace=self.trace,
            chains={n.index: n.chain.blocks() for n in self.nodes},
            honest=self.honest_indices,
            keys=[n.key.key_id for n in self.nodes],
            sent=self.sent,
            sent_by_type=self.sent_by_type,
            rejected=rejected,
            end_ms=self.now - self._start,
        )


def run_simulation(
    n_miners: int,
    fault_plan: FaultPlan | None = None,
    seed: int = 0,
    duration_ms: int | None = None,
    **kwargs,
) -> SimResult:
    return Simulator(n_miners, seed, fault_plan, **kwargs).run(duration_ms)


# -- measurements ------------------------------------------------------------------

def messages_per_node_round(n_miners: int, rounds: int, seed: int = 0) -> float:
    """Mean messages sent per node per round in a fault-free run."""
    result = run_simulation(n_miners, seed=seed, rounds=rounds, record_trace=False)
    height = len(result.chains[result.honest[0]]) - 1
    if height < rounds:
        raise RuntimeError(f"fault-free run stalled at height {height}")
    return sum(result.sent.values()) / n_miners / rounds


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares ``(slope, intercept, r_squared)``."""
    slope, intercept = statistics.linear_regression(xs, ys)
    mean = statistics.fmean(ys)
    total = sum((y - mean) ** 2 for y in ys)
    resid = sum((y - (slope * x + intercept)) ** 2 for x, y in zip(xs, ys))
    return slope, intercept, 1.0 - resid / total if total else 1.0
