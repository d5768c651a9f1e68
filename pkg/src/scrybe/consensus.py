"""The permissioned mining round.

Every round picks one producer from the authorized miners by
commit-reveal.  Each miner broadcasts a signed commitment to a fresh
nonce (together with the digests of the transactions it holds), then
reveals the nonce.  The hash of the sorted reveals picks the producer,
who builds and signs the block and embeds every participant's commit and
reveal so that anyone can recompute the choice later.

A :class:`Miner` is a single-threaded state machine.  It never touches
sockets or wall clocks directly; it is driven through :meth:`Miner.handle`
(incoming envelopes), :meth:`Miner.on_timer` and
:meth:`Miner.submit_transaction`, and talks back through an ``outbox``
exposing ``broadcast(env)``, ``send(peer_key_id, env)``,
``schedule(at_ms, tag)`` and ``now_ms()``.  The simulator and the TCP
node service both implement that outbox.
"""

from __future__ import annotations

import enum
import logging
import os
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable

from . import crypto, model
from .chainstore import ChainStore
from .crypto import Digest, KeyPair, Signature
from .encoding import DecodeError, Reader, Writer
from .model import Block, MinerRegistry, MiningRecord, Participant, Transaction
from .network.envelope import Envelope, MsgType, seal
from .selection import NONCE_SIZE, NoQuorum, commitment_for, quorum_size, select_miner

logger = logging.getLogger(__name__)

MAX_BLOCK_TXNS = 5000
MAX_CHAIN_RESPONSE = 256
MAX_ATTEMPT_SKIP = 16
FORK_LOOKBACK = 16
MAX_BUFFER = 20_000
# client transactions still unanchored this many rounds later are gossiped again
REGOSSIP_ROUNDS = 2


class Phase(enum.Enum):
    COLLECTING = "COLLECTING"
    COMMIT = "COMMIT"
    REVEAL = "REVEAL"
    PRODUCE = "PRODUCE"
    DONE = "DONE"


class Reject(str, enum.Enum):
    """Reasons a block proposal is refused."""

    STALE = "STALE"
    CONFLICT = "CONFLICT"
    UNKNOWN_PREV = "UNKNOWN_PREV"
    MISSING_RECORD = "MISSING_RECORD"
    WRONG_PRODUCER = "WRONG_PRODUCER"
    DUPLICATE_TXN = "DUPLICATE_TXN"
    NO_QUORUM = "NO_QUORUM"
    EQUIVOCATOR_INCLUDED = "EQUIVOCATOR_INCLUDED"
    INCOMPLETE_TXN_SET = "INCOMPLETE_TXN_SET"
    INVALID = "INVALID"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.accepted


ACCEPT = Verdict(True)


def reject(reason: Reject | str, detail: str = "") -> Verdict:
    text = reason.value if isinstance(reason, Reject) else str(reason)
    return Verdict(False, f"{text}: {detail}" if detail else text)


@dataclass(frozen=True)
class ConsensusParams:
    block_interval_ms: int = 10_000
    commit_timeout_ms: int = 2_000
    reveal_timeout_ms: int = 2_000
    produce_timeout_ms: int = 4_000
    catchup_backoff_ms: int = 1_000


# -- payloads -----------------------------------------------------------------

@dataclass(frozen=True)
class Commit:
    commitment: Digest
    participant_signature: Signature
    txn_digests: tuple[Digest, ...]

    def encode(self) -> bytes:
        w = Writer().digest(self.commitment).signature(self.participant_signature)
        return w.sequence(self.txn_digests, Writer.digest).getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Commit":
        r = Reader(data)
        out = cls(r.digest(), r.signature(), tuple(r.sequence(Reader.digest)))
        r.finish()
        return out


@dataclass(frozen=True)
class Reveal:
    nonce: bytes
    # commits the sender holds: (miner, commitment, participant signature)
    echoes: tuple[tuple[Digest, Digest, Signature], ...] = ()

    def encode(self) -> bytes:
        w = Writer().raw(self.nonce)
        w.sequence(self.echoes, lambda w, e: w.digest(e[0]).digest(e[1]).signature(e[2]))
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "Reveal":
        r = Reader(data)
        out = cls(r.raw(NONCE_SIZE), tuple(r.sequence(lambda r: (r.digest(), r.digest(), r.signature()))))
        r.finish()
        return out


def encode_blocks(blocks: Iterable[Block]) -> bytes:
    return Writer().sequence(blocks, model.write_block).getvalue()


def decode_blocks(data: bytes) -> list[Block]:
    r = Reader(data)
    out = r.sequence(model.read_block)
    r.finish()
    return out


# -- round state ----------------------------------------------------------------

@dataclass
class AttemptView:
    """What this node saw during one attempt; kept to judge proposals."""

    commits: dict[Digest, Commit] = field(default_factory=dict)
    reveals: dict[Digest, bytes] = field(default_factory=dict)


@dataclass
class RoundState:
    round: int
    attempt: int = 0
    phase: Phase = Phase.COLLECTING
    my_nonce: bytes = b""
    commits: dict[Digest, Commit] = field(default_factory=dict)
    reveals: dict[Digest, bytes] = field(default_factory=dict)
    deadline: int | None = None
    selected: Digest | None = None
    # excluded for the rest of the round: failed producers, equivocators,
    # miners whose reveal did not open their commitment
    excluded: set[Digest] = field(default_factory=set)
    equivocators: set[Digest] = field(default_factory=set)
    views: dict[int, AttemptView] = field(default_factory=dict)


def transaction_majority(commits: dict[Digest, Commit]) -> set[Digest]:
    """Digests announced in more than half of the commits."""
    counts = Counter(d for c in commits.values() for d in set(c.txn_digests))
    need = len(commits) // 2 + 1
    return {d for d, n in counts.items() if n >= need}


def mining_record(round_: int, attempt: int, commits: dict[Digest, Commit], reveals: dict[Digest, bytes]) -> MiningRecord:
    participants = tuple(
        Participant(k, commits[k].commitment, reveals[k], commits[k].participant_signature)
        for k in sorted(reveals)
    )
    return MiningRecord(round_, attempt, participants)


class Miner:
    def __init__(
        self,
        key: KeyPair,
        registry: MinerRegistry,
        chain: ChainStore,
        outbox,
        params: ConsensusParams = ConsensusParams(),
        *,
        rng: random.Random | None = None,
        max_height: int | None = None,
        trace: Callable[[str, str], None] | None = None,
    ) -> None:
        self.key = key
        self.me = key.key_id
        self.registry = registry
        self.chain = chain
        self.out = outbox
        self.params = params
        self._rng = rng
        self.max_height = max_height
        self._trace = trace or (lambda kind, text: logger.debug("%s %s", kind, text))
        self.pool: dict[Digest, Transaction] = {}
        # transactions this node accepted from clients -> round last gossiped
        self._gossiped: dict[Digest, int] = {}
        self.state = RoundState(round=chain.height + 1)
        self.buffer: list[Envelope] = []
        self.strikes: Counter[Digest] = Counter()
        self.rejected_envelopes = 0
        self._catchup_until = -1
        self._offered_until: dict[Digest, int] = {}
        # test hook: return False to abandon block production (simulated crash)
        self.before_produce: Callable[["Miner", Block], bool] | None = None
        self.accept_listeners: list[Callable[[Block], None]] = []

    # -- plumbing ---------------------------------------------------------------

    def _now(self) -> int:
        return self.out.now_ms()

    def _nonce(self) -> bytes:
        if self._rng is None:
            return os.urandom(NONCE_SIZE)
        return self._rng.randbytes(NONCE_SIZE)

    def _short(self, key: bytes) -> str:
        return key.hex()[:8]

    def trace(self, kind: str, text: str) -> None:
        self._trace(kind, text)

    def _broadcast(self, msg_type: MsgType, payload: bytes) -> Envelope:
        env = seal(msg_type, self.state.round, self.state.attempt, payload, self.key)
        self.out.broadcast(env)
        return env

    def _schedule_phase(self, timeout: int) -> None:
        s = self.state
        s.deadline = self._now() + timeout
        self.out.schedule(s.deadline, ("phase", s.round, s.attempt, s.phase.value))

    def boot(self) -> None:
        self._schedule_next_round()

    # -- transactions -----------------------------------------------------------

    def submit_transaction(self, txn: Transaction, *, rebroadcast: bool = True) -> Verdict:
        result = model.verify_transaction(txn, self.registry.authors.get(txn.submitter_key_id))
        if not result:
            return reject(result.code.value, result.detail)
        digest = model.compute_txn_digest(txn)
        if digest in self.pool or digest in self.chain.txn_digests:
            return reject("DUPLICATE", f"entry {txn.entry_id}")
        self.pool[digest] = txn
        if rebroadcast:
            self._gossiped[digest] = self.state.round
            env = seal(MsgType.TXN_SUBMIT, self.state.round, self.state.attempt,
                       model.canonical_encode(txn), self.key)
            self.out.broadcast(env)
        return ACCEPT

    # -- inbound ----------------------------------------------------------------

    def handle(self, env: Envelope) -> None:
        public = self.registry.miners.get(env.sender_key_id)
        if public is None or not env.verify(public):
            self.rejected_envelopes += 1
            self.trace("REJECT", f"{env.msg_type.name} from {self._short(env.sender_key_id)}: "
                       + ("unregistered sender" if public is None else "bad signature"))
            return
        try:
            if env.msg_type is MsgType.COMMIT:
                self.on_commit(env)
            elif env.msg_type is MsgType.REVEAL:
                self.on_reveal(env)
            elif env.msg_type is MsgType.PROPOSAL:
                block = model.decode_block(env.payload)
                verdict = self.on_block_proposal(block, env.sender_key_id)
                if not verdict and not verdict.reason.startswith(Reject.STALE.value):
                    self.trace("PROPOSAL_REJECT", f"h={block.height} from {self._short(env.sender_key_id)} {verdict.reason}")
            elif env.msg_type is MsgType.CHAIN_REQUEST:
                self._on_chain_request(env)
            elif env.msg_type is MsgType.CHAIN_RESPONSE:
                self._on_chain_response(env)
            elif env.msg_type is MsgType.TXN_SUBMIT:
                self.submit_transaction(model.decode_transaction(env.payload), rebroadcast=False)
        except (DecodeError, ValueError) as exc:
            self.rejected_envelopes += 1
            self.trace("REJECT", f"{env.msg_type.name} from {self._short(env.sender_key_id)}: malformed ({exc})")

    def _position(self, env: Envelope) -> str:
        """Classify an envelope against the current round and attempt."""
        s = self.state
        if env.round < s.round or (env.round == s.round and env.attempt < s.attempt):
            return "stale"
        if env.round > s.round or s.phase is Phase.COLLECTING:
            return "future"
        if env.attempt > s.attempt:
            return "ahead"
        return "current"

    def _defer(self, env: Envelope) -> None:
        if len(self.buffer) < MAX_BUFFER:
            self.buffer.append(env)
        if env.round > self.chain.height + 1:
            self._request_chain(env.sender_key_id)

    def _replay_buffer(self) -> None:
        pending, self.buffer = self.buffer, []
        for env in pending:
            self.handle(env)

    def _jump_to(self, attempt: int) -> None:
        """Peers moved on to a later attempt of this round; follow them."""
        s = self.state
        if s.phase is Phase.PRODUCE and s.selected is not None and s.selected != self.me:
            # they gave up on the producer we were waiting for
            s.excluded.add(s.selected)
        self.trace("ATTEMPT_SYNC", f"r={s.round} a={s.attempt}->{attempt}")
        self.start_attempt(attempt)

    def _admit(self, env: Envelope) -> bool:
        """Common routing for COMMIT/REVEAL; True if it is for now."""
        pos = self._position(env)
        if pos == "stale":
            if env.round <= self.chain.height:
                self._offer_chain(env.sender_key_id, env.round)
            return False
        if pos == "future":
            self._defer(env)
            return False
        if pos == "ahead":
            if env.attempt <= self.state.attempt + MAX_ATTEMPT_SKIP and env.sender_key_id not in self.state.excluded:
                self.buffer.append(env)
                self._jump_to(env.attempt)
            return False
        return True

    # -- round lifecycle ---------------------------------------------------------

    def _schedule_next_round(self) -> None:
        r = self.chain.height + 1
        self.state = RoundState(round=r)
        if self.max_height is not None and r > self.max_height:
            self.state.phase = Phase.DONE
            return
        at = max(self._now(), self.chain.tip.timestamp + self.params.block_interval_ms)
        self.out.schedule(at, ("start", r))

    def on_timer(self, tag: tuple) -> None:
        s = self.state
        if tag[0] == "start":
            if tag[1] == s.round and s.phase is Phase.COLLECTING:
                self.start_round()
        elif tag[0] == "phase":
            _, r, a, phase = tag
            if r == s.round and a == s.attempt and phase == s.phase.value:
                self.on_timeout()

    def start_round(self) -> Envelope:
        self._regossip()
        return self.start_attempt(0)

    def _regossip(self) -> None:
        """Resend our clients' transactions that peers still have not anchored.

        Gossip is fire-and-forget, so a peer that was down or reconnecting
        can miss a submission; without a majority of commits announcing it
        the transaction would never be included.
        """
        r = self.state.round
        for digest, last in list(self._gossiped.items()):
            txn = self.pool.get(digest)
            if txn is None or digest in self.chain.txn_digests:
                del self._gossiped[digest]
            elif r - last >= REGOSSIP_ROUNDS:
                self._gossiped[digest] = r
                self.out.broadcast(seal(MsgType.TXN_SUBMIT, r, 0, model.canonical_encode(txn), self.key))

    def start_attempt(self, attempt: int) -> Envelope:
        s = self.state
        s.attempt = attempt
        s.phase = Phase.COMMIT
        s.commits, s.reveals, s.selected = {}, {}, None
        s.views[attempt] = AttemptView(s.commits, s.reveals)
        s.my_nonce = self._nonce()
        commitment = commitment_for(s.my_nonce, s.round, attempt)
        psig = crypto.sign(model.commit_signing_bytes(s.round, attempt, self.me, commitment), self.key)
        announced = tuple(sorted(d for d in self.pool if d not in self.chain.txn_digests))
        commit = Commit(commitment, psig, announced)
        if self.me not in s.excluded:
            s.commits[self.me] = commit
        env = self._broadcast(MsgType.COMMIT, commit.encode())
        self._schedule_phase(self.params.commit_timeout_ms)
        self._replay_buffer()
        self._maybe_finish_commit()
        return env

    def _eligible(self) -> set[Digest]:
        return set(self.registry.miners) - self.state.excluded

    def _flag(self, miner: Digest, why: str) -> None:
        s = self.state
        if miner in s.excluded:
            return
        s.excluded.add(miner)
        s.commits.pop(miner, None)
        s.reveals.pop(miner, None)
        self.strikes[miner] += 1
        self.trace("EXCLUDE", f"r={s.round} a={s.attempt} {self._short(miner)} {why}")

    def on_commit(self, env: Envelope) -> None:
        if not self._admit(env):
            return
        s, sender = self.state, env.sender_key_id
        commit = Commit.decode(env.payload)
        msg = model.commit_signing_bytes(s.round, s.attempt, sender, commit.commitment)
        if commit.participant_signature.signer != sender or not crypto.verify(
            msg, commit.participant_signature, self.registry.miners[sender]
        ):
            self.trace("REJECT", f"COMMIT from {self._short(sender)}: bad participant signature")
            return
        existing = s.commits.get(sender)
        if existing is not None:
            if existing.commitment != commit.commitment:
                s.equivocators.add(sender)
                self._flag(sender, "conflicting commits")
            return
        if sender in s.excluded or s.phase is not Phase.COMMIT:
            return
        s.commits[sender] = commit
        self._maybe_finish_commit()

    def _maybe_finish_commit(self) -> None:
        s = self.state
        if s.phase is Phase.COMMIT and self._eligible() <= set(s.commits):
            self._enter_reveal()

    def _enter_reveal(self) -> None:
        s = self.state
        s.phase = Phase.REVEAL
        echoes = tuple((k, c.commitment, c.participant_signature) for k, c in sorted(s.commits.items()))
        if self.me in s.commits:
            s.reveals[self.me] = s.my_nonce
        self._broadcast(MsgType.REVEAL, Reveal(s.my_nonce, echoes).encode())
        self._schedule_phase(self.params.reveal_timeout_ms)
        self._replay_buffer()
        self._maybe_finish_reveal()

    def on_reveal(self, env: Envelope) -> None:
        if not self._admit(env):
            return
        s, sender = self.state, env.sender_key_id
        if s.phase is Phase.COMMIT:
            # reveals can overtake commits; hold them until our commit phase ends
            self.buffer.append(env)
            return
        reveal = Reveal.decode(env.payload)
        for miner, commitment, psig in reveal.echoes:
            mine = s.commits.get(miner)
            if mine is None or mine.commitment == commitment or miner not in self.registry.miners:
                continue
            msg = model.commit_signing_bytes(s.round, s.attempt, miner, commitment)
            if psig.signer == miner and crypto.verify(msg, psig, self.registry.miners[miner]):
                s.equivocators.add(miner)
                self._flag(miner, "conflicting commits (echoed)")
        if s.phase is not Phase.REVEAL or sender in s.excluded:
            return
        commit = s.commits.get(sender)
        if commit is None:
            self.trace("REJECT", f"REVEAL from {self._short(sender)}: no commit held")
            return
        if commitment_for(reveal.nonce, s.round, s.attempt) != commit.commitment:
            self._flag(sender, "reveal does not open commitment")
        else:
            s.reveals[sender] = reveal.nonce
        self._maybe_finish_reveal()

    def _maybe_finish_reveal(self) -> None:
        s = self.state
        if s.phase is Phase.REVEAL and set(s.commits) <= set(s.reveals):
            self._select()

    def _select(self) -> None:
        s = self.state
        try:
            s.selected = select_miner(s.reveals, self.registry.miners, s.round, s.attempt, s.excluded)
        except NoQuorum as exc:
            self.trace("NO_QUORUM", f"r={s.round} a={s.attempt} {exc}")
            self.start_attempt(s.attempt + 1)
            return
        s.phase = Phase.PRODUCE
        self.trace("SELECT", f"r={s.round} a={s.attempt} producer={self._short(s.selected)} n={len(s.reveals)}")
        if s.selected == self.me:
            self._produce()
        else:
            self._schedule_phase(self.params.produce_timeout_ms)
            self._replay_buffer()

    def build_block(self) -> Block:
        s = self.state
        tip = self.chain.tip
        txns = sorted(
            (t for d, t in self.pool.items() if d not in self.chain.txn_digests),
            key=lambda t: (t.trial_id, t.entry_id, model.compute_txn_digest(t)),
        )[:MAX_BLOCK_TXNS]
        block = Block(
            s.round,
            self.chain.tip_hash,
            max(self._now(), tip.timestamp),
            self.me,
            tuple(txns),
            mining_record(s.round, s.attempt, s.commits, s.reveals),
            Signature.empty(),
        )
        return model.sign_block(block, self.key)

    def _produce(self) -> None:
        block = self.build_block()
        if self.before_produce is not None and not self.before_produce(self, block):
            return
        self._accept(block)
        self.out.broadcast(seal(MsgType.PROPOSAL, block.height, block.mining_record.attempt,
                                model.canonical_encode(block), self.key))

    def on_timeout(self) -> None:
        s = self.state
        self.trace("TIMEOUT", f"r={s.round} a={s.attempt} phase={s.phase.value}")
        if s.phase is Phase.COMMIT:
            if len(s.commits) >= quorum_size(len(self._eligible())):
                self._enter_reveal()
            else:
                self.start_attempt(s.attempt + 1)
        elif s.phase is Phase.REVEAL:
            # proceed with the subset that revealed; _select checks quorum
            self._select()
        elif s.phase is Phase.PRODUCE:
            if s.selected is not None:
                self._flag(s.selected, "no block before deadline")
            self.start_attempt(s.attempt + 1)

    # -- blocks -----------------------------------------------------------------

    def on_block_proposal(self, block: Block, sender: Digest | None = None) -> Verdict:
        chain = self.chain
        if block.height <= chain.height:
            if model.compute_block_hash(block) == chain.hash_at(block.height):
                return reject(Reject.STALE, "already have it")
            if block.height == chain.height and self._try_reorg([block]):
                return ACCEPT
            if block.height < chain.height and sender is not None:
                self._request_chain(sender, block.height)
            return reject(Reject.CONFLICT, f"different block at height {block.height}")
        if block.height > chain.height + 1:
            if sender is not None:
                self._request_chain(sender)
            return reject(Reject.UNKNOWN_PREV, f"tip is {chain.height}")
        if not block.mining_record.participants:
            return reject(Reject.MISSING_RECORD)
        result = model.verify_block(block, chain.tip, self.registry)
        if not result:
            code = result.code.value
            if result.code is model.Check.WRONG_PRODUCER:
                return reject(Reject.WRONG_PRODUCER, result.detail)
            return reject(code, result.detail)
        digests = [model.compute_txn_digest(t) for t in block.transactions]
        if any(d in chain.txn_digests for d in digests):
            return reject(Reject.DUPLICATE_TXN)
        verdict = self._check_against_view(block, set(digests))
        if not verdict:
            return verdict
        self._accept(block)
        return ACCEPT

    def _check_against_view(self, block: Block, included: set[Digest]) -> Verdict:
        """Policy checks that need this node's own observations of the round."""
        s = self.state
        rec = block.mining_record
        if s.round != rec.round:
            return ACCEPT
        participants = {p.miner_key_id for p in rec.participants}
        if participants & s.equivocators:
            return reject(Reject.EQUIVOCATOR_INCLUDED)
        eligible = set(self.registry.miners) - (s.excluded - participants)
        if len(participants) < quorum_size(len(eligible)):
            return reject(Reject.NO_QUORUM, f"{len(participants)} participants")
        view = s.views.get(rec.attempt)
        if view is None or block.miner_key_id not in view.commits:
            return ACCEPT
        majority = transaction_majority(view.commits) - self.chain.txn_digests
        promised = set(view.commits[block.miner_key_id].txn_digests)
        missing = (majority & promised) - included
        if missing:
            return reject(Reject.INCOMPLETE_TXN_SET, f"{len(missing)} majority transactions left out")
        return ACCEPT

    def _accept(self, block: Block) -> None:
        self.chain.append(block)
        for txn in block.transactions:
            self.pool.pop(model.compute_txn_digest(txn), None)
        self.state.phase = Phase.DONE
        self.trace("ACCEPT", f"h={block.height} a={block.mining_record.attempt} "
                   f"miner={self._short(block.miner_key_id)} txns={len(block.transactions)} "
                   f"hash={self.chain.tip_hash.hex()[:16]}")
        for listener in self.accept_listeners:
            listener(block)
        self._schedule_next_round()

    # -- catch-up ----------------------------------------------------------------

    def _request_chain(self, peer: Digest, from_height: int | None = None) -> None:
        now = self._now()
        if now < self._catchup_until or peer == self.me:
            return
        self._catchup_until = now + self.params.catchup_backoff_ms
        start = self.chain.height + 1 if from_height is None else max(1, from_height)
        payload = Writer().u64(start).getvalue()
        env = seal(MsgType.CHAIN_REQUEST, self.state.round, self.state.attempt, payload, self.key)
        self.trace("CATCHUP", f"from={start} peer={self._short(peer)}")
        self.out.send(peer, env)

    # -- fork choice ----------------------------------------------------------------

    @staticmethod
    def fork_key(block: Block) -> tuple:
        """Order on competing blocks at one height; the smaller key wins.

        Two valid blocks for one height only appear when miners timed out
        with different views of who took part.  Every node ranks them the
        same way, so all of them converge on one branch.
        """
        rec = block.mining_record
        return (-len(rec.participants), rec.attempt, model.compute_block_hash(block))

    def _try_reorg(self, branch: list[Block]) -> bool:
        """Switch to ``branch`` if its first block beats ours at that height."""
        start = branch[0].height
        if not 1 <= start <= self.chain.height:
            return False
        if self.fork_key(branch[0]) >= self.fork_key(self.chain.block_at(start)):
            return False
        prev = self.chain.block_at(start - 1)
        kept = {model.compute_txn_digest(t) for b in self.chain.blocks(1)[: start - 1] for t in b.transactions}
        valid: list[Block] = []
        for block in branch:
            if block.height != prev.height + 1 or not model.verify_block(block, prev, self.registry):
                break
            digests = {model.compute_txn_digest(t) for t in block.transactions}
            if digests & kept:
                break
            kept |= digests
            valid.append(block)
            prev = block
        if not valid:
            return False
        removed = self.chain.truncate(start - 1)
        self.trace("REORG", f"h={start} dropped={len(removed)} adopted={len(valid)}")
        for block in valid:
            self.chain.append(block)
            for listener in self.accept_listeners:
                listener(block)
        for block in removed:
            for txn in block.transactions:
                digest = model.compute_txn_digest(txn)
                if digest not in self.chain.txn_digests:
                    self.pool[digest] = txn
        for txn_digest in list(self.pool):
            if txn_digest in self.chain.txn_digests:
                del self.pool[txn_digest]
        self._schedule_next_round()
        return True

    def request_sync(self) -> None:
        """Ask every peer for blocks past our tip (used after a restart)."""
        payload = Writer().u64(self.chain.height + 1).getvalue()
        self.trace("CATCHUP", f"from={self.chain.height + 1} peer=*")
        self.out.broadcast(seal(MsgType.CHAIN_REQUEST, self.state.round, self.state.attempt, payload, self.key))

    def _offer_chain(self, peer: Digest, from_height: int) -> None:
        """Push blocks to a peer still working on a round we have finished."""
        now = self._now()
        if self._offered_until.get(peer, -1) > now:
            return
        self._offered_until[peer] = now + self.params.catchup_backoff_ms
        blocks = self.chain.blocks(from_height)[:MAX_CHAIN_RESPONSE]
        self.trace("OFFER", f"from={from_height} peer={self._short(peer)} blocks={len(blocks)}")
        self.out.send(peer, seal(MsgType.CHAIN_RESPONSE, self.state.round, self.state.attempt,
                                 encode_blocks(blocks), self.key))

    def _on_chain_request(self, env: Envelope) -> None:
        r = Reader(env.payload)
        start = r.u64()
        r.finish()
        if start > self.chain.height:
            blocks = []
        else:
            blocks = self.chain.blocks(start)[:MAX_CHAIN_RESPONSE]
        reply = seal(MsgType.CHAIN_RESPONSE, self.state.round, self.state.attempt, encode_blocks(blocks), self.key)
        self.out.send(env.sender_key_id, reply)

    def _on_chain_response(self, env: Envelope) -> None:
        adopted = 0
        blocks = decode_blocks(env.payload)
        for i, block in enumerate(blocks):
            if block.height <= self.chain.height:
                if model.compute_block_hash(block) != self.chain.hash_at(block.height):
                    self.trace("CATCHUP_CONFLICT", f"h={block.height}")
                    self._try_reorg(blocks[i:])
                    return
                continue
            if block.height != self.chain.height + 1:
                break
            if block.prev_hash != self.chain.tip_hash:
                # the peer is on another branch; fetch from a little before the fork
                self.trace("CATCHUP_FORK", f"h={block.height}")
                self._catchup_until = -1
                self._request_chain(env.sender_key_id, block.height - FORK_LOOKBACK)
                break
            result = model.verify_block(block, self.chain.tip, self.registry)
            digests = [model.compute_txn_digest(t) for t in block.transactions]
            if not result or any(d in self.chain.txn_digests for d in digests):
                self.trace("CATCHUP_INVALID", f"h={block.height} {result.code.value}")
                break
            self.chain.append(block)
            for d in digests:
                self.pool.pop(d, None)
            for listener in self.accept_listeners:
                listener(block)
            adopted += 1
        if adopted:
            self.trace("CATCHUP_ADOPT", f"{adopted} blocks, tip={self.chain.height}")
            self._catchup_until = -1
            self._schedule_next_round()
            if len(blocks) >= MAX_CHAIN_RESPONSE:
                self._request_chain(env.sender_key_id)
