"""Changelog entries, transactions, blocks and their canonical forms.

Everything here is immutable.  ``encode_*`` produces the only bytes that
are ever hashed or signed; ``*_signing_bytes`` is the same encoding with
the trailing signature left out and a short domain tag in front, so a
signature over one kind of object can never be replayed as another.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from . import crypto
from .crypto import Digest, KeyPair, Signature, hash_bytes
from .encoding import DecodeError, Reader, Writer
from .selection import NONCE_SIZE, commitment_for, select_miner

GENESIS_TIMESTAMP_MS = 1_577_836_800_000  # 2020-01-01T00:00:00Z

ENTRY_TAG = b"scrybe.entry\x00"
TXN_TAG = b"scrybe.txn\x00"
BLOCK_TAG = b"scrybe.block\x00"
COMMIT_TAG = b"scrybe.commit\x00"


class Op(enum.IntEnum):
    SET = 0
    DELETE = 1


@dataclass(frozen=True)
class FieldOp:
    record_id: str
    field_name: str
    op: Op
    new_value: str | None = None

    @classmethod
    def set(cls, record_id: str, field_name: str, value: str) -> "FieldOp":
        return cls(record_id, field_name, Op.SET, value)

    @classmethod
    def delete(cls, record_id: str, field_name: str) -> "FieldOp":
        return cls(record_id, field_name, Op.DELETE, None)


@dataclass(frozen=True)
class ChangelogEntry:
    entry_id: int
    trial_id: str
    timestamp: int
    author_key_id: Digest
    mutation: tuple[FieldOp, ...]
    entry_signature: Signature


@dataclass(frozen=True)
class Transaction:
    entry_id: int
    trial_id: str
    timestamp: int
    entry_hash: Digest
    entry_signature_copy: Signature
    submitter_key_id: Digest
    txn_signature: Signature


@dataclass(frozen=True)
class Participant:
    miner_key_id: Digest
    commitment: Digest
    reveal: bytes
    participant_signature: Signature


@dataclass(frozen=True)
class MiningRecord:
    round: int = 0
    attempt: int = 0
    participants: tuple[Participant, ...] = ()

    def reveals(self) -> dict[Digest, bytes]:
        return {p.miner_key_id: p.reveal for p in self.participants}


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: Digest
    timestamp: int
    miner_key_id: Digest
    transactions: tuple[Transaction, ...]
    mining_record: MiningRecord
    miner_signature: Signature


@dataclass(frozen=True)
class MinerRegistry:
    """Authorized miner keys, plus the researcher keys allowed to submit.

    Both maps go from key id to raw public key.
    """

    miners: Mapping[Digest, bytes]
    registry_version: int = 1
    authors: Mapping[Digest, bytes] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.miners:
            raise ValueError("registry must list at least one miner")
        for table in (self.miners, self.authors):
            for key_id, public in table.items():
                if crypto.key_id_for(public) != key_id:
                    raise ValueError(f"key id {key_id.hex()} does not match its public key")

    @classmethod
    def from_keys(cls, miners: Iterable[bytes], authors: Iterable[bytes] = (), version: int = 1):
        return cls(
            {crypto.key_id_for(k): bytes(k) for k in miners},
            version,
            {crypto.key_id_for(k): bytes(k) for k in authors},
        )

    def __contains__(self, key_id: object) -> bool:
        return key_id in self.miners

    def __len__(self) -> int:
        return len(self.miners)

    def miner_ids(self) -> list[Digest]:
        return sorted(self.miners)

    def dumps(self) -> str:
        lines = [f"version {self.registry_version}"]
        lines += [f"miner {self.miners[k].hex()}" for k in sorted(self.miners)]
        lines += [f"author {self.authors[k].hex()}" for k in sorted(self.authors)]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "MinerRegistry":
        version, miners, authors = 1, [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            kind, _, value = line.partition(" ")
            value = value.strip()
            try:
                if kind == "version":
                    version = int(value)
                elif kind == "miner":
                    miners.append(bytes.fromhex(value))
                elif kind == "author":
                    authors.append(bytes.fromhex(value))
                else:
                    raise ValueError(f"unknown record {kind!r}")
            except ValueError as exc:
                raise ValueError(f"registry line {lineno}: {exc}") from None
        if len(set(miners)) != len(miners):
            raise ValueError("duplicate miner key in registry")
        return cls.from_keys(miners, authors, version)


# -- canonical encoding ------------------------------------------------------

def _w_fieldop(w: Writer, op: FieldOp) -> None:
    w.string(op.record_id).string(op.field_name).u8(int(op.op))
    w.optional(op.new_value, Writer.string)


def _r_fieldop(r: Reader) -> FieldOp:
    record_id, field_name = r.string(), r.string()
    code = r.u8()
    try:
        op = Op(code)
    except ValueError:
        raise DecodeError(f"unknown field op {code}") from None
    return FieldOp(record_id, field_name, op, r.optional(Reader.string))


def _w_entry_body(w: Writer, e: ChangelogEntry) -> None:
    w.u64(e.entry_id).string(e.trial_id).u64(e.timestamp).digest(e.author_key_id)
    w.sequence(e.mutation, _w_fieldop)


def _w_entry(w: Writer, e: ChangelogEntry) -> None:
    _w_entry_body(w, e)
    w.signature(e.entry_signature)


def _r_entry(r: Reader) -> ChangelogEntry:
    return ChangelogEntry(
        r.u64(), r.string(), r.u64(), r.digest(), tuple(r.sequence(_r_fieldop)), r.signature()
    )


def _w_txn_body(w: Writer, t: Transaction) -> None:
    w.u64(t.entry_id).string(t.trial_id).u64(t.timestamp).digest(t.entry_hash)
    w.signature(t.entry_signature_copy).digest(t.submitter_key_id)


def _w_txn(w: Writer, t: Transaction) -> None:
    _w_txn_body(w, t)
    w.signature(t.txn_signature)


def _r_txn(r: Reader) -> Transaction:
    return Transaction(
        r.u64(), r.string(), r.u64(), r.digest(), r.signature(), r.digest(), r.signature()
    )


def _w_participant(w: Writer, p: Participant) -> None:
    if len(p.reveal) != NONCE_SIZE:
        raise ValueError("reveal must be 32 bytes")
    w.digest(p.miner_key_id).digest(p.commitment).raw(p.reveal).signature(p.participant_signature)


def _r_participant(r: Reader) -> Participant:
    return Participant(r.digest(), r.digest(), r.raw(NONCE_SIZE), r.signature())


def _w_record(w: Writer, m: MiningRecord) -> None:
    w.u64(m.round).u32(m.attempt).sequence(m.participants, _w_participant)


def _r_record(r: Reader) -> MiningRecord:
    return MiningRecord(r.u64(), r.u32(), tuple(r.sequence(_r_participant)))


def _w_block_body(w: Writer, b: Block) -> None:
    w.u64(b.height).digest(b.prev_hash).u64(b.timestamp).digest(b.miner_key_id)
    w.sequence(b.transactions, _w_txn)
    _w_record(w, b.mining_record)


def _w_block(w: Writer, b: Block) -> None:
    _w_block_body(w, b)
    w.signature(b.miner_signature)


def _r_block(r: Reader) -> Block:
    return Block(
        r.u64(), r.digest(), r.u64(), r.digest(), tuple(r.sequence(_r_txn)), _r_record(r),
        r.signature(),
    )


def _w_registry(w: Writer, reg: MinerRegistry) -> None:
    w.sequence(sorted(reg.miners), lambda w, k: w.digest(k).raw(reg.miners[k]))
    w.u64(reg.registry_version)
    w.sequence(sorted(reg.authors), lambda w, k: w.digest(k).raw(reg.authors[k]))


def _r_registry(r: Reader) -> MinerRegistry:
    miners = dict(r.sequence(lambda r: (r.digest(), r.raw(crypto.PUBLIC_KEY_SIZE))))
    version = r.u64()
    authors = dict(r.sequence(lambda r: (r.digest(), r.raw(crypto.PUBLIC_KEY_SIZE))))
    return MinerRegistry(miners, version, authors)


_WRITERS = {
    FieldOp: _w_fieldop,
    ChangelogEntry: _w_entry,
    Transaction: _w_txn,
    Participant: _w_participant,
    MiningRecord: _w_record,
    Block: _w_block,
    MinerRegistry: _w_registry,
}
_READERS = {
    FieldOp: _r_fieldop,
    ChangelogEntry: _r_entry,
    Transaction: _r_txn,
    Participant: _r_participant,
    MiningRecord: _r_record,
    Block: _r_block,
    MinerRegistry: _r_registry,
}


def canonical_encode(value) -> bytes:
    try:
        write = _WRITERS[type(value)]
    except KeyError:
        raise TypeError(f"no canonical encoding for {type(value).__name__}") from None
    w = Writer()
    write(w, value)
    return w.getvalue()


def canonical_decode(kind: type, data: bytes):
    r = Reader(data)
    value = _READERS[kind](r)
    r.finish()
    return value


def decode_entry(data: bytes) -> ChangelogEntry:
    return canonical_decode(ChangelogEntry, data)


def decode_block(data: bytes) -> Block:
    return canonical_decode(Block, data)


def decode_transaction(data: bytes) -> Transaction:
    return canonical_decode(Transaction, data)


# These readers/writers are reused by the network payload codecs.
write_block = _w_block
read_block = _r_block
write_transaction = _w_txn
read_transaction = _r_txn


def entry_signing_bytes(e: ChangelogEntry) -> bytes:
    w = Writer().raw(ENTRY_TAG)
    _w_entry_body(w, e)
    return w.getvalue()


def txn_signing_bytes(t: Transaction) -> bytes:
    w = Writer().raw(TXN_TAG)
    _w_txn_body(w, t)
    return w.getvalue()


def block_signing_bytes(b: Block) -> bytes:
    w = Writer().raw(BLOCK_TAG)
    _w_block_body(w, b)
    return w.getvalue()


def commit_signing_bytes(round_: int, attempt: int, miner_key_id: bytes, commitment: bytes) -> bytes:
    return (
        Writer().raw(COMMIT_TAG).u64(round_).u32(attempt).digest(miner_key_id).digest(commitment)
    ).getvalue()


def compute_entry_hash(entry: ChangelogEntry) -> Digest:
    return hash_bytes(canonical_encode(entry))


def compute_txn_digest(txn: Transaction) -> Digest:
    return hash_bytes(canonical_encode(txn))


def compute_block_hash(block: Block) -> Digest:
    return hash_bytes(canonical_encode(block))


# -- construction helpers ----------------------------------------------------

def make_entry(
    entry_id: int,
    trial_id: str,
    timestamp: int,
    mutation: Sequence[FieldOp],
    author: KeyPair,
) -> ChangelogEntry:
    if not mutation:
        raise ValueError("mutation list must not be empty")
    unsigned = ChangelogEntry(
        entry_id, trial_id, timestamp, author.key_id, tuple(mutation), Signature.empty()
    )
    return replace(unsigned, entry_signature=crypto.sign(entry_signing_bytes(unsigned), author))


def make_transaction(entry: ChangelogEntry, submitter: KeyPair) -> Transaction:
    unsigned = Transaction(
        entry.entry_id,
        entry.trial_id,
        entry.timestamp,
        compute_entry_hash(entry),
        entry.entry_signature,
        submitter.key_id,
        Signature.empty(),
    )
    return replace(unsigned, txn_signature=crypto.sign(txn_signing_bytes(unsigned), submitter))


def make_participant(round_: int, attempt: int, nonce: bytes, miner: KeyPair) -> Participant:
    commitment = commitment_for(nonce, round_, attempt)
    sig = crypto.sign(commit_signing_bytes(round_, attempt, miner.key_id, commitment), miner)
    return Participant(miner.key_id, commitment, bytes(nonce), sig)


def sign_block(block: Block, miner: KeyPair) -> Block:
    unsigned = replace(block, miner_key_id=miner.key_id, miner_signature=Signature.empty())
    return replace(unsigned, miner_signature=crypto.sign(block_signing_bytes(unsigned), miner))


def genesis_block(timestamp: int = GENESIS_TIMESTAMP_MS) -> Block:
    """The unsigned height-0 block every node derives independently."""
    return Block(0, Digest.zero(), timestamp, Digest.zero(), (), MiningRecord(), Signature.empty())


# -- validation --------------------------------------------------------------

class Check(str, enum.Enum):
    OK = "OK"
    BAD_SIGNATURE = "BAD_SIGNATURE"
    UNKNOWN_SIGNER = "UNKNOWN_SIGNER"
    EMPTY_CHAIN = "EMPTY_CHAIN"
    BAD_GENESIS = "BAD_GENESIS"
    HEIGHT_MISMATCH = "HEIGHT_MISMATCH"
    BROKEN_LINK = "BROKEN_LINK"
    TIMESTAMP_REGRESSION = "TIMESTAMP_REGRESSION"
    UNAUTHORIZED_MINER = "UNAUTHORIZED_MINER"
    BAD_MINER_SIGNATURE = "BAD_MINER_SIGNATURE"
    BAD_TRANSACTION = "BAD_TRANSACTION"
    DUPLICATE_TXN = "DUPLICATE_TXN"
    MISSING_RECORD = "MISSING_RECORD"
    BAD_MINING_RECORD = "BAD_MINING_RECORD"
    NO_QUORUM = "NO_QUORUM"
    WRONG_PRODUCER = "WRONG_PRODUCER"


@dataclass(frozen=True)
class ValidationResult:
    code: Check = Check.OK
    height: int | None = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.code is Check.OK

    def __bool__(self) -> bool:
        return self.ok

    def to_json(self) -> dict:
        return {"code": self.code.value, "height": self.height, "detail": self.detail}

    @classmethod
    def from_json(cls, obj: dict) -> "ValidationResult":
        return cls(Check(obj["code"]), obj.get("height"), obj.get("detail", ""))


OK = ValidationResult()


def verify_transaction(txn: Transaction, author_public_key: bytes | None) -> ValidationResult:
    """Check the submitter's signature over the transaction.

    ``author_public_key`` is the registry lookup for ``txn.submitter_key_id``;
    ``None`` means the lookup failed.
    """
    if author_public_key is None or crypto.key_id_for(author_public_key) != txn.submitter_key_id:
        return ValidationResult(Check.UNKNOWN_SIGNER, detail=f"submitter {txn.submitter_key_id.hex()[:16]} not registered")
    if txn.txn_signature.signer != txn.submitter_key_id:
        return ValidationResult(Check.BAD_SIGNATURE, detail="signer does not match submitter")
    if not crypto.verify(txn_signing_bytes(txn), txn.txn_signature, author_public_key):
        return ValidationResult(Check.BAD_SIGNATURE, detail=f"transaction for entry {txn.entry_id}")
    return OK


def verify_entry_signature(entry: ChangelogEntry, authors: Mapping[Digest, bytes]) -> ValidationResult:
    public = authors.get(entry.author_key_id)
    if public is None:
        return ValidationResult(Check.UNKNOWN_SIGNER, detail=f"author of entry {entry.entry_id}")
    if entry.entry_signature.signer != entry.author_key_id or not crypto.verify(
        entry_signing_bytes(entry), entry.entry_signature, public
    ):
        return ValidationResult(Check.BAD_SIGNATURE, detail=f"entry {entry.entry_id}")
    return OK


def is_canonical_genesis(block: Block) -> bool:
    return (
        block.height == 0
        and block.prev_hash == Digest.zero()
        and not block.transactions
        and block.mining_record == MiningRecord()
        and block.miner_key_id == Digest.zero()
        and block.miner_signature == Signature.empty()
    )


def check_link(block: Block, prev: Block) -> ValidationResult:
    if block.height != prev.height + 1:
        return ValidationResult(Check.HEIGHT_MISMATCH, prev.height + 1, f"follows height {prev.height}")
    if block.prev_hash != compute_block_hash(prev):
        return ValidationResult(Check.BROKEN_LINK, block.height, "prev_hash does not match previous block")
    return OK


def check_mining_record(block: Block, registry: MinerRegistry) -> ValidationResult:
    rec, h = block.mining_record, block.height
    if not rec.participants:
        return ValidationResult(Check.MISSING_RECORD, h, "block carries no mining record")
    if rec.round != block.height:
        return ValidationResult(Check.BAD_MINING_RECORD, h, f"record round {rec.round}")
    ids = [p.miner_key_id for p in rec.participants]
    if ids != sorted(set(ids)):
        return ValidationResult(Check.BAD_MINING_RECORD, h, "participants not sorted and unique")
    for p in rec.participants:
        public = registry.miners.get(p.miner_key_id)
        if public is None:
            return ValidationResult(Check.BAD_MINING_RECORD, h, f"participant {p.miner_key_id.hex()[:16]} not registered")
        if commitment_for(p.reveal, rec.round, rec.attempt) != p.commitment:
            return ValidationResult(Check.BAD_MINING_RECORD, h, f"reveal of {p.miner_key_id.hex()[:16]} does not open its commitment")
        msg = commit_signing_bytes(rec.round, rec.attempt, p.miner_key_id, p.commitment)
        if not crypto.verify(msg, p.participant_signature, public):
            return ValidationResult(Check.BAD_MINING_RECORD, h, f"bad participant signature from {p.miner_key_id.hex()[:16]}")
    # Quorum depends on which miners the round excluded, which only the
    # live participants know; a standalone check can only recompute the pick.
    selected = select_miner(rec.reveals(), None, rec.round, rec.attempt)
    if selected != block.miner_key_id:
        return ValidationResult(Check.WRONG_PRODUCER, h, f"record selects {selected.hex()[:16]}")
    return OK


def check_block_content(block: Block, registry: MinerRegistry) -> ValidationResult:
    """Everything about a non-genesis block except its link to the parent."""
    h = block.height
    public = registry.miners.get(block.miner_key_id)
    if public is None:
        return ValidationResult(Check.UNAUTHORIZED_MINER, h, f"miner {block.miner_key_id.hex()[:16]} not registered")
    if not crypto.verify(block_signing_bytes(block), block.miner_signature, public):
        return ValidationResult(Check.BAD_MINER_SIGNATURE, h, "miner signature does not verify")
    seen: set[Digest] = set()
    for txn in block.transactions:
        result = verify_transaction(txn, registry.authors.get(txn.submitter_key_id))
        if not result:
            return ValidationResult(Check.BAD_TRANSACTION, h, f"{result.code.value}: {result.detail}")
        digest = compute_txn_digest(txn)
        if digest in seen:
            return ValidationResult(Check.DUPLICATE_TXN, h, f"entry {txn.entry_id} twice")
        seen.add(digest)
    return check_mining_record(block, registry)


def verify_block(block: Block, prev: Block | None, registry: MinerRegistry) -> ValidationResult:
    if block.height == 0:
        if prev is not None or not is_canonical_genesis(block):
            return ValidationResult(Check.BAD_GENESIS, 0, "genesis block is not canonical")
        return OK
    if prev is None:
        return ValidationResult(Check.HEIGHT_MISMATCH, block.height, "non-genesis block without parent")
    result = check_link(block, prev)
    if not result:
        return result
    if block.timestamp < prev.timestamp:
        return ValidationResult(Check.TIMESTAMP_REGRESSION, block.height, "timestamp before parent")
    return check_block_content(block, registry)


def verify_chain(blocks: Sequence[Block], registry: MinerRegistry) -> ValidationResult:
    """Validate a whole chain and report the first failing height.

    Hash links are checked across the entire chain before any block's
    contents, so a block edited after the fact is reported where the next
    block's ``prev_hash`` stops matching it.  Only an edited tip, which
    has no successor, is reported at its own height.
    """
    if not blocks:
        return ValidationResult(Check.EMPTY_CHAIN, None, "chain is empty")
    if not is_canonical_genesis(blocks[0]):
        return ValidationResult(Check.BAD_GENESIS, 0, "first block is not a canonical genesis")
    for prev, block in zip(blocks, blocks[1:]):
        result = check_link(block, prev)
        if not result:
            return result
    for prev, block in zip(blocks, blocks[1:]):
        result = verify_block(block, prev, registry)
        if not result:
            return result
    return OK


# -- text interchange --------------------------------------------------------

def _sig(s: Signature) -> dict:
    return s.to_json()


def fieldop_to_json(op: FieldOp) -> dict:
    return {"record_id": op.record_id, "field_name": op.field_name, "op": op.op.name, "new_value": op.new_value}


def fieldop_from_json(obj: dict) -> FieldOp:
    return FieldOp(obj["record_id"], obj["field_name"], Op[obj["op"]], obj.get("new_value"))


def entry_to_json(e: ChangelogEntry) -> dict:
    return {
        "entry_id": e.entry_id,
        "trial_id": e.trial_id,
        "timestamp": e.timestamp,
        "author_key_id": e.author_key_id.hex(),
        "mutation": [fieldop_to_json(op) for op in e.mutation],
        "entry_signature": _sig(e.entry_signature),
    }


def entry_from_json(obj: dict) -> ChangelogEntry:
    return ChangelogEntry(
        int(obj["entry_id"]),
        obj["trial_id"],
        int(obj["timestamp"]),
        Digest.fromhex(obj["author_key_id"]),
        tuple(fieldop_from_json(m) for m in obj["mutation"]),
        Signature.from_json(obj["entry_signature"]),
    )


def txn_to_json(t: Transaction) -> dict:
    return {
        "entry_id": t.entry_id,
        "trial_id": t.trial_id,
        "timestamp": t.timestamp,
        "entry_hash": t.entry_hash.hex(),
        "entry_signature_copy": _sig(t.entry_signature_copy),
        "submitter_key_id": t.submitter_key_id.hex(),
        "txn_signature": _sig(t.txn_signature),
    }


def txn_from_json(obj: dict) -> Transaction:
    return Transaction(
        int(obj["entry_id"]),
        obj["trial_id"],
        int(obj["timestamp"]),
        Digest.fromhex(obj["entry_hash"]),
        Signature.from_json(obj["entry_signature_copy"]),
        Digest.fromhex(obj["submitter_key_id"]),
        Signature.from_json(obj["txn_signature"]),
    )


def block_to_json(b: Block) -> dict:
    rec = b.mining_record
    return {
        "height": b.height,
        "prev_hash": b.prev_hash.hex(),
        "timestamp": b.timestamp,
        "miner_key_id": b.miner_key_id.hex(),
        "transactions": [txn_to_json(t) for t in b.transactions],
        "mining_record": {
            "round": rec.round,
            "attempt": rec.attempt,
            "participants": [
                {
                    "miner_key_id": p.miner_key_id.hex(),
                    "commitment": p.commitment.hex(),
                    "reveal": p.reveal.hex(),
                    "participant_signature": _sig(p.participant_signature),
                }
                for p in rec.participants
            ],
        },
        "miner_signature": _sig(b.miner_signature),
    }


def block_from_json(obj: dict) -> Block:
    rec = obj["mining_record"]
    return Block(
        int(obj["height"]),
        Digest.fromhex(obj["prev_hash"]),
        int(obj["timestamp"]),
        Digest.fromhex(obj["miner_key_id"]),
        tuple(txn_from_json(t) for t in obj["transactions"]),
        MiningRecord(
            int(rec["round"]),
            int(rec["attempt"]),
            tuple(
                Participant(
                    Digest.fromhex(p["miner_key_id"]),
                    Digest.fromhex(p["commitment"]),
                    bytes.fromhex(p["reveal"]),
                    Signature.from_json(p["participant_signature"]),
                )
                for p in rec["participants"]
            ),
        ),
        Signature.from_json(obj["miner_signature"]),
    )
