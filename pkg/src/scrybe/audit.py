"""Cross-check the changelog, the chain and the record store.

Every problem becomes a finding in the report; nothing here raises on bad
data.  Findings are attributed to where the tampering happened:

* a failing block is reported at its height, and the broken link that
  necessarily follows at the next height is not reported again (an edit
  to a block always changes its hash, so the successor cannot tell
  whether it was relinked as well);
* an entry whose signature differs from the copy anchored on chain is a
  signature finding even though its hash also differs, since the hash
  covers the signature.
"""

from __future__ import annotations

import enum
import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

from . import model
from .changelog import RecordStoreState, apply_entries
from .crypto import Digest
from .model import Block, ChangelogEntry, Check, MinerRegistry, Transaction, ValidationResult

DEFAULT_GRACE_MS = 20_000  # two default block intervals


class EntryStatus(str, enum.Enum):
    OK = "OK"
    INFO_PENDING = "INFO_PENDING"
    WARNING_MISSING_TXN = "WARNING_MISSING_TXN"
    ERROR_HASH_MISMATCH = "ERROR_HASH_MISMATCH"
    ERROR_BAD_ENTRY_SIGNATURE = "ERROR_BAD_ENTRY_SIGNATURE"

    @property
    def severity(self) -> str:
        return self.value.split("_", 1)[0]


@dataclass(frozen=True)
class EntryFinding:
    entry_id: int
    status: EntryStatus
    detail: str = ""


@dataclass(frozen=True)
class BlockFinding:
    height: int
    code: Check
    detail: str = ""


@dataclass(frozen=True)
class OrphanTxn:
    """An anchor on chain whose changelog entry is gone."""

    entry_id: int
    height: int
    entry_hash: str


@dataclass(frozen=True)
class StoreDiff:
    record_id: str
    field_name: str
    expected: str | None
    found: str | None


@dataclass(frozen=True)
class StoreStatus:
    status: str  # MATCH | MISMATCH
    diffs: tuple[StoreDiff, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status == "MATCH"


@dataclass
class AuditReport:
    per_entry: list[EntryFinding]
    per_block: list[BlockFinding]
    orphans: list[OrphanTxn]
    missing_entries: list[int]
    chain_status: ValidationResult
    store_status: StoreStatus | None = None
    summary: dict[str, int] = field(default_factory=dict)
    verdict: str = "PASS"

    @property
    def passed(self) -> bool:
        return self.verdict == "PASS"

    def findings(self) -> set[tuple]:
        """Every non-OK observation as a hashable key, for comparisons."""
        out: set[tuple] = set()
        for f in self.per_entry:
            if f.status is not EntryStatus.OK:
                out.add(("entry", f.entry_id, f.status.value))
        for b in self.per_block:
            if b.code is not Check.OK:
                out.add(("block", b.height))
        out.update(("orphan", o.entry_id) for o in self.orphans)
        out.update(("missing", i) for i in self.missing_entries)
        if self.store_status is not None:
            out.update(("store", d.record_id, d.field_name) for d in self.store_status.diffs)
        return out

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["chain_status"] = self.chain_status.to_json()
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "AuditReport":
        store = obj.get("store_status")
        return cls(
            per_entry=[EntryFinding(e["entry_id"], EntryStatus(e["status"]), e["detail"]) for e in obj["per_entry"]],
            per_block=[BlockFinding(b["height"], Check(b["code"]), b["detail"]) for b in obj["per_block"]],
            orphans=[OrphanTxn(**o) for o in obj["orphans"]],
            missing_entries=list(obj["missing_entries"]),
            chain_status=ValidationResult.from_json(obj["chain_status"]),
            store_status=None if store is None else StoreStatus(
                store["status"], tuple(StoreDiff(**d) for d in store["diffs"])
            ),
            summary=dict(obj["summary"]),
            verdict=obj["verdict"],
        )


# -- chain ----------------------------------------------------------------------

def audit_blocks(blocks: Sequence[Block], registry: MinerRegistry) -> list[BlockFinding]:
    """One verdict per block, each judged on its own contents and link."""
    out: list[BlockFinding] = []
    seen: set[Digest] = set()
    altered_prev = False
    for h, block in enumerate(blocks):
        result = model.OK
        if h == 0:
            if not model.is_canonical_genesis(block):
                result = ValidationResult(Check.BAD_GENESIS, 0, "first block is not a canonical genesis")
        else:
            result = model.check_block_content(block, registry)
            if result and block.height != h:
                result = ValidationResult(Check.HEIGHT_MISMATCH, h, f"block claims height {block.height}")
            if result and not altered_prev:
                result = model.check_link(block, blocks[h - 1])
            if result and block.timestamp < blocks[h - 1].timestamp:
                result = ValidationResult(Check.TIMESTAMP_REGRESSION, h, "timestamp before parent")
        if result:
            digests = [model.compute_txn_digest(t) for t in block.transactions]
            if any(d in seen for d in digests):
                result = ValidationResult(Check.DUPLICATE_TXN, h, "transaction already anchored earlier")
            seen.update(digests)
        out.append(BlockFinding(h, result.code, result.detail))
        # a broken link right after a failing block is a consequence, not a new fault
        altered_prev = not result
    return out


# -- entries ----------------------------------------------------------------------

def _anchors(blocks: Sequence[Block]) -> dict[int, list[tuple[int, Transaction]]]:
    index: dict[int, list[tuple[int, Transaction]]] = defaultdict(list)
    for block in blocks:
        for txn in block.transactions:
            index[txn.entry_id].append((block.height, txn))
    return index


def _judge_entry(
    entry: ChangelogEntry,
    anchors: list[tuple[int, Transaction]],
    authors: Mapping[Digest, bytes],
    pending: bool,
) -> EntryFinding:
    eid = entry.entry_id
    sig = model.verify_entry_signature(entry, authors)
    if not anchors:
        if not sig:
            return EntryFinding(eid, EntryStatus.ERROR_BAD_ENTRY_SIGNATURE, f"{sig.code.value}; not anchored")
        if pending:
            return EntryFinding(eid, EntryStatus.INFO_PENDING, "not anchored yet, within grace window")
        return EntryFinding(eid, EntryStatus.WARNING_MISSING_TXN, "no transaction on chain")
    digest = model.compute_entry_hash(entry)
    # with several anchors for one id, judge against the best match
    height, txn = next(((h, t) for h, t in anchors if t.entry_hash == digest), anchors[0])
    if txn.entry_signature_copy != entry.entry_signature:
        return EntryFinding(eid, EntryStatus.ERROR_BAD_ENTRY_SIGNATURE,
                            f"signature differs from the copy anchored at height {height}")
    if txn.entry_hash != digest:
        return EntryFinding(eid, EntryStatus.ERROR_HASH_MISMATCH,
                            f"hash {digest.hex()[:16]} != anchored {txn.entry_hash.hex()[:16]} at height {height}")
    if not sig:
        return EntryFinding(eid, EntryStatus.ERROR_BAD_ENTRY_SIGNATURE, f"{sig.code.value} {sig.detail}")
    return EntryFinding(eid, EntryStatus.OK, f"anchored at height {height}")


def audit(
    entries: Sequence[ChangelogEntry],
    chain: Sequence[Block],
    registry: MinerRegistry,
    authors: Mapping[Digest, bytes] | None = None,
    *,
    now_ms: int | None = None,
    grace_ms: int = DEFAULT_GRACE_MS,
    store_state: RecordStoreState | None = None,
) -> AuditReport:
    """Audit a pulled changelog against a pulled chain.

    Unanchored entries newer than the newest anchored transaction count as
    pending (not a warning) while ``now_ms - entry.timestamp <= grace_ms``;
    with ``now_ms=None`` there is no grace window.
    """
    authors = registry.authors if authors is None else authors
    chain_status = model.verify_chain(chain, registry)
    per_block = audit_blocks(chain, registry)
    anchors = _anchors(chain)
    newest_anchor = max((t.timestamp for b in chain for t in b.transactions), default=-1)

    per_entry = []
    for entry in entries:
        pending = (
            now_ms is not None
            and entry.timestamp > newest_anchor
            and now_ms - entry.timestamp <= grace_ms
        )
        per_entry.append(_judge_entry(entry, anchors.get(entry.entry_id, []), authors, pending))

    present = {e.entry_id for e in entries}
    orphans = [
        OrphanTxn(eid, h, t.entry_hash.hex())
        for eid in sorted(anchors)
        if eid not in present
        for h, t in anchors[eid][:1]
    ]
    top = max(present | set(anchors), default=0)
    missing = [i for i in range(1, top + 1) if i not in present and i not in anchors]

    store = audit_record_store(store_state, entries) if store_state is not None else None
    report = AuditReport(per_entry, per_block, orphans, missing, chain_status, store)
    _summarize(report)
    return report


def _summarize(report: AuditReport) -> None:
    tally = Counter(f.status.severity for f in report.per_entry)
    block_errors = sum(1 for b in report.per_block if b.code is not Check.OK)
    store_diffs = len(report.store_status.diffs) if report.store_status else 0
    report.summary = {
        "entries": len(report.per_entry),
        "ok": tally["OK"],
        "pending": tally["INFO"],
        "warnings": tally["WARNING"],
        "errors": tally["ERROR"] + len(report.orphans) + len(report.missing_entries),
        "orphans": len(report.orphans),
        "missing_entries": len(report.missing_entries),
        "blocks": len(report.per_block),
        "block_errors": block_errors,
        "store_diffs": store_diffs,
    }
    clean = (
        report.summary["warnings"] == 0
        and report.summary["errors"] == 0
        and block_errors == 0
        and report.chain_status.ok
        and (report.store_status is None or report.store_status.ok)
    )
    report.verdict = "PASS" if clean else "FAIL"


# -- record store ----------------------------------------------------------------

def audit_record_store(store_state: RecordStoreState, entries: Iterable[ChangelogEntry]) -> StoreStatus:
    """Compare the live store with the changelog replayed from empty."""
    expected = apply_entries({}, entries)
    diffs = []
    for record_id in sorted(set(expected) | set(store_state)):
        want, have = expected.get(record_id, {}), store_state.get(record_id, {})
        for name in sorted(set(want) | set(have)):
            if want.get(name) != have.get(name):
                diffs.append(StoreDiff(record_id, name, want.get(name), have.get(name)))
    return StoreStatus("MISMATCH" if diffs else "MATCH", tuple(diffs))


# -- rendering ---------------------------------------------------------------------

def _quote(value: str | None) -> str:
    return "<absent>" if value is None else repr(value)


def render_text(report: AuditReport) -> str:
    s = report.summary
    lines = [f"AUDIT: {report.verdict}"]
    lines.append(
        f"entries: {s['entries']} total, {s['ok']} ok, {s['pending']} pending, "
        f"{s['warnings']} warnings, {s['errors']} errors"
    )
    chain = report.chain_status
    tip = len(report.per_block) - 1
    lines.append(f"chain: {chain.code.value} (tip height {tip})" if chain.ok
                 else f"chain: {chain.code.value} at height {chain.height}: {chain.detail}")
    if report.store_status is not None:
        lines.append(f"store: {report.store_status.status}")
    for f in report.per_entry:
        if f.status is not EntryStatus.OK:
            lines.append(f"{f.status.value} entry {f.entry_id}: {f.detail}")
    for b in report.per_block:
        if b.code is not Check.OK:
            lines.append(f"ERROR_BLOCK height {b.height} {b.code.value}: {b.detail}")
    for o in report.orphans:
        lines.append(f"ERROR_ORPHAN_TXN entry {o.entry_id} at height {o.height}: changelog entry missing")
    for i in report.missing_entries:
        lines.append(f"ERROR_MISSING_ENTRY entry {i}: id absent from changelog")
    if report.store_status is not None:
        for d in report.store_status.diffs:
            lines.append(f"STORE_MISMATCH record {d.record_id} field {d.field_name}: "
                         f"expected {_quote(d.expected)} found {_quote(d.found)}")
    if report.passed:
        lines.append("changelog and blockchain agree")
    return "\n".join(lines) + "\n"


def render_report(report: AuditReport, fmt: str = "TEXT") -> bytes:
    if fmt.upper() == "JSON":
        return (json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n").encode()
    return render_text(report).encode()


def load_report(data: bytes | str) -> AuditReport:
    return AuditReport.from_json(json.loads(data))
