import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scrybe import model
from scrybe.audit import (
    EntryStatus,
    audit,
    audit_blocks,
    audit_record_store,
    load_report,
    render_report,
    render_text,
)
from scrybe.changelog import replay
from scrybe.crypto import Digest, Signature
from scrybe.model import Check

from conftest import T0, entry_series, seeded_key
from scenarios import make_scenario


@pytest.fixture
def anchored(builder, author):
    entries = entry_series(author, 9)
    builder.anchor(entries)
    return entries, builder.blocks, builder.registry


class TestEntries:
    def test_empty(self, builder):
        report = audit([], builder.blocks, builder.registry)
        assert report.passed and report.findings() == set()
        assert report.summary["entries"] == 0

    def test_all_anchored(self, anchored):
        entries, chain, registry = anchored
        report = audit(entries, chain, registry)
        assert report.passed
        assert report.summary["ok"] == 9
        assert "changelog and blockchain agree" in render_text(report)

    def test_flipped_anchor_hash(self, anchored):
        entries, chain, registry = anchored
        chain = list(chain)
        block = chain[2]
        t = block.transactions[1]
        bad = replace(t, entry_hash=Digest(bytes([t.entry_hash[0] ^ 0x80]) + t.entry_hash[1:]))
        chain[2] = replace(block, transactions=(block.transactions[0], bad, *block.transactions[2:]))
        report = audit(entries, chain, registry)
        assert not report.passed
        assert ("entry", t.entry_id, "ERROR_HASH_MISMATCH") in report.findings()
        assert report.chain_status.code is Check.BROKEN_LINK and report.chain_status.height == 3
        assert [b.height for b in report.per_block if b.code is not Check.OK] == [2]

    def test_edited_entry(self, anchored):
        entries, chain, registry = anchored
        entries = list(entries)
        entries[4] = replace(entries[4], mutation=(model.FieldOp.set("r5", "blood_type", "O"),))
        report = audit(entries, chain, registry)
        assert report.findings() == {("entry", 5, "ERROR_HASH_MISMATCH")}

    def test_resigned_edit_caught_by_signature_copy(self, anchored, author):
        entries, chain, registry = anchored
        entries = list(entries)
        e = entries[0]
        entries[0] = model.make_entry(e.entry_id, e.trial_id, e.timestamp,
                                      (model.FieldOp.set("r1", "blood_type", "O"),), author)
        report = audit(entries, chain, registry)
        assert report.findings() == {("entry", 1, "ERROR_BAD_ENTRY_SIGNATURE")}

    def test_unanchored_warning(self, builder, author):
        entries = entry_series(author, 4)
        builder.anchor(entries[:3])
        report = audit(entries, builder.blocks, builder.registry)
        assert report.findings() == {("entry", 4, "WARNING_MISSING_TXN")}
        assert "WARNING_MISSING_TXN entry 4" in render_text(report)

    def test_pending_within_grace(self, builder, author):
        entries = entry_series(author, 4)
        builder.anchor(entries[:3])
        now = entries[3].timestamp + 5_000
        report = audit(entries, builder.blocks, builder.registry, now_ms=now, grace_ms=20_000)
        assert report.findings() == {("entry", 4, "INFO_PENDING")}
        assert report.passed
        late = audit(entries, builder.blocks, builder.registry, now_ms=now + 60_000, grace_ms=20_000)
        assert not late.passed

    def test_old_gap_is_not_pending(self, builder, author):
        entries = entry_series(author, 4)
        builder.anchor([entries[0], entries[2], entries[3]])
        report = audit(entries, builder.blocks, builder.registry, now_ms=entries[3].timestamp)
        assert report.findings() == {("entry", 2, "WARNING_MISSING_TXN")}

    def test_orphan(self, anchored):
        entries, chain, registry = anchored
        report = audit(entries[:-1], chain, registry)
        assert report.findings() == {("orphan", 9)}
        assert report.summary["errors"] == 1

    def test_missing_id(self, builder, author):
        entries = entry_series(author, 5)
        builder.anchor(entries[:2])
        kept = entries[:2] + entries[3:]
        report = audit(kept, builder.blocks, builder.registry)
        assert ("missing", 3) in report.findings()

    def test_unknown_author(self, builder):
        stranger = seeded_key(50)
        report = audit(entry_series(stranger, 1), builder.blocks, builder.registry)
        assert report.per_entry[0].status is EntryStatus.ERROR_BAD_ENTRY_SIGNATURE


class TestBlocks:
    def test_relink_reported_at_its_height(self, anchored, builder):
        entries, chain, registry = anchored
        chain = list(chain)
        b = chain[1]
        chain[1] = model.sign_block(replace(b, prev_hash=Digest(b"\x07" * 32)), builder.miners[b.miner_key_id])
        found = audit_blocks(chain, registry)
        assert [(f.height, f.code) for f in found if f.code is not Check.OK] == [(1, Check.BROKEN_LINK)]

    def test_forged_genesis(self, anchored):
        entries, chain, registry = anchored
        chain = [replace(chain[0], prev_hash=Digest(b"\x01" * 32)), *chain[1:]]
        report = audit(entries, chain, registry)
        assert report.findings() == {("block", 0)}
        assert report.per_block[0].code is Check.BAD_GENESIS

    def test_genesis_time_is_a_parameter(self, anchored):
        # another deployment's genesis is well formed; the break shows at height 1
        entries, chain, registry = anchored
        chain = [replace(chain[0], timestamp=T0 + 1), *chain[1:]]
        assert audit(entries, chain, registry).findings() == {("block", 1)}

    def test_wrong_height(self, anchored):
        entries, chain, registry = anchored
        found = audit_blocks([chain[0], chain[2]], registry)
        assert found[1].code is Check.HEIGHT_MISMATCH


class TestStore:
    def test_match(self, anchored):
        entries, _, _ = anchored
        assert audit_record_store(replay(entries), entries).ok

    def test_blood_type_edit(self, anchored):
        entries, _, _ = anchored
        store = replay(entries)
        store["r3"]["blood_type"] = "O"
        status = audit_record_store(store, entries)
        assert status.status == "MISMATCH"
        assert [(d.record_id, d.field_name, d.expected, d.found) for d in status.diffs] == [("r3", "blood_type", "AB", "O")]

    def test_inserted_record(self, anchored):
        entries, _, _ = anchored
        store = replay(entries)
        store["intruder"] = {"age": "99"}
        status = audit_record_store(store, entries)
        assert {d.record_id for d in status.diffs} == {"intruder"}

    def test_store_mismatch_fails_audit(self, anchored):
        entries, chain, registry = anchored
        store = replay(entries)
        store["r1"]["age"] = "0"
        report = audit(entries, chain, registry, store_state=store)
        assert not report.passed
        assert "STORE_MISMATCH record r1 field age" in render_text(report)


class TestRendering:
    def test_pass_line(self, anchored):
        report = audit(*anchored)
        assert render_report(report).startswith(b"AUDIT: PASS\n")

    def test_fail_lists_each_finding(self, anchored):
        entries, chain, registry = anchored
        report = audit(entries[:-2], chain, registry)
        text = render_text(report)
        assert text.startswith("AUDIT: FAIL")
        assert text.count("ERROR_ORPHAN_TXN") == 2

    def test_json_round_trip(self):
        s = make_scenario(random.Random(3))
        report = audit(s.entries, s.chain, s.registry, store_state=s.store)
        back = load_report(render_report(report, "JSON"))
        assert back == report

    def test_summary_matches_lists(self):
        s = make_scenario(random.Random(5))
        report = audit(s.entries, s.chain, s.registry, store_state=s.store)
        assert report.summary["entries"] == len(s.entries) == len(report.per_entry)
        assert report.summary["orphans"] == len(report.orphans)


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32))
    def test_findings_equal_injected(self, seed):
        s = make_scenario(random.Random(seed))
        assert audit(s.entries, s.chain, s.registry, store_state=s.store).findings() == s.expected

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32))
    def test_idempotent(self, seed):
        s = make_scenario(random.Random(seed))
        a = audit(s.entries, s.chain, s.registry, store_state=s.store)
        b = audit(s.entries, s.chain, s.registry, store_state=s.store)
        assert render_report(a, "JSON") == render_report(b, "JSON")

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32), st.sampled_from(["signature", "delete", "store"]))
    def test_monotone(self, seed, extra):
        s = make_scenario(random.Random(seed))
        before = audit(s.entries, s.chain, s.registry, store_state=s.store).findings()
        touched = {e for kind, e in s.faults if kind != "relink"}
        fresh = next(e.entry_id for e in s.entries if e.entry_id not in touched)
        entries, store = list(s.entries), {k: dict(v) for k, v in s.store.items()}
        if extra == "signature":
            entries = [replace(e, entry_signature=Signature(bytes(64), e.author_key_id)) if e.entry_id == fresh else e
                       for e in entries]
        elif extra == "delete":
            entries = [e for e in entries if e.entry_id != fresh]
        else:
            store[f"r{fresh}"]["age"] = "-1"
        after = audit(entries, s.chain, s.registry, store_state=store).findings()
        assert before < after
