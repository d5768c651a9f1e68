import csv
import io
import socket

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scrybe import model
from scrybe.audit import audit, audit_record_store
from scrybe.changelog import ChangelogClient, ChangelogDatabase, ChangelogService, TokenTable, replay
from scrybe.ingest import (
    CsvRecordBatch,
    IngestError,
    RecordStore,
    RecordStoreClient,
    RecordStoreService,
    batch_to_entries,
    parse_csv,
    store_fields,
    submit,
    tamper_store_file,
)
from scrybe.node import NodeClient, load_node_config, run_node
from scrybe.web import HttpError

import oracles
from conftest import T0, seeded_key, wait_for, write_cluster


def ticking(start=T0):
    t = iter(range(start, start + 10**9, 7))
    return lambda: next(t)


class TestParse:
    def test_two_rows(self):
        batch = parse_csv(b"record_id,age,blood_type\n1,34,A\n2,51,O\n")
        assert len(batch) == 2
        assert batch.header == ("record_id", "age", "blood_type")

    def test_quoted_comma(self):
        batch = parse_csv(b'record_id,note\n1,"hello, world"\n')
        assert batch.rows[0][1] == ("hello, world",)

    def test_ragged(self):
        with pytest.raises(IngestError) as exc:
            parse_csv(b"record_id,a,b\n1,2\n")
        assert exc.value.code == "RAGGED_ROW" and exc.value.line == 2

    def test_duplicate_id(self):
        with pytest.raises(IngestError) as exc:
            parse_csv(b"record_id,a\n1,x\n1,y\n")
        assert exc.value.code == "DUPLICATE_ID"

    @pytest.mark.parametrize("data", [b"", b"\n"])
    def test_empty(self, data):
        with pytest.raises(IngestError) as exc:
            parse_csv(data)
        assert exc.value.code == "EMPTY_INPUT"

    def test_bad_utf8(self):
        with pytest.raises(IngestError) as exc:
            parse_csv(b"record_id,a\n1,\xff\n")
        assert exc.value.code == "BAD_ENCODING"

    def test_header_only(self):
        assert len(parse_csv(b"record_id,a\n")) == 0

    def test_bom_and_crlf(self):
        batch = parse_csv(b"\xef\xbb\xbfrecord_id,a\r\n1,x\r\n")
        assert batch.header == ("record_id", "a") and batch.rows == (("1", ("x",)),)


cell = st.text(alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00\r"), max_size=6)


@st.composite
def csv_tables(draw):
    names = draw(st.lists(st.from_regex(r"[a-z]{1,5}", fullmatch=True), min_size=1, max_size=4, unique=True))
    ids = draw(st.lists(st.from_regex(r"[A-Za-z0-9]{1,4}", fullmatch=True), max_size=6, unique=True))
    rows = [[rid] + [draw(cell) for _ in names] for rid in ids]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["record_id", *names])
    w.writerows(rows)
    return buf.getvalue().encode()


def dictreader_map(data: bytes) -> dict:
    """Independent expectation: DictReader rows with empty cells dropped."""
    out = {}
    for row in csv.DictReader(io.StringIO(data.decode(), newline="")):
        rid = row.pop("record_id")
        fields = {k: v for k, v in row.items() if v != ""}
        if fields:
            out[rid] = fields
    return out


class TestEntries:
    def test_ids_consecutive(self, author):
        batch = parse_csv(b"record_id,a\n1,x\n2,y\n")
        entries = batch_to_entries(batch, author, "T", 7, ticking())
        assert [e.entry_id for e in entries] == [7, 8]
        assert all(model.verify_entry_signature(e, {author.key_id: author.public_key}) for e in entries)

    def test_empty_cell_omitted(self, author):
        entries = batch_to_entries(parse_csv(b"record_id,a,b\n1,,y\n"), author, "T", 1, ticking())
        assert [(op.field_name, op.new_value) for op in entries[0].mutation] == [("b", "y")]

    def test_all_empty_row_skipped(self, author):
        entries = batch_to_entries(parse_csv(b"record_id,a\n1,\n2,z\n"), author, "T", 1, ticking())
        assert [e.entry_id for e in entries] == [1]
        assert entries[0].mutation[0].record_id == "2"

    @settings(max_examples=80, deadline=None)
    @given(csv_tables())
    def test_replay_reproduces_csv(self, data):
        entries = batch_to_entries(parse_csv(data), seeded_key(9), "T", 1, ticking())
        expected = dictreader_map(data)
        assert oracles.fold(entries) == expected
        assert replay(entries) == expected

    def test_field_map(self):
        batch = CsvRecordBatch(("record_id", "a"), (("1", ("x",)), ("2", ("",))))
        assert batch.field_map() == {"1": {"a": "x"}}


class TestStore:
    def test_import_export(self, tmp_path):
        s = RecordStore(tmp_path / "store.json")
        s.import_record("r1", {"blood_type": "A"})
        assert s.export("r1") == {"blood_type": "A"}
        s.import_record("r1", {"blood_type": None})
        assert s.export("r1") is None

    def test_tamper_hook(self, tmp_path):
        path = tmp_path / "store.json"
        s = RecordStore(path)
        s.import_record("r1", {"blood_type": "A"})
        tamper_store_file(path, "r1", "blood_type", "B")
        assert s.export("r1") == {"blood_type": "B"}

    def test_service(self, tmp_path):
        srv = RecordStoreService(RecordStore(tmp_path / "s.json"), TokenTable({"w": "author", "r": "auditor"})).serve().start()
        try:
            RecordStoreClient(srv.url, "w").import_record("r1", {"blood_type": "A"})
            reader = RecordStoreClient(srv.url, "r")
            assert reader.export("r1") == {"blood_type": "A"}
            assert reader.export_all() == {"r1": {"blood_type": "A"}}
            with pytest.raises(HttpError) as exc:
                reader.export("nope")
            assert exc.value.status == 404
            with pytest.raises(HttpError) as exc:
                reader.import_record("r2", {"a": "b"})
            assert exc.value.status == 403
            with pytest.raises(HttpError) as exc:
                RecordStoreClient(srv.url, None).export("r1")
            assert exc.value.status == 401
        finally:
            srv.stop()

    def test_store_fields(self, author):
        e = model.make_entry(1, "T", T0, (model.FieldOp.set("r", "a", "1"), model.FieldOp.delete("r", "b")), author)
        assert store_fields(e) == {"r": {"a": "1", "b": None}}


def dead_url():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return f"http://127.0.0.1:{s.getsockname()[1]}"


@pytest.fixture
def services(tmp_path, author):
    tokens = TokenTable({"w": "author", "r": "auditor"})
    db = ChangelogDatabase(tmp_path / "c.log", {author.key_id: author.public_key}, fsync=False)
    cl = ChangelogService(db, tokens).serve().start()
    st_ = RecordStoreService(RecordStore(tmp_path / "store.json"), tokens).serve().start()
    yield cl, st_
    cl.stop()
    st_.stop()
    db.close()


class TestSubmit:
    CSV = b"record_id,age,blood_type\n1,34,A\n2,51,O\n3,29,AB\n"

    def entries(self, author):
        return batch_to_entries(parse_csv(self.CSV), author, "T", 1, ticking())

    @pytest.mark.slow
    def test_healthy(self, tmp_path, services, author):
        cl, st_ = services
        node = run_node(load_node_config(write_cluster(tmp_path / "n", [author], author, interval_ms=200)[0]))
        try:
            client = NodeClient(node.http.url)
            outcomes = submit(self.entries(author), ChangelogClient(cl.url, "w"), client,
                              RecordStoreClient(st_.url, "w"), author)
            assert all(o.ok for o in outcomes) and len(outcomes) == 3
            assert outcomes[0].line().split("\t")[:4] == ["entry 1", "changelog=OK", "txn=OK", "store=OK"]

            def anchored():
                return len([t for b in client.get_chain() for t in b.transactions]) == 3

            assert wait_for(anchored, 30)
            entries = ChangelogClient(cl.url, "r").pull_all()
            report = audit(entries, client.get_chain(), node.config.registry,
                           store_state=RecordStoreClient(st_.url, "r").export_all())
            assert report.passed and report.summary["ok"] == 3
        finally:
            node.stop()

    def test_node_unreachable(self, services, author):
        cl, st_ = services
        outcomes = submit(self.entries(author), ChangelogClient(cl.url, "w"), NodeClient(dead_url(), timeout=1),
                          RecordStoreClient(st_.url, "w"), author, retries=1, retry_delay=0)
        assert len(outcomes) == 1
        o = outcomes[0]
        assert (o.changelog, o.txn, o.store) == ("OK", "TXN_REJECTED", "OK")
        assert ChangelogClient(cl.url, "r").next_id() == 2

    def test_store_down(self, services, author):
        cl, _ = services

        class AcceptingNode:
            def submit(self, txn):
                return "digest"

        outcomes = submit(self.entries(author), ChangelogClient(cl.url, "w"), AcceptingNode(),
                          RecordStoreClient(dead_url(), "w"), author, retries=1, retry_delay=0)
        o = outcomes[0]
        assert (o.changelog, o.txn, o.store) == ("OK", "OK", "STORE_REJECTED")
        entries = ChangelogClient(cl.url, "r").pull_all()
        assert not audit_record_store({}, entries).ok

    def test_changelog_rejection_stops_before_txn(self, services, author):
        cl, st_ = services
        sent = []

        class RecordingNode:
            def submit(self, txn):
                sent.append(txn)
                return "digest"

        entries = self.entries(author)
        outcomes = submit(entries[1:], ChangelogClient(cl.url, "w"), RecordingNode(),
                          RecordStoreClient(st_.url, "w"), author, retries=1, retry_delay=0)
        assert outcomes[0].changelog == "CHANGELOG_REJECTED"
        assert outcomes[0].txn != "OK" and sent == []
        assert RecordStoreClient(st_.url, "r").export_all() == {}
