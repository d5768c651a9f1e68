"""Researcher-side pipeline: CSV rows to signed entries, anchors and store writes.

Also hosts the mock record store, a keyed JSON file behind ``POST /import``
and ``POST /export``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import model
from .changelog import ChangelogClient, ChangelogError, RecordStoreState, TokenTable
from .crypto import KeyPair
from .model import ChangelogEntry, FieldOp, Op
from .node import NodeClient, NodeError
from .web import HttpError, JsonClient, JsonServer, Unreachable, bearer_token

logger = logging.getLogger(__name__)


class IngestError(Exception):
    def __init__(self, code: str, line: int, message: str) -> None:
        super().__init__(f"line {line}: {code}: {message}")
        self.code = code
        self.line = line


@dataclass(frozen=True)
class CsvRecordBatch:
    header: tuple[str, ...]
    rows: tuple[tuple[str, tuple[str, ...]], ...]

    def __len__(self) -> int:
        return len(self.rows)

    def field_map(self) -> RecordStoreState:
        """The record/field map the batch describes; empty cells are absent."""
        out: RecordStoreState = {}
        for record_id, values in self.rows:
            fields = {k: v for k, v in zip(self.header[1:], values) if v != ""}
            if fields:
                out.setdefault(record_id, {}).update(fields)
        return out


def parse_csv(data: bytes) -> CsvRecordBatch:
    try:
        text = data.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise IngestError("BAD_ENCODING", 1, str(exc)) from None
    reader = csv.reader(io.StringIO(text, newline=""), strict=True)
    try:
        header = next(reader, None)
        if not header or header == [""]:
            raise IngestError("EMPTY_INPUT", 1, "no header line")
        if len(set(header)) != len(header):
            raise IngestError("DUPLICATE_FIELD", 1, "header repeats a column name")
        rows, seen = [], {}
        for row in reader:
            line = reader.line_num
            if not row:
                continue  # blank line
            if len(row) != len(header):
                raise IngestError("RAGGED_ROW", line, f"{len(row)} values, header has {len(header)}")
            record_id = row[0]
            if not record_id:
                raise IngestError("MISSING_ID", line, "empty record id")
            if record_id in seen:
                raise IngestError("DUPLICATE_ID", line, f"record {record_id!r} already on line {seen[record_id]}")
            seen[record_id] = line
            rows.append((record_id, tuple(row[1:])))
    except csv.Error as exc:
        raise IngestError("MALFORMED", reader.line_num, str(exc)) from None
    return CsvRecordBatch(tuple(header), tuple(rows))


def wall_clock_ms() -> int:
    return time.time_ns() // 1_000_000


def batch_to_entries(
    batch: CsvRecordBatch,
    author: KeyPair,
    trial_id: str,
    starting_id: int,
    clock: Callable[[], int] = wall_clock_ms,
) -> list[ChangelogEntry]:
    """One signed entry per row with at least one non-empty cell."""
    entries = []
    for record_id, values in batch.rows:
        ops = tuple(FieldOp.set(record_id, name, value) for name, value in zip(batch.header[1:], values) if value != "")
        if not ops:
            continue
        entries.append(model.make_entry(starting_id + len(entries), trial_id, clock(), ops, author))
    return entries


# -- mock record store ----------------------------------------------------------------

class RecordStore:
    """A record/field map persisted as one JSON file.

    The file is re-read on every request, so edits made to it directly
    (see :func:`tamper_store_file`) are what the service serves next.
    """

    def __init__(self, path: str | os.PathLike) -> None:
        self.path = Path(path)
        self._write_lock = threading.Lock()
        if not self.path.exists():
            self._save({})

    def load(self) -> RecordStoreState:
        try:
            return json.loads(self.path.read_text())
        except FileNotFoundError:
            return {}

    def _save(self, state: RecordStoreState) -> None:
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(state, fh, sort_keys=True, indent=1)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)

    def import_record(self, record_id: str, fields: dict[str, str | None]) -> None:
        """``None`` deletes a field; a record left with no fields disappears."""
        with self._write_lock:
            state = self.load()
            record = state.setdefault(record_id, {})
            for name, value in fields.items():
                if value is None:
                    record.pop(name, None)
                else:
                    record[name] = value
            if not record:
                del state[record_id]
            self._save(state)

    def export(self, record_id: str) -> dict[str, str] | None:
        return self.load().get(record_id)


def tamper_store_file(path: str | os.PathLike, record_id: str, field_name: str, value: str | None) -> None:
    """Edit the store's file behind the service's back (test backdoor)."""
    path = Path(path)
    state = json.loads(path.read_text())
    if value is None:
        state.get(record_id, {}).pop(field_name, None)
    else:
        state.setdefault(record_id, {})[field_name] = value
    path.write_text(json.dumps(state, sort_keys=True, indent=1))


class RecordStoreService:
    """``POST /import {record_id, fields}`` and ``POST /export {record_id}``.

    Exporting without a ``record_id`` returns every record.  Authors may
    import and export; auditors may only export.
    """

    def __init__(self, store: RecordStore, tokens: TokenTable) -> None:
        self.store = store
        self.tokens = tokens

    def __call__(self, method, path, query, body, headers):
        role = self.tokens.role(bearer_token(headers))
        if role is None:
            raise HttpError(401, "missing or unknown token", "UNAUTHORIZED")
        if method != "POST" or path not in ("/import", "/export"):
            raise HttpError(404, f"no route {method} {path}", "NOT_FOUND")
        body = body or {}
        if not isinstance(body, dict):
            raise HttpError(400, "body must be an object", "BAD_REQUEST")
        if path == "/import":
            if role != "author":
                raise HttpError(403, "import needs an author token", "UNAUTHORIZED")
            record_id, fields = body.get("record_id"), body.get("fields")
            if not isinstance(record_id, str) or not isinstance(fields, dict):
                raise HttpError(400, "expected {record_id, fields}", "BAD_REQUEST")
            if not all(v is None or isinstance(v, str) for v in fields.values()):
                raise HttpError(400, "field values must be strings or null", "BAD_REQUEST")
            self.store.import_record(record_id, fields)
            return 200, {"record_id": record_id, "imported": len(fields)}
        record_id = body.get("record_id")
        if record_id is None:
            return 200, {"records": self.store.load()}
        fields = self.store.export(record_id)
        if fields is None:
            raise HttpError(404, f"no record {record_id!r}", "NOT_FOUND")
        return 200, {"record_id": record_id, "fields": fields}

    def serve(self, host: str = "127.0.0.1", port: int = 0) -> JsonServer:
        return JsonServer(self, host, port)


class RecordStoreClient:
    def __init__(self, base_url: str, token: str | None) -> None:
        self.http = JsonClient(base_url, token)

    def import_record(self, record_id: str, fields: dict[str, str | None]) -> None:
        self.http.post("/import", {"record_id": record_id, "fields": fields})

    def export(self, record_id: str) -> dict[str, str]:
        return self.http.post("/export", {"record_id": record_id})["fields"]

    def export_all(self) -> RecordStoreState:
        return self.http.post("/export", {})["records"]


# -- submission -----------------------------------------------------------------------

OK = "OK"
SKIPPED = "SKIPPED"


@dataclass
class EntryOutcome:
    entry_id: int
    changelog: str = SKIPPED
    txn: str = SKIPPED
    store: str = SKIPPED
    detail: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.changelog == self.txn == self.store == OK

    def line(self) -> str:
        text = f"entry {self.entry_id}\tchangelog={self.changelog}\ttxn={self.txn}\tstore={self.store}"
        return text + ("\t" + "; ".join(self.detail) if self.detail else "")


def store_fields(entry: ChangelogEntry) -> dict[str, dict[str, str | None]]:
    """Group an entry's mutation into per-record import bodies."""
    out: dict[str, dict[str, str | None]] = {}
    for op in entry.mutation:
        out.setdefault(op.record_id, {})[op.field_name] = op.new_value if op.op is Op.SET else None
    return out


def _retrying(fn, retries: int, delay: float):
    """Call ``fn`` until it stops raising Unreachable; re-raise the last one."""
    for attempt in range(retries + 1):
        try:
            return fn(), attempt
        except Unreachable:
            if attempt == retries:
                raise
            time.sleep(delay * (attempt + 1))


def _append(changelog: ChangelogClient, entry: ChangelogEntry, retries: int, delay: float) -> str:
    tries = 0
    while True:
        try:
            changelog.append(entry)
            return OK
        except Unreachable:
            if tries == retries:
                raise
            tries += 1
            time.sleep(delay * tries)
        except ChangelogError as exc:
            # an earlier try may have landed before its reply was lost
            if tries and exc.code == "ID_GAP" and _already_stored(changelog, entry):
                return OK
            raise


def _already_stored(changelog: ChangelogClient, entry: ChangelogEntry) -> bool:
    try:
        return changelog.get(entry.entry_id) == entry
    except (ChangelogError, Unreachable):
        return False


def submit(
    entries: Sequence[ChangelogEntry],
    changelog: ChangelogClient,
    node: NodeClient,
    store: RecordStoreClient,
    submitter: KeyPair,
    *,
    retries: int = 5,
    retry_delay: float = 0.2,
    on_outcome: Callable[[EntryOutcome], None] | None = None,
) -> list[EntryOutcome]:
    """Changelog first, then the anchor, then the store, entry by entry.

    A changelog rejection stops everything before the anchor is built.  A
    failed anchor or store write still lets the other leg of that entry
    run, then stops the batch.
    """
    outcomes = []
    for entry in entries:
        out = EntryOutcome(entry.entry_id)
        outcomes.append(out)
        try:
            out.changelog = _append(changelog, entry, retries, retry_delay)
        except (ChangelogError, Unreachable) as exc:
            out.changelog = "CHANGELOG_REJECTED"
            out.detail.append(str(exc))
        if out.changelog == OK:
            txn = model.make_transaction(entry, submitter)
            try:
                _retrying(lambda: node.submit(txn), retries, retry_delay)
                out.txn = OK
            except NodeError as exc:
                if exc.code == "DUPLICATE":
                    out.txn = OK
                else:
                    out.txn = "TXN_REJECTED"
                    out.detail.append(str(exc))
            except Unreachable as exc:
                out.txn = "TXN_REJECTED"
                out.detail.append(str(exc))
            try:
                for record_id, fields in store_fields(entry).items():
                    _retrying(lambda: store.import_record(record_id, fields), retries, retry_delay)
                out.store = OK
            except (HttpError, Unreachable) as exc:
                out.store = "STORE_REJECTED"
                out.detail.append(str(exc))
        if on_outcome is not None:
            on_outcome(out)
        if not out.ok:
            break
    return outcomes
