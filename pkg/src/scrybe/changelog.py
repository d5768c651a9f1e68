"""The off-chain changelog server and changelog replay.

Entries are numbered from 1 with no gaps and are never changed after
they are appended.  Replaying them in order onto an empty store rebuilds
the record store.
"""

from __future__ import annotations

import logging
import os
import threading
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import model
from .crypto import Digest
from .logfile import AppendOnlyLog
from .model import ChangelogEntry, Op
from .web import HttpError, JsonClient, JsonServer, bearer_token

logger = logging.getLogger(__name__)

RecordStoreState = dict[str, dict[str, str]]

ROLES = ("author", "auditor")


class ChangelogError(Exception):
    def __init__(self, code: str, message: str = "") -> None:
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


def entry_problem(entry: ChangelogEntry) -> str | None:
    if not entry.mutation:
        return "mutation list is empty"
    for op in entry.mutation:
        if op.op is Op.SET and op.new_value is None:
            return f"SET {op.record_id}.{op.field_name} without a value"
        if op.op is Op.DELETE and op.new_value is not None:
            return f"DELETE {op.record_id}.{op.field_name} carries a value"
    return None


class ChangelogDatabase:
    """Durable append-only entry sequence.

    ``authors`` maps author key id to public key; an empty map disables
    signature checks (fixtures only).
    """

    def __init__(self, path: str | os.PathLike, authors: Mapping[Digest, bytes], *, fsync: bool = True) -> None:
        self.path = Path(path)
        self.authors = dict(authors)
        self._log = AppendOnlyLog(self.path, fsync=fsync)
        self._entries: list[ChangelogEntry] = [model.decode_entry(p) for p in self._log]
        self._write_lock = threading.Lock()
        for position, entry in enumerate(self._entries):
            if entry.entry_id != position + 1:
                raise ChangelogError("NON_CONSECUTIVE", f"{self.path}: record {position} has id {entry.entry_id}")

    @property
    def next_id(self) -> int:
        return len(self._entries) + 1

    def append_entry(self, entry: ChangelogEntry) -> int:
        with self._write_lock:
            if entry.entry_id != self.next_id:
                raise ChangelogError("ID_GAP", f"got {entry.entry_id}, next id is {self.next_id}")
            problem = entry_problem(entry)
            if problem:
                raise ChangelogError("INVALID_ENTRY", problem)
            if self.authors:
                check = model.verify_entry_signature(entry, self.authors)
                if check.code is model.Check.UNKNOWN_SIGNER:
                    raise ChangelogError("UNKNOWN_AUTHOR", entry.author_key_id.hex())
                if not check:
                    raise ChangelogError("BAD_SIGNATURE", f"entry {entry.entry_id}")
            self._log.append(model.canonical_encode(entry))
            self._entries.append(entry)
            return entry.entry_id

    def get_entry(self, entry_id: int) -> ChangelogEntry:
        entries = self._entries
        if not 1 <= entry_id <= len(entries):
            raise ChangelogError("NOT_FOUND", f"no entry {entry_id}")
        return entries[entry_id - 1]

    def pull_all(self) -> list[ChangelogEntry]:
        return self._entries[: len(self._entries)]

    def close(self) -> None:
        self._log.close()


def replay(entries: Sequence[ChangelogEntry], up_to: int | None = None) -> RecordStoreState:
    """Fold SET/DELETE mutations onto an empty store, in entry order."""
    state: RecordStoreState = {}
    return apply_entries(state, entries, up_to, start_id=1)


def apply_entries(
    state: RecordStoreState,
    entries: Iterable[ChangelogEntry],
    up_to: int | None = None,
    *,
    start_id: int | None = None,
) -> RecordStoreState:
    """Fold ``entries`` onto ``state`` in order.

    With ``start_id`` the entries must be numbered consecutively from it;
    without, gaps are tolerated (the auditor replays damaged changelogs).
    """
    expected = start_id
    for entry in entries:
        if start_id is not None and entry.entry_id != expected:
            raise ChangelogError("NON_CONSECUTIVE", f"expected entry {expected}, got {entry.entry_id}")
        if up_to is not None and entry.entry_id > up_to:
            break
        for op in entry.mutation:
            if op.op is Op.SET:
                state.setdefault(op.record_id, {})[op.field_name] = op.new_value
            else:
                fields = state.get(op.record_id)
                if fields is not None:
                    fields.pop(op.field_name, None)
                    if not fields:
                        del state[op.record_id]
        expected = entry.entry_id + 1
    return state


class TokenTable:
    """Static bearer tokens; file lines are ``<token> <role>``."""

    def __init__(self, tokens: Mapping[str, str]) -> None:
        for role in tokens.values():
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
        self.tokens = dict(tokens)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TokenTable":
        tokens = {}
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                token, role = line.split()
                tokens[token] = role
        return cls(tokens)

    def role(self, token: str | None) -> str | None:
        return self.tokens.get(token) if token else None


class ChangelogService:
    """HTTP front end: POST /entries, GET /entries[/id], GET /state."""

    def __init__(self, db: ChangelogDatabase, tokens: TokenTable) -> None:
        self.db = db
        self.tokens = tokens

    def _authorize(self, headers: dict, *allowed: str) -> None:
        role = self.tokens.role(bearer_token(headers))
        if role not in allowed:
            raise HttpError(401 if role is None else 403, "not authorized", "UNAUTHORIZED")

    def __call__(self, method, path, query, body, headers):
        try:
            if method == "POST" and path == "/entries":
                self._authorize(headers, "author")
                try:
                    entry = model.entry_from_json(body)
                except (TypeError, KeyError, ValueError) as exc:
                    raise HttpError(400, f"malformed entry: {exc}", "BAD_REQUEST") from None
                return 201, {"entry_id": self.db.append_entry(entry)}
            if method == "GET" and path == "/entries":
                self._authorize(headers, *ROLES)
                return 200, [model.entry_to_json(e) for e in self.db.pull_all()]
            if method == "GET" and path.startswith("/entries/"):
                self._authorize(headers, *ROLES)
                try:
                    entry_id = int(path.rsplit("/", 1)[1])
                except ValueError:
                    raise HttpError(404, "no such entry", "NOT_FOUND") from None
                return 200, model.entry_to_json(self.db.get_entry(entry_id))
            if method == "GET" and path == "/state":
                self._authorize(headers, *ROLES)
                return 200, replay(self.db.pull_all())
        except ChangelogError as exc:
            status = {"NOT_FOUND": 404, "UNKNOWN_AUTHOR": 403}.get(exc.code, 409)
            raise HttpError(status, str(exc), exc.code) from None
        raise HttpError(404, f"no route {method} {path}", "NOT_FOUND")

    def serve(self, host: str = "127.0.0.1", port: int = 0) -> JsonServer:
        return JsonServer(self, host, port)


class ChangelogClient:
    def __init__(self, url: str, token: str | None) -> None:
        self.http = JsonClient(url, token)

    def append(self, entry: ChangelogEntry) -> int:
        try:
            return self.http.post("/entries", model.entry_to_json(entry))["entry_id"]
        except HttpError as exc:
            raise ChangelogError(exc.code or "ERROR", exc.message) from None

    def get(self, entry_id: int) -> ChangelogEntry:
        try:
            return model.entry_from_json(self.http.get(f"/entries/{entry_id}"))
        except HttpError as exc:
            raise ChangelogError(exc.code or "ERROR", exc.message) from None

    def pull_all(self) -> list[ChangelogEntry]:
        try:
            return [model.entry_from_json(o) for o in self.http.get("/entries")]
        except HttpError as exc:
            raise ChangelogError(exc.code or "ERROR", exc.message) from None

    def next_id(self) -> int:
        return len(self.http.get("/entries")) + 1
