"""``scrybe`` command line.

Exit status is 0 only when the command's whole job succeeded, 1 when it
ran but the outcome was negative (failed audit, rejected ingest leg,
chain disagreement) and 2 for usage, config or connectivity errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from .audit import audit, render_report
from .changelog import ChangelogClient, ChangelogDatabase, ChangelogError, ChangelogService, TokenTable
from .chainstore import read_chain_file
from .config import ConfigError, load_config, load_keypair, load_public_key, save_keypair
from .crypto import generate_keypair
from .ingest import (
    IngestError,
    RecordStore,
    RecordStoreClient,
    RecordStoreService,
    batch_to_entries,
    parse_csv,
    submit,
    wall_clock_ms,
)
from .model import FieldOp, MinerRegistry, make_entry
from .node import NodeClient, NodeError, run_node
from .web import HttpError, Unreachable

logger = logging.getLogger("scrybe")

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


class CliError(Exception):
    pass


def _out(*fields) -> None:
    print("\t".join(str(f) for f in fields), flush=True)


def _read_token(path: str | None) -> str | None:
    if path:
        try:
            return Path(path).read_text().strip()
        except OSError as exc:
            raise CliError(f"cannot read token file {path}: {exc.strerror}") from None
    return os.environ.get("SCRYBE_TOKEN")


def _load_registry(path) -> MinerRegistry:
    try:
        return MinerRegistry.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"registry {path}: {exc}") from None


def _wait_for_signal(stop) -> None:
    done = threading.Event()

    def handler(signum, frame):
        done.set()

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)
    done.wait()
    stop()


# -- key material --------------------------------------------------------------------

def cmd_keygen(args) -> int:
    seed = None
    if args.seed:
        try:
            seed = bytes.fromhex(args.seed)
        except ValueError:
            raise CliError("--seed must be hex") from None
    try:
        key = generate_keypair(seed)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    save_keypair(key, args.out)
    _out(key.key_id.hex())
    return EXIT_OK


def cmd_registry(args) -> int:
    registry = MinerRegistry.from_keys(
        [load_public_key(p) for p in args.miner],
        [load_public_key(p) for p in args.author or ()],
        args.version,
    )
    Path(args.out).write_text(registry.dumps())
    for key_id in registry.miner_ids():
        _out("miner", key_id.hex())
    for key_id in sorted(registry.authors):
        _out("author", key_id.hex())
    return EXIT_OK


# -- services ------------------------------------------------------------------------

def cmd_node_run(args) -> int:
    service = run_node(load_config(args.config))
    _wait_for_signal(service.stop)
    return EXIT_OK


def cmd_changelog_serve(args) -> int:
    cfg = load_config(args.config)
    registry = _load_registry(cfg.path("registry_file"))
    try:
        tokens = TokenTable.load(cfg.path("tokens_file"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"tokens: {exc}") from None
    data_dir = cfg.path("data_dir")
    data_dir.mkdir(parents=True, exist_ok=True)
    db = ChangelogDatabase(data_dir / "changelog.log", registry.authors)
    server = ChangelogService(db, tokens).serve(*cfg.address("listen")).start()
    logger.info("changelog ready url=%s entries=%d", server.url, db.next_id - 1)

    def stop():
        server.stop()
        db.close()

    _wait_for_signal(stop)
    return EXIT_OK


def cmd_store_serve(args) -> int:
    cfg = load_config(args.config)
    try:
        tokens = TokenTable.load(cfg.path("tokens_file"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"tokens: {exc}") from None
    store = RecordStore(cfg.path("data_file"))
    server = RecordStoreService(store, tokens).serve(*cfg.address("listen")).start()
    logger.info("store ready url=%s", server.url)
    _wait_for_signal(server.stop)
    return EXIT_OK


# -- researcher and auditor ---------------------------------------------------------------

def cmd_ingest(args) -> int:
    try:
        batch = parse_csv(Path(args.csv).read_bytes())
    except OSError as exc:
        raise CliError(f"cannot read {args.csv}: {exc.strerror}") from None
    except IngestError as exc:
        print(f"{args.csv}:{exc.line}: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return _submit_all(args, lambda key, start: batch_to_entries(batch, key, args.trial, start))


def cmd_delete(args) -> int:
    ops = []
    for spec in args.field:
        record_id, sep, field_name = spec.partition(":")
        if not sep or not record_id or not field_name:
            raise CliError(f"--field expects RECORD:FIELD, got {spec!r}")
        ops.append(FieldOp.delete(record_id, field_name))
    return _submit_all(args, lambda key, start: [make_entry(start, args.trial, wall_clock_ms(), tuple(ops), key)])


def _submit_all(args, build) -> int:
    """Number entries after the changelog's tip and push them through every leg."""
    key = load_keypair(args.key)
    token = _read_token(args.token_file)
    changelog = ChangelogClient(args.changelog, _read_token(args.changelog_token_file) or token)
    store = RecordStoreClient(args.store, _read_token(args.store_token_file) or token)
    node = NodeClient(args.node)
    try:
        start = changelog.next_id()
    except (HttpError, Unreachable) as exc:
        raise CliError(f"changelog: {exc}") from None
    entries = build(key, start)
    outcomes = submit(entries, changelog, node, store, key, on_outcome=lambda o: print(o.line(), flush=True))
    ok = len(outcomes) == len(entries) and all(o.ok for o in outcomes)
    return EXIT_OK if ok else EXIT_FAIL


def _pull_chain(args):
    if args.chain_file:
        try:
            return read_chain_file(args.chain_file)
        except (OSError, ValueError) as exc:
            raise CliError(f"chain file {args.chain_file}: {exc}") from None
    if not args.node:
        raise CliError("give --node or --chain-file")
    try:
        return NodeClient(args.node).get_chain(0)
    except (NodeError, Unreachable) as exc:
        raise CliError(f"node: {exc}") from None


def cmd_audit(args) -> int:
    registry = _load_registry(args.registry)
    token = _read_token(args.token_file)
    try:
        entries = ChangelogClient(args.changelog, token).pull_all()
    except (ChangelogError, Unreachable) as exc:
        raise CliError(f"changelog: {exc}") from None
    chain = _pull_chain(args)
    store_state = None
    if args.store:
        try:
            store_state = RecordStoreClient(args.store, _read_token(args.store_token_file) or token).export_all()
        except (HttpError, Unreachable) as exc:
            raise CliError(f"store: {exc}") from None
    report = audit(entries, chain, registry, now_ms=wall_clock_ms(), grace_ms=args.grace_ms, store_state=store_state)
    sys.stdout.write(render_report(report, "TEXT").decode())
    if args.json:
        Path(args.json).write_bytes(render_report(report, "JSON"))
    if args.figures:
        from .plotting import audit_findings

        audit_findings(report, Path(args.figures) / "audit_findings.png")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_sim(args) -> int:
    from .network.sim import FaultPlan, Simulator

    plan = None
    if args.fault_plan:
        try:
            plan = FaultPlan.load(args.fault_plan)
        except (OSError, ValueError, KeyError) as exc:
            raise CliError(f"fault plan {args.fault_plan}: {exc}") from None
    sim = Simulator(args.miners, args.seed, plan, rounds=args.rounds, record_trace=bool(args.trace))
    result = sim.run()
    counts = result.selection_counts()
    for i, key_id in enumerate(result.keys[: args.miners]):
        _out("miner", i, key_id.hex()[:16], "selected", counts.get(key_id, 0))
    for i in range(len(result.keys)):
        _out("node", i, "sent", result.sent.get(i, 0), "rejected", result.rejected.get(i, 0))
    attempts = result.attempt_log()
    for height, attempt in sorted(attempts.items()):
        if attempt:
            _out("retry", height, "attempt", attempt)
    height = len(result.chains[result.honest[0]]) - 1
    agree = result.agreement()
    _out("height", height)
    _out("agreement", "yes" if agree else "no")
    if args.trace:
        Path(args.trace).write_text(result.trace_text())
    if args.figures:
        from .plotting import selection_histogram

        labels = {f"{i}:{k.hex()[:6]}": counts.get(k, 0) for i, k in enumerate(result.keys[: args.miners])}
        selection_histogram(labels, height, Path(args.figures) / "selection.png")
    return EXIT_OK if agree and height == args.rounds else EXIT_FAIL


# -- parser ---------------------------------------------------------------------------------

def _submission_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trial", required=True)
    p.add_argument("--key", required=True, help="author key file")
    p.add_argument("--changelog", required=True, help="changelog URL")
    p.add_argument("--node", required=True, help="node HTTP address(es), comma separated")
    p.add_argument("--store", required=True, help="record store URL")
    p.add_argument("--token-file", help="bearer token for changelog and store (else $SCRYBE_TOKEN)")
    p.add_argument("--changelog-token-file")
    p.add_argument("--store-token-file")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scrybe", description="Tamper-evident audit trail anchored on a permissioned chain.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("keygen", help="create a key file and print its key id")
    k.add_argument("--out", required=True)
    k.add_argument("--seed", help="64 hex chars; reproducible keys for tests only")
    k.set_defaults(func=cmd_keygen)

    r = sub.add_parser("registry", help="write a registry file from key files")
    r.add_argument("--miner", action="append", required=True, help="miner key file (repeatable)")
    r.add_argument("--author", action="append", help="author key file (repeatable)")
    r.add_argument("--version", type=int, default=1)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_registry)

    node = sub.add_parser("node", help="miner node")
    node_sub = node.add_subparsers(dest="action", required=True)
    nr = node_sub.add_parser("run")
    nr.add_argument("--config", required=True)
    nr.set_defaults(func=cmd_node_run)

    cl = sub.add_parser("changelog", help="changelog server")
    cl_sub = cl.add_subparsers(dest="action", required=True)
    cs = cl_sub.add_parser("serve")
    cs.add_argument("--config", required=True)
    cs.set_defaults(func=cmd_changelog_serve)

    st = sub.add_parser("store", help="mock record store")
    st_sub = st.add_subparsers(dest="action", required=True)
    ss = st_sub.add_parser("serve")
    ss.add_argument("--config", required=True)
    ss.set_defaults(func=cmd_store_serve)

    i = sub.add_parser("ingest", help="submit a CSV file")
    i.add_argument("--csv", required=True)
    _submission_args(i)
    i.set_defaults(func=cmd_ingest)

    d = sub.add_parser("delete", help="record field deletions as one changelog entry")
    d.add_argument("--field", action="append", required=True, help="RECORD:FIELD to delete (repeatable)")
    _submission_args(d)
    d.set_defaults(func=cmd_delete)

    a = sub.add_parser("audit", help="cross-check changelog, chain and store")
    a.add_argument("--changelog", required=True)
    a.add_argument("--node", help="node HTTP address(es), comma separated")
    a.add_argument("--chain-file", help="audit a persisted block file instead of a node")
    a.add_argument("--registry", required=True)
    a.add_argument("--store")
    a.add_argument("--json", help="also write the JSON report here")
    a.add_argument("--figures", help="directory for a findings chart")
    a.add_argument("--grace-ms", type=int, default=20_000)
    a.add_argument("--token-file")
    a.add_argument("--store-token-file")
    a.set_defaults(func=cmd_audit)

    s = sub.add_parser("sim", help="run the deterministic simulator")
    s.add_argument("--miners", type=int, required=True)
    s.add_argument("--rounds", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fault-plan")
    s.add_argument("--trace", help="write the event trace here")
    s.add_argument("--figures", help="directory for the selection histogram")
    s.set_defaults(func=cmd_sim)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (CliError, ConfigError, ChangelogError, OSError) as exc:
        print(f"scrybe: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
