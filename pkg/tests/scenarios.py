"""Randomized tamper scenarios with a known ground-truth fault set.

Every entry ``i`` writes its own record ``r{i}``, entry faults hit distinct
entries and block faults hit non-adjacent blocks, so each injected fault has
exactly one expected set of findings:

=================  ===================================================
hash_flip          byte of an anchored ``entry_hash`` flipped on chain
                   -> block h, entry e ERROR_HASH_MISMATCH
delete_entry       entry removed from the changelog
                   -> orphan e, store diff for every field of r_e
omit_txn           entry never anchored -> entry e WARNING_MISSING_TXN
corrupt_signature  entry signature byte flipped in the changelog
                   -> entry e ERROR_BAD_ENTRY_SIGNATURE
relink             block prev_hash replaced and block re-signed -> block h
store_edit         field of r_e changed in the live store -> store r_e.f
=================  ===================================================
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace

from scrybe import model
from scrybe.changelog import replay
from scrybe.crypto import Digest, Signature

from conftest import ChainBuilder, entry_series, seeded_key

FAULTS = ("hash_flip", "delete_entry", "omit_txn", "corrupt_signature", "relink", "store_edit")

_MINERS = [seeded_key(i) for i in (1, 2, 3)]
_AUTHOR = seeded_key(9)
_ENTRIES = entry_series(_AUTHOR, 16)
_PER_BLOCK = 2


@dataclass
class Scenario:
    entries: list
    chain: list
    registry: model.MinerRegistry
    store: dict
    expected: set
    faults: list


def _flip(data: bytes, rng: random.Random) -> bytes:
    raw = bytearray(data)
    raw[rng.randrange(len(raw))] ^= 1 << rng.randrange(8)
    return bytes(raw)


def make_scenario(rng: random.Random, max_faults: int = 4) -> Scenario:
    kinds = [rng.choice(FAULTS) for _ in range(rng.randint(1, max_faults))]
    entry_pool = list(range(1, len(_ENTRIES) + 1))
    rng.shuffle(entry_pool)
    targets: list[tuple[str, int]] = []
    for kind in kinds:
        if kind != "relink":
            targets.append((kind, entry_pool.pop()))
        else:
            targets.append((kind, 0))

    omitted = {e for k, e in targets if k == "omit_txn"}
    builder = ChainBuilder(_MINERS, _AUTHOR)
    anchored = [e for e in _ENTRIES if e.entry_id not in omitted]
    builder.anchor(anchored, per_block=_PER_BLOCK)
    chain = list(builder.blocks)
    height_of = {t.entry_id: b.height for b in chain for t in b.transactions}

    # block-level faults must sit on distinct, non-adjacent blocks
    used_blocks: set[int] = set()

    def free(h: int) -> bool:
        return all(abs(h - u) > 1 for u in used_blocks) or h in used_blocks

    fixed: list[tuple[str, int]] = []
    for kind, e in targets:
        if kind == "hash_flip":
            h = height_of[e]
            if not free(h):
                kind = "corrupt_signature"  # keep the entry fault, move it off the chain
            else:
                used_blocks.add(h)
        fixed.append((kind, e))
    for i, (kind, e) in enumerate(fixed):
        if kind == "relink":
            choices = [h for h in range(1, len(chain)) if all(abs(h - u) > 1 for u in used_blocks)]
            if not choices:
                fixed[i] = ("store_edit", entry_pool.pop())
                continue
            h = rng.choice(choices)
            used_blocks.add(h)
            fixed[i] = (kind, h)

    entries = list(_ENTRIES)
    store = replay(_ENTRIES)
    expected: set[tuple] = set()
    for kind, target in fixed:
        if kind == "hash_flip":
            h = height_of[target]
            block = chain[h]
            txns = tuple(
                replace(t, entry_hash=Digest(_flip(t.entry_hash, rng))) if t.entry_id == target else t
                for t in block.transactions
            )
            chain[h] = replace(block, transactions=txns)
            expected |= {("block", h), ("entry", target, "ERROR_HASH_MISMATCH")}
        elif kind == "delete_entry":
            entries = [e for e in entries if e.entry_id != target]
            expected.add(("orphan", target))
            expected |= {("store", f"r{target}", f) for f in store[f"r{target}"]}
        elif kind == "omit_txn":
            expected.add(("entry", target, "WARNING_MISSING_TXN"))
        elif kind == "corrupt_signature":
            entries = [
                replace(e, entry_signature=Signature(_flip(e.entry_signature.value, rng), e.entry_signature.signer))
                if e.entry_id == target else e
                for e in entries
            ]
            expected.add(("entry", target, "ERROR_BAD_ENTRY_SIGNATURE"))
        elif kind == "relink":
            block = chain[target]
            moved = replace(block, prev_hash=Digest(rng.randbytes(32)))
            chain[target] = model.sign_block(moved, builder.miners[block.miner_key_id])
            expected.add(("block", target))
        elif kind == "store_edit":
            rid = f"r{target}"
            field_name = rng.choice(sorted(store[rid]))
            store[rid][field_name] = store[rid][field_name] + "-edited"
            expected.add(("store", rid, field_name))
    return Scenario(entries, chain, builder.registry, store, expected, fixed)
