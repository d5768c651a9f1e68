"""Scrybe: a changelog of record mutations anchored on a permissioned blockchain.

Entries live off-chain in an append-only changelog; only their hashes go
on chain, in blocks produced by a commit-reveal selected miner.  The audit
module cross-checks the two and the live record store.
"""

__version__ = "0.1.0"
