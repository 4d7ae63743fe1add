"""A small consortium run in-process with instant, lossless delivery.

Every call to :meth:`Cluster.commit` performs one full consensus round
(propose, vote, aggregate, verify, assemble) across all members, then
applies the block to each member's registry and ledger. The command line
tool and the resolve benchmark use it where network timing is irrelevant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from ..codec import Reader, Writer
from ..consensus import (
    Block,
    BlockHeader,
    ChainView,
    ConsensusConfig,
    Transaction,
    assemble_block,
    cast_vote,
    eligible_aggregators,
    genesis_block,
    null_proposal,
    propose,
    rotate_aggregator,
    run_aggregation,
    verify_commit,
)
from ..crypto import KeyPair, get_scheme
from ..ledger import LedgerStore, PeerHandle, StorageConfig
from ..registry import BlockDelta, Registry, RegistryError, identity_for_key

CHAIN_MAGIC = b"MISCHAIN1"


class ChainFileError(ValueError):
    pass


@dataclass(frozen=True)
class TxOutcome:
    tx_id: bytes
    status: str  # committed | rejected | pending
    reason: str = ""
    height: int | None = None


class Cluster:
    def __init__(self, n: int = 4, seed: int = 0, scheme: str = "ed25519", hot_len: int = 10,
                 warm_len: int | None = None, dns_cache_users: int = 1,
                 max_tx_per_block: int = 100_000, root: str | Path | None = None) -> None:
        if n < 1:
            raise ValueError("a cluster needs at least one node")
        self.params = {"n": n, "seed": seed, "scheme": scheme, "hot_len": hot_len,
                       "warm_len": warm_len, "dns_cache_users": dns_cache_users,
                       "max_tx_per_block": max_tx_per_block}
        self.scheme = get_scheme(scheme)
        self.keys = [self.scheme.keygen(f"cluster-{seed}-{i}".encode()) for i in range(n)]
        pubs = tuple(k.public for k in self.keys)
        self.ccfg = ConsensusConfig(pubs, pubs, max_tx_per_block=max_tx_per_block)
        f = self.ccfg.f
        if warm_len is None:
            warm_len = 2 * f * 5 if f else 10
        self.scfg = StorageConfig(n, f, hot_len, warm_len)
        self.root = None if root is None else Path(root)
        self.dns_users = []
        for i in range(1, dns_cache_users + 1):
            key = self.dns_key(i)
            self.dns_users.append((f"DNS_cache:{i}", identity_for_key(key.public), key.public))
        self.registries: list[Registry] = []
        self.ledgers: list[LedgerStore] = []
        genesis = genesis_block()
        for rank in range(n):
            reg = Registry()
            for username, ident, pk in self.dns_users:
                reg.bootstrap_identity(username, ident, pk)
            self.registries.append(reg)
            node_root = None if self.root is None else self.root / f"node{rank}"
            store = LedgerStore(self.scfg, rank, node_root)
            store.append(genesis)
            self.ledgers.append(store)
        self.blocks: list[Block] = [genesis]
        self.pools: list[dict[bytes, Transaction]] = [{} for _ in range(n)]
        self.round = 0
        self.clock = 0.0
        self.outcomes: dict[bytes, TxOutcome] = {}

    def dns_key(self, i: int) -> KeyPair:
        return self.scheme.keygen(f"cluster-dns-{self.params['seed']}-{i}".encode())

    def user_key(self, username: str) -> KeyPair:
        """Deterministic key for a named client of this cluster."""
        return self.scheme.keygen(f"cluster-user-{self.params['seed']}-{username}".encode())

    @property
    def registry(self) -> Registry:
        return self.registries[0]

    @property
    def height(self) -> int:
        return self.blocks[-1].height

    @property
    def head(self) -> bytes:
        return self.blocks[-1].header.hash

    def peers(self, down: set[int] = frozenset()) -> list[PeerHandle]:
        return [PeerHandle(s, up=s.rank not in down) for s in self.ledgers]

    # -- consensus ------------------------------------------------------------

    def submit(self, tx: Transaction) -> None:
        slot = int.from_bytes(tx.tx_id[:4], "big") % len(self.pools)
        self.pools[slot][tx.tx_id] = tx
        self.outcomes[tx.tx_id] = TxOutcome(tx.tx_id, "pending")

    def pending(self) -> int:
        return sum(len(p) for p in self.pools)

    def commit(self, advance_s: float = 1.0) -> tuple[Block, BlockDelta]:
        """One consensus round over whatever the pools hold."""
        self.clock += advance_s
        self.round += 1
        now, r = self.clock, self.round
        view = ChainView(self.height, self.head)
        reg = self.registry
        received, prepares = {}, {}
        for slot, key in enumerate(self.keys):
            ok = []
            for tx in list(self.pools[slot].values()):
                try:
                    reg.check_tx(tx, now)
                except RegistryError as exc:
                    del self.pools[slot][tx.tx_id]
                    self.outcomes[tx.tx_id] = TxOutcome(tx.tx_id, "rejected", exc.code)
                else:
                    ok.append(tx)
            args = (self.ccfg, key, r, view.height + 1, view.head_hash, now)
            p = propose(ok, *args) if ok else null_proposal(*args)
            received[slot] = [p]
            prepares[p.tx_list.list_digest] = p
        votes = [cast_vote(received, self.ccfg, view, k, r, reg.tx_ok) for k in self.keys]
        recent = [b.header for b in self.blocks[-self.ccfg.good_voter_window:]]
        leader = rotate_aggregator(r, eligible_aggregators(self.ccfg.voter_set, recent,
                                                           self.ccfg.good_voter_window))
        agg_key = next(k for k in self.keys if k.public == leader)
        commit = run_aggregation(votes, self.ccfg, agg_key, r, view, prepares, now)
        verify_commit(commit, self.ccfg, view)
        block = assemble_block(commit, {d: p.tx_list for d, p in prepares.items()})
        return block, self._apply(block)

    def _apply(self, block: Block) -> BlockDelta:
        deltas = [reg.apply_block(block) for reg in self.registries]
        for store in self.ledgers:
            store.append(block)
        self.blocks.append(block)
        for tx in block.transactions:
            for pool in self.pools:
                pool.pop(tx.tx_id, None)
        delta = deltas[0]
        for tx_id, _ in delta.applied:
            self.outcomes[tx_id] = TxOutcome(tx_id, "committed", "", block.height)
        for tx_id, code in delta.rejected:
            self.outcomes[tx_id] = TxOutcome(tx_id, "rejected", code, block.height)
        return delta

    def execute(self, *txs: Transaction, max_rounds: int = 3) -> list[TxOutcome]:
        """Submit and commit until every transaction settles."""
        for tx in txs:
            self.submit(tx)
        for _ in range(max_rounds):
            if all(self.outcomes[tx.tx_id].status != "pending" for tx in txs):
                break
            self.commit()
        return [self.outcomes[tx.tx_id] for tx in txs]

    def drain(self, max_rounds: int = 100) -> int:
        rounds = 0
        while self.pending() and rounds < max_rounds:
            self.commit()
            rounds += 1
        return rounds

    # -- persistence ------------------------------------------------------------

    def save_chain(self, path: str | Path) -> None:
        w = Writer().raw(CHAIN_MAGIC).text(json.dumps(self.params, sort_keys=True))
        w.f64(self.clock).u64(self.round).u32(len(self.blocks) - 1)
        for block in self.blocks[1:]:
            w.blob(block.header.to_bytes()).blob(block.body_bytes)
        Path(path).write_bytes(w.getvalue())

    @classmethod
    def load_chain(cls, path: str | Path, root: str | Path | None = None) -> "Cluster":
        """Rebuild a cluster by replaying a saved chain on fresh members.

        Each block must extend the previous header hash and carry bodies
        matching its header.
        """
        try:
            r = Reader(Path(path).read_bytes())
            if r.raw(len(CHAIN_MAGIC)) != CHAIN_MAGIC:
                raise ChainFileError(f"{path} is not a chain file")
            params = json.loads(r.text())
            clock, round_, count = r.f64(), r.u64(), r.u32()
            blocks = [Block.from_parts(BlockHeader.from_bytes(r.blob()), r.blob())
                      for _ in range(count)]
            r.expect_end()
        except ChainFileError:
            raise
        except Exception as exc:
            raise ChainFileError(f"cannot read chain file {path}: {exc}") from exc
        cluster = cls(**params, root=root)
        for block in blocks:
            if block.header.prev_hash != cluster.head or block.height != cluster.height + 1:
                raise ChainFileError(f"block {block.height} does not extend the chain")
            cluster._apply(block)
        cluster.clock, cluster.round = clock, round_
        return cluster
