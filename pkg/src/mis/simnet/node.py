"""One consortium node as an event-driven state machine.

A round runs propose -> vote -> aggregate -> commit -> store. Every
handler reads the simulated clock from the owning :class:`Simulation`
and schedules its follow-up after the configured compute cost, so the
node never blocks. Messages for a later round are buffered until the
node reaches it; messages for an earlier round are dropped.

A node that falls behind (it missed a commit) notices when a commit for a
later height arrives, fetches the missing commits and blocks from the
sender, verifies each against its own chain, and resumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from ..consensus import (
    Aggregation,
    Block,
    ChainView,
    CommitMsg,
    ConsensusConfig,
    DuplicateVoter,
    HeaderMismatch,
    InsufficientVotes,
    MissingBody,
    PrepareMsg,
    Transaction,
    UnfetchableBody,
    VoteMsg,
    assemble_block,
    cast_vote,
    eligible_aggregators,
    null_proposal,
    priority_key,
    propose,
    rotate_aggregator,
    verify_commit,
)
from ..crypto import KeyPair
from ..ledger import LedgerStore, StorageConfig
from ..registry import BlockDelta, Registry
from .config import NodeSpec
from .faults import Behavior, Kind

if TYPE_CHECKING:
    from .runner import Simulation

COMMIT_LOG_LEN = 256
SYNC_BATCH = 16


# -- messages ---------------------------------------------------------------


@dataclass(frozen=True)
class PrepareEnv:
    prepare: PrepareMsg

    @property
    def round(self) -> int:
        return self.prepare.round


@dataclass(frozen=True)
class VoteEnv:
    vote: VoteMsg

    @property
    def round(self) -> int:
        return self.vote.round


@dataclass(frozen=True)
class VoteRequest:
    round: int
    requester: str


@dataclass(frozen=True)
class CommitEnv:
    commit: CommitMsg
    sender: str

    @property
    def round(self) -> int:
        return self.commit.round


@dataclass(frozen=True)
class ListRequest:
    round: int
    digests: tuple[bytes, ...]
    requester: str


@dataclass(frozen=True)
class ListResponse:
    round: int
    prepares: tuple[PrepareMsg, ...]


@dataclass(frozen=True)
class TxSubmit:
    tx: Transaction


@dataclass(frozen=True)
class SyncRequest:
    from_height: int
    requester: str


@dataclass(frozen=True)
class SyncResponse:
    items: tuple[tuple[CommitMsg, Block], ...]


# -- per-round bookkeeping --------------------------------------------------


@dataclass
class RoundTimes:
    start: float
    prepared: float | None = None
    voted: float | None = None
    commit_sent: float | None = None
    assembled: float | None = None
    stored: float | None = None


@dataclass
class RoundState:
    round: int
    start: float
    aggregator: bytes
    view: ChainView
    received: dict[int, list[PrepareMsg]] = field(default_factory=dict)
    by_digest: dict[bytes, PrepareMsg] = field(default_factory=dict)
    vote_scheduled: bool = False
    my_vote: VoteMsg | None = None
    aggregation: Aggregation | None = None
    finalized: bool = False
    fetching: bool = False
    commit: CommitMsg | None = None
    commit_sender: str = ""
    awaiting: tuple[bytes, ...] = ()
    block: Block | None = None


class SimNode:
    def __init__(self, sim: "Simulation", spec: NodeSpec, rank: int, key: KeyPair,
                 ccfg: ConsensusConfig, scfg: StorageConfig, registry: Registry,
                 genesis: Block) -> None:
        self.sim = sim
        self.spec = spec
        self.id = spec.node_id
        self.region = spec.region
        self.rank = rank
        self.key = key
        self.ccfg = ccfg
        self.registry = registry
        self.ledger = LedgerStore(scfg, rank)
        self.ledger.append(genesis)
        self.height = 0
        self.head = genesis.header.hash
        self.headers = [genesis.header]
        self.pool: dict[bytes, Transaction] = {}
        self.round = 0
        self.rs: RoundState | None = None
        self.future: dict[int, list] = {}
        self.times: dict[int, RoundTimes] = {}
        self.archive: dict[bytes, PrepareMsg] = {}
        self.crashed = False
        self.idle = False
        self.rejected_commits = 0
        self.commit_log: dict[int, CommitMsg] = {}
        self.sync_hold: CommitEnv | None = None
        self.sync_wait_until = -1.0
        self.synced_blocks = 0
        self.idle_synced_at = -1

    # -- helpers ------------------------------------------------------------

    @property
    def behavior(self) -> Behavior:
        return self.sim.plan.behavior(self.id)

    @property
    def now(self) -> float:
        return self.sim.loop.now

    def _at(self, delay: float, fn, *args) -> None:
        self.sim.loop.schedule(self.now + delay, fn, *args)

    def _live(self, r: int) -> bool:
        return not self.crashed and self.round == r and self.rs is not None

    def _tx_check(self, tx: Transaction, now: float) -> bool:
        return self.sim.check(self, tx, now) is None

    def _view(self) -> ChainView:
        return ChainView(self.height, self.head)

    def _crash(self) -> None:
        self.crashed = True
        self.sim.on_crash(self)

    # -- rounds -------------------------------------------------------------

    def start_round(self, r: int) -> None:
        if self.crashed:
            return
        if self.sim.stopping(r):
            self.idle = True
            if self.height != self.idle_synced_at:
                # a commit lost near the end is never followed by another one
                self.idle_synced_at = self.height
                for node in self.sim.nodes:
                    if node is not self:
                        self.sim.send(self, node.id, SyncRequest(self.height + 1, self.id))
            return
        b = self.behavior
        if b.kind == Kind.CRASH and not b.when_aggregator and r >= b.at_round:
            self._crash()
            return
        cfg = self.ccfg
        window = self.headers[-cfg.good_voter_window:]
        eligible = eligible_aggregators(cfg.voter_set, window, cfg.good_voter_window)
        aggregator = rotate_aggregator(r, eligible, cfg.aggregator_rotation_period)
        self.round = r
        self.rs = RoundState(r, self.now, aggregator, self._view())
        self.times[r] = RoundTimes(self.now)
        costs = self.sim.config.costs
        if self.spec.bookkeeper:
            self._at(costs.propose_ms, self._propose, r)
        if self.spec.voter:
            self._at(cfg.vote_timeout_ms, self._vote_deadline, r)
        if aggregator == self.key.public:
            self.rs.aggregation = Aggregation(cfg, self.key, r, self.rs.view)
            self._at(cfg.vote_timeout_ms + cfg.aggregate_timeout_ms, self._agg_deadline, r, 1)
        self._at(self.sim.round_timeout_ms, self._round_timeout, r)
        for msg in self.future.pop(r, []):
            self.receive(msg)

    def _round_timeout(self, r: int) -> None:
        if not self._live(r) or self.rs.commit is not None:
            return
        self.sim.on_abort(self, r)
        self.start_round(r + 1)

    # -- bookkeeping --------------------------------------------------------

    def _propose(self, r: int) -> None:
        if not self._live(r):
            return
        rs = self.rs
        now_s = self.now / 1000.0
        chosen: list[Transaction] = []
        for tx in sorted(self.pool.values(), key=priority_key):
            if len(chosen) >= self.ccfg.list_cap:
                break
            reason = self.sim.check(self, tx, now_s)
            if reason is None:
                chosen.append(tx)
            else:
                del self.pool[tx.tx_id]
                self.sim.on_tx_rejected(self, tx, reason)
        args = (self.ccfg, self.key, r, rs.view.height + 1, rs.view.head_hash)
        if chosen:
            main = propose(chosen, *args, now_s)
        else:
            main = null_proposal(*args, now_s)
        if self.behavior.kind != Kind.EQUIVOCATING_BOOKKEEPER:
            self.sim.broadcast(self, PrepareEnv(main))
            return
        # a second list with a different timestamp, hence a different digest
        alt = (propose(chosen, *args, now_s + 1e-6) if chosen
               else null_proposal(*args, now_s + 1e-6))
        voter_index = self.ccfg.voter_index
        for node in self.sim.nodes:
            idx = voter_index.get(node.key.public)
            msg = alt if idx is not None and idx % 2 else main
            self.sim.send(self, node.id, PrepareEnv(msg))

    # -- voting -------------------------------------------------------------

    def _all_slots_in(self) -> bool:
        return len(self.rs.received) == self.ccfg.n_slots

    def _vote_deadline(self, r: int) -> None:
        if self._live(r) and not self.rs.vote_scheduled:
            self.rs.vote_scheduled = True
            self.times[r].prepared = self.now
            self._at(self.sim.config.costs.vote_ms, self._cast, r)

    def _cast(self, r: int) -> None:
        if not self._live(r) or self.rs.commit is not None:
            return
        rs = self.rs
        rs.my_vote = cast_vote(rs.received, self.ccfg, rs.view, self.key, r, self._tx_check)
        self.times[r].voted = self.now
        if self.behavior.kind == Kind.SILENT_VOTER:
            return
        self.sim.send(self, self.sim.node_by_key[rs.aggregator].id, VoteEnv(rs.my_vote))

    # -- aggregating --------------------------------------------------------

    def _agg_deadline(self, r: int, which: int) -> None:
        if not self._live(r) or self.rs.finalized:
            return
        agg = self.rs.aggregation
        enough = len(agg.votes) >= self.ccfg.n_voters - self.ccfg.f
        if which == 1 and not (enough and agg.settled()):
            for pk in agg.missing_voters():
                self.sim.send(self, self.sim.node_by_key[pk].id, VoteRequest(r, self.id))
            self._at(self.ccfg.aggregate_timeout_ms, self._agg_deadline, r, 2)
            return
        if enough:
            self._finalize(r)
        else:
            self.rs.finalized = True  # give up; everyone times out and rotates

    def _maybe_finalize(self, r: int) -> None:
        agg = self.rs.aggregation
        n = len(agg.votes)
        if n == self.ccfg.n_voters or (n >= self.ccfg.n_voters - self.ccfg.f and agg.settled()):
            self._finalize(r)

    def _finalize(self, r: int) -> None:
        rs = self.rs
        if rs.finalized:
            return
        b = self.behavior
        if b.kind == Kind.CRASH and b.when_aggregator and r >= b.at_round:
            self._crash()
            return
        try:
            commit = rs.aggregation.finalize(self.now / 1000.0, rs.by_digest)
        except MissingBody as exc:
            if not rs.fetching:
                rs.fetching = True
                self.sim.broadcast(self, ListRequest(r, tuple(exc.digests), self.id))
            return
        except InsufficientVotes:
            return
        rs.finalized = True
        self._at(self.sim.config.costs.aggregate_ms, self._send_commit, r, commit)

    def _send_commit(self, r: int, commit: CommitMsg) -> None:
        if self.crashed:
            return
        self.times[r].commit_sent = self.now
        self.sim.on_commit_sent(self, commit)
        self.sim.broadcast(self, CommitEnv(commit, self.id))

    # -- commit -------------------------------------------------------------

    def _accept_commit(self, env: CommitEnv) -> None:
        rs = self.rs
        c = env.commit
        if rs.commit is not None or c.height != self.height + 1:
            return
        try:
            verify_commit(c, self.ccfg, rs.view)
        except HeaderMismatch:
            self.rejected_commits += 1
            return
        rs.commit, rs.commit_sender = c, env.sender
        missing = tuple(inc.list_digest for inc in c.included if inc.list_digest not in rs.by_digest)
        if missing:
            rs.awaiting = missing
            self.sim.send(self, env.sender, ListRequest(c.round, missing, self.id))
            return
        self._at(self.sim.config.costs.commit_ms, self._assembled, c.round)

    def _assembled(self, r: int) -> None:
        if not self._live(r):
            return
        rs = self.rs
        local = {d: p.tx_list for d, p in rs.by_digest.items()}
        try:
            rs.block = assemble_block(rs.commit, local)
        except (UnfetchableBody, HeaderMismatch):
            self.rejected_commits += 1
            return
        self.times[r].assembled = self.now
        self._at(self.sim.config.costs.storage_ms, self._stored, r)

    def _stored(self, r: int) -> None:
        if not self._live(r) or self.rs.block.height != self.height + 1:
            return
        delta = self._store_block(self.rs.commit, self.rs.block)
        self.times[r].stored = self.now
        self.sim.on_block_stored(self, self.rs.block, delta, r)
        self.start_round(r + 1)

    def _store_block(self, commit: CommitMsg, block: Block) -> BlockDelta:
        delta = self.registry.apply_block(block)
        self.ledger.append(block)
        self.height = block.height
        self.head = block.header.hash
        self.headers.append(block.header)
        del self.headers[: -(self.ccfg.good_voter_window + 1)]
        self.commit_log[block.height] = commit
        self.commit_log.pop(block.height - COMMIT_LOG_LEN, None)
        for tx in block.transactions:
            self.pool.pop(tx.tx_id, None)
        return delta

    # -- catching up --------------------------------------------------------

    def _request_sync(self, env: CommitEnv) -> None:
        if self.sync_hold is None or env.commit.height >= self.sync_hold.commit.height:
            self.sync_hold = env
        if self.now < self.sync_wait_until:
            return
        self.sync_wait_until = self.now + self.sim.round_timeout_ms
        self.sim.send(self, env.sender, SyncRequest(self.height + 1, self.id))

    def _serve_sync(self, msg: SyncRequest) -> None:
        items = []
        peers = None
        for h in range(msg.from_height, min(self.height, msg.from_height + SYNC_BATCH - 1) + 1):
            commit = self.commit_log.get(h)
            if commit is None:
                break
            if peers is None:
                peers = self.sim.peer_handles()
            items.append((commit, self.ledger.get_block(h, peers)))
        if items:
            self.sim.send(self, msg.requester, SyncResponse(tuple(items)))

    def _on_sync(self, msg: SyncResponse) -> None:
        if self.rs is not None and self.rs.block is not None:
            return  # a block of our own is being stored; the next trigger retries
        last = None
        for commit, block in msg.items:
            if commit.height != self.height + 1:
                continue
            try:
                verify_commit(commit, self.ccfg, self._view())
                if block.header != commit.header:
                    raise HeaderMismatch("block header differs from the commit")
                block.check_bodies()
            except HeaderMismatch:
                self.rejected_commits += 1
                break
            delta = self._store_block(commit, block)
            self.synced_blocks += 1
            self.sim.on_block_stored(self, block, delta, commit.round)
            last = commit
        if last is None:
            return
        self.sync_wait_until = -1.0
        hold, self.sync_hold = self.sync_hold, None
        if self.idle:
            self.start_round(max(self.round, last.round + 1))
        elif hold is not None and hold.commit.height == self.height + 1 and hold.round >= self.round:
            if hold.round > self.round:
                self.start_round(hold.round)
            elif self.rs is not None:
                self.rs.view = self._view()
            if self.rs is not None and self.rs.commit is None:
                self._accept_commit(hold)
        elif hold is not None and hold.commit.height > self.height + 1:
            self._request_sync(hold)
        elif last.round >= self.round:
            self.start_round(last.round + 1)
        elif self.rs is not None:
            self.rs.view = self._view()

    # -- message dispatch ---------------------------------------------------

    def receive(self, msg) -> None:
        if self.crashed:
            return
        if isinstance(msg, TxSubmit):
            self.pool.setdefault(msg.tx.tx_id, msg.tx)
            return
        if isinstance(msg, ListRequest):
            found = tuple(self.archive[d] for d in msg.digests if d in self.archive)
            if found:
                self.sim.send(self, msg.requester, ListResponse(msg.round, found))
            return
        if isinstance(msg, SyncRequest):
            self._serve_sync(msg)
            return
        if isinstance(msg, SyncResponse):
            self._on_sync(msg)
            return
        if isinstance(msg, CommitEnv) and msg.commit.height > self.height + 1:
            self._request_sync(msg)
            return
        r = msg.round
        if r > self.round or self.rs is None:
            self.future.setdefault(r, []).append(msg)
            return
        if r < self.round:
            return
        if isinstance(msg, PrepareEnv):
            self._on_prepare(msg.prepare)
        elif isinstance(msg, VoteEnv):
            self._on_vote(msg.vote)
        elif isinstance(msg, VoteRequest):
            rs = self.rs
            if rs.my_vote is not None and self.behavior.kind != Kind.SILENT_VOTER:
                self.sim.send(self, msg.requester, VoteEnv(rs.my_vote))
        elif isinstance(msg, CommitEnv):
            self._accept_commit(msg)
        elif isinstance(msg, ListResponse):
            self._on_lists(msg)

    def _on_prepare(self, p: PrepareMsg) -> None:
        rs = self.rs
        slot = self.ccfg.bookkeeper_index.get(p.bookkeeper)
        if slot is None:
            return
        rs.received.setdefault(slot, []).append(p)
        rs.by_digest.setdefault(p.tx_list.list_digest, p)
        self.archive[p.tx_list.list_digest] = p
        if (self.spec.voter and not rs.vote_scheduled and rs.commit is None
                and self._all_slots_in()):
            rs.vote_scheduled = True
            self.times[rs.round].prepared = self.now
            self._at(self.sim.config.costs.vote_ms, self._cast, rs.round)

    def _on_vote(self, v: VoteMsg) -> None:
        rs = self.rs
        if rs.aggregation is None or rs.finalized:
            return
        try:
            added = rs.aggregation.add(v)
        except DuplicateVoter:
            return
        if added:
            self._maybe_finalize(rs.round)

    def _on_lists(self, msg: ListResponse) -> None:
        rs = self.rs
        for p in msg.prepares:
            rs.by_digest.setdefault(p.tx_list.list_digest, p)
            self.archive.setdefault(p.tx_list.list_digest, p)
        if rs.aggregation is not None and rs.fetching and not rs.finalized:
            self._finalize(rs.round)
        if rs.commit is not None and rs.awaiting and all(d in rs.by_digest for d in rs.awaiting):
            rs.awaiting = ()
            self._at(self.sim.config.costs.commit_ms, self._assembled, rs.round)

    def trim_archive(self, keep: int = 4096) -> None:
        if len(self.archive) > keep:
            for d in list(self.archive)[: len(self.archive) - keep]:
                del self.archive[d]
