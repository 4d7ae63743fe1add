"""Voting-based round protocol: propose, vote, tally, commit, assemble.

A round has three roles. Bookkeepers each broadcast a signed list of
transactions (one slot per bookkeeper). Voters judge every slot +1
(passed), -1 (failed) or 0 (not received), pack the verdicts two bits per
slot into one integer and sign it. The round's aggregator counts votes;
a slot is valid or invalid once more than two thirds of *all* voters
agree, and the commit carries both aggregate signatures plus the block
header.

Everything here is a pure function of its inputs. The event-driven node
that wires these steps to timers and messages lives in
:mod:`mis.simnet.node`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import cached_property
from typing import Callable, Iterable, Mapping, Sequence

from . import crypto
from .codec import Reader, Writer
from .crypto import ZERO_DIGEST, AggregateSignature, KeyPair, hash_bytes


class ConsensusError(Exception):
    pass


class EmptyPool(ConsensusError):
    pass


class NotBookkeeper(ConsensusError):
    pass


class NotVoter(ConsensusError):
    pass


class NotAggregator(ConsensusError):
    pass


class InvalidSlotBits(ConsensusError):
    pass


class DuplicateVoter(ConsensusError):
    pass


class InsufficientVotes(ConsensusError):
    pass


class MissingBody(ConsensusError):
    def __init__(self, digests: Sequence[bytes]) -> None:
        super().__init__(f"{len(digests)} approved list(s) not held locally")
        self.digests = tuple(digests)


class UnfetchableBody(ConsensusError):
    pass


class HeaderMismatch(ConsensusError):
    pass


class NoEligibleAggregator(ConsensusError):
    pass


class OpKind(IntEnum):
    REGISTER = 0
    UPDATE = 1
    REVOKE = 2
    EXTEND_VALIDITY = 3
    TRANSFER_OWNERSHIP = 4


class Outcome(IntEnum):
    UNDECIDED = 0
    VALID = 1
    INVALID = 2


APPROVE, REJECT, ABSENT = 1, -1, 0
_SLOT_BITS = {ABSENT: 0b00, APPROVE: 0b01, REJECT: 0b10}
_BITS_SLOT = {0b00: ABSENT, 0b01: APPROVE, 0b10: REJECT}


# --------------------------------------------------------------------------
# Transactions and lists


@dataclass(frozen=True)
class Transaction:
    op_kind: OpKind
    payload: bytes
    submitter: bytes
    fee: float
    timestamp: float
    signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return self._signing

    @cached_property
    def _signing(self) -> bytes:
        return (
            Writer()
            .u8(int(self.op_kind))
            .blob(self.payload)
            .blob(self.submitter)
            .f64(self.fee)
            .f64(self.timestamp)
            .getvalue()
        )

    def to_bytes(self) -> bytes:
        return Writer().raw(self.signing_bytes()).blob(self.signature).getvalue()

    @classmethod
    def read(cls, r: Reader) -> "Transaction":
        return cls(OpKind(r.u8()), r.blob(), r.blob(), r.f64(), r.f64(), r.blob())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Transaction":
        r = Reader(data)
        tx = cls.read(r)
        r.expect_end()
        return tx

    @cached_property
    def tx_id(self) -> bytes:
        return hash_bytes(self.to_bytes())

    def signed(self, key: KeyPair) -> "Transaction":
        unsigned = replace(self, signature=b"")
        return replace(self, signature=crypto.sign(unsigned.signing_bytes(), key))

    def signature_ok(self) -> bool:
        if self.fee < 0:
            return False
        try:
            return crypto.verify(self.signing_bytes(), self.signature, self.submitter)
        except crypto.CryptoError:
            return False


def priority_key(tx: Transaction) -> tuple:
    """Higher fee first, then earlier timestamp, then smaller id."""
    return (-tx.fee, tx.timestamp, tx.tx_id)


@dataclass(frozen=True)
class TxList:
    bookkeeper: bytes
    round: int
    txs: tuple[Transaction, ...]
    produced_at: float

    @cached_property
    def merkle_root(self) -> bytes:
        if not self.txs:
            return ZERO_DIGEST
        return crypto.merkle_root([tx.to_bytes() for tx in self.txs])

    @cached_property
    def list_digest(self) -> bytes:
        return hash_bytes(
            Writer()
            .blob(self.bookkeeper)
            .u64(self.round)
            .u32(len(self.txs))
            .raw(self.merkle_root)
            .f64(self.produced_at)
            .getvalue()
        )

    def to_bytes(self) -> bytes:
        w = Writer().blob(self.bookkeeper).u64(self.round).f64(self.produced_at).u32(len(self.txs))
        for tx in self.txs:
            w.blob(tx.to_bytes())
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> "TxList":
        bookkeeper, rnd, produced_at, count = r.blob(), r.u64(), r.f64(), r.u32()
        txs = tuple(Transaction.from_bytes(r.blob()) for _ in range(count))
        return cls(bookkeeper, rnd, txs, produced_at)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TxList":
        r = Reader(data)
        tl = cls.read(r)
        r.expect_end()
        return tl


# --------------------------------------------------------------------------
# Messages


def prepare_signing_bytes(
    bookkeeper: bytes, list_digest: bytes, height: int, prev_hash: bytes, timestamp: float
) -> bytes:
    return (
        Writer()
        .text("PREPARE")
        .blob(bookkeeper)
        .raw(list_digest)
        .u64(height)
        .raw(prev_hash)
        .f64(timestamp)
        .getvalue()
    )


@dataclass(frozen=True)
class PrepareMsg:
    tx_list: TxList
    height: int
    prev_hash: bytes
    timestamp: float
    bookkeeper_sig: bytes

    @property
    def bookkeeper(self) -> bytes:
        return self.tx_list.bookkeeper

    @property
    def round(self) -> int:
        return self.tx_list.round

    def signing_bytes(self) -> bytes:
        return prepare_signing_bytes(
            self.bookkeeper, self.tx_list.list_digest, self.height, self.prev_hash, self.timestamp
        )


def vote_signing_bytes(
    voter: bytes,
    round_: int,
    height: int,
    prev_hash: bytes,
    slot_count: int,
    vote_word: int,
    list_digests: Sequence[bytes],
) -> bytes:
    w = (
        Writer()
        .text("VOTE")
        .blob(voter)
        .u64(round_)
        .u64(height)
        .raw(prev_hash)
        .u32(slot_count)
        .uint(vote_word)
    )
    for d in list_digests:
        w.raw(d)
    return w.getvalue()


@dataclass(frozen=True)
class VoteMsg:
    voter: bytes
    round: int
    height: int
    prev_hash: bytes
    slot_count: int
    vote_word: int
    list_digests: tuple[bytes, ...]
    voter_sig: bytes

    def signing_bytes(self) -> bytes:
        return vote_signing_bytes(
            self.voter, self.round, self.height, self.prev_hash,
            self.slot_count, self.vote_word, self.list_digests,
        )

    @property
    def votes(self) -> list[int]:
        return decompress_votes(self.vote_word, self.slot_count)


def _write_agg(w: Writer, agg: AggregateSignature) -> None:
    w.blob(agg.data).u32(len(agg.signers))
    for s in agg.signers:
        w.blob(s)


def _read_agg(r: Reader) -> AggregateSignature:
    data = r.blob()
    return AggregateSignature(data, tuple(r.blob() for _ in range(r.u32())))


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    timestamp: float
    vote_result: tuple[int, ...]
    votes: tuple[int, ...]
    voters_agg_sig: AggregateSignature
    bookkeepers_agg_sig: AggregateSignature
    per_list: tuple[tuple[bytes, float], ...]

    def to_bytes(self) -> bytes:
        w = Writer().u64(self.height).raw(self.prev_hash).f64(self.timestamp)
        w.u32(len(self.vote_result))
        for o in self.vote_result:
            w.u8(int(o))
        w.u32(len(self.votes))
        for v in self.votes:
            w.uint(v)
        _write_agg(w, self.voters_agg_sig)
        _write_agg(w, self.bookkeepers_agg_sig)
        w.u32(len(self.per_list))
        for root, ts in self.per_list:
            w.raw(root).f64(ts)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BlockHeader":
        r = Reader(data)
        height, prev, ts = r.u64(), r.raw(32), r.f64()
        result = tuple(r.u8() for _ in range(r.u32()))
        votes = tuple(r.uint() for _ in range(r.u32()))
        vagg, bagg = _read_agg(r), _read_agg(r)
        per_list = tuple((r.raw(32), r.f64()) for _ in range(r.u32()))
        r.expect_end()
        return cls(height, prev, ts, result, votes, vagg, bagg, per_list)

    @cached_property
    def hash(self) -> bytes:
        return hash_bytes(self.to_bytes())


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    bodies: tuple[TxList, ...]

    @property
    def height(self) -> int:
        return self.header.height

    @cached_property
    def body_bytes(self) -> bytes:
        w = Writer().u32(len(self.bodies))
        for tl in self.bodies:
            w.blob(tl.to_bytes())
        return w.getvalue()

    @staticmethod
    def decode_bodies(data: bytes) -> tuple[TxList, ...]:
        r = Reader(data)
        bodies = tuple(TxList.from_bytes(r.blob()) for _ in range(r.u32()))
        r.expect_end()
        return bodies

    @classmethod
    def from_parts(cls, header: BlockHeader, body_bytes: bytes) -> "Block":
        block = cls(header, cls.decode_bodies(body_bytes))
        block.check_bodies()
        return block

    def check_bodies(self) -> None:
        roots = tuple((tl.merkle_root, tl.produced_at) for tl in self.bodies)
        if roots != self.header.per_list:
            raise HeaderMismatch(f"bodies do not match header at height {self.height}")

    @property
    def transactions(self) -> Iterable[Transaction]:
        for tl in self.bodies:
            yield from tl.txs


def genesis_block() -> Block:
    empty = AggregateSignature.empty()
    header = BlockHeader(0, ZERO_DIGEST, 0.0, (), (), empty, empty, ())
    return Block(header, ())


@dataclass(frozen=True)
class IncludedList:
    slot: int
    bookkeeper: bytes
    list_digest: bytes
    prepare_ts: float


@dataclass(frozen=True)
class CommitMsg:
    round: int
    header: BlockHeader
    vote_digests: tuple[tuple[bytes, ...], ...]
    included: tuple[IncludedList, ...]
    slot_count: int

    @property
    def height(self) -> int:
        return self.header.height

    @property
    def vote_result(self) -> tuple[int, ...]:
        return self.header.vote_result

    @property
    def votes(self) -> tuple[int, ...]:
        return self.header.votes


# --------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class ConsensusConfig:
    bookkeeper_set: tuple[bytes, ...]
    voter_set: tuple[bytes, ...]
    max_tx_per_block: int = 100_000
    vote_timeout_ms: float = 500.0
    aggregate_timeout_ms: float = 500.0
    aggregator_rotation_period: int = 1
    good_voter_window: int = 3
    faults: int | None = None

    def __post_init__(self) -> None:
        if not self.voter_set:
            raise ValueError("at least one voter is required")
        if self.vote_timeout_ms <= 0 or self.aggregate_timeout_ms <= 0:
            raise ValueError("timeouts must be positive")
        if self.max_tx_per_block < 1 or self.aggregator_rotation_period < 1:
            raise ValueError("max_tx_per_block and rotation period must be >= 1")
        if len(set(self.voter_set)) != len(self.voter_set):
            raise ValueError("duplicate voter")
        if len(set(self.bookkeeper_set)) != len(self.bookkeeper_set):
            raise ValueError("duplicate bookkeeper")
        if self.faults is not None and len(self.voter_set) < 3 * self.faults + 1:
            raise ValueError(
                f"{len(self.voter_set)} voters cannot tolerate {self.faults} faults (need 3f+1)"
            )

    @property
    def f(self) -> int:
        return self.faults if self.faults is not None else (len(self.voter_set) - 1) // 3

    @property
    def n_voters(self) -> int:
        return len(self.voter_set)

    @property
    def n_slots(self) -> int:
        return len(self.bookkeeper_set)

    @property
    def list_cap(self) -> int:
        """Per-list share of the block cap, so a full block never exceeds it."""
        return max(1, self.max_tx_per_block // max(1, self.n_slots))

    @cached_property
    def bookkeeper_index(self) -> dict[bytes, int]:
        return {pk: i for i, pk in enumerate(self.bookkeeper_set)}

    @cached_property
    def voter_index(self) -> dict[bytes, int]:
        return {pk: i for i, pk in enumerate(self.voter_set)}


@dataclass(frozen=True)
class ChainView:
    """What a node has committed: last height and its header hash."""

    height: int
    head_hash: bytes


TxCheck = Callable[[Transaction, float], bool]


# --------------------------------------------------------------------------
# Bookkeeping


def propose(
    pool: Iterable[Transaction],
    cfg: ConsensusConfig,
    key: KeyPair,
    round_: int,
    height: int,
    prev_hash: bytes,
    now: float,
) -> PrepareMsg:
    if key.public not in cfg.bookkeeper_index:
        raise NotBookkeeper("key has no bookkeeping right")
    txs = sorted(pool, key=priority_key)[: cfg.list_cap]
    if not txs:
        raise EmptyPool("nothing to propose")
    return _signed_prepare(TxList(key.public, round_, tuple(txs), now), height, prev_hash, key)


def null_proposal(
    cfg: ConsensusConfig, key: KeyPair, round_: int, height: int, prev_hash: bytes, now: float
) -> PrepareMsg:
    """Signed empty list: tells voters not to wait for this slot. Never enters a block."""
    if key.public not in cfg.bookkeeper_index:
        raise NotBookkeeper("key has no bookkeeping right")
    return _signed_prepare(TxList(key.public, round_, (), now), height, prev_hash, key)


def _signed_prepare(tl: TxList, height: int, prev_hash: bytes, key: KeyPair) -> PrepareMsg:
    msg = PrepareMsg(tl, height, prev_hash, tl.produced_at, b"")
    return replace(msg, bookkeeper_sig=crypto.sign(msg.signing_bytes(), key))


# --------------------------------------------------------------------------
# Voting


def validate_prepare(
    msg: PrepareMsg, cfg: ConsensusConfig, view: ChainView, tx_check: TxCheck
) -> int:
    """+1 if the list may enter the next block, -1 otherwise."""
    tl = msg.tx_list
    if tl.bookkeeper not in cfg.bookkeeper_index:
        return REJECT
    try:
        if not crypto.verify(msg.signing_bytes(), msg.bookkeeper_sig, tl.bookkeeper):
            return REJECT
    except crypto.CryptoError:
        return REJECT
    if msg.height != view.height + 1 or msg.prev_hash != view.head_hash:
        return REJECT
    if msg.timestamp != tl.produced_at:
        return REJECT
    if not tl.txs or len(tl.txs) > cfg.list_cap:
        return REJECT
    if len({tx.tx_id for tx in tl.txs}) != len(tl.txs):
        return REJECT
    for tx in tl.txs:
        if not tx_check(tx, msg.timestamp):
            return REJECT
    return APPROVE


def compress_votes(votes: Sequence[int]) -> int:
    """Slot k lives in bits [2k, 2k+1]: 00 absent, 01 approve, 10 reject."""
    word = 0
    for k, v in enumerate(votes):
        try:
            word |= _SLOT_BITS[v] << (2 * k)
        except KeyError:
            raise ValueError(f"vote must be -1, 0 or +1, got {v!r}") from None
    return word


def decompress_votes(word: int, count: int) -> list[int]:
    if word < 0 or word >> (2 * count):
        raise InvalidSlotBits(f"vote word has bits beyond {count} slots")
    out = []
    for k in range(count):
        bits = (word >> (2 * k)) & 0b11
        if bits == 0b11:
            raise InvalidSlotBits(f"slot {k} holds the unused pattern 11")
        out.append(_BITS_SLOT[bits])
    return out


def cast_vote(
    received: Mapping[int, Sequence[PrepareMsg]],
    cfg: ConsensusConfig,
    view: ChainView,
    key: KeyPair,
    round_: int,
    tx_check: TxCheck,
) -> VoteMsg:
    """Vote on whatever arrived for each bookkeeper slot.

    ``received[slot]`` lists the prepares seen for that slot in arrival
    order. Two different lists for one slot mean the bookkeeper
    equivocated, and the slot is rejected.
    """
    if key.public not in cfg.voter_index:
        raise NotVoter("key has no voting right")
    votes: list[int] = []
    digests: list[bytes] = []
    for slot in range(cfg.n_slots):
        msgs = [m for m in received.get(slot, ()) if m.round == round_]
        distinct = {m.tx_list.list_digest for m in msgs}
        if not msgs or not msgs[0].tx_list.txs and len(distinct) == 1:
            votes.append(ABSENT)
            digests.append(ZERO_DIGEST)
        elif len(distinct) > 1:
            votes.append(REJECT)
            digests.append(msgs[0].tx_list.list_digest)
        else:
            m = msgs[0]
            ok = cfg.bookkeeper_index.get(m.bookkeeper) == slot
            votes.append(validate_prepare(m, cfg, view, tx_check) if ok else REJECT)
            digests.append(m.tx_list.list_digest)
    word = compress_votes(votes)
    sig = crypto.sign(
        vote_signing_bytes(key.public, round_, view.height + 1, view.head_hash,
                           cfg.n_slots, word, digests),
        key,
    )
    return VoteMsg(key.public, round_, view.height + 1, view.head_hash, cfg.n_slots, word,
                   tuple(digests), sig)


# --------------------------------------------------------------------------
# Tallying


def tally_counts(approvals: int, disapprovals: int, n_voters: int) -> Outcome:
    """More than 2/3 of all voters decides a slot either way."""
    if 3 * approvals > 2 * n_voters:
        return Outcome.VALID
    if 3 * disapprovals > 2 * n_voters:
        return Outcome.INVALID
    return Outcome.UNDECIDED


def tally_words(words: Sequence[int], n_voters: int, n_slots: int) -> list[Outcome]:
    decoded = [decompress_votes(w, n_slots) for w in words]
    return [
        tally_counts(
            sum(1 for v in decoded if v[k] == APPROVE),
            sum(1 for v in decoded if v[k] == REJECT),
            n_voters,
        )
        for k in range(n_slots)
    ]


@dataclass(frozen=True)
class TallyResult:
    outcomes: tuple[Outcome, ...]
    chosen: tuple[bytes, ...]
    approvals: tuple[int, ...]
    disapprovals: tuple[int, ...]
    n_votes: int


def tally(votes: Sequence[VoteMsg], n_voters: int, n_slots: int) -> TallyResult:
    """Count approvals per (slot, list digest).

    Voters only agree on a slot if they approved the *same* list, so an
    equivocating bookkeeper cannot collect a supermajority from voters
    that saw different lists.
    """
    seen: set[bytes] = set()
    for v in votes:
        if v.voter in seen:
            raise DuplicateVoter(f"voter {v.voter.hex()[:16]} counted twice")
        seen.add(v.voter)
    decoded = [(decompress_votes(v.vote_word, n_slots), v.list_digests) for v in votes]
    outcomes, chosen, apps, disapps = [], [], [], []
    for k in range(n_slots):
        by_digest: dict[bytes, int] = {}
        rejects = 0
        for vs, ds in decoded:
            if vs[k] == APPROVE:
                by_digest[ds[k]] = by_digest.get(ds[k], 0) + 1
            elif vs[k] == REJECT:
                rejects += 1
        if by_digest:
            best, best_n = min(by_digest.items(), key=lambda kv: (-kv[1], kv[0]))
        else:
            best, best_n = ZERO_DIGEST, 0
        outcomes.append(tally_counts(best_n, rejects, n_voters))
        chosen.append(best)
        apps.append(best_n)
        disapps.append(rejects)
    return TallyResult(tuple(outcomes), tuple(chosen), tuple(apps), tuple(disapps), len(votes))


def final_outcomes(result: TallyResult) -> tuple[Outcome, ...]:
    """Slots still undecided when the aggregator stops waiting count as invalid."""
    return tuple(Outcome.INVALID if o == Outcome.UNDECIDED else o for o in result.outcomes)


def could_still_decide(result: TallyResult, n_voters: int) -> list[int]:
    """Undecided slots that the missing voters could still push over 2/3."""
    missing = n_voters - result.n_votes
    return [
        k
        for k, o in enumerate(result.outcomes)
        if o == Outcome.UNDECIDED
        and (3 * (result.approvals[k] + missing) > 2 * n_voters
             or 3 * (result.disapprovals[k] + missing) > 2 * n_voters)
    ]


@dataclass
class Aggregation:
    """Vote collection for one round at the aggregator."""

    cfg: ConsensusConfig
    key: KeyPair
    round: int
    view: ChainView
    votes: dict[int, VoteMsg] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.key.public not in self.cfg.voter_index and self.key.public not in self.cfg.bookkeeper_index:
            raise NotAggregator("aggregator must hold a consensus right")

    def add(self, vote: VoteMsg) -> bool:
        """Accept a verified vote for this round; returns False if ignored."""
        idx = self.cfg.voter_index.get(vote.voter)
        if idx is None or vote.round != self.round:
            return False
        if vote.height != self.view.height + 1 or vote.prev_hash != self.view.head_hash:
            return False
        if vote.slot_count != self.cfg.n_slots or len(vote.list_digests) != self.cfg.n_slots:
            return False
        if idx in self.votes:
            if self.votes[idx] == vote:
                return False
            raise DuplicateVoter(f"voter {idx} sent two different votes")
        try:
            decompress_votes(vote.vote_word, vote.slot_count)
            if not crypto.verify(vote.signing_bytes(), vote.voter_sig, vote.voter):
                return False
        except (InvalidSlotBits, crypto.CryptoError):
            return False
        self.votes[idx] = vote
        return True

    def ordered_votes(self) -> list[VoteMsg]:
        return [self.votes[i] for i in sorted(self.votes)]

    def result(self) -> TallyResult:
        return tally(self.ordered_votes(), self.cfg.n_voters, self.cfg.n_slots)

    def missing_voters(self) -> list[bytes]:
        return [pk for i, pk in enumerate(self.cfg.voter_set) if i not in self.votes]

    def settled(self) -> bool:
        """Nothing the missing voters send can change any slot."""
        return not could_still_decide(self.result(), self.cfg.n_voters)

    def needed_lists(self) -> list[bytes]:
        res = self.result()
        return [res.chosen[k] for k, o in enumerate(res.outcomes) if o == Outcome.VALID]

    def finalize(self, timestamp: float, prepares: Mapping[bytes, PrepareMsg]) -> CommitMsg:
        """Build the commit. ``prepares`` maps list digest to the prepare carrying it."""
        if len(self.votes) < self.cfg.n_voters - self.cfg.f:
            raise InsufficientVotes(
                f"{len(self.votes)} votes, need {self.cfg.n_voters - self.cfg.f}"
            )
        res = self.result()
        outcomes = final_outcomes(res)
        missing = [res.chosen[k] for k, o in enumerate(outcomes)
                   if o == Outcome.VALID and res.chosen[k] not in prepares]
        if missing:
            raise MissingBody(missing)
        included, per_list, bk_sigs, bk_keys = [], [], [], []
        for k, o in enumerate(outcomes):
            if o != Outcome.VALID:
                continue
            p = prepares[res.chosen[k]]
            included.append(IncludedList(k, p.bookkeeper, p.tx_list.list_digest, p.timestamp))
            per_list.append((p.tx_list.merkle_root, p.tx_list.produced_at))
            bk_sigs.append(p.bookkeeper_sig)
            bk_keys.append(p.bookkeeper)
        ordered = self.ordered_votes()
        voters_agg = crypto.aggregate([v.voter_sig for v in ordered], [v.voter for v in ordered])
        bk_agg = crypto.aggregate(bk_sigs, bk_keys) if bk_sigs else AggregateSignature.empty()
        words = [self.votes[i].vote_word if i in self.votes else 0
                 for i in range(self.cfg.n_voters)]
        header = BlockHeader(
            height=self.view.height + 1,
            prev_hash=self.view.head_hash,
            timestamp=timestamp,
            vote_result=tuple(int(o) for o in outcomes),
            votes=tuple(words),
            voters_agg_sig=voters_agg,
            bookkeepers_agg_sig=bk_agg,
            per_list=tuple(per_list),
        )
        return CommitMsg(
            round=self.round,
            header=header,
            vote_digests=tuple(v.list_digests for v in ordered),
            included=tuple(included),
            slot_count=self.cfg.n_slots,
        )


def run_aggregation(
    collected: Iterable[VoteMsg],
    cfg: ConsensusConfig,
    key: KeyPair,
    round_: int,
    view: ChainView,
    prepares: Mapping[bytes, PrepareMsg],
    timestamp: float,
    request_missing: Callable[[Sequence[bytes]], Iterable[VoteMsg]] | None = None,
    aggregator: bytes | None = None,
) -> CommitMsg:
    """Tally once the first deadline has passed, retry missing votes once, commit.

    ``request_missing`` stands in for the missing-vote request round; it
    receives the silent voters' keys and returns whatever votes come back
    before the second deadline.
    """
    if aggregator is not None and aggregator != key.public:
        raise NotAggregator("not this round's aggregator")
    agg = Aggregation(cfg, key, round_, view)
    for v in collected:
        agg.add(v)
    if not agg.settled() and request_missing is not None:
        for v in request_missing(agg.missing_voters()):
            agg.add(v)
    return agg.finalize(timestamp, prepares)


# --------------------------------------------------------------------------
# Commit verification and block assembly


def verify_commit(commit: CommitMsg, cfg: ConsensusConfig, view: ChainView) -> None:
    """Raise HeaderMismatch unless the commit is internally consistent and signed."""
    h = commit.header
    if h.height != view.height + 1 or h.prev_hash != view.head_hash:
        raise HeaderMismatch(f"commit for height {h.height} does not extend {view.height}")
    if commit.slot_count != cfg.n_slots or len(h.vote_result) != cfg.n_slots:
        raise HeaderMismatch("slot count mismatch")
    if len(h.votes) != cfg.n_voters:
        raise HeaderMismatch("vote vector length mismatch")
    signers = h.voters_agg_sig.signers
    idxs = [cfg.voter_index.get(pk) for pk in signers]
    if None in idxs or idxs != sorted(set(idxs)):
        raise HeaderMismatch("voter signer set not an ordered subset of voters")
    if len(signers) < cfg.n_voters - cfg.f:
        raise HeaderMismatch("too few voters signed")
    if len(commit.vote_digests) != len(signers):
        raise HeaderMismatch("digest vectors do not match signers")
    present = set(idxs)
    if any(h.votes[i] != 0 for i in range(cfg.n_voters) if i not in present):
        raise HeaderMismatch("absent voter carries a vote")
    votes = []
    for i, pk, digests in zip(idxs, signers, commit.vote_digests):
        votes.append(VoteMsg(pk, commit.round, h.height, h.prev_hash, cfg.n_slots,
                             h.votes[i], tuple(digests), b""))
    try:
        res = tally(votes, cfg.n_voters, cfg.n_slots)
    except (InvalidSlotBits, DuplicateVoter) as exc:
        raise HeaderMismatch(str(exc)) from exc
    outcomes = final_outcomes(res)
    if tuple(int(o) for o in outcomes) != h.vote_result:
        raise HeaderMismatch("vote_result does not match the carried votes")
    valid = [k for k, o in enumerate(outcomes) if o == Outcome.VALID]
    if [inc.slot for inc in commit.included] != valid or len(h.per_list) != len(valid):
        raise HeaderMismatch("included lists do not match valid slots")
    for inc in commit.included:
        if cfg.bookkeeper_set[inc.slot] != inc.bookkeeper or res.chosen[inc.slot] != inc.list_digest:
            raise HeaderMismatch(f"slot {inc.slot} inclusion mismatch")
    for inc, (_, produced_at) in zip(commit.included, h.per_list):
        if inc.prepare_ts != produced_at:
            raise HeaderMismatch("prepare timestamp differs from list timestamp")
    try:
        ok = crypto.verify_aggregate([(v.signing_bytes(), v.voter) for v in votes], h.voters_agg_sig)
        if ok and commit.included:
            pairs = [
                (prepare_signing_bytes(inc.bookkeeper, inc.list_digest, h.height,
                                       h.prev_hash, inc.prepare_ts), inc.bookkeeper)
                for inc in commit.included
            ]
            ok = crypto.verify_aggregate(pairs, h.bookkeepers_agg_sig)
        elif ok:
            ok = h.bookkeepers_agg_sig == AggregateSignature.empty()
    except crypto.CryptoError:
        ok = False
    if not ok:
        raise HeaderMismatch("aggregate signature does not verify")


def body_matches(tl: TxList, inc: IncludedList, root: bytes) -> bool:
    return tl.list_digest == inc.list_digest and tl.merkle_root == root and bool(tl.txs)


def assemble_block(
    commit: CommitMsg,
    local: Mapping[bytes, TxList],
    fetch: Callable[[bytes], Iterable[bytes]] = lambda digest: (),
) -> Block:
    """Collect the valid slots' lists, asking neighbours for any not held locally.

    ``fetch(digest)`` yields candidate encodings from successive
    neighbours; tampered candidates are skipped.
    """
    bodies = []
    for inc, (root, _) in zip(commit.included, commit.header.per_list):
        tl = local.get(inc.list_digest)
        if tl is not None and not body_matches(tl, inc, root):
            raise HeaderMismatch(f"local list for slot {inc.slot} contradicts the header")
        if tl is None:
            for raw in fetch(inc.list_digest):
                try:
                    cand = TxList.from_bytes(raw)
                except Exception:
                    continue
                if body_matches(cand, inc, root):
                    tl = cand
                    break
        if tl is None:
            raise UnfetchableBody(f"no neighbour served list {inc.list_digest.hex()[:16]}")
        bodies.append(tl)
    block = Block(commit.header, tuple(bodies))
    block.check_bodies()
    return block


# --------------------------------------------------------------------------
# Aggregator rotation


def eligible_aggregators(
    voter_set: Sequence[bytes], recent: Sequence[BlockHeader], window: int = 3
) -> list[bytes]:
    """Voters whose signed vote appears in each of the last ``window`` committed headers.

    Genesis carries no votes and is skipped. Falls back to the whole voter
    set if the intersection is empty so the chain can never lock itself out.
    """
    headers = [h for h in recent if h.height > 0][-window:]
    good = [pk for pk in voter_set if all(pk in h.voters_agg_sig.signers for h in headers)]
    return good or list(voter_set)


def rotate_aggregator(
    round_: int,
    eligible: Sequence[bytes],
    period: int = 1,
    faulty: Iterable[bytes] = (),
) -> bytes:
    bad = set(faulty)
    candidates = [pk for pk in eligible if pk not in bad]
    if not candidates:
        raise NoEligibleAggregator("every eligible voter is flagged faulty")
    return candidates[(round_ // period) % len(candidates)]
