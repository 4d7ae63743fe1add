from dataclasses import replace
from itertools import product

import pytest

from mis.consensus import (
    ABSENT,
    APPROVE,
    REJECT,
    ChainView,
    ConsensusConfig,
    DuplicateVoter,
    EmptyPool,
    HeaderMismatch,
    InsufficientVotes,
    InvalidSlotBits,
    MissingBody,
    NotBookkeeper,
    OpKind,
    Outcome,
    Transaction,
    TxList,
    UnfetchableBody,
    assemble_block,
    cast_vote,
    compress_votes,
    decompress_votes,
    eligible_aggregators,
    genesis_block,
    null_proposal,
    propose,
    rotate_aggregator,
    run_aggregation,
    tally_counts,
    validate_prepare,
    verify_commit,
)
from mis.crypto import ZERO_DIGEST


def ok(tx, now):
    return True


def make_tx(key, i, fee=1.0):
    return Transaction(OpKind.REGISTER, f"payload-{i}".encode(), key.public, fee, float(i)).signed(key)


@pytest.fixture
def setup(keys):
    ks = keys[:4]
    pubs = tuple(k.public for k in ks)
    cfg = ConsensusConfig(pubs, pubs, max_tx_per_block=40)
    view = ChainView(0, genesis_block().header.hash)
    return ks, cfg, view


def one_round(ks, cfg, view, pools, tx_check=ok, r=1):
    received, prepares = {}, {}
    for slot, key in enumerate(ks):
        args = (cfg, key, r, view.height + 1, view.head_hash, 1.0)
        p = propose(pools[slot], *args) if pools[slot] else null_proposal(*args)
        received[slot] = [p]
        prepares[p.tx_list.list_digest] = p
    votes = [cast_vote(received, cfg, view, k, r, tx_check) for k in ks]
    return received, prepares, votes


def test_transaction_round_trip_and_signature(keys):
    tx = make_tx(keys[0], 1)
    assert Transaction.from_bytes(tx.to_bytes()) == tx
    assert tx.signature_ok()
    assert not replace(tx, fee=2.0).signature_ok()
    assert not replace(tx, fee=-1.0).signed(keys[0]).signature_ok()


def test_propose_orders_by_priority_and_caps(setup):
    ks, cfg, view = setup
    txs = [make_tx(ks[0], i, fee=float(i % 5)) for i in range(30)]
    p = propose(txs, cfg, ks[0], 1, 1, view.head_hash, 1.0)
    assert len(p.tx_list.txs) == cfg.list_cap == 10
    fees = [tx.fee for tx in p.tx_list.txs]
    assert fees == sorted(fees, reverse=True)
    with pytest.raises(EmptyPool):
        propose([], cfg, ks[0], 1, 1, view.head_hash, 1.0)


def test_only_bookkeepers_propose(setup, keys):
    _, cfg, view = setup
    with pytest.raises(NotBookkeeper):
        propose([make_tx(keys[5], 0)], cfg, keys[5], 1, 1, view.head_hash, 1.0)


def test_validate_prepare_checks_chain_and_txs(setup):
    ks, cfg, view = setup
    p = propose([make_tx(ks[0], 1)], cfg, ks[0], 1, 1, view.head_hash, 1.0)
    assert validate_prepare(p, cfg, view, ok) == APPROVE
    assert validate_prepare(p, cfg, view, lambda tx, now: False) == REJECT
    assert validate_prepare(p, cfg, ChainView(1, view.head_hash), ok) == REJECT
    assert validate_prepare(replace(p, bookkeeper_sig=bytes(64)), cfg, view, ok) == REJECT


def test_compress_votes_layout():
    assert compress_votes([APPROVE, REJECT, ABSENT, APPROVE]) == 0b01_00_10_01
    assert decompress_votes(0b01_00_10_01, 4) == [APPROVE, REJECT, ABSENT, APPROVE]
    with pytest.raises(InvalidSlotBits):
        decompress_votes(0b11, 1)
    with pytest.raises(InvalidSlotBits):
        decompress_votes(1 << 4, 2)
    with pytest.raises(ValueError):
        compress_votes([2])


def test_tally_counts_boundaries():
    assert tally_counts(3, 0, 4) == Outcome.VALID
    assert tally_counts(2, 2, 4) == Outcome.UNDECIDED
    assert tally_counts(0, 3, 4) == Outcome.INVALID
    assert tally_counts(5, 0, 7) == Outcome.VALID
    assert tally_counts(4, 0, 7) == Outcome.UNDECIDED


def test_full_round_commits_every_list(setup):
    ks, cfg, view = setup
    pools = [[make_tx(k, 10 * s + i) for i in range(3)] for s, k in enumerate(ks)]
    _, prepares, votes = one_round(ks, cfg, view, pools)
    commit = run_aggregation(votes, cfg, ks[1], 1, view, prepares, 2.0)
    verify_commit(commit, cfg, view)
    assert commit.vote_result == (Outcome.VALID,) * 4
    block = assemble_block(commit, {d: p.tx_list for d, p in prepares.items()})
    assert len(list(block.transactions)) == 12
    assert block.header.prev_hash == view.head_hash


def test_null_proposals_are_skipped(setup):
    ks, cfg, view = setup
    pools = [[make_tx(ks[0], 1)], [], [], []]
    _, prepares, votes = one_round(ks, cfg, view, pools)
    commit = run_aggregation(votes, cfg, ks[0], 1, view, prepares, 2.0)
    assert [int(o) for o in commit.vote_result] == [1, 2, 2, 2]
    assert len(commit.included) == 1


def test_aggregation_waits_for_quorum(setup):
    ks, cfg, view = setup
    pools = [[make_tx(k, s)] for s, k in enumerate(ks)]
    _, prepares, votes = one_round(ks, cfg, view, pools)
    with pytest.raises(InsufficientVotes):
        run_aggregation(votes[:2], cfg, ks[0], 1, view, prepares, 2.0)
    commit = run_aggregation(votes[:3], cfg, ks[0], 1, view, prepares, 2.0)
    verify_commit(commit, cfg, view)
    assert len(commit.header.voters_agg_sig.signers) == 3


def test_missing_vote_request_fills_gap(setup):
    ks, cfg, view = setup
    pools = [[make_tx(k, s)] for s, k in enumerate(ks)]
    _, prepares, votes = one_round(ks, cfg, view, pools)
    asked = []

    def request(missing):
        asked.extend(missing)
        return votes[2:]

    commit = run_aggregation(votes[:2], cfg, ks[0], 1, view, prepares, 2.0, request)
    assert asked == [ks[2].public, ks[3].public]
    assert len(commit.header.voters_agg_sig.signers) == 4


def test_duplicate_conflicting_vote_rejected(setup):
    ks, cfg, view = setup
    pools = [[make_tx(k, s)] for s, k in enumerate(ks)]
    received, prepares, votes = one_round(ks, cfg, view, pools)
    other = cast_vote({0: received[0]}, cfg, view, ks[0], 1, ok)
    with pytest.raises(DuplicateVoter):
        run_aggregation([votes[0], other], cfg, ks[1], 1, view, prepares, 2.0)


def test_missing_body_reported(setup):
    ks, cfg, view = setup
    pools = [[make_tx(k, s)] for s, k in enumerate(ks)]
    _, prepares, votes = one_round(ks, cfg, view, pools)
    some = dict(list(prepares.items())[:2])
    with pytest.raises(MissingBody) as info:
        run_aggregation(votes, cfg, ks[0], 1, view, some, 2.0)
    assert len(info.value.digests) == 2


def test_equivocating_bookkeeper_is_excluded(setup):
    ks, cfg, view = setup
    pools = [[make_tx(k, s)] for s, k in enumerate(ks)]
    received, prepares, _ = one_round(ks, cfg, view, pools)
    alt = propose([make_tx(ks[0], 99)], cfg, ks[0], 1, 1, view.head_hash, 1.0)
    prepares[alt.tx_list.list_digest] = alt
    votes = []
    for i, k in enumerate(ks):
        seen = dict(received)
        seen[0] = [alt] if i % 2 else received[0]
        votes.append(cast_vote(seen, cfg, view, k, 1, ok))
    commit = run_aggregation(votes, cfg, ks[1], 1, view, prepares, 2.0)
    verify_commit(commit, cfg, view)
    assert commit.vote_result[0] == Outcome.INVALID
    assert all(o == Outcome.VALID for o in commit.vote_result[1:])
    # a voter that saw both lists rejects the slot outright
    both = dict(received)
    both[0] = [received[0][0], alt]
    v = cast_vote(both, cfg, view, ks[2], 1, ok)
    assert decompress_votes(v.vote_word, 4)[0] == REJECT


def test_verify_commit_detects_tampering(setup):
    ks, cfg, view = setup
    pools = [[make_tx(k, s)] for s, k in enumerate(ks)]
    _, prepares, votes = one_round(ks, cfg, view, pools)
    commit = run_aggregation(votes, cfg, ks[0], 1, view, prepares, 2.0)
    bad_result = replace(commit, header=replace(commit.header, vote_result=(1, 1, 1, 2)))
    with pytest.raises(HeaderMismatch):
        verify_commit(bad_result, cfg, view)
    words = (compress_votes([APPROVE] * 3 + [REJECT]),) + commit.header.votes[1:]
    bad_votes = replace(commit, header=replace(commit.header, votes=words))
    with pytest.raises(HeaderMismatch):
        verify_commit(bad_votes, cfg, view)
    with pytest.raises(HeaderMismatch):
        verify_commit(commit, cfg, ChainView(5, view.head_hash))


def test_assemble_fetches_and_skips_tampered(setup):
    ks, cfg, view = setup
    pools = [[make_tx(k, s)] for s, k in enumerate(ks)]
    _, prepares, votes = one_round(ks, cfg, view, pools)
    commit = run_aggregation(votes, cfg, ks[0], 1, view, prepares, 2.0)
    by_digest = {d: p.tx_list for d, p in prepares.items()}
    forged = TxList(ks[0].public, 1, (make_tx(ks[0], 77),), 1.0).to_bytes()

    def fetch(digest):
        return [forged, b"junk", by_digest[digest].to_bytes()]

    block = assemble_block(commit, {}, fetch)
    assert len(block.bodies) == 4
    with pytest.raises(UnfetchableBody):
        assemble_block(commit, {})


def test_aggregator_rotation_and_eligibility(setup):
    ks, cfg, view = setup
    pubs = list(cfg.voter_set)
    assert [rotate_aggregator(r, pubs) for r in range(4)] == pubs
    assert rotate_aggregator(1, pubs, faulty=[pubs[1]]) == pubs[2]
    assert eligible_aggregators(pubs, [genesis_block().header]) == pubs
    pools = [[make_tx(k, s)] for s, k in enumerate(ks)]
    _, prepares, votes = one_round(ks, cfg, view, pools)
    commit = run_aggregation(votes[1:], cfg, ks[1], 1, view, prepares, 2.0)
    assert eligible_aggregators(pubs, [commit.header]) == pubs[1:]


def test_vote_word_exhaustive_small():
    for n in range(1, 6):
        for votes in product((ABSENT, APPROVE, REJECT), repeat=n):
            assert decompress_votes(compress_votes(votes), n) == list(votes)
