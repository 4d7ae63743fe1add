import json

import pytest

from mis.consensus import Block, BlockHeader, TxList
from mis.crypto import ZERO_DIGEST, AggregateSignature, hash_bytes
from mis.identifiers import Identifier, IdentifierType
from mis.registry import (
    DuplicateActiveIdentifier,
    Expired,
    NoIdentity,
    NotFound,
    NotOwner,
    Registry,
    Revoked,
    build_request,
    extend_tx,
    identity_for_key,
    register_tx,
    revoke_tx,
    transfer_tx,
    update_tx,
)

EMPTY = AggregateSignature.empty()


class Chain:
    """Feeds transactions to a registry one block at a time."""

    def __init__(self, reg=None):
        self.reg = reg or Registry()
        self.height = 0
        self.prev = ZERO_DIGEST

    def block(self, txs, t):
        self.height += 1
        tl = TxList(bytes(32), self.height, tuple(txs), float(t))
        header = BlockHeader(self.height, self.prev, float(t), (1,), (), EMPTY, EMPTY,
                             ((tl.merkle_root, tl.produced_at),))
        self.prev = header.hash
        return self.reg.apply_block(Block(header, (tl,)))


@pytest.fixture
def alice(ed):
    key = ed.keygen(b"alice")
    return "alice", key, identity_for_key(key.public)


def reg_identity(chain, user, t=1.0):
    name, key, ident = user
    return chain.block([register_tx(build_request(name, ident, key, 1000, 1.0, t), key)], t)


def test_identity_first(alice, ed):
    chain = Chain()
    name, key, ident = alice
    content = Identifier(IdentifierType.CONTENT, "/alice/a")
    tx = register_tx(build_request(name, content, key, 100, 1.0, 1.0), key)
    with pytest.raises(NoIdentity):
        chain.reg.check_tx(tx, 1.0)
    delta = reg_identity(chain, alice)
    assert delta.applied and not delta.rejected
    assert chain.reg.lookup(ident, 2.0).owner_username == "alice"
    delta = chain.block([tx], 3.0)
    assert [op for _, op in delta.applied] == ["register"]


def test_duplicate_registration_and_conflicts(alice, ed):
    chain = Chain()
    reg_identity(chain, alice)
    name, key, _ = alice
    content = Identifier(IdentifierType.CONTENT, "/alice/a")
    low = register_tx(build_request(name, content, key, 100, 1.0, 2.0), key)
    high = register_tx(build_request(name, content, key, 100, 5.0, 2.5), key)
    delta = chain.block([low, high], 3.0)
    assert delta.applied == [(high.tx_id, "register")]
    assert delta.rejected == [(low.tx_id, "conflict-lost")]
    again = register_tx(build_request(name, content, key, 100, 9.0, 4.0), key)
    with pytest.raises(DuplicateActiveIdentifier):
        chain.reg.check_tx(again, 4.0)


def test_update_extend_revoke(alice):
    chain = Chain()
    reg_identity(chain, alice)
    name, key, _ = alice
    content = Identifier(IdentifierType.CONTENT, "/alice/b")
    chain.block([register_tx(build_request(name, content, key, 10, 1.0, 2.0), key)], 2.0)
    digest = hash_bytes(b"v2")
    chain.block([update_tx(content, digest, key, 3.0)], 3.0)
    assert chain.reg.lookup(content, 3.0).digest == digest
    chain.block([extend_tx(content, 100, key, 4.0)], 4.0)
    assert chain.reg.lookup(content, 50.0).expires_at == 112.0
    chain.block([revoke_tx(content, key, 5.0)], 5.0)
    with pytest.raises(Revoked):
        chain.reg.lookup(content, 6.0)


def test_expiry(alice):
    chain = Chain()
    reg_identity(chain, alice)
    name, key, _ = alice
    content = Identifier(IdentifierType.CONTENT, "/alice/short")
    chain.block([register_tx(build_request(name, content, key, 5, 1.0, 2.0), key)], 2.0)
    chain.reg.lookup(content, 6.0)
    with pytest.raises(Expired):
        chain.reg.lookup(content, 7.0)
    with pytest.raises(NotFound):
        chain.reg.lookup(Identifier(IdentifierType.CONTENT, "/nobody"), 1.0)


def test_only_owner_mutates(alice, ed):
    chain = Chain()
    reg_identity(chain, alice)
    bob_key = ed.keygen(b"bob")
    bob = ("bob", bob_key, identity_for_key(bob_key.public))
    reg_identity(chain, bob, 2.0)
    name, key, _ = alice
    content = Identifier(IdentifierType.CONTENT, "/alice/c")
    chain.block([register_tx(build_request(name, content, key, 100, 1.0, 3.0), key)], 3.0)
    with pytest.raises(NotOwner):
        chain.reg.check_tx(revoke_tx(content, bob_key, 4.0), 4.0)
    delta = chain.block([transfer_tx(content, "bob", bob_key.public, key, 4.0)], 4.0)
    assert delta.applied
    rec = chain.reg.lookup(content, 5.0)
    assert rec.owner_username == "bob"
    assert rec.metadata_addr != chain.reg.lookup_username("alice")[0].metadata_addr
    chain.block([revoke_tx(content, bob_key, 6.0)], 6.0)
    with pytest.raises(Revoked):
        chain.reg.lookup(content, 7.0)


def test_identity_cannot_be_transferred(alice, ed):
    chain = Chain()
    reg_identity(chain, alice)
    bob_key = ed.keygen(b"bob")
    reg_identity(chain, ("bob", bob_key, identity_for_key(bob_key.public)), 2.0)
    name, key, ident = alice
    delta = chain.block([transfer_tx(ident, "bob", bob_key.public, key, 3.0)], 3.0)
    assert delta.rejected[0][1] == "invalid-payload"


def test_export_import_round_trip(alice):
    chain = Chain()
    reg_identity(chain, alice)
    data = chain.reg.export_state()
    assert Registry.import_state(data).export_state() == data
    assert "alice" in json.loads(data)["users"]


def test_about_me_surfaces_in_delta(alice):
    chain = Chain()
    name, key, ident = alice
    tx = register_tx(build_request(name, ident, key, 100, 1.0, 1.0, about_me="hi"), key)
    delta = chain.block([tx], 1.0)
    assert delta.about_me == [("alice", ident, "hi")]
