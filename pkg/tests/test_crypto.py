import hashlib

import pytest

from mis import crypto
from mis.crypto import (
    ZERO_DIGEST,
    AggregateSignature,
    EmptyLeafSet,
    EmptySignatureSet,
    EmptyUsername,
    MalformedKey,
    MalformedSignature,
    get_scheme,
    hash_bytes,
    merkle_root,
    metadata_address,
)
from mis.identifiers import parse_identifier


def test_hash_is_sha256():
    assert hash_bytes(b"abc") == hashlib.sha256(b"abc").digest()
    assert ZERO_DIGEST == bytes(32)


def test_merkle_root_known_shapes():
    h = hash_bytes
    a, b, c = h(b"a"), h(b"b"), h(b"c")
    assert merkle_root([b"a"]) == h(a + a)
    assert merkle_root([b"a", b"b"]) == h(a + b)
    assert merkle_root([b"a", b"b", b"c"]) == h(h(a + b) + h(c + c))
    with pytest.raises(EmptyLeafSet):
        merkle_root([])


def test_merkle_root_is_order_sensitive():
    assert merkle_root([b"a", b"b"]) != merkle_root([b"b", b"a"])


def test_metadata_address():
    ident = parse_identifier("type1:/alice/a.mp4")
    expected = hashlib.sha256(b"alice\x1ftype1:/alice/a.mp4").digest()
    assert metadata_address("alice", ident) == expected
    assert metadata_address("bob", ident) != expected
    with pytest.raises(EmptyUsername):
        metadata_address("", ident)


def test_ed25519_sign_verify(ed):
    key = ed.keygen(b"seed")
    assert key == ed.keygen(b"seed")
    sig = ed.sign(b"msg", key)
    assert ed.verify(b"msg", sig, key.public)
    assert not ed.verify(b"other", sig, key.public)
    with pytest.raises(MalformedSignature):
        ed.verify(b"msg", sig[:-1], key.public)
    with pytest.raises(MalformedKey):
        ed.verify(b"msg", sig, key.public[:-1])


def test_ed25519_aggregate(ed, keys):
    msgs = [f"m{i}".encode() for i in range(4)]
    sigs = [ed.sign(m, k) for m, k in zip(msgs, keys)]
    agg = ed.aggregate(sigs, [k.public for k in keys[:4]])
    pairs = [(m, k.public) for m, k in zip(msgs, keys)]
    assert ed.verify_aggregate(pairs, agg)
    assert not ed.verify_aggregate(pairs[::-1], agg)
    bad = [(b"x", keys[0].public)] + pairs[1:]
    assert not ed.verify_aggregate(bad, agg)
    with pytest.raises(EmptySignatureSet):
        ed.aggregate([], [])
    with pytest.raises(EmptySignatureSet):
        ed.verify_aggregate([], AggregateSignature.empty())


def test_module_level_dispatch_by_key(keys):
    sig = crypto.sign(b"hello", keys[0])
    assert crypto.verify(b"hello", sig, keys[0].public)
    agg = crypto.aggregate([sig], [keys[0].public])
    assert crypto.verify_aggregate([(b"hello", keys[0].public)], agg)


@pytest.mark.slow
def test_bls_aggregate_round_trip():
    bls = get_scheme("bls")
    ks = [bls.keygen(f"bls-{i}".encode()) for i in range(2)]
    msgs = [b"one", b"two"]
    sigs = [bls.sign(m, k) for m, k in zip(msgs, ks)]
    assert bls.verify(msgs[0], sigs[0], ks[0].public)
    agg = bls.aggregate(sigs, [k.public for k in ks])
    assert len(agg.data) == bls.signature_size
    assert bls.verify_aggregate([(m, k.public) for m, k in zip(msgs, ks)], agg)
    assert not bls.verify_aggregate([(msgs[1], ks[0].public), (msgs[0], ks[1].public)], agg)
