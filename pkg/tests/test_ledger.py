import pytest

from mis.consensus import Block, BlockHeader, OpKind, Transaction, TxList, genesis_block
from mis.crypto import AggregateSignature
from mis.ledger import (
    BlockState,
    HeightOutOfRange,
    LedgerStore,
    NonMonotonicHeight,
    NotWarm,
    PeerHandle,
    StorageConfig,
    Unrecoverable,
    advance,
    cache_count,
    cache_ranks,
    chunk_holder_rank,
    classify,
    decode_block,
    encode_block,
    my_chunk_index,
    select_cache_nodes,
)


def chain(key, length):
    blocks = [genesis_block()]
    empty = AggregateSignature.empty()
    for h in range(1, length + 1):
        tx = Transaction(OpKind.REGISTER, f"body-{h}".encode() * h, key.public, 0.0,
                         float(h)).signed(key)
        tl = TxList(key.public, h, (tx,), float(h))
        header = BlockHeader(h, blocks[-1].header.hash, float(h), (1,), (), empty, empty,
                             ((tl.merkle_root, tl.produced_at),))
        blocks.append(Block(header, (tl,)))
    return blocks


def stores_for(cfg, blocks, root=None):
    stores = [LedgerStore(cfg, r, None if root is None else root / f"n{r}") for r in range(cfg.n)]
    for b in blocks:
        for s in stores:
            s.append(b)
    return stores


def test_config_validation():
    with pytest.raises(ValueError):
        StorageConfig(3, 1, 2, 4)
    with pytest.raises(ValueError):
        StorageConfig(4, 1, 2, 3)
    cfg = StorageConfig(7, 2, 3, 8)
    assert (cfg.data_chunks, cfg.parity_chunks) == (3, 4)


def test_classify_windows():
    cfg = StorageConfig(4, 1, 2, 4)
    states = [classify(h, 10, cfg) for h in range(11)]
    assert states[9:] == [BlockState.HOT] * 2
    assert states[5:9] == [BlockState.WARM] * 4
    assert states[:5] == [BlockState.COLD] * 5
    with pytest.raises(HeightOutOfRange):
        classify(11, 10, cfg)


def test_cache_schedule_decays():
    cfg = StorageConfig(7, 2, 3, 8)
    h_max = 20
    warm = [h for h in range(h_max + 1) if classify(h, h_max, cfg) == BlockState.WARM]
    counts = [cache_count(h, h_max, cfg) for h in warm]
    assert counts[-1] == 2 * cfg.f + 1 and counts[0] == 1
    assert counts == sorted(counts)
    with pytest.raises(NotWarm):
        cache_count(h_max, h_max, cfg)


def test_chunk_placement_rotates():
    cfg = StorageConfig(4, 1, 2, 2)
    for h in range(8):
        for rank in range(4):
            idx = my_chunk_index(h, rank, cfg)
            assert chunk_holder_rank(h, idx, 4) == rank
    assert len(set(cache_ranks(5, 3, 4))) == 3
    assert select_cache_nodes(5, 2, ["d", "c", "b", "a"], cfg) == \
        [["a", "b", "c", "d"][r] for r in cache_ranks(5, 2, 4)]


def test_encode_decode_block():
    cfg = StorageConfig(6, 1, 2, 2)
    data = bytes(range(256)) * 5
    cs = encode_block(data, cfg, 3)
    assert len(cs.chunks) == 6
    subset = {i: cs.chunk(i) for i in (2, 4, 5, 6)}
    assert decode_block(subset, len(data), cfg) == data


def test_advance_emits_transitions():
    cfg = StorageConfig(4, 1, 2, 4)
    acts = advance(3, cfg, 2)
    assert [(a.kind, a.height) for a in acts] == [("encode", 1), ("shrink_cache", 0)]
    assert len(acts[0].cache_ranks) == 3 and len(acts[1].cache_ranks) == 2
    with pytest.raises(NonMonotonicHeight):
        advance(5, cfg, 3)
    kinds = {a.kind for a in advance(9, cfg, 8)}
    assert kinds == {"encode", "shrink_cache", "to_cold"}


def test_store_serves_every_height_with_two_nodes_down(keys):
    cfg = StorageConfig(4, 1, 2, 4)
    blocks = chain(keys[0], 15)
    stores = stores_for(cfg, blocks)
    for down in ({0, 1}, {1, 2}, {2, 3}, {0, 3}):
        reader = stores[min(set(range(4)) - down)]
        peers = [PeerHandle(s, up=s.rank not in down) for s in stores]
        for b in blocks:
            assert reader.get_block(b.height, peers) == b


def test_cold_block_needs_enough_chunks(keys):
    cfg = StorageConfig(4, 1, 1, 2)
    blocks = chain(keys[0], 8)
    stores = stores_for(cfg, blocks)
    assert stores[0].state_of(1) == BlockState.COLD
    # own chunk plus one peer's is exactly n - 2f
    assert stores[0].get_block(1, [PeerHandle(s, up=s.rank == 1) for s in stores]) == blocks[1]
    with pytest.raises(Unrecoverable):
        stores[0].get_block(1, [PeerHandle(s, up=False) for s in stores])


def test_corrupt_chunk_is_routed_around(keys):
    cfg = StorageConfig(7, 2, 1, 4)
    blocks = chain(keys[0], 10)
    stores = stores_for(cfg, blocks)
    peers = [PeerHandle(s, corrupt=(2,) if s.rank in (1, 2) else ()) for s in stores]
    assert stores[0].get_block(2, peers) == blocks[2]


def test_disk_mirror_reload(tmp_path, keys):
    cfg = StorageConfig(4, 1, 2, 4)
    blocks = chain(keys[0], 9)
    stores = stores_for(cfg, blocks, tmp_path)
    again = [LedgerStore.load(cfg, r, tmp_path / f"n{r}") for r in range(4)]
    assert again[0].h_max == 9
    assert again[0].holders(3) == stores[0].holders(3)
    peers = [PeerHandle(s) for s in again]
    assert again[0].get_block(1, peers) == blocks[1]


def test_f_zero_keeps_single_archive(keys):
    cfg = StorageConfig(1, 0, 1, 1)
    blocks = chain(keys[0], 5)
    (store,) = stores_for(cfg, blocks)
    for b in blocks:
        assert store.get_block(b.height) == b
