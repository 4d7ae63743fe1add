"""Block persistence with a hot/warm/cold timeline.

Hot blocks (the newest ``hot_len``) are kept whole on every node. When a
block turns warm, each node erasure-codes its body into ``n - 2f`` data
and ``2f`` parity chunks and keeps exactly one of them; a shrinking set
of nodes additionally caches the whole body. Cold blocks keep only the
header and the node's chunk. Headers are never encoded.

Chunk and cache placement is a pure function of (height, node rank), so
nodes agree on it without exchanging messages.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

from . import erasure
from .consensus import Block, BlockHeader, HeaderMismatch
from .codec import DecodeError
from .crypto import hash_bytes
from .erasure import ChunkLengthMismatch, InsufficientChunks

__all__ = [
    "BlockState", "StorageConfig", "ChunkSet", "LedgerStore", "PeerHandle", "Transition",
    "classify", "cache_count", "encode_block", "decode_block", "cache_ranks",
    "select_cache_nodes", "my_chunk_index", "chunk_holder_rank", "advance",
    "InsufficientChunks", "ChunkLengthMismatch", "HeightOutOfRange", "NotWarm",
    "NonMonotonicHeight", "Unrecoverable", "BadNodeCount",
]


class LedgerError(Exception):
    pass


class HeightOutOfRange(LedgerError):
    pass


class NotWarm(LedgerError):
    pass


class NonMonotonicHeight(LedgerError):
    pass


class Unrecoverable(LedgerError):
    pass


class BadNodeCount(LedgerError):
    pass


class BlockState(str, Enum):
    HOT = "hot"
    WARM = "warm"
    COLD = "cold"


@dataclass(frozen=True)
class StorageConfig:
    n: int
    f: int
    hot_len: int
    warm_len: int

    def __post_init__(self) -> None:
        if self.f < 0 or self.n <= 3 * self.f:
            raise ValueError(f"need n > 3f >= 0, got n={self.n}, f={self.f}")
        if self.hot_len < 1 or self.warm_len < 1:
            raise ValueError("hot and warm windows must each hold at least one block")
        if self.f > 0 and self.warm_len % (2 * self.f):
            raise ValueError(f"warm_len={self.warm_len} must be divisible by 2f={2 * self.f}")

    @property
    def data_chunks(self) -> int:
        return self.n - 2 * self.f

    @property
    def parity_chunks(self) -> int:
        return 2 * self.f


def classify(h: int, h_max: int, cfg: StorageConfig) -> BlockState:
    if not 0 <= h <= h_max:
        raise HeightOutOfRange(f"height {h} outside [0, {h_max}]")
    if h > h_max - cfg.hot_len:
        return BlockState.HOT
    if h > h_max - cfg.hot_len - cfg.warm_len:
        return BlockState.WARM
    return BlockState.COLD


def cache_count(h: int, h_max: int, cfg: StorageConfig) -> int:
    """Full-copy caches kept for a warm block: 2f+1 when it turns warm, 1 before it goes cold."""
    if cfg.f < 1:
        raise NotWarm("cache schedule needs f >= 1")
    if classify(h, h_max, cfg) != BlockState.WARM:
        raise NotWarm(f"height {h} is not warm at h_max={h_max}")
    step = cfg.warm_len // (2 * cfg.f)
    return (h - h_max + cfg.hot_len + cfg.warm_len) // step + 1


# --------------------------------------------------------------------------
# Chunks


@dataclass(frozen=True)
class ChunkSet:
    height: int
    data_chunks: tuple[bytes, ...]
    parity_chunks: tuple[bytes, ...]
    chunk_size: int
    original_len: int

    @property
    def chunks(self) -> tuple[bytes, ...]:
        return self.data_chunks + self.parity_chunks

    def chunk(self, index: int) -> bytes:
        """1-based, matching C_1 .. C_n."""
        return self.chunks[index - 1]


@lru_cache(maxsize=256)
def _encode_cached(data: bytes, k: int, m: int) -> tuple[tuple[bytes, ...], int]:
    chunks, size = erasure.encode(data, k, m)
    return tuple(chunks), size


def encode_block(block_bytes: bytes, cfg: StorageConfig, height: int = 0) -> ChunkSet:
    if not block_bytes:
        raise ValueError("cannot encode an empty block")
    k = cfg.data_chunks
    chunks, size = _encode_cached(bytes(block_bytes), k, cfg.parity_chunks)
    return ChunkSet(height, chunks[:k], chunks[k:], size, len(block_bytes))


def decode_block(chunks: Mapping[int, bytes], original_len: int, cfg: StorageConfig) -> bytes:
    """``chunks`` maps 1-based chunk index to bytes; any ``n - 2f`` suffice."""
    bad = [i for i in chunks if not 1 <= i <= cfg.n]
    if bad:
        raise InsufficientChunks(f"chunk indices out of range: {bad}")
    return erasure.decode({i - 1: c for i, c in chunks.items()}, cfg.data_chunks,
                          cfg.parity_chunks, original_len)


def chunk_holder_rank(h: int, chunk_index: int, n: int) -> int:
    return (chunk_index - 1 + h) % n


def my_chunk_index(h: int, rank: int, cfg: StorageConfig) -> int:
    if not 0 <= rank < cfg.n:
        raise BadNodeCount(f"rank {rank} outside [0, {cfg.n})")
    return (rank - h) % cfg.n + 1


def _cache_start(h: int, n: int) -> int:
    return int.from_bytes(hash_bytes(struct.pack(">Q", h))[:8], "big") % n


def cache_ranks(h: int, n_w: int, n: int) -> list[int]:
    start = _cache_start(h, n)
    return [(start + j) % n for j in range(min(n_w, n))]


def select_cache_nodes(h: int, n_w: int, node_ids: Sequence[str], cfg: StorageConfig) -> list[str]:
    if len(node_ids) != cfg.n:
        raise BadNodeCount(f"expected {cfg.n} nodes, got {len(node_ids)}")
    ranked = sorted(node_ids)
    return [ranked[r] for r in cache_ranks(h, n_w, cfg.n)]


def _archive_rank(h: int, n: int) -> int:
    return h % n


@dataclass(frozen=True)
class Transition:
    kind: str  # "encode" | "shrink_cache" | "to_cold"
    height: int
    cache_ranks: tuple[int, ...] = ()


def advance(h_max_new: int, cfg: StorageConfig, h_max_old: int) -> list[Transition]:
    """Actions triggered by moving the chain tip from ``h_max_old`` to ``h_max_new``.

    Caches for a height are only ever dropped, never added back.
    """
    if h_max_new != h_max_old + 1:
        raise NonMonotonicHeight(f"tip moved {h_max_old} -> {h_max_new}")
    actions: list[Transition] = []
    lo, hi = h_max_new - cfg.hot_len - cfg.warm_len, h_max_new - cfg.hot_len
    if cfg.f == 0:
        if hi >= 0:
            actions.append(Transition("encode", hi, (_archive_rank(hi, cfg.n),)))
        if lo >= 0:
            actions.append(Transition("to_cold", lo))
        return actions
    if hi >= 0:
        actions.append(Transition("encode", hi, tuple(cache_ranks(hi, 2 * cfg.f + 1, cfg.n))))
    for h in range(max(lo + 1, 0), hi):
        before = cache_count(h, h_max_old, cfg)
        after = cache_count(h, h_max_new, cfg)
        if after < before:
            actions.append(Transition("shrink_cache", h, tuple(cache_ranks(h, after, cfg.n))))
    if lo >= 0:
        actions.append(Transition("to_cold", lo))
    return actions


# --------------------------------------------------------------------------
# Per-node store


class Peer(Protocol):
    rank: int

    def fetch_full(self, h: int) -> bytes | None: ...

    def fetch_chunk(self, h: int) -> tuple[int, bytes, int] | None: ...


class LedgerStore:
    """One node's view of the chain under the timeline strategy.

    With ``root`` set, every change is mirrored to disk: ``headers.journal``
    (length-prefixed header encodings), ``hot/<h>.blk``, ``cache/<h>.blk``
    and ``chunks/<h>.<index>``.
    """

    def __init__(self, cfg: StorageConfig, rank: int, root: str | Path | None = None) -> None:
        if not 0 <= rank < cfg.n:
            raise BadNodeCount(f"rank {rank} outside [0, {cfg.n})")
        self.cfg = cfg
        self.rank = rank
        self.h_max = -1
        self.headers: dict[int, BlockHeader] = {}
        self.hot_blocks: dict[int, bytes] = {}
        self.my_chunks: dict[int, tuple[int, bytes, int]] = {}
        self.cache_copies: dict[int, bytes] = {}
        self.fetches = 0
        self.root = None if root is None else Path(root)
        if self.root is not None:
            for sub in ("hot", "cache", "chunks"):
                (self.root / sub).mkdir(parents=True, exist_ok=True)

    # -- writes --------------------------------------------------------------

    def append(self, block: Block) -> list[Transition]:
        h = block.height
        if h != self.h_max + 1:
            raise NonMonotonicHeight(f"expected height {self.h_max + 1}, got {h}")
        if h > 0 and block.header.prev_hash != self.headers[h - 1].hash:
            raise HeaderMismatch(f"block {h} does not chain to {h - 1}")
        actions = advance(h, self.cfg, self.h_max)
        self.headers[h] = block.header
        self.hot_blocks[h] = block.body_bytes
        self.h_max = h
        self._persist_header(block.header)
        self._write("hot", f"{h}.blk", block.body_bytes)
        for act in actions:
            self._apply(act)
        return actions

    def _apply(self, act: Transition) -> None:
        h = act.height
        if act.kind == "encode":
            body = self.hot_blocks.pop(h)
            self._remove("hot", f"{h}.blk")
            if self.cfg.f == 0:
                if self.rank in act.cache_ranks:
                    self.cache_copies[h] = body
                    self._write("cache", f"{h}.blk", body)
                return
            cs = encode_block(body, self.cfg, h)
            idx = my_chunk_index(h, self.rank, self.cfg)
            self.my_chunks[h] = (idx, cs.chunk(idx), cs.original_len)
            self._write("chunks", f"{h}.{idx}", cs.chunk(idx))
            self._write("chunks", f"{h}.len", str(cs.original_len).encode())
            if self.rank in act.cache_ranks:
                self.cache_copies[h] = body
                self._write("cache", f"{h}.blk", body)
        elif act.kind == "shrink_cache":
            if self.rank not in act.cache_ranks and h in self.cache_copies:
                del self.cache_copies[h]
                self._remove("cache", f"{h}.blk")
        elif act.kind == "to_cold":
            if self.cfg.f == 0:
                return  # the archive copy is the only copy
            if h in self.cache_copies:
                del self.cache_copies[h]
                self._remove("cache", f"{h}.blk")

    # -- serving -------------------------------------------------------------

    def fetch_full(self, h: int) -> bytes | None:
        return self.hot_blocks.get(h) or self.cache_copies.get(h)

    def fetch_chunk(self, h: int) -> tuple[int, bytes, int] | None:
        return self.my_chunks.get(h)

    def state_of(self, h: int) -> BlockState:
        return classify(h, self.h_max, self.cfg)

    def holders(self, h: int) -> dict:
        """Who holds what for height ``h`` (for inspection)."""
        state = self.state_of(h)
        out: dict = {"height": h, "state": state.value}
        if state == BlockState.HOT:
            out["full_copies"] = list(range(self.cfg.n))
            return out
        if self.cfg.f == 0:
            out["full_copies"] = [_archive_rank(h, self.cfg.n)]
            return out
        out["chunks"] = {i: chunk_holder_rank(h, i, self.cfg.n) for i in range(1, self.cfg.n + 1)}
        if state == BlockState.WARM:
            n_w = cache_count(h, self.h_max, self.cfg)
            out["cache_count"] = n_w
            out["full_copies"] = cache_ranks(h, n_w, self.cfg.n)
        else:
            out["full_copies"] = []
        return out

    def _verified(self, h: int, body: bytes | None) -> Block | None:
        if body is None:
            return None
        try:
            return Block.from_parts(self.headers[h], body)
        except (HeaderMismatch, DecodeError, ValueError):
            return None

    def get_block(self, h: int, peers: Iterable[Peer] = ()) -> Block:
        """Return block ``h``, fetching from peers and decoding only when needed."""
        state = self.state_of(h)
        peers = [p for p in peers if p.rank != self.rank]
        local = self._verified(h, self.fetch_full(h))
        if local is not None:
            return local
        if state == BlockState.HOT:
            holders = list(peers)
        elif self.cfg.f == 0:
            holders = [p for p in peers if p.rank == _archive_rank(h, self.cfg.n)]
        elif state == BlockState.WARM:
            ranks = cache_ranks(h, cache_count(h, self.h_max, self.cfg), self.cfg.n)
            holders = [p for p in peers if p.rank in ranks]
        else:
            holders = []
        for p in holders:
            self.fetches += 1
            blk = self._verified(h, _safe(p.fetch_full, h))
            if blk is not None:
                return blk
        if self.cfg.f == 0 or state == BlockState.HOT:
            raise Unrecoverable(f"no reachable full copy of block {h}")
        return self._decode_from_chunks(h, peers)

    def _decode_from_chunks(self, h: int, peers: Sequence[Peer]) -> Block:
        k = self.cfg.data_chunks
        got: dict[int, bytes] = {}
        lengths: list[int] = []
        if h in self.my_chunks:
            idx, chunk, original_len = self.my_chunks[h]
            got[idx] = chunk
            lengths.append(original_len)
        tried: set = set()
        pending = list(peers)
        while True:
            # top up to k chunks, then to one more per failed round
            want = k if not tried else len(got) + 1
            while len(got) < want and pending:
                self.fetches += 1
                item = _safe(pending.pop(0).fetch_chunk, h)
                if item is not None and 1 <= item[0] <= self.cfg.n and item[0] not in got:
                    got[item[0]] = item[1]
                    lengths.append(item[2])
            for original_len in sorted(set(lengths), key=lengths.count, reverse=True):
                for combo in itertools.combinations(sorted(got), k):
                    if (combo, original_len) in tried:
                        continue
                    tried.add((combo, original_len))
                    try:
                        body = decode_block({i: got[i] for i in combo}, original_len, self.cfg)
                    except erasure.ErasureError:
                        continue
                    blk = self._verified(h, body)
                    if blk is not None:
                        return blk
            tried.add(())
            if not pending:
                raise Unrecoverable(
                    f"block {h}: {len(got)} chunk(s) reachable, no {k} of them rebuild it")

    def bytes_stored(self) -> int:
        total = sum(len(hd.to_bytes()) for hd in self.headers.values())
        total += sum(len(b) for b in self.hot_blocks.values())
        total += sum(len(c) for _, c, _ in self.my_chunks.values())
        total += sum(len(b) for b in self.cache_copies.values())
        return total

    # -- disk mirror ---------------------------------------------------------

    def _write(self, sub: str, name: str, data: bytes) -> None:
        if self.root is not None:
            (self.root / sub / name).write_bytes(data)

    def _remove(self, sub: str, name: str) -> None:
        if self.root is not None:
            (self.root / sub / name).unlink(missing_ok=True)

    def _persist_header(self, header: BlockHeader) -> None:
        if self.root is not None:
            raw = header.to_bytes()
            with open(self.root / "headers.journal", "ab") as fh:
                fh.write(struct.pack(">I", len(raw)) + raw)

    @classmethod
    def load(cls, cfg: StorageConfig, rank: int, root: str | Path) -> "LedgerStore":
        root = Path(root)
        store = cls(cfg, rank, root)
        journal = root / "headers.journal"
        data = journal.read_bytes() if journal.exists() else b""
        pos = 0
        while pos < len(data):
            (length,) = struct.unpack(">I", data[pos:pos + 4])
            header = BlockHeader.from_bytes(data[pos + 4:pos + 4 + length])
            store.headers[header.height] = header
            pos += 4 + length
        store.h_max = max(store.headers, default=-1)
        for path in (root / "hot").glob("*.blk"):
            store.hot_blocks[int(path.stem)] = path.read_bytes()
        for path in (root / "cache").glob("*.blk"):
            store.cache_copies[int(path.stem)] = path.read_bytes()
        for path in (root / "chunks").iterdir():
            h, idx = path.name.split(".")
            if idx == "len":
                continue
            body_len = int((root / "chunks" / f"{h}.len").read_text())
            store.my_chunks[int(h)] = (int(idx), path.read_bytes(), body_len)
        return store


def _safe(fn, h):
    try:
        return fn(h)
    except (ConnectionError, LookupError):
        return None


class PeerHandle:
    """A store as seen over the (simulated) network: may be down or serve corrupted data."""

    def __init__(self, store: LedgerStore, up: bool = True, corrupt: Iterable[int] = ()) -> None:
        self.store = store
        self.rank = store.rank
        self.up = up
        self.corrupt = set(corrupt)

    def _check(self) -> None:
        if not self.up:
            raise ConnectionError(f"node rank {self.rank} is down")

    def fetch_full(self, h: int) -> bytes | None:
        self._check()
        body = self.store.fetch_full(h)
        if body is not None and h in self.corrupt:
            return _garble(body)
        return body

    def fetch_chunk(self, h: int) -> tuple[int, bytes, int] | None:
        self._check()
        item = self.store.fetch_chunk(h)
        if item is not None and h in self.corrupt:
            idx, chunk, n = item
            return idx, _garble(chunk), n
        return item


def _garble(data: bytes) -> bytes:
    if not data:
        return b"\x00"
    return bytes(b ^ 0x5A for b in data)
