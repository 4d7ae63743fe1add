"""Systematic Reed-Solomon erasure code over GF(2^8).

Byte column ``c`` of the ``k`` data chunks is the message polynomial
(first chunk = highest-degree coefficient); the ``m`` parity chunks hold
the remainder of ``msg(x) * x^m`` modulo ``g(x) = prod_{i<m} (x - 2^i)``
with primitive polynomial 0x11d. This is the conventional layout used by
most byte-oriented RS libraries, so parity bytes can be cross-checked
against them.

Decoding from any ``k`` of the ``n = k + m`` chunks inverts the matching
``k x k`` slice of the generator matrix.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

PRIM = 0x11D


class ErasureError(ValueError):
    pass


class InsufficientChunks(ErasureError):
    pass


class ChunkLengthMismatch(ErasureError):
    pass


def _build_tables() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    exp = np.zeros(512, dtype=np.uint8)
    log = np.zeros(256, dtype=np.int32)
    x = 1
    for i in range(255):
        exp[i] = x
        log[x] = i
        x <<= 1
        if x & 0x100:
            x ^= PRIM
    exp[255:510] = exp[:255]
    a = np.arange(256)
    la = log[a][:, None] + log[a][None, :]
    mul = exp[la % 255].astype(np.uint8)
    mul[0, :] = 0
    mul[:, 0] = 0
    return exp, log, mul


EXP, LOG, MUL = _build_tables()


def gf_mul(a: int, b: int) -> int:
    return int(MUL[a, b])


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("0 has no inverse in GF(256)")
    return int(EXP[(255 - LOG[a]) % 255])


def _poly_mul(p: list[int], q: list[int]) -> list[int]:
    out = [0] * (len(p) + len(q) - 1)
    for i, a in enumerate(p):
        for j, b in enumerate(q):
            out[i + j] ^= gf_mul(a, b)
    return out


def generator_poly(nsym: int) -> list[int]:
    g = [1]
    for i in range(nsym):
        g = _poly_mul(g, [1, int(EXP[i])])
    return g


def _remainder(msg: list[int], nsym: int) -> list[int]:
    gen = generator_poly(nsym)
    buf = list(msg) + [0] * nsym
    for i in range(len(msg)):
        coef = buf[i]
        if coef:
            for j in range(1, len(gen)):
                buf[i + j] ^= gf_mul(gen[j], coef)
    return buf[len(msg):]


@lru_cache(maxsize=64)
def generator_matrix(k: int, m: int) -> np.ndarray:
    """``k x (k+m)`` systematic generator ``[I | P]``; row i encodes unit vector i."""
    if k < 1 or m < 0 or k + m > 255:
        raise ValueError(f"unsupported code ({k}, {m})")
    gen = np.zeros((k, k + m), dtype=np.uint8)
    for i in range(k):
        unit = [0] * k
        unit[i] = 1
        gen[i, i] = 1
        if m:
            gen[i, k:] = _remainder(unit, m)
    return gen


def gf_matrix_inverse(a: np.ndarray) -> np.ndarray:
    """Gauss-Jordan inversion over GF(256)."""
    n = a.shape[0]
    aug = np.concatenate([a.astype(np.uint8), np.eye(n, dtype=np.uint8)], axis=1)
    for col in range(n):
        pivot = next((r for r in range(col, n) if aug[r, col]), None)
        if pivot is None:
            raise ErasureError("singular matrix")
        if pivot != col:
            aug[[col, pivot]] = aug[[pivot, col]]
        aug[col] = MUL[gf_inv(int(aug[col, col])), aug[col]]
        for r in range(n):
            if r != col and aug[r, col]:
                aug[r] ^= MUL[int(aug[r, col]), aug[col]]
    return aug[:, n:]


def _combine(rows: Sequence[np.ndarray], coeffs: np.ndarray) -> np.ndarray:
    out = np.zeros_like(rows[0])
    for row, c in zip(rows, coeffs):
        c = int(c)
        if c == 1:
            out ^= row
        elif c:
            out ^= MUL[c][row]
    return out


def encode(data: bytes, k: int, m: int) -> tuple[list[bytes], int]:
    """Split ``data`` into ``k`` zero-padded data chunks and append ``m`` parity chunks.

    Returns ``(chunks, chunk_size)``; chunk ``i`` (0-based) is position ``i``
    of every codeword.
    """
    size = max(1, -(-len(data) // k))
    buf = np.zeros(k * size, dtype=np.uint8)
    buf[: len(data)] = np.frombuffer(data, dtype=np.uint8)
    rows = [buf[i * size:(i + 1) * size] for i in range(k)]
    gen = generator_matrix(k, m)
    parity = [_combine(rows, gen[:, k + j]) for j in range(m)]
    return [r.tobytes() for r in rows] + [p.tobytes() for p in parity], size


def decode(chunks: Mapping[int, bytes], k: int, m: int, original_len: int) -> bytes:
    """Rebuild the original bytes from any ``k`` chunks keyed by 0-based position."""
    n = k + m
    usable = sorted(i for i in chunks if 0 <= i < n)
    if len(usable) < k:
        raise InsufficientChunks(f"need {k} chunks, have {len(usable)}")
    usable = usable[:k]
    lengths = {len(chunks[i]) for i in usable}
    if len(lengths) != 1:
        raise ChunkLengthMismatch(f"chunk lengths differ: {sorted(lengths)}")
    size = lengths.pop()
    if size * k < original_len:
        raise ChunkLengthMismatch("chunks too short for the original length")
    rows = [np.frombuffer(chunks[i], dtype=np.uint8) for i in usable]
    if usable == list(range(k)):
        data_rows = rows
    else:
        inv = gf_matrix_inverse(generator_matrix(k, m)[:, usable])
        data_rows = [_combine(rows, inv[:, j]) for j in range(k)]
    return b"".join(r.tobytes() for r in data_rows)[:original_len]
