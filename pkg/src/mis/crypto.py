"""Hashing, Merkle roots, metadata addresses and signatures.

Two signature schemes share one interface:

* ``bls``: BLS over BLS12-381 (message-augmentation variant). Aggregates
  are a single 96-byte point regardless of signer count. Pure Python and
  slow (hundreds of milliseconds per pairing).
* ``ed25519``: aggregates are the ordered list of individual signatures.
  Proofs grow linearly but signing and verification are fast enough to
  drive multi-thousand-round simulations.
"""

from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .identifiers import Identifier, format_identifier

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)
UNIT_SEPARATOR = b"\x1f"


class CryptoError(ValueError):
    pass


class EmptyLeafSet(CryptoError):
    pass


class EmptyUsername(CryptoError):
    pass


class MalformedKey(CryptoError):
    pass


class MalformedSignature(CryptoError):
    pass


class EmptySignatureSet(CryptoError):
    pass


def hash_bytes(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    """Binary Merkle root over hashed leaves; an odd level repeats its last node."""
    if not leaves:
        raise EmptyLeafSet("merkle_root needs at least one leaf")
    level = [hash_bytes(leaf) for leaf in leaves]
    while True:
        if len(level) % 2:
            level.append(level[-1])
        level = [hash_bytes(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
        if len(level) == 1:
            return level[0]


def metadata_address(username: str, ident: Identifier) -> bytes:
    if not username:
        raise EmptyUsername("metadata address needs a username")
    return hash_bytes(
        username.encode("utf-8") + UNIT_SEPARATOR + format_identifier(ident).encode("utf-8")
    )


@dataclass(frozen=True)
class KeyPair:
    scheme: str
    secret: bytes
    public: bytes

    def __repr__(self) -> str:
        return f"KeyPair({self.scheme}, public={self.public.hex()[:16]}...)"


@dataclass(frozen=True)
class AggregateSignature:
    data: bytes
    signers: tuple[bytes, ...]

    @classmethod
    def empty(cls) -> "AggregateSignature":
        return cls(b"", ())


class SignatureScheme(ABC):
    name: str
    public_key_size: int
    signature_size: int

    @abstractmethod
    def keygen(self, seed: bytes) -> KeyPair: ...

    @abstractmethod
    def sign(self, message: bytes, key: KeyPair) -> bytes: ...

    @abstractmethod
    def _verify(self, message: bytes, sig: bytes, public: bytes) -> bool: ...

    @abstractmethod
    def _aggregate(self, sigs: Sequence[bytes]) -> bytes: ...

    @abstractmethod
    def _verify_aggregate(self, pairs: Sequence[tuple[bytes, bytes]], data: bytes) -> bool: ...

    def check_public(self, public: bytes) -> None:
        if len(public) != self.public_key_size:
            raise MalformedKey(
                f"{self.name} public key must be {self.public_key_size} bytes, got {len(public)}"
            )

    def verify(self, message: bytes, sig: bytes, public: bytes) -> bool:
        self.check_public(public)
        if len(sig) != self.signature_size:
            raise MalformedSignature(
                f"{self.name} signature must be {self.signature_size} bytes, got {len(sig)}"
            )
        return self._verify(bytes(message), bytes(sig), bytes(public))

    def aggregate(self, sigs: Sequence[bytes], signers: Sequence[bytes]) -> AggregateSignature:
        if not sigs:
            raise EmptySignatureSet("nothing to aggregate")
        if len(sigs) != len(signers):
            raise ValueError("one signer per signature")
        for sig in sigs:
            if len(sig) != self.signature_size:
                raise MalformedSignature(f"bad {self.name} signature length {len(sig)}")
        return AggregateSignature(self._aggregate(sigs), tuple(bytes(s) for s in signers))

    def verify_aggregate(
        self, pairs: Sequence[tuple[bytes, bytes]], agg: AggregateSignature
    ) -> bool:
        """``pairs`` holds (message, public key) in signer order."""
        if not pairs:
            raise EmptySignatureSet("no (message, key) pairs")
        if tuple(pk for _, pk in pairs) != agg.signers:
            return False
        for _, pk in pairs:
            self.check_public(pk)
        return self._verify_aggregate(
            tuple((bytes(m), bytes(pk)) for m, pk in pairs), bytes(agg.data)
        )


@lru_cache(maxsize=1 << 18)
def _ed25519_verify(message: bytes, sig: bytes, public: bytes) -> bool:
    # Verification is pure, so a process-wide memo is safe; simulated nodes
    # re-verify the same broadcast many times.
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(sig, message)
    except InvalidSignature:
        return False
    except ValueError as exc:
        raise MalformedKey(str(exc)) from exc
    return True


class Ed25519Scheme(SignatureScheme):
    name = "ed25519"
    public_key_size = 32
    signature_size = 64

    def keygen(self, seed: bytes) -> KeyPair:
        secret = hash_bytes(b"ed25519-keygen" + seed)
        sk = Ed25519PrivateKey.from_private_bytes(secret)
        public = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return KeyPair(self.name, secret, public)

    def sign(self, message: bytes, key: KeyPair) -> bytes:
        if key.scheme != self.name or len(key.secret) != 32:
            raise MalformedKey("not an ed25519 key pair")
        return _ed25519_sign(key.secret, bytes(message))

    def _verify(self, message: bytes, sig: bytes, public: bytes) -> bool:
        return _ed25519_verify(message, sig, public)

    def _aggregate(self, sigs: Sequence[bytes]) -> bytes:
        return b"".join(sigs)

    def _verify_aggregate(self, pairs, data) -> bool:
        if len(data) != self.signature_size * len(pairs):
            return False
        step = self.signature_size
        return all(
            _ed25519_verify(m, data[i * step:(i + 1) * step], pk)
            for i, (m, pk) in enumerate(pairs)
        )


@lru_cache(maxsize=4096)
def _ed25519_key(secret: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(secret)


def _ed25519_sign(secret: bytes, message: bytes) -> bytes:
    return _ed25519_key(secret).sign(message)


class BlsScheme(SignatureScheme):
    name = "bls"
    public_key_size = 48
    signature_size = 96

    def __init__(self) -> None:
        from py_ecc.bls import G2MessageAugmentation

        self._impl = G2MessageAugmentation

    def keygen(self, seed: bytes) -> KeyPair:
        ikm = hash_bytes(b"bls-keygen" + seed)
        sk = self._impl.KeyGen(ikm)
        return KeyPair(self.name, sk.to_bytes(32, "big"), bytes(self._impl.SkToPk(sk)))

    def sign(self, message: bytes, key: KeyPair) -> bytes:
        if key.scheme != self.name or len(key.secret) != 32:
            raise MalformedKey("not a BLS key pair")
        return bytes(self._impl.Sign(int.from_bytes(key.secret, "big"), bytes(message)))

    def check_public(self, public: bytes) -> None:
        super().check_public(public)
        if not self._impl.KeyValidate(public):
            raise MalformedKey("public key is not a valid G1 point")

    def _verify(self, message: bytes, sig: bytes, public: bytes) -> bool:
        return _bls_verify(message, sig, public)

    def _aggregate(self, sigs: Sequence[bytes]) -> bytes:
        try:
            return bytes(self._impl.Aggregate(list(sigs)))
        except Exception as exc:  # py_ecc raises bare ValidationError/ValueError
            raise MalformedSignature(str(exc)) from exc

    def _verify_aggregate(self, pairs, data) -> bool:
        return _bls_verify_aggregate(pairs, data)


@lru_cache(maxsize=4096)
def _bls_verify(message: bytes, sig: bytes, public: bytes) -> bool:
    from py_ecc.bls import G2MessageAugmentation

    try:
        return bool(G2MessageAugmentation.Verify(public, message, sig))
    except Exception:
        return False


@lru_cache(maxsize=1024)
def _bls_verify_aggregate(pairs: tuple[tuple[bytes, bytes], ...], data: bytes) -> bool:
    from py_ecc.bls import G2MessageAugmentation

    try:
        return bool(
            G2MessageAugmentation.AggregateVerify(
                [pk for _, pk in pairs], [m for m, _ in pairs], data
            )
        )
    except Exception:
        return False


_SCHEMES: dict[str, SignatureScheme] = {}


def get_scheme(name: str) -> SignatureScheme:
    if name not in _SCHEMES:
        if name == "ed25519":
            _SCHEMES[name] = Ed25519Scheme()
        elif name == "bls":
            _SCHEMES[name] = BlsScheme()
        else:
            raise ValueError(f"unknown signature scheme {name!r}")
    return _SCHEMES[name]


def scheme_for_key(public: bytes) -> SignatureScheme:
    if len(public) == Ed25519Scheme.public_key_size:
        return get_scheme("ed25519")
    if len(public) == BlsScheme.public_key_size:
        return get_scheme("bls")
    raise MalformedKey(f"no scheme uses {len(public)}-byte public keys")


def sign(message: bytes, key: KeyPair) -> bytes:
    return get_scheme(key.scheme).sign(message, key)


def verify(message: bytes, sig: bytes, public: bytes) -> bool:
    return scheme_for_key(public).verify(message, sig, public)


def aggregate(sigs: Sequence[bytes], signers: Sequence[bytes]) -> AggregateSignature:
    if not signers:
        raise EmptySignatureSet("nothing to aggregate")
    return scheme_for_key(signers[0]).aggregate(sigs, signers)


def verify_aggregate(pairs: Sequence[tuple[bytes, bytes]], agg: AggregateSignature) -> bool:
    if not pairs:
        raise EmptySignatureSet("no (message, key) pairs")
    return scheme_for_key(pairs[0][1]).verify_aggregate(pairs, agg)
